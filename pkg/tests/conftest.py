import numpy as np
import pytest
import torch

from looc.config import (CurriculumConfig, ExperimentConfig, LocalizerConfig,
                         SceneConfig)


@pytest.fixture(scope="session", autouse=True)
def single_thread_torch():
    torch.set_num_threads(1)


@pytest.fixture
def scene_config():
    return SceneConfig()


@pytest.fixture(scope="session")
def tiny_config():
    """Small everything: fast end-to-end runs for orchestration tests."""
    return ExperimentConfig(
        dataset=SceneConfig(height=32, width=32, count_range=(1, 4),
                            radius_range=(2.5, 4.0), n_train=10, n_test=4),
        localizer=LocalizerConfig(depth=2, base_channels=8, batch_size=5,
                                  glance_epochs=3),
        curriculum=CurriculumConfig(epochs_per_round=1, final_max_epochs=2,
                                    final_patience=1),
    )


def random_partition(rng, shape, n_points=None):
    """Random three-way mask plus consistent in-foreground points."""
    from looc.loss import (BACKGROUND, FOREGROUND, UNLABELED, PseudoPointSet,
                           RegionPartition)
    h, w = shape
    mask = np.full((h, w), BACKGROUND, dtype=np.int8)
    for _ in range(rng.integers(1, 4)):
        r0 = int(rng.integers(0, h - 1))
        c0 = int(rng.integers(0, w - 1))
        r1 = int(rng.integers(r0 + 1, h + 1))
        c1 = int(rng.integers(c0 + 1, w + 1))
        mask[r0:r1, c0:c1] = UNLABELED
    if n_points is None:
        n_points = int(rng.integers(0, 4))
    points = []
    for _ in range(n_points):
        r = int(rng.integers(0, h))
        c = int(rng.integers(0, w))
        mask[r, c] = FOREGROUND
        points.append((r, c))
    return PseudoPointSet(points, "t"), RegionPartition(mask)
