"""Counting and localization metrics, plus dataset-level evaluation helpers.

The grid error at level L splits an image into 2^L x 2^L cells and sums the
absolute difference of predicted and true point counts per cell; level 0 is
the plain per-image count error.
"""

from dataclasses import dataclass, field

import numpy as np

from .blobs import extract_blobs
from .localizer import forward, glance_count


def mae(pred_counts, gt_counts) -> float:
    """Mean absolute count error over a dataset."""
    pred = np.asarray(pred_counts, dtype=np.float64)
    gt = np.asarray(gt_counts, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 1:
        raise ValueError(f"mismatched count lists: {pred.shape} vs {gt.shape}")
    if len(pred) == 0:
        raise ValueError("mae of empty lists")
    return float(np.abs(pred - gt).mean())


def _cell_counts(points, image_shape, level):
    cells = 2 ** level
    h, w = image_shape
    counts = np.zeros((cells, cells), dtype=np.int64)
    for row, col in points:
        if not (0 <= row < h and 0 <= col < w):
            raise ValueError(f"point ({row}, {col}) outside {image_shape}")
        counts[min(int(row * cells / h), cells - 1),
               min(int(col * cells / w), cells - 1)] += 1
    return counts


def game(pred_points, gt_points, image_shape, level: int) -> float:
    """Grid count error for one image; empty point sets are valid."""
    if level < 0:
        raise ValueError(f"negative grid level {level}")
    pred = _cell_counts(pred_points, image_shape, level)
    gt = _cell_counts(gt_points, image_shape, level)
    return float(np.abs(pred - gt).sum())


def dataset_game(pred_sets, gt_sets, image_shapes, level: int) -> float:
    """Mean grid error over images (parallel lists of point sets)."""
    if not (len(pred_sets) == len(gt_sets) == len(image_shapes)):
        raise ValueError("mismatched per-image lists")
    if not pred_sets:
        raise ValueError("grid error of an empty dataset")
    values = [game(p, g, shape, level)
              for p, g, shape in zip(pred_sets, gt_sets, image_shapes)]
    return float(np.mean(values))


def audit_pseudo_labels(pseudo, gt, image_shapes, level: int) -> float:
    """Grid error of pseudo-points against hidden true points.

    All three arguments are dicts keyed by image id; every pseudo entry
    must have matching true points and a shape.
    """
    preds, gts, shapes = [], [], []
    for image_id in sorted(pseudo):
        if image_id not in gt:
            raise ValueError(f"no ground truth for image {image_id}")
        if image_id not in image_shapes:
            raise ValueError(f"no image shape for image {image_id}")
        points = pseudo[image_id]
        preds.append(getattr(points, "points", points))
        gts.append(gt[image_id])
        shapes.append(image_shapes[image_id])
    return dataset_game(preds, gts, shapes, level)


@dataclass
class EvalResult:
    method: str
    split: str
    mae: float
    game: dict  # level -> float; empty for count-only methods
    per_image: list = field(default_factory=list)
    seed: int = 0

    def validate(self, tol=1e-9):
        if self.mae < 0:
            raise ValueError(f"negative mae {self.mae}")
        levels = sorted(self.game)
        if levels and levels[0] == 0 and abs(self.game[0] - self.mae) > tol:
            raise ValueError(
                f"game[0]={self.game[0]} disagrees with mae={self.mae}")
        for lo, hi in zip(levels, levels[1:]):
            if self.game[hi] < self.game[lo] - tol:
                raise ValueError(
                    f"game[{hi}]={self.game[hi]} < game[{lo}]={self.game[lo]}")


def predict_points(model, image, blob_threshold=0.5, connectivity=4):
    """Blob centroids and blob count for one image."""
    cpm = forward(model, image)
    blobs = extract_blobs(cpm, prob_threshold=blob_threshold,
                          connectivity=connectivity)
    return [center for _, center in blobs], cpm


def evaluate_localizer(model, split, levels=(0, 1, 2, 3), blob_threshold=0.5,
                       connectivity=4, method="looc", seed=0) -> EvalResult:
    """Blob-based counting and localization metrics on a labeled split."""
    pred_sets, gt_sets, shapes, rows = [], [], [], []
    for scene in split.scenes:
        points, _ = predict_points(model, scene.image, blob_threshold,
                                   connectivity)
        shape = scene.image.shape[:2]
        pred_sets.append(points)
        gt_sets.append(scene.gt_points)
        shapes.append(shape)
        rows.append({
            "scene_id": scene.scene_id,
            "pred_count": len(points),
            "gt_count": scene.count,
            **{f"game{m}": game(points, scene.gt_points, shape, m)
               for m in levels},
        })
    result = EvalResult(
        method=method,
        split=split.split_name,
        mae=mae([r["pred_count"] for r in rows],
                [r["gt_count"] for r in rows]),
        game={m: dataset_game(pred_sets, gt_sets, shapes, m) for m in levels},
        per_image=rows,
        seed=seed,
    )
    result.validate()
    return result


def evaluate_glance(model, split, method="glance", seed=0) -> EvalResult:
    """Counting-only metrics for the regression baseline (no localization)."""
    rows = [{
        "scene_id": scene.scene_id,
        "pred_count": glance_count(model, scene.image),
        "gt_count": scene.count,
    } for scene in split.scenes]
    result = EvalResult(
        method=method,
        split=split.split_name,
        mae=mae([r["pred_count"] for r in rows],
                [r["gt_count"] for r in rows]),
        game={},
        per_image=rows,
        seed=seed,
    )
    result.validate()
    return result
