"""Synthetic dense-scene dataset: generation, on-disk format, and the counts-only view.

Scenes are grayscale images of overlapping elliptical blobs on a noisy
background textured with uncounted haze and flat clutter discs. Ground-truth
center points are kept for evaluation only; the training path receives a view
that exposes images and counts, nothing else.
"""

from dataclasses import dataclass, field
import json
import os

import numpy as np
from PIL import Image

from .config import SceneConfig, ConfigError

FORMAT_VERSION = 1

_SPLIT_SALT = {"train": 0, "val": 1, "test": 2}


class DatasetFormatError(ValueError):
    """Raised when an on-disk dataset is missing or inconsistent."""


@dataclass
class Scene:
    image: np.ndarray  # H x W x C float32 in [0, 1]
    gt_points: list  # [(row, col), ...] float pixel coordinates
    count: int
    scene_id: str

    def __post_init__(self):
        if self.count != len(self.gt_points):
            raise ValueError(
                f"scene {self.scene_id}: count {self.count} != "
                f"{len(self.gt_points)} points")
        h, w = self.image.shape[:2]
        for row, col in self.gt_points:
            if not (0 <= row < h and 0 <= col < w):
                raise ValueError(
                    f"scene {self.scene_id}: point ({row}, {col}) out of bounds")
        if self.image.min() < 0.0 or self.image.max() > 1.0:
            raise ValueError(f"scene {self.scene_id}: pixel values outside [0, 1]")


@dataclass
class CountsOnlyScene:
    """Training-side view of a scene: image and count label only."""

    image: np.ndarray
    count: int
    scene_id: str


@dataclass
class DatasetSplit:
    scenes: list
    split_name: str
    seed: int

    def __post_init__(self):
        ids = [s.scene_id for s in self.scenes]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate scene_ids in split {self.split_name}")

    def counts_only(self):
        """Drop ground-truth points; this is the only object training code sees."""
        return CountsOnlySplit(
            scenes=[CountsOnlyScene(s.image, s.count, s.scene_id)
                    for s in self.scenes],
            split_name=self.split_name,
            seed=self.seed,
        )


@dataclass
class CountsOnlySplit:
    scenes: list = field(default_factory=list)
    split_name: str = ""
    seed: int = 0


def _render_ellipse(height, width, center, radius, aspect, angle, peak):
    """Parabolic intensity dome over an oriented ellipse, zero outside."""
    rows = np.arange(height, dtype=np.float64)[:, None] - center[0]
    cols = np.arange(width, dtype=np.float64)[None, :] - center[1]
    ca, sa = np.cos(angle), np.sin(angle)
    u = rows * ca + cols * sa
    v = -rows * sa + cols * ca
    d2 = (u / radius) ** 2 + (v / (radius * aspect)) ** 2
    return peak * np.clip(1.0 - d2, 0.0, None)


def _render_plateau(height, width, center, radius, aspect, angle, peak,
                    edge=0.8):
    """Flat-topped elliptical disc with a short linear skirt at the rim."""
    rows = np.arange(height, dtype=np.float64)[:, None] - center[0]
    cols = np.arange(width, dtype=np.float64)[None, :] - center[1]
    ca, sa = np.cos(angle), np.sin(angle)
    u = rows * ca + cols * sa
    v = -rows * sa + cols * ca
    d = np.sqrt((u / radius) ** 2 + (v / (radius * aspect)) ** 2)
    return peak * np.clip((1.0 - d) * radius / edge, 0.0, 1.0)


def generate_scene(config: SceneConfig, rng_seed: int, scene_id: str = None) -> Scene:
    """Render one scene deterministically from (config, rng_seed)."""
    config.validate()
    rng = np.random.default_rng(rng_seed)
    h, w = config.height, config.width
    if scene_id is None:
        scene_id = f"scene_{rng_seed}"

    noise = rng.normal(0.0, config.background_noise, size=(h, w))
    # Background structure, never counted and never annotated: smooth haze
    # domes that decouple summed brightness from the object count, plus
    # flat-topped sharp-edged discs. A disc's step edge gives its box the
    # same interior-vs-ring contrast as a real object's dome, so a local
    # contrast score cannot cleanly rank objects above discs; their flat
    # profile (objects are peaked) can.
    haze = np.zeros((h, w), dtype=np.float64)
    discs = np.zeros((h, w), dtype=np.float64)
    clo, chi = config.clutter_count_range
    if chi > 0:
        for _ in range(int(rng.integers(2, 5))):
            haze += _render_ellipse(
                h, w, (rng.uniform(0.0, h - 1.0), rng.uniform(0.0, w - 1.0)),
                rng.uniform(8.0, 14.0), rng.uniform(0.7, 1.0),
                rng.uniform(0.0, np.pi), rng.uniform(0.10, 0.35))
        for _ in range(int(rng.integers(clo, chi + 1))):
            # max not sum: overlapping discs stay flat instead of stacking
            # into a peak that would outscore every object
            discs = np.maximum(discs, _render_plateau(
                h, w, (rng.uniform(4.0, h - 5.0), rng.uniform(4.0, w - 5.0)),
                rng.uniform(*config.clutter_radius_range),
                rng.uniform(0.75, 1.0), rng.uniform(0.0, np.pi),
                rng.uniform(*config.clutter_intensity_range)))
    smooth = config.background_level + haze
    image = np.clip(smooth + discs + noise, 0.0, 1.0)

    lo, hi = config.count_range
    count = int(rng.integers(lo, hi + 1))

    occupied = np.zeros((h, w), dtype=bool)
    points = []
    for _ in range(count):
        best = None
        for _attempt in range(40):
            radius = rng.uniform(*config.radius_range)
            aspect = rng.uniform(*config.aspect_range)
            angle = rng.uniform(0.0, np.pi)
            peak = rng.uniform(*config.intensity_range)
            center = (rng.uniform(1.0, h - 2.0), rng.uniform(1.0, w - 2.0))
            # objects stay off the discs, and out of haze bright enough to
            # clip their domes flat
            rr, cc = int(round(center[0])), int(round(center[1]))
            if discs[rr, cc] > 0.02 or smooth[rr, cc] > 0.50:
                continue
            dome = _render_ellipse(h, w, center, radius, aspect, angle, peak)
            footprint = dome > config.background_level
            area = int(footprint.sum())
            if area == 0:
                continue
            covered = float((footprint & occupied).sum()) / area
            if best is None or covered < best[0]:
                best = (covered, center, dome, footprint)
            if covered <= config.overlap_allowance:
                break
        if best is None:
            continue
        _, center, dome, footprint = best
        occupied |= footprint
        # Objects rise above the local background so a dim object on bright
        # clutter stays visible.
        image = np.maximum(image, np.clip(smooth + dome, 0.0, 1.0))
        points.append((float(center[0]), float(center[1])))

    # Quantize to the 8-bit grid so the PNG round trip is exact.
    image = np.round(image * 255.0) / 255.0
    image = image.astype(np.float32)[:, :, None]
    return Scene(image=image, gt_points=points, count=len(points),
                 scene_id=scene_id)


def _scene_seed(seed, split_name, index):
    salt = _SPLIT_SALT.get(split_name, 9)
    return int(np.random.SeedSequence([seed, salt, index]).generate_state(1)[0])


def generate_split(config: SceneConfig, seed: int, n_scenes: int,
                   split_name: str) -> DatasetSplit:
    scenes = [
        generate_scene(config, _scene_seed(seed, split_name, i),
                       scene_id=f"{split_name}_{i:04d}")
        for i in range(n_scenes)
    ]
    return DatasetSplit(scenes=scenes, split_name=split_name, seed=seed)


def write_dataset(split: DatasetSplit, out_dir) -> str:
    """Write images/<id>.png plus manifest.jsonl; returns the manifest path."""
    images_dir = os.path.join(out_dir, "images")
    os.makedirs(images_dir, exist_ok=True)
    manifest_path = os.path.join(out_dir, "manifest.jsonl")

    with open(manifest_path, "w") as fh:
        for scene in split.scenes:
            rel = f"images/{scene.scene_id}.png"
            arr = np.round(scene.image[:, :, 0] * 255.0).astype(np.uint8)
            Image.fromarray(arr, mode="L").save(os.path.join(out_dir, rel))
            record = {
                "scene_id": scene.scene_id,
                "count": scene.count,
                "points": [[float(r), float(c)] for r, c in scene.gt_points],
                "image": rel,
            }
            fh.write(json.dumps(record) + "\n")

    meta = {
        "format_version": FORMAT_VERSION,
        "split_name": split.split_name,
        "seed": split.seed,
        "n_scenes": len(split.scenes),
    }
    with open(os.path.join(out_dir, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2)
    return manifest_path


def _read_meta(in_dir):
    manifest_path = os.path.join(in_dir, "manifest.jsonl")
    meta_path = os.path.join(in_dir, "meta.json")
    if not os.path.exists(manifest_path):
        raise DatasetFormatError(f"missing manifest: {manifest_path}")
    if not os.path.exists(meta_path):
        raise DatasetFormatError(f"missing meta: {meta_path}")
    with open(meta_path) as fh:
        meta = json.load(fh)
    if meta.get("format_version") != FORMAT_VERSION:
        raise DatasetFormatError(
            f"unsupported dataset format version {meta.get('format_version')}")
    return manifest_path, meta


def read_counts_only(in_dir) -> CountsOnlySplit:
    """Load a split for training: images and count labels, nothing else.

    The point annotations present in the manifest are never parsed here.
    """
    manifest_path, meta = _read_meta(in_dir)
    scenes = []
    with open(manifest_path) as fh:
        for line_no, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(
                    f"manifest line {line_no + 1}: invalid JSON") from exc
            scene_id = record.get("scene_id", f"<line {line_no + 1}>")
            image_path = os.path.join(in_dir, record["image"])
            if not os.path.exists(image_path):
                raise DatasetFormatError(f"scene {scene_id}: missing image file")
            arr = np.asarray(Image.open(image_path), dtype=np.float32) / 255.0
            scenes.append(CountsOnlyScene(image=arr[:, :, None],
                                          count=int(record["count"]),
                                          scene_id=scene_id))
    return CountsOnlySplit(scenes=scenes, split_name=meta["split_name"],
                           seed=int(meta["seed"]))


def read_dataset(in_dir) -> DatasetSplit:
    manifest_path, meta = _read_meta(in_dir)

    scenes = []
    with open(manifest_path) as fh:
        for line_no, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(
                    f"manifest line {line_no + 1}: invalid JSON") from exc
            scene_id = record.get("scene_id", f"<line {line_no + 1}>")
            image_path = os.path.join(in_dir, record["image"])
            if not os.path.exists(image_path):
                raise DatasetFormatError(f"scene {scene_id}: missing image file")
            arr = np.asarray(Image.open(image_path), dtype=np.float32) / 255.0
            image = arr[:, :, None]
            try:
                scene = Scene(
                    image=image,
                    gt_points=[(float(r), float(c)) for r, c in record["points"]],
                    count=int(record["count"]),
                    scene_id=scene_id,
                )
            except (ValueError, KeyError) as exc:
                raise DatasetFormatError(f"scene {scene_id}: {exc}") from exc
            scenes.append(scene)
    try:
        return DatasetSplit(scenes=scenes, split_name=meta["split_name"],
                            seed=int(meta["seed"]))
    except ValueError as exc:
        raise DatasetFormatError(str(exc)) from exc
