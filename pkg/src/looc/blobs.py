"""Blob extraction from a per-pixel probability map."""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

_STRUCTURES = {
    4: np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=int),
    8: np.ones((3, 3), dtype=int),
}


@dataclass
class CPM:
    """Per-pixel foreground probability map, same spatial shape as the image."""

    probs: np.ndarray  # H x W in [0, 1]

    def __post_init__(self):
        self.probs = np.asarray(self.probs)
        if self.probs.ndim != 2:
            raise ValueError(f"CPM must be 2-D, got shape {self.probs.shape}")
        if self.probs.min() < 0.0 or self.probs.max() > 1.0:
            raise ValueError("CPM values outside [0, 1]")

    @property
    def image_shape(self):
        return self.probs.shape


def _probs(cpm):
    return cpm.probs if isinstance(cpm, CPM) else np.asarray(cpm)


def label_blobs(cpm, prob_threshold: float = 0.5, connectivity: int = 4):
    """Connected components of (probs >= threshold); returns (labels, n)."""
    if connectivity not in _STRUCTURES:
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    probs = _probs(cpm)
    return ndimage.label(probs >= prob_threshold,
                         structure=_STRUCTURES[connectivity])


def extract_blobs(cpm, prob_threshold: float = 0.5, connectivity: int = 4):
    """Supra-threshold connected components and their centroids.

    Returns [(mask, (row, col)), ...]; the center is the mean coordinate of
    the component's pixels. The blob count is the predicted object count.
    """
    if not 0.0 < prob_threshold < 1.0:
        raise ValueError(f"prob_threshold {prob_threshold} outside (0, 1)")
    labels, n = label_blobs(cpm, prob_threshold, connectivity)
    blobs = []
    for idx in range(1, n + 1):
        mask = labels == idx
        rows, cols = np.nonzero(mask)
        center = (float(rows.mean()), float(cols.mean()))
        blobs.append((mask, center))
    return blobs


def blob_points(cpm, prob_threshold: float = 0.5, connectivity: int = 4):
    """Predicted object locations: one centroid per blob."""
    return [center for _, center in
            extract_blobs(cpm, prob_threshold, connectivity)]
