"""Point-supervision localization loss with unlabeled-region masking.

Four terms over the predicted per-pixel foreground logits:

  image level:  the most confident pixel must be foreground when the image
                contains objects (plus the symmetric term demanding at least
                one confident background pixel); for empty images the maximum
                probability is pushed down.
  point level:  cross-entropy toward foreground at each annotated point.
  split level:  inside any supra-threshold blob holding several points, the
                watershed boundary between those points is pushed toward
                background, weighted by the blob's point count. This is what
                makes the output one blob per object.
  false positive: blobs containing no point are pushed toward background,
                unless they touch an unlabeled region (the object may simply
                be unannotated there).

Every per-pixel penalty is accumulated only over pixels whose region label is
not UNLABELED, so unlabeled regions contribute exactly zero gradient. Blobs
themselves are found on the full probability map.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from skimage.segmentation import watershed

from .blobs import label_blobs

BACKGROUND = 0
FOREGROUND = 1
UNLABELED = 2


@dataclass
class RegionPartition:
    """Per-pixel three-way mask over {BACKGROUND, FOREGROUND, UNLABELED}."""

    mask: np.ndarray  # H x W int8

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=np.int8)
        if self.mask.ndim != 2:
            raise ValueError(f"partition must be 2-D, got {self.mask.shape}")
        bad = ~np.isin(self.mask, (BACKGROUND, FOREGROUND, UNLABELED))
        if bad.any():
            raise ValueError("partition contains values outside {0, 1, 2}")


@dataclass
class PseudoPointSet:
    """Integer pixel point labels for one image; at most one per counted object."""

    points: list  # [(row, col), ...] ints
    image_id: str = ""

    def __len__(self):
        return len(self.points)


def _split_boundary(probs, blob_mask, blob_points, connectivity):
    """Watershed ridge separating the points inside one blob."""
    markers = np.zeros(probs.shape, dtype=np.int32)
    for idx, (r, c) in enumerate(blob_points):
        markers[r, c] = idx + 1
    basins = watershed(-probs, markers=markers, mask=blob_mask,
                       connectivity=1 if connectivity == 4 else 2,
                       watershed_line=True)
    return (basins == 0) & blob_mask


def lcfcn_loss(cpm_logits, points: PseudoPointSet, partition: RegionPartition,
               blob_threshold: float = 0.5, connectivity: int = 4):
    """Masked four-term loss; differentiable w.r.t. ``cpm_logits``.

    Accepts an H x W logits tensor. Points must index FOREGROUND pixels.
    """
    z = cpm_logits
    if z.dim() != 2:
        raise ValueError(f"logits must be 2-D, got shape {tuple(z.shape)}")
    if tuple(z.shape) != partition.mask.shape:
        raise ValueError(
            f"logits {tuple(z.shape)} vs partition {partition.mask.shape}")
    h, w = partition.mask.shape
    for r, c in points.points:
        if not (0 <= r < h and 0 <= c < w):
            raise ValueError(f"point ({r}, {c}) out of bounds")
        if partition.mask[r, c] != FOREGROUND:
            raise ValueError(
                f"point ({r}, {c}) lies in region {int(partition.mask[r, c])}, "
                "expected FOREGROUND")

    log_p = F.logsigmoid(z)
    log_q = F.logsigmoid(-z)  # log(1 - p)
    valid = torch.from_numpy(partition.mask != UNLABELED)
    neg_inf = torch.tensor(float("-inf"), dtype=z.dtype)

    loss = z.new_zeros(())
    n_points = len(points)

    if valid.any():
        if n_points > 0:
            loss = loss - torch.where(valid, log_p, neg_inf).max()
            loss = loss - torch.where(valid, log_q, neg_inf).max()
        else:
            # push the most confident pixel toward background
            loss = loss - torch.where(valid, log_q, -neg_inf).min()

    for r, c in points.points:
        loss = loss - log_p[r, c]

    probs = torch.sigmoid(z).detach().cpu().numpy().astype(np.float64)
    labels, n_blobs = label_blobs(probs, blob_threshold, connectivity)
    if n_blobs:
        valid_np = partition.mask != UNLABELED
        blob_of_point = {}
        for r, c in points.points:
            blob_of_point.setdefault(labels[r, c], []).append((r, c))

        # False positives, all at once: blobs holding no point and touching
        # no unlabeled pixel. Their pixels are all valid by construction, so
        # one membership mask covers the union.
        exempt = np.zeros(n_blobs + 1, dtype=bool)
        exempt[0] = True
        exempt[np.unique(labels[~valid_np])] = True
        for blob_id in blob_of_point:
            exempt[blob_id] = True
        fp_sel = ~exempt[labels]
        if fp_sel.any():
            loss = loss - log_q[torch.from_numpy(fp_sel)].sum()

        for blob_id, pts_in in blob_of_point.items():
            if blob_id and len(pts_in) >= 2:
                blob_mask = labels == blob_id
                boundary = _split_boundary(probs, blob_mask, pts_in,
                                           connectivity)
                sel = torch.from_numpy(boundary & valid_np)
                if sel.any():
                    loss = loss - len(pts_in) * log_q[sel].sum()
    return loss
