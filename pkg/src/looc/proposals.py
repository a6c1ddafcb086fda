"""Class-agnostic region proposals: multi-threshold connected components plus
sliding windows, contrast-based objectness, IoU, and greedy NMS.

Boxes are (row0, col0, row1, col1) with inclusive starts and exclusive ends.
"""

from dataclasses import dataclass, field
import json

import numpy as np
from scipy import ndimage

from .config import ProposalConfig

_EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


@dataclass
class Proposal:
    box: tuple  # (row0, col0, row1, col1)
    objectness: float
    proposal_id: int


@dataclass
class ProposalSet:
    proposals: list = field(default_factory=list)
    image_shape: tuple = (0, 0)
    generator_tag: str = ""

    def __len__(self):
        return len(self.proposals)

    def boxes(self):
        if not self.proposals:
            return np.zeros((0, 4), dtype=np.int64)
        return np.array([p.box for p in self.proposals], dtype=np.int64)

    def objectness(self):
        return np.array([p.objectness for p in self.proposals], dtype=np.float64)

    def ids(self):
        return np.array([p.proposal_id for p in self.proposals], dtype=np.int64)

    def validate(self):
        h, w = self.image_shape
        seen = set()
        for p in self.proposals:
            r0, c0, r1, c1 = p.box
            if not (0 <= r0 < r1 <= h and 0 <= c0 < c1 <= w):
                raise ValueError(f"proposal {p.proposal_id} box {p.box} "
                                 f"outside image {self.image_shape}")
            if not 0.0 <= p.objectness <= 1.0:
                raise ValueError(f"proposal {p.proposal_id} objectness "
                                 f"{p.objectness} outside [0, 1]")
            if p.proposal_id in seen:
                raise ValueError(f"duplicate proposal_id {p.proposal_id}")
            seen.add(p.proposal_id)


def iou(a, b) -> float:
    """Intersection over union of two boxes; raises on degenerate boxes."""
    for box in (a, b):
        r0, c0, r1, c1 = box
        if r0 >= r1 or c0 >= c1:
            raise ValueError(f"degenerate box {box}")
    top = max(a[0], b[0])
    left = max(a[1], b[1])
    bottom = min(a[2], b[2])
    right = min(a[3], b[3])
    inter = max(0, bottom - top) * max(0, right - left)
    if inter == 0:
        return 0.0
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / float(area_a + area_b - inter)


def nms(proposals: ProposalSet, scores, iou_threshold: float,
        tie_break=None) -> ProposalSet:
    """Greedy highest-score-first suppression.

    A candidate is dropped when its IoU with any already-kept box exceeds
    ``iou_threshold``. Ties in score fall to ``tie_break`` (higher first)
    when given, then to the lower proposal_id. The result preserves
    descending score order.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) != len(proposals):
        raise ValueError(
            f"{len(scores)} scores for {len(proposals)} proposals")
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold {iou_threshold} outside (0, 1]")
    if not len(proposals):
        return ProposalSet([], proposals.image_shape, proposals.generator_tag)

    ids = proposals.ids()
    if tie_break is None:
        order = np.lexsort((ids, -scores))
    else:
        tie_break = np.asarray(tie_break, dtype=np.float64)
        if len(tie_break) != len(proposals):
            raise ValueError(
                f"{len(tie_break)} tie_break values for "
                f"{len(proposals)} proposals")
        order = np.lexsort((ids, -tie_break, -scores))
    boxes = proposals.boxes()[order]
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])

    kept = []
    for i in range(len(order)):
        box = boxes[i]
        ok = True
        for j in kept:
            kb = boxes[j]
            top = max(box[0], kb[0])
            left = max(box[1], kb[1])
            bottom = min(box[2], kb[2])
            right = min(box[3], kb[3])
            inter = max(0, bottom - top) * max(0, right - left)
            if inter > 0 and inter / float(areas[i] + areas[j] - inter) > iou_threshold:
                ok = False
                break
        if ok:
            kept.append(i)

    survivors = [proposals.proposals[order[i]] for i in kept]
    return ProposalSet(survivors, proposals.image_shape, proposals.generator_tag)


def _to_gray(image):
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr.mean(axis=2)
    if arr.ndim != 2:
        raise ValueError(f"expected 2-D or 3-D image, got shape {arr.shape}")
    return arr


def _box_sums(integral, boxes):
    r0, c0, r1, c1 = boxes[:, 0], boxes[:, 1], boxes[:, 2], boxes[:, 3]
    return (integral[r1, c1] - integral[r0, c1]
            - integral[r1, c0] + integral[r0, c0])


def _region_contrast(gray, boxes, ring_width):
    """Mean interior intensity minus mean intensity of a surrounding ring."""
    h, w = gray.shape
    integral = np.zeros((h + 1, w + 1))
    integral[1:, 1:] = gray.cumsum(0).cumsum(1)

    inner = _box_sums(integral, boxes)
    inner_area = ((boxes[:, 2] - boxes[:, 0])
                  * (boxes[:, 3] - boxes[:, 1])).astype(np.float64)

    outer_boxes = np.stack([
        np.maximum(boxes[:, 0] - ring_width, 0),
        np.maximum(boxes[:, 1] - ring_width, 0),
        np.minimum(boxes[:, 2] + ring_width, h),
        np.minimum(boxes[:, 3] + ring_width, w),
    ], axis=1)
    outer = _box_sums(integral, outer_boxes)
    outer_area = ((outer_boxes[:, 2] - outer_boxes[:, 0])
                  * (outer_boxes[:, 3] - outer_boxes[:, 1])).astype(np.float64)

    ring_area = outer_area - inner_area
    ring_sum = outer - inner
    contrast = np.zeros(len(boxes))
    has_ring = ring_area > 0
    contrast[has_ring] = (inner[has_ring] / inner_area[has_ring]
                          - ring_sum[has_ring] / ring_area[has_ring])
    return contrast


def generate_proposals(image, max_count: int = None,
                       config: ProposalConfig = None) -> ProposalSet:
    """Propose candidate object boxes for one image, best first.

    Connected components of the grayscale image at a sweep of intensity
    thresholds give shape-following boxes; square sliding windows at a few
    scales add coverage. Each box is scored by normalized region contrast
    and the top ``max_count`` are returned in descending objectness order.
    A constant image yields an empty set.
    """
    if config is None:
        config = ProposalConfig()
    config.validate()
    if max_count is None:
        max_count = config.max_count
    if max_count < 1:
        raise ValueError(f"max_count must be >= 1, got {max_count}")

    gray = _to_gray(image)
    h, w = gray.shape
    lo, hi = float(gray.min()), float(gray.max())
    empty = ProposalSet([], (h, w), "multithreshold")
    if hi - lo < 1e-12:
        return empty

    max_area = config.max_area_frac * h * w
    boxes = {}

    n = config.n_thresholds
    thresholds = lo + (hi - lo) * (np.arange(1, n + 1) / (n + 1))
    for t in thresholds:
        labels, n_comp = ndimage.label(gray >= t, structure=_EIGHT_CONNECTED)
        for sl in ndimage.find_objects(labels):
            box = (sl[0].start, sl[1].start, sl[0].stop, sl[1].stop)
            area = (box[2] - box[0]) * (box[3] - box[1])
            if config.min_area <= area <= max_area:
                boxes.setdefault(box, None)

    for size in config.window_sizes:
        if size > min(h, w) or size * size > max_area:
            continue
        stride = max(1, int(round(size * (1.0 - config.window_overlap))))
        for r in range(0, h - size + 1, stride):
            for c in range(0, w - size + 1, stride):
                boxes.setdefault((r, c, r + size, c + size), None)

    if not boxes:
        return empty

    box_arr = np.array(list(boxes), dtype=np.int64)
    contrast = _region_contrast(gray, box_arr, config.ring_width)

    keep = contrast > config.contrast_floor * (hi - lo)
    if not keep.any():
        return empty
    box_arr = box_arr[keep]
    contrast = contrast[keep]

    cmin, cmax = contrast.min(), contrast.max()
    if cmax - cmin < 1e-12:
        objectness = np.ones(len(contrast))
    else:
        objectness = (contrast - cmin) / (cmax - cmin)

    order = np.lexsort((np.arange(len(box_arr)), -objectness))[:max_count]
    result = ProposalSet(
        [Proposal(box=tuple(int(v) for v in box_arr[i]),
                  objectness=float(objectness[i]),
                  proposal_id=int(i))
         for i in order],
        image_shape=(h, w),
        generator_tag="multithreshold",
    )
    result.validate()
    return result


def write_proposals(pset: ProposalSet, path):
    """Debug dump: one JSON record per proposal."""
    with open(path, "w") as fh:
        for p in pset.proposals:
            fh.write(json.dumps({
                "proposal_id": p.proposal_id,
                "box": list(p.box),
                "objectness": p.objectness,
            }) + "\n")
