"""Pseudo point-label generation: score proposals (static objectness or the
current probability map), keep the top floor(r * count) after suppression,
emit box-center points, and partition the image into background, foreground,
and unlabeled regions."""

from dataclasses import dataclass
import json
import logging

import numpy as np

from .blobs import CPM
from .loss import BACKGROUND, FOREGROUND, UNLABELED, PseudoPointSet, RegionPartition
from .proposals import ProposalSet, nms

log = logging.getLogger(__name__)

OBJECTNESS = "OBJECTNESS"
CPM_MEAN = "CPM_MEAN"
CPM_OBJECTNESS_GEOMEAN = "CPM_OBJECTNESS_GEOMEAN"


@dataclass
class ScoredProposalSet:
    base: ProposalSet
    scores: np.ndarray
    score_source: str = OBJECTNESS

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if len(self.scores) != len(self.base):
            raise ValueError(f"{len(self.scores)} scores for "
                             f"{len(self.base)} proposals")
        if len(self.scores) and not ((self.scores >= 0.0)
                                     & (self.scores <= 1.0)).all():
            raise ValueError("scores outside [0, 1]")

    def __len__(self):
        return len(self.base)


def _box_means(probs, boxes):
    h, w = probs.shape
    integral = np.zeros((h + 1, w + 1))
    integral[1:, 1:] = np.asarray(probs, dtype=np.float64).cumsum(0).cumsum(1)
    r0, c0, r1, c1 = boxes[:, 0], boxes[:, 1], boxes[:, 2], boxes[:, 3]
    sums = (integral[r1, c1] - integral[r0, c1]
            - integral[r1, c0] + integral[r0, c0])
    areas = ((r1 - r0) * (c1 - c0)).astype(np.float64)
    return sums / areas


def score_proposals(proposals: ProposalSet, cpm: CPM = None,
                    combine: str = "cpm") -> ScoredProposalSet:
    """Scores for ranking proposals.

    Without a probability map every proposal keeps its static objectness.
    With one, the score is the map's mean over the box, or optionally the
    geometric mean of that with objectness (``combine="geometric"``).
    """
    if cpm is None:
        return ScoredProposalSet(proposals, proposals.objectness(), OBJECTNESS)
    if combine not in ("cpm", "geometric"):
        raise ValueError(f"unknown combine mode {combine!r}")
    probs = cpm.probs
    if proposals.image_shape != probs.shape:
        raise ValueError(f"proposals for image {proposals.image_shape} "
                         f"scored against map {probs.shape}")
    if not len(proposals):
        return ScoredProposalSet(proposals, np.zeros(0), CPM_MEAN)
    means = np.clip(_box_means(probs, proposals.boxes()), 0.0, 1.0)
    if combine == "geometric":
        scores = np.sqrt(means * proposals.objectness())
        return ScoredProposalSet(proposals, scores, CPM_OBJECTNESS_GEOMEAN)
    return ScoredProposalSet(proposals, means, CPM_MEAN)


def box_center(box):
    r0, c0, r1, c1 = box
    return ((r0 + r1) // 2, (c0 + c1) // 2)


def select_pseudo_labels(scored: ScoredProposalSet, count: int, r: float,
                         iou_threshold: float, image_id: str = ""):
    """Top floor(r * count) surviving proposals and their center points.

    Suppression runs highest score first; equal scores fall to higher
    objectness, then lower proposal_id. Images with a positive count always
    get at least one label. Returns (PseudoPointSet, selected ProposalSet).
    """
    if not 0.0 < r <= 1.0:
        raise ValueError(f"selection ratio {r} outside (0, 1]")
    if count < 0:
        raise ValueError(f"negative count {count}")

    empty = ProposalSet([], scored.base.image_shape, scored.base.generator_tag)
    if count == 0:
        return PseudoPointSet([], image_id), empty
    if not len(scored):
        log.warning("image %s: no proposals for count %d", image_id, count)
        return PseudoPointSet([], image_id), empty

    # r=0.1, count=3 must give floor(0.3)=0 -> clamped to 1; the epsilon
    # guards floor(0.1*10) against landing on 0.9999999....
    k = max(1, int(np.floor(r * count + 1e-9)))
    survivors = nms(scored.base, scored.scores, iou_threshold,
                    tie_break=scored.base.objectness())
    selected = ProposalSet(survivors.proposals[:k], survivors.image_shape,
                           survivors.generator_tag)
    points = [box_center(p.box) for p in selected.proposals]
    return PseudoPointSet(points, image_id), selected


def build_partition(image_shape, all_proposals: ProposalSet,
                    selected: ProposalSet) -> RegionPartition:
    """Foreground where any selected box covers, unlabeled where only
    unselected boxes cover, background elsewhere."""
    by_id = {p.proposal_id: p.box for p in all_proposals.proposals}
    for p in selected.proposals:
        if by_id.get(p.proposal_id) != p.box:
            raise ValueError(
                f"selected proposal {p.proposal_id} not among candidates")

    mask = np.full(image_shape, BACKGROUND, dtype=np.int8)
    chosen = {p.proposal_id for p in selected.proposals}
    for p in all_proposals.proposals:
        if p.proposal_id not in chosen:
            r0, c0, r1, c1 = p.box
            mask[r0:r1, c0:c1] = UNLABELED
    for p in selected.proposals:
        r0, c0, r1, c1 = p.box
        mask[r0:r1, c0:c1] = FOREGROUND
    return RegionPartition(mask)


def pseudo_label_record(image_id, round_index, r, points: PseudoPointSet,
                        selected: ProposalSet, scored: ScoredProposalSet):
    """One per-image audit record: what was selected, where, and why."""
    score_of = {p.proposal_id: float(s)
                for p, s in zip(scored.base.proposals, scored.scores)}
    return {
        "image_id": image_id,
        "round": round_index,
        "r": r,
        "score_source": scored.score_source,
        "points": [[int(a), int(b)] for a, b in points.points],
        "selected": [
            {"proposal_id": int(p.proposal_id),
             "box": [int(v) for v in p.box],
             "score": score_of[p.proposal_id]}
            for p in selected.proposals
        ],
    }


def write_pseudolabels(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record) + "\n")


def read_pseudolabels(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
