"""Alternating pseudo-label / training schedule with an increasing selection
ratio, the fixed-score baseline schedule, the final fresh-model pass, and
resumable on-disk run state.

Training entry points accept only the counts-only dataset view; ground-truth
points are structurally out of reach here. The supervised upper-bound
trainer is the one exception and takes the full split.
"""

from dataclasses import dataclass, field, asdict
import hashlib
import json
import logging
import os

import numpy as np
import torch

from .config import ExperimentConfig
from .data import CountsOnlySplit, DatasetSplit
from .localizer import (GlanceModel, LocalizerModel, TrainingDiverged, forward,
                        load_checkpoint, make_optimizer, save_checkpoint,
                        train_step, batch_tensor)
from .loss import BACKGROUND, FOREGROUND, PseudoPointSet, RegionPartition
from .proposals import generate_proposals
from .pseudolabel import (build_partition, pseudo_label_record,
                          score_proposals, select_pseudo_labels,
                          write_pseudolabels)

log = logging.getLogger(__name__)

STATE_VERSION = 1
SCHEDULE_EPS = 1e-9


def n_rounds(r0: float, delta: float) -> int:
    """Number of alternation rounds before the final pass."""
    count = 0
    r = r0
    while r <= 1.0 + SCHEDULE_EPS:
        count += 1
        r += delta
    return count


def derive_seed(*parts) -> int:
    """Stable sub-seed from a label path; keeps every RNG use addressable."""
    digest = hashlib.sha256("/".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "big") % (2 ** 63)


@dataclass
class RoundRecord:
    round: int
    r: float
    mean_loss: float
    n_points: int
    n_warnings: int


@dataclass
class CurriculumState:
    r: float  # next ratio to run (meaningless once done)
    delta: float
    round: int  # completed label-train alternations
    seed: int
    config_hash: str
    method: str
    history: list = field(default_factory=list)
    done: bool = False
    checkpoint: str = None

    def to_json(self):
        payload = asdict(self)
        payload["state_version"] = STATE_VERSION
        payload["history"] = [asdict(h) for h in self.history]
        return payload

    @staticmethod
    def from_json(payload):
        version = payload.get("state_version")
        if version != STATE_VERSION:
            raise ValueError(
                f"run state version {version} not supported "
                f"(expected {STATE_VERSION})")
        history = [RoundRecord(**h) for h in payload["history"]]
        fields = {k: payload[k] for k in
                  ("r", "delta", "round", "seed", "config_hash", "method",
                   "done", "checkpoint")}
        return CurriculumState(history=history, **fields)


def _require_counts_only(dataset):
    if isinstance(dataset, DatasetSplit):
        raise TypeError(
            "training takes the counts-only view; call dataset.counts_only()")
    if not isinstance(dataset, CountsOnlySplit):
        raise TypeError(f"expected CountsOnlySplit, got {type(dataset)!r}")
    if not dataset.scenes:
        raise ValueError("empty dataset")


def _write_state(state_dir, state):
    if state_dir is None:
        return
    path = os.path.join(state_dir, "state.json")
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(state.to_json(), fh, indent=2, sort_keys=True)
    os.replace(tmp, path)


def resume(state_dir) -> CurriculumState:
    """Pure load of a run's persisted state; never mutates the directory."""
    path = os.path.join(state_dir, "state.json")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no run state at {path}")
    with open(path, encoding="utf-8") as fh:
        return CurriculumState.from_json(json.load(fh))


def _labels_for_round(scenes, proposal_sets, cpms, r, round_index, config):
    """Score, select, and partition for every image; returns per-image lists
    plus dump records."""
    points, partitions, records = [], [], []
    n_points = 0
    n_warnings = 0
    for i, scene in enumerate(scenes):
        cpm = None if cpms is None else cpms[i]
        scored = score_proposals(proposal_sets[i], cpm,
                                 combine=config.curriculum.score_combine)
        pts, selected = select_pseudo_labels(
            scored, scene.count, r, config.proposals.nms_iou,
            image_id=scene.scene_id)
        if scene.count > 0 and not len(pts):
            n_warnings += 1
        partition = build_partition(scene.image.shape[:2], proposal_sets[i],
                                    selected)
        points.append(pts)
        partitions.append(partition)
        records.append(pseudo_label_record(scene.scene_id, round_index, r,
                                           pts, selected, scored))
        n_points += len(pts)
    return points, partitions, records, n_points, n_warnings


def _train_epochs(model, optimizer, scenes, points, partitions, config, seed,
                  tag, epochs, patience=None):
    """Shuffled mini-batch epochs; returns per-epoch mean losses.

    With a patience, stops once the best epoch loss has not improved for
    that many consecutive epochs.
    """
    loc = config.localizer
    n = len(scenes)
    epoch_losses = []
    best = float("inf")
    stall = 0
    for epoch in range(epochs):
        epoch_seed = derive_seed(seed, tag, "epoch", epoch)
        torch.manual_seed(epoch_seed)
        order = np.random.default_rng(epoch_seed).permutation(n)
        losses = []
        for start in range(0, n, loc.batch_size):
            idx = order[start:start + loc.batch_size]
            batch = [(scenes[i].image, points[i], partitions[i]) for i in idx]
            losses.append(train_step(
                model, batch, optimizer,
                blob_threshold=loc.blob_threshold,
                connectivity=loc.blob_connectivity))
        epoch_losses.append(float(np.mean(losses)))
        if patience is not None:
            if epoch_losses[-1] < best - 1e-6:
                best = epoch_losses[-1]
                stall = 0
            else:
                stall += 1
                if stall >= patience:
                    break
    return epoch_losses


def _run_schedule(dataset, config, seed, use_cpm, state_dir=None,
                  stop_after_round=None, method="looc"):
    _require_counts_only(dataset)
    config.validate()
    scenes = dataset.scenes
    loc = config.localizer
    cur = config.curriculum
    total_rounds = n_rounds(cur.r0, cur.delta)

    state = CurriculumState(r=cur.r0, delta=cur.delta, round=0, seed=seed,
                            config_hash=config.hash(), method=method)
    model = None
    optimizer = None

    if state_dir is not None:
        os.makedirs(state_dir, exist_ok=True)
        if os.path.exists(os.path.join(state_dir, "state.json")):
            state = resume(state_dir)
            if state.config_hash != config.hash():
                raise ValueError("run state was written under a different "
                                 "config; refusing to continue")
            if state.seed != seed or state.method != method:
                raise ValueError(
                    f"run state is for method={state.method} seed={state.seed}, "
                    f"got method={method} seed={seed}")
            if state.checkpoint is not None:
                model, payload = load_checkpoint(state.checkpoint)
                if state.done:
                    return model, state
                optimizer = make_optimizer(model, loc.lr, loc.weight_decay)
                if payload["optimizer_state"] is not None:
                    optimizer.load_state_dict(payload["optimizer_state"])

    # Proposals depend only on the image; one pass serves every round.
    proposal_sets = [generate_proposals(s.image, config=config.proposals)
                     for s in scenes]

    if model is None and state.round > 0:
        raise ValueError("run state lists completed rounds but no checkpoint")
    if model is None:
        torch.manual_seed(derive_seed(seed, method, "init"))
        model = LocalizerModel(in_channels=scenes[0].image.shape[2],
                               depth=loc.depth,
                               base_channels=loc.base_channels,
                               channel_cap=loc.channel_cap)
        optimizer = make_optimizer(model, loc.lr, loc.weight_decay)

    r = state.r
    t = state.round
    while r <= 1.0 + SCHEDULE_EPS:
        if not cur.warm_start and t > 0:
            torch.manual_seed(derive_seed(seed, method, "round-init", t))
            model = LocalizerModel(in_channels=scenes[0].image.shape[2],
                                   depth=loc.depth,
                                   base_channels=loc.base_channels,
                                   channel_cap=loc.channel_cap)
            optimizer = make_optimizer(model, loc.lr, loc.weight_decay)

        cpms = None
        if use_cpm and t > 0:
            cpms = [forward(model, s.image) for s in scenes]
        points, partitions, records, n_points, n_warnings = _labels_for_round(
            scenes, proposal_sets, cpms, r, t, config)
        if n_points == 0:
            _write_state(state_dir, state)
            raise RuntimeError(
                f"round {t}: no pseudo-labels selected on any image; "
                "proposals are degenerate")

        round_dir = None
        if state_dir is not None:
            round_dir = os.path.join(state_dir, f"round_{t}")
            os.makedirs(round_dir, exist_ok=True)
            write_pseudolabels(
                os.path.join(round_dir, "pseudolabels.jsonl"), records)

        try:
            losses = _train_epochs(model, optimizer, scenes, points,
                                   partitions, config, seed,
                                   tag=(method, "round", t),
                                   epochs=cur.epochs_per_round)
        except TrainingDiverged:
            _write_state(state_dir, state)
            raise

        state.history.append(RoundRecord(
            round=t, r=r, mean_loss=losses[-1], n_points=n_points,
            n_warnings=n_warnings))
        r += cur.delta
        t += 1
        state.r = r
        state.round = t
        if round_dir is not None:
            checkpoint = os.path.join(round_dir, "checkpoint.bin")
            save_checkpoint(checkpoint, model, optimizer,
                            extra={"round": t - 1, "r": state.r})
            state.checkpoint = checkpoint
        _write_state(state_dir, state)
        if stop_after_round is not None and t > stop_after_round:
            return model, state

    if t != total_rounds:
        raise AssertionError(f"ran {t} rounds, schedule says {total_rounds}")

    # Final labels at full ratio from the trained model, then a clean
    # retraining on them.
    cpms = [forward(model, s.image) for s in scenes] if use_cpm else None
    points, partitions, records, n_points, n_warnings = _labels_for_round(
        scenes, proposal_sets, cpms, 1.0, t, config)
    if n_points == 0:
        _write_state(state_dir, state)
        raise RuntimeError("final pass: no pseudo-labels selected")

    round_dir = None
    if state_dir is not None:
        round_dir = os.path.join(state_dir, f"round_{t}")
        os.makedirs(round_dir, exist_ok=True)
        write_pseudolabels(
            os.path.join(round_dir, "pseudolabels.jsonl"), records)

    torch.manual_seed(derive_seed(seed, method, "final-init"))
    final_model = LocalizerModel(in_channels=scenes[0].image.shape[2],
                                 depth=loc.depth,
                                 base_channels=loc.base_channels,
                                 channel_cap=loc.channel_cap)
    final_opt = make_optimizer(final_model, loc.lr, loc.weight_decay)
    try:
        losses = _train_epochs(final_model, final_opt, scenes, points,
                               partitions, config, seed,
                               tag=(method, "final"),
                               epochs=cur.final_max_epochs,
                               patience=cur.final_patience)
    except TrainingDiverged:
        _write_state(state_dir, state)
        raise

    state.history.append(RoundRecord(
        round=t, r=1.0, mean_loss=losses[-1], n_points=n_points,
        n_warnings=n_warnings))
    state.done = True
    if round_dir is not None:
        checkpoint = os.path.join(round_dir, "checkpoint.bin")
        save_checkpoint(checkpoint, final_model, final_opt,
                        extra={"round": t, "r": 1.0, "final": True})
        state.checkpoint = checkpoint
    _write_state(state_dir, state)
    return final_model, state


def run_looc(dataset, config: ExperimentConfig, seed: int, state_dir=None,
             stop_after_round=None):
    """Full curriculum: proposals are re-scored by the model's own
    probability map from round 1 on."""
    return _run_schedule(dataset, config, seed, use_cpm=True,
                         state_dir=state_dir,
                         stop_after_round=stop_after_round, method="looc")


def run_topk(dataset, config: ExperimentConfig, seed: int, state_dir=None,
             stop_after_round=None):
    """Baseline schedule: selection always uses the static objectness
    scores, never the model."""
    return _run_schedule(dataset, config, seed, use_cpm=False,
                         state_dir=state_dir,
                         stop_after_round=stop_after_round, method="topk")


def train_supervised(dataset: DatasetSplit, config: ExperimentConfig,
                     seed: int):
    """Upper bound: train the localizer on true points (evaluation-side
    labels, full split required)."""
    if not isinstance(dataset, DatasetSplit):
        raise TypeError("supervised training needs the full split with points")
    config.validate()
    scenes = dataset.scenes
    loc = config.localizer

    points, partitions = [], []
    for scene in scenes:
        h, w = scene.image.shape[:2]
        mask = np.full((h, w), BACKGROUND, dtype=np.int8)
        pts = []
        for row, col in scene.gt_points:
            rr = min(int(round(row)), h - 1)
            cc = min(int(round(col)), w - 1)
            mask[rr, cc] = FOREGROUND
            pts.append((rr, cc))
        points.append(PseudoPointSet(pts, scene.scene_id))
        partitions.append(RegionPartition(mask))

    torch.manual_seed(derive_seed(seed, "supervised", "init"))
    model = LocalizerModel(in_channels=scenes[0].image.shape[2],
                           depth=loc.depth, base_channels=loc.base_channels,
                           channel_cap=loc.channel_cap)
    optimizer = make_optimizer(model, loc.lr, loc.weight_decay)
    _train_epochs(model, optimizer, scenes, points, partitions, config, seed,
                  tag=("supervised",), epochs=config.curriculum.final_max_epochs,
                  patience=config.curriculum.final_patience)
    return model


def train_glance(dataset, config: ExperimentConfig, seed: int):
    """Count-regression baseline; sees images and counts only."""
    _require_counts_only(dataset)
    config.validate()
    scenes = dataset.scenes
    loc = config.localizer

    torch.manual_seed(derive_seed(seed, "glance", "init"))
    model = GlanceModel(in_channels=scenes[0].image.shape[2],
                        base_channels=loc.glance_channels)
    optimizer = torch.optim.Adam(model.parameters(), lr=loc.glance_lr)

    n = len(scenes)
    counts = torch.tensor([float(s.count) for s in scenes])
    for epoch in range(loc.glance_epochs):
        epoch_seed = derive_seed(seed, "glance", "epoch", epoch)
        torch.manual_seed(epoch_seed)
        order = np.random.default_rng(epoch_seed).permutation(n)
        model.train()
        for start in range(0, n, loc.batch_size):
            idx = order[start:start + loc.batch_size]
            images = batch_tensor([scenes[i].image for i in idx],
                                  model.in_channels)
            pred = model(images)
            loss = torch.mean((pred - counts[idx]) ** 2)
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    "non-finite glance loss",
                    batch_ids=[scenes[i].scene_id for i in idx])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
    return model
