"""End-to-end requirement checks. Each test prints one verdict line; the
expensive directional comparisons share a single session-scoped benchmark
(3 seeds x 4 methods on the standard 200/50-scene synthetic setup)."""

import dataclasses
import json
import os
import time

import numpy as np
import pytest
import torch

from looc.blobs import label_blobs
from looc.cli import main as cli_main
from looc.config import (CurriculumConfig, ExperimentConfig, LocalizerConfig,
                         SceneConfig)
from looc.curriculum import n_rounds, run_looc, run_topk, train_glance, \
    train_supervised
from looc.data import generate_split, read_counts_only, write_dataset
from looc.localizer import forward
from looc.loss import (BACKGROUND, FOREGROUND, UNLABELED, PseudoPointSet,
                       RegionPartition, lcfcn_loss)
from looc.metrics import audit_pseudo_labels, evaluate_glance, \
    evaluate_localizer, game, mae
from looc.proposals import Proposal, ProposalSet, nms
from looc.pseudolabel import read_pseudolabels

from conftest import random_partition
from oracles import (flood_fill_blobs, reference_nms, reference_top_k,
                     scalar_mae)

BENCH_SEEDS = (0, 1, 2)


def verdict(tag, ok, detail):
    print(f"[{'PASS' if ok else 'FAIL'}] {tag}: {detail}")
    assert ok, f"{tag}: {detail}"


def bench_config():
    """Benchmark settings: the standard dataset at a network/epoch scale
    that keeps three seeds of all four methods inside the time budget."""
    cfg = ExperimentConfig(
        localizer=LocalizerConfig(depth=3, base_channels=16),
        curriculum=CurriculumConfig(epochs_per_round=6, final_max_epochs=40))
    assert cfg.dataset.n_train == 200 and cfg.dataset.n_test == 50
    assert (cfg.dataset.height, cfg.dataset.width) == (64, 64)
    assert cfg.dataset.count_range == (1, 12)
    assert cfg.dataset.overlap_allowance == 0.5
    return cfg


def run_benchmark(seeds, cfg, workdir):
    torch.set_num_threads(1)
    loc = cfg.localizer
    out = {"seeds": {}, "state_dirs": {}, "train_counts": {}}
    t_start = time.time()
    for seed in seeds:
        train = generate_split(cfg.dataset, seed, cfg.dataset.n_train, "train")
        test = generate_split(cfg.dataset, seed, cfg.dataset.n_test, "test")
        counts_only = train.counts_only()
        gt = {s.scene_id: s.gt_points for s in train.scenes}
        shapes = {s.scene_id: s.image.shape[:2] for s in train.scenes}
        out["train_counts"][seed] = {s.scene_id: s.count
                                     for s in train.scenes}
        per_method = {}

        for name, runner in (("looc", run_looc), ("topk", run_topk)):
            state_dir = os.path.join(workdir, f"{name}_{seed}")
            model, _ = runner(counts_only, cfg, seed, state_dir=state_dir)
            res = evaluate_localizer(
                model, test, blob_threshold=loc.blob_threshold,
                connectivity=loc.blob_connectivity, method=name, seed=seed)
            final = n_rounds(cfg.curriculum.r0, cfg.curriculum.delta)
            recs = read_pseudolabels(os.path.join(
                state_dir, f"round_{final}", "pseudolabels.jsonl"))
            pseudo = {r["image_id"]: [tuple(p) for p in r["points"]]
                      for r in recs}
            per_method[name] = {
                "mae": res.mae, "game3": res.game[3],
                "audit_game3": audit_pseudo_labels(pseudo, gt, shapes, 3)}
            out["state_dirs"][(name, seed)] = state_dir

        gm = train_glance(counts_only, cfg, seed)
        per_method["glance"] = {"mae": evaluate_glance(gm, test,
                                                      seed=seed).mae}

        sm = train_supervised(train, cfg, seed)
        res = evaluate_localizer(
            sm, test, blob_threshold=loc.blob_threshold,
            connectivity=loc.blob_connectivity, method="lcfcn-supervised",
            seed=seed)
        per_method["supervised"] = {"mae": res.mae, "game3": res.game[3]}

        out["seeds"][seed] = per_method
    out["minutes"] = (time.time() - t_start) / 60.0
    return out


@pytest.fixture(scope="session")
def benchmark(tmp_path_factory):
    workdir = str(tmp_path_factory.mktemp("bench"))
    return run_benchmark(BENCH_SEEDS, bench_config(), workdir)


def seed_mean(bench, method, key):
    return float(np.mean([bench["seeds"][s][method][key]
                          for s in bench["seeds"]]))


class TestDirectionalOrderings:
    def test_1a_beats_count_regression(self, benchmark):
        looc = seed_mean(benchmark, "looc", "mae")
        glance = seed_mean(benchmark, "glance", "mae")
        verdict("1a looc MAE < glance MAE", looc < glance,
                f"looc {looc:.3f} vs glance {glance:.3f} (3-seed means)")

    def test_1b_beats_static_scores(self, benchmark):
        lg = seed_mean(benchmark, "looc", "game3")
        tg = seed_mean(benchmark, "topk", "game3")
        lm = seed_mean(benchmark, "looc", "mae")
        tm = seed_mean(benchmark, "topk", "mae")
        verdict("1b looc GAME3 < topk GAME3 and looc MAE <= topk MAE",
                lg < tg and lm <= tm,
                f"game3 {lg:.3f} vs {tg:.3f}, mae {lm:.3f} vs {tm:.3f}")

    def test_1c_supervised_upper_bound(self, benchmark):
        sm = seed_mean(benchmark, "supervised", "mae")
        lm = seed_mean(benchmark, "looc", "mae")
        verdict("1c supervised MAE <= looc MAE", sm <= lm,
                f"supervised {sm:.3f} vs looc {lm:.3f}")

    def test_1_runtime_budget(self, benchmark):
        verdict("1 runtime budget", benchmark["minutes"] <= 45.0,
                f"{benchmark['minutes']:.1f} min for 3 seeds x 4 methods "
                "(budget 45)")

    def test_2_pseudo_label_audit(self, benchmark):
        la = seed_mean(benchmark, "looc", "audit_game3")
        ta = seed_mean(benchmark, "topk", "audit_game3")
        verdict("2 final-round audit GAME3 looc < topk", la < ta,
                f"looc {la:.3f} vs topk {ta:.3f} (training split)")


def _fd_instance(rng):
    """8x8 loss instance safe for central differences: probabilities keep
    clear of the blob threshold and of each other, so the blob structure and
    the image-level argmaxes are locally constant."""
    probs = rng.permutation(np.linspace(0.05, 0.95, 64)).reshape(8, 8)
    z = torch.tensor(np.log(probs / (1 - probs)), dtype=torch.float64,
                     requires_grad=True)
    pts, part = random_partition(rng, (8, 8))
    return z, pts, part


class TestGradients:
    def test_3_finite_difference_agreement(self):
        rng = np.random.default_rng(2024)
        h = 1e-6
        worst = 0.0
        for _ in range(20):
            z, pts, part = _fd_instance(rng)
            loss = lcfcn_loss(z, pts, part)
            loss.backward()
            grad = z.grad.numpy()
            with torch.no_grad():
                base = z.detach().clone()
                for r in range(8):
                    for c in range(8):
                        zp = base.clone(); zp[r, c] += h
                        zm = base.clone(); zm[r, c] -= h
                        num = (lcfcn_loss(zp, pts, part)
                               - lcfcn_loss(zm, pts, part)).item() / (2 * h)
                        denom = max(abs(num), abs(grad[r, c]), 1e-8)
                        worst = max(worst, abs(num - grad[r, c]) / denom)
        verdict("3 analytic vs central differences", worst < 1e-4,
                f"max relative error {worst:.2e} over 20 8x8 instances "
                "(tol 1e-4)")

    def test_4_unlabeled_gradient_exactly_zero(self):
        rng = np.random.default_rng(7)
        checked = 0
        all_zero = True
        for _ in range(100):
            z = torch.tensor(rng.normal(0, 2, (12, 12)), dtype=torch.float64,
                             requires_grad=True)
            pts, part = random_partition(rng, (12, 12))
            loss = lcfcn_loss(z, pts, part)
            loss.backward()
            unl = part.mask == UNLABELED
            if unl.any():
                checked += 1
                g = z.grad.numpy()[unl]
                all_zero = all_zero and (g == 0.0).all()
        verdict("4 unlabeled-pixel gradients zero", all_zero and checked >= 80,
                f"exact zeros on {checked} partitions with unlabeled pixels "
                "out of 100")


def _random_instance(rng, shape=(30, 30)):
    n = int(rng.integers(0, 25))
    props = []
    for i in range(n):
        r0 = int(rng.integers(0, shape[0] - 2))
        c0 = int(rng.integers(0, shape[1] - 2))
        r1 = int(rng.integers(r0 + 1, shape[0]))
        c1 = int(rng.integers(c0 + 1, shape[1]))
        props.append(Proposal(box=(r0, c0, r1, c1),
                              objectness=round(float(rng.random()), 2),
                              proposal_id=i))
    scores = np.round(rng.random(n), 2)
    return ProposalSet(props, shape, "t"), scores


class TestOracleEquivalence:
    def test_5_nms_matches_reference(self):
        rng = np.random.default_rng(11)
        ok = True
        for _ in range(1000):
            ps, scores = _random_instance(rng)
            thr = float(rng.choice([0.2, 0.5, 0.8]))
            got = [p.proposal_id for p in nms(ps, scores, thr).proposals]
            want = reference_nms([p.box for p in ps.proposals], scores,
                                 ps.ids(), thr)
            ok = ok and got == [ps.proposals[i].proposal_id for i in want]
        verdict("5 NMS vs O(n^2) reference", ok, "1000 instances, exact")

    def test_5_top_k_matches_reference(self):
        rng = np.random.default_rng(12)
        ok = True
        for _ in range(1000):
            ps, scores = _random_instance(rng)
            if not len(ps):
                continue
            thr = float(rng.choice([0.2, 0.5, 0.8]))
            k = int(rng.integers(1, 12))
            surv = nms(ps, scores, thr, tie_break=ps.objectness())
            got = [p.proposal_id for p in surv.proposals[:k]]
            want = reference_top_k([p.box for p in ps.proposals], scores,
                                   ps.ids(), ps.objectness(), k, thr)
            ok = ok and got == [ps.proposals[i].proposal_id for i in want]
        verdict("5 top-k vs exhaustive reference", ok,
                "1000 instances, exact")

    def test_5_blobs_match_flood_fill(self):
        rng = np.random.default_rng(13)
        ok = True
        for i in range(200):
            h, w = int(rng.integers(4, 24)), int(rng.integers(4, 24))
            probs = rng.random((h, w))
            conn = 4 if i % 2 == 0 else 8
            labels, n = label_blobs(probs, 0.5, conn)
            blobs = flood_fill_blobs(probs, 0.5, conn)
            ok = ok and n == len(blobs)
            got = {}
            for r in range(h):
                for c in range(w):
                    if labels[r, c]:
                        got.setdefault(labels[r, c], []).append((r, c))
            got_sets = sorted(sorted(v) for v in got.values())
            want_sets = sorted(pixels for pixels, _ in blobs)
            ok = ok and got_sets == want_sets
        verdict("5 blob extraction vs flood fill", ok,
                "200 random maps, both connectivities, exact")


class TestMetricProperties:
    def test_6_identity_monotonicity_oracle(self):
        rng = np.random.default_rng(14)
        identity_ok = True
        monotone_ok = True
        for _ in range(500):
            shape = (int(rng.integers(8, 40)), int(rng.integers(8, 40)))
            p = [(float(rng.uniform(0, shape[0] - 1e-6)),
                  float(rng.uniform(0, shape[1] - 1e-6)))
                 for _ in range(int(rng.integers(0, 12)))]
            g = [(float(rng.uniform(0, shape[0] - 1e-6)),
                  float(rng.uniform(0, shape[1] - 1e-6)))
                 for _ in range(int(rng.integers(0, 12)))]
            values = [game(p, g, shape, level) for level in range(4)]
            identity_ok = identity_ok and \
                abs(values[0] - abs(len(p) - len(g))) < 1e-9
            monotone_ok = monotone_ok and all(
                b >= a - 1e-12 for a, b in zip(values, values[1:]))
        oracle_ok = True
        for _ in range(100):
            n = int(rng.integers(1, 30))
            preds = rng.uniform(0, 20, n).tolist()
            gts = rng.integers(0, 20, n).tolist()
            oracle_ok = oracle_ok and \
                abs(mae(preds, gts) - scalar_mae(preds, gts)) < 1e-12
        verdict("6 metric identity/monotonicity/oracle",
                identity_ok and monotone_ok and oracle_ok,
                "GAME(0)==MAE @1e-9, GAME monotone on 500 sets, "
                "MAE==scalar oracle")


class TestScheduleArithmetic:
    def test_7_round_count_and_budget(self, benchmark):
        rounds_ok = n_rounds(0.1, 0.1) == 10
        budget_ok = True
        layout_ok = True
        for (name, seed), state_dir in benchmark["state_dirs"].items():
            counts = benchmark["train_counts"][seed]
            for t in range(11):
                path = os.path.join(state_dir, f"round_{t}",
                                    "pseudolabels.jsonl")
                if not os.path.isfile(path):
                    layout_ok = False
                    continue
                for rec in read_pseudolabels(path):
                    if len(rec["points"]) > counts[rec["image_id"]]:
                        budget_ok = False
            layout_ok = layout_ok and not os.path.isdir(
                os.path.join(state_dir, "round_11"))
        verdict("7 schedule arithmetic",
                rounds_ok and budget_ok and layout_ok,
                "10 alternation rounds + final pass; per-image labels never "
                "exceed the count, every round, every benchmark run")


class TestSupervisionHygiene:
    def test_8_training_cannot_see_points(self, tmp_path, monkeypatch):
        cfg = ExperimentConfig(
            dataset=SceneConfig(height=32, width=32, count_range=(1, 4),
                                radius_range=(2.5, 4.0), n_train=6, n_test=2),
            localizer=LocalizerConfig(depth=2, base_channels=8, batch_size=3,
                                      glance_epochs=1),
            curriculum=CurriculumConfig(r0=0.5, delta=0.5, epochs_per_round=1,
                                        final_max_epochs=1, final_patience=1))
        split = generate_split(cfg.dataset, 0, 6, "train")
        data_dir = str(tmp_path / "data")
        write_dataset(split, data_dir)
        counts = read_counts_only(data_dir)

        type_ok = True
        for fn in (run_looc, run_topk, train_glance):
            try:
                fn(split, cfg, 0)
                type_ok = False
            except TypeError:
                pass
        no_points_attr = all(not hasattr(s, "gt_points")
                             for s in counts.scenes)

        import builtins
        real_open = builtins.open
        touched = []

        def spy(file, *args, **kwargs):
            if isinstance(file, (str, os.PathLike)) and \
                    str(file).startswith(data_dir):
                touched.append(str(file))
            return real_open(file, *args, **kwargs)

        monkeypatch.setattr(builtins, "open", spy)
        run_looc(counts, cfg, 0)
        run_topk(counts, cfg, 0)
        train_glance(counts, cfg, 0)
        monkeypatch.undo()

        verdict("8 supervision hygiene",
                type_ok and no_points_attr and touched == [],
                "full split rejected by type; counts-only view has no point "
                f"attribute; {len(touched)} dataset-file accesses during "
                "training (want 0)")


class TestDeterminism:
    def test_9_metrics_csv_byte_identical(self, tmp_path):
        cfg_yaml = tmp_path / "config.yaml"
        cfg_yaml.write_text(
            "dataset:\n"
            "  height: 32\n  width: 32\n  count_range: [1, 4]\n"
            "  radius_range: [2.5, 4.0]\n  n_train: 8\n  n_test: 3\n"
            "localizer:\n"
            "  depth: 2\n  base_channels: 8\n  batch_size: 4\n"
            "curriculum:\n"
            "  epochs_per_round: 1\n  final_max_epochs: 2\n"
            "  final_patience: 1\n")
        data = str(tmp_path / "data")
        assert cli_main(["gen-data", "--config", str(cfg_yaml), "--seed", "5",
                         "--out", data]) == 0
        payloads = []
        for tag in ("a", "b"):
            run = str(tmp_path / f"run_{tag}")
            args = ["--config", str(cfg_yaml), "--seed", "5", "--out", run,
                    "--data", data, "--deterministic"]
            assert cli_main(["train"] + args + ["--method", "looc"]) == 0
            assert cli_main(["eval"] + args) == 0
            with open(os.path.join(run, "metrics.csv"), "rb") as fh:
                payloads.append(fh.read())
        verdict("9 determinism", payloads[0] == payloads[1],
                "two full train+eval runs, same config/seed/--deterministic: "
                "metrics.csv byte-identical")
