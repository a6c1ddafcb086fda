"""One-seed benchmark pilot: runs all four methods and prints the
directional comparisons plus wall-clock per stage."""

import argparse
import json
import time

import torch

from looc.config import ExperimentConfig
from looc.curriculum import (n_rounds, run_looc, run_topk, train_glance,
                             train_supervised)
from looc.data import generate_split
from looc.metrics import audit_pseudo_labels, evaluate_glance, evaluate_localizer


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--n-train", type=int, default=200)
    ap.add_argument("--n-test", type=int, default=50)
    ap.add_argument("--small", action="store_true",
                    help="benchmark-scale network and epoch budget")
    ap.add_argument("--json-out", default=None)
    args = ap.parse_args()

    torch.set_num_threads(1)
    cfg = ExperimentConfig()
    if args.small:
        import dataclasses
        cfg = dataclasses.replace(
            cfg,
            localizer=dataclasses.replace(cfg.localizer, depth=3,
                                          base_channels=16),
            curriculum=dataclasses.replace(cfg.curriculum, epochs_per_round=6,
                                           final_max_epochs=40))
    t_all = time.time()

    train = generate_split(cfg.dataset, args.seed, args.n_train, "train")
    test = generate_split(cfg.dataset, args.seed, args.n_test, "test")
    counts_only = train.counts_only()
    gt = {s.scene_id: s.gt_points for s in train.scenes}
    shapes = {s.scene_id: s.image.shape[:2] for s in train.scenes}
    loc = cfg.localizer
    summary = {"seed": args.seed}

    def lap(tag, t0):
        dt = time.time() - t0
        print(f"[{tag}] {dt/60:.1f} min", flush=True)
        summary[f"time_{tag}"] = dt

    import os
    import tempfile
    from looc.pseudolabel import read_pseudolabels

    for name, runner in [("looc", run_looc), ("topk", run_topk)]:
        t0 = time.time()
        with tempfile.TemporaryDirectory() as td:
            model, state = runner(counts_only, cfg, args.seed, state_dir=td)
            final = n_rounds(cfg.curriculum.r0, cfg.curriculum.delta)
            recs = read_pseudolabels(
                os.path.join(td, f"round_{final}", "pseudolabels.jsonl"))
        lap(name, t0)
        res = evaluate_localizer(model, test, blob_threshold=loc.blob_threshold,
                                 connectivity=loc.blob_connectivity,
                                 method=name, seed=args.seed)
        summary[name] = {"mae": res.mae,
                         **{f"game{k}": v for k, v in res.game.items()}}
        pseudo = {r["image_id"]: [tuple(p) for p in r["points"]] for r in recs}
        summary[name]["audit_game3"] = audit_pseudo_labels(pseudo, gt, shapes, 3)
        print(name, summary[name], flush=True)

    t0 = time.time()
    gm = train_glance(counts_only, cfg, args.seed)
    lap("glance", t0)
    res = evaluate_glance(gm, test, seed=args.seed)
    summary["glance"] = {"mae": res.mae}
    print("glance", summary["glance"], flush=True)

    t0 = time.time()
    sm = train_supervised(train, cfg, args.seed)
    lap("supervised", t0)
    res = evaluate_localizer(sm, test, blob_threshold=loc.blob_threshold,
                             connectivity=loc.blob_connectivity,
                             method="lcfcn-supervised", seed=args.seed)
    summary["supervised"] = {"mae": res.mae,
                             **{f"game{k}": v for k, v in res.game.items()}}
    print("supervised", summary["supervised"], flush=True)

    summary["time_total"] = time.time() - t_all
    print(f"TOTAL {summary['time_total']/60:.1f} min")
    print("1a looc<glance mae:", summary["looc"]["mae"], "<", summary["glance"]["mae"],
          summary["looc"]["mae"] < summary["glance"]["mae"])
    print("1b game3:", summary["looc"]["game3"], "<", summary["topk"]["game3"],
          summary["looc"]["game3"] < summary["topk"]["game3"])
    print("1b mae:", summary["looc"]["mae"], "<=", summary["topk"]["mae"],
          summary["looc"]["mae"] <= summary["topk"]["mae"])
    print("1c sup<=looc:", summary["supervised"]["mae"], "<=", summary["looc"]["mae"],
          summary["supervised"]["mae"] <= summary["looc"]["mae"])
    print("2 audit:", summary["looc"]["audit_game3"], "<", summary["topk"]["audit_game3"],
          summary["looc"]["audit_game3"] < summary["topk"]["audit_game3"])
    if args.json_out:
        with open(args.json_out, "w") as fh:
            json.dump(summary, fh, indent=2)


if __name__ == "__main__":
    main()
