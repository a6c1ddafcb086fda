"""Command line entry points: dataset generation, training any of the four
methods, evaluation, pseudo-label auditing, and comparison plots.

A run directory (``--out``) holds ``run.json``, training state, and the
evaluation artifacts (``metrics.csv``, ``per_image.csv``, previews, plots).
"""

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np
from PIL import Image

from .config import ConfigError, ExperimentConfig, load_config
from .curriculum import (n_rounds, resume, run_looc, run_topk,
                         train_glance, train_supervised)
from .data import (generate_split, read_counts_only, read_dataset,
                   write_dataset)
from .localizer import forward, load_checkpoint, save_checkpoint
from .metrics import audit_pseudo_labels, evaluate_glance, evaluate_localizer
from .pseudolabel import read_pseudolabels

log = logging.getLogger(__name__)

METHODS = ("looc", "topk", "glance", "lcfcn-supervised")
METRIC_COLUMNS = ("mae", "game0", "game1", "game2", "game3")


def _fmt(value):
    if value is None or value == "":
        return ""
    return repr(float(value))


def _load_config(path):
    if path is None:
        return ExperimentConfig()
    return load_config(path)


def _apply_determinism(on):
    if on:
        import torch
        torch.set_num_threads(1)


def cmd_gen_data(args):
    config = _load_config(args.config)
    ds = config.dataset
    splits = [("train", ds.n_train), ("val", ds.n_val), ("test", ds.n_test)]
    os.makedirs(args.out, exist_ok=True)
    for name, count in splits:
        if count <= 0:
            continue
        split = generate_split(ds, args.seed, count, name)
        write_dataset(split, os.path.join(args.out, name))
        log.info("wrote %d %s scenes", count, name)
    with open(os.path.join(args.out, "dataset.json"), "w") as fh:
        json.dump({"seed": args.seed, "config_hash": config.hash()}, fh,
                  indent=2)
    return 0


def cmd_train(args):
    config = _load_config(args.config)
    _apply_determinism(args.deterministic)
    os.makedirs(args.out, exist_ok=True)
    train_dir = os.path.join(args.data, "train")

    if args.method == "lcfcn-supervised":
        model = train_supervised(read_dataset(train_dir), config, args.seed)
        save_checkpoint(os.path.join(args.out, "model.bin"), model)
    elif args.method == "glance":
        model = train_glance(read_counts_only(train_dir), config, args.seed)
        save_checkpoint(os.path.join(args.out, "model.bin"), model)
    else:
        runner = run_looc if args.method == "looc" else run_topk
        runner(read_counts_only(train_dir), config, args.seed,
               state_dir=os.path.join(args.out, "state"))

    with open(os.path.join(args.out, "run.json"), "w") as fh:
        json.dump({"method": args.method, "seed": args.seed,
                   "config_hash": config.hash(),
                   "deterministic": bool(args.deterministic)}, fh, indent=2)
    return 0


def _load_run(out_dir):
    run_path = os.path.join(out_dir, "run.json")
    if not os.path.exists(run_path):
        raise FileNotFoundError(f"no run.json in {out_dir}; train first")
    with open(run_path) as fh:
        return json.load(fh)


def _load_trained_model(out_dir, run):
    if run["method"] in ("glance", "lcfcn-supervised"):
        model, _ = load_checkpoint(os.path.join(out_dir, "model.bin"))
        return model
    state = resume(os.path.join(out_dir, "state"))
    if not state.done:
        raise RuntimeError(f"run in {out_dir} has not finished training")
    model, _ = load_checkpoint(state.checkpoint)
    return model


def write_metrics_csv(path, rows):
    """rows: dicts with method, seed, mae, and optional game0..game3."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("method", "seed") + METRIC_COLUMNS)
        for row in rows:
            writer.writerow([row["method"], row["seed"]]
                            + [_fmt(row.get(col)) for col in METRIC_COLUMNS])


def read_metrics_csv(path):
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def result_row(result):
    row = {"method": result.method, "seed": result.seed, "mae": result.mae}
    for level, value in result.game.items():
        row[f"game{level}"] = value
    return row


def _write_previews(model, split, out_dir, n_previews):
    os.makedirs(out_dir, exist_ok=True)
    for scene in split.scenes[:n_previews]:
        cpm = forward(model, scene.image)
        arr = np.round(cpm.probs * 255.0).astype(np.uint8)
        Image.fromarray(arr, mode="L").save(
            os.path.join(out_dir, f"{scene.scene_id}.png"))


def cmd_eval(args):
    config = _load_config(args.config)
    _apply_determinism(args.deterministic)
    run = _load_run(args.out)
    model = _load_trained_model(args.out, run)
    split = read_dataset(os.path.join(args.data, "test"))

    loc = config.localizer
    if run["method"] == "glance":
        result = evaluate_glance(model, split, seed=run["seed"])
    else:
        result = evaluate_localizer(
            model, split, levels=config.eval.game_levels,
            blob_threshold=loc.blob_threshold,
            connectivity=loc.blob_connectivity,
            method=run["method"], seed=run["seed"])
        _write_previews(model, split, os.path.join(args.out, "previews"),
                        config.eval.n_previews)

    write_metrics_csv(os.path.join(args.out, "metrics.csv"), [result_row(result)])
    per_image_path = os.path.join(args.out, "per_image.csv")
    with open(per_image_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("scene_id", "pred_count", "gt_count")
                        + tuple(f"game{m}" for m in config.eval.game_levels))
        for row in result.per_image:
            writer.writerow(
                [row["scene_id"], row["pred_count"], row["gt_count"]]
                + [_fmt(row.get(f"game{m}")) for m in config.eval.game_levels])
    print(f"{result.method} seed={result.seed} mae={result.mae:.4f}")
    return 0


def cmd_audit(args):
    config = _load_config(args.config)
    run = _load_run(args.out)
    if run["method"] not in ("looc", "topk"):
        raise ValueError(f"method {run['method']} has no pseudo-labels")
    final_round = n_rounds(config.curriculum.r0, config.curriculum.delta)
    labels_path = os.path.join(args.out, "state", f"round_{final_round}",
                               "pseudolabels.jsonl")
    records = read_pseudolabels(labels_path)
    pseudo = {rec["image_id"]: [tuple(p) for p in rec["points"]]
              for rec in records}

    split = read_dataset(os.path.join(args.data, "train"))
    gt = {s.scene_id: s.gt_points for s in split.scenes}
    shapes = {s.scene_id: s.image.shape[:2] for s in split.scenes}

    audit_path = os.path.join(args.out, "audit.csv")
    with open(audit_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("method", "seed", "level", "value"))
        for level in config.eval.game_levels:
            value = audit_pseudo_labels(pseudo, gt, shapes, level)
            writer.writerow([run["method"], run["seed"], level, _fmt(value)])
            print(f"audit {run['method']} seed={run['seed']} "
                  f"game{level}={value:.4f}")
    return 0


def cmd_plot(args):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = read_metrics_csv(os.path.join(args.out, "metrics.csv"))
    if not rows:
        raise ValueError("metrics.csv has no rows")
    for metric in METRIC_COLUMNS:
        by_method = {}
        for row in rows:
            if row.get(metric):
                by_method.setdefault(row["method"], []).append(
                    float(row[metric]))
        if not by_method:
            continue
        methods = sorted(by_method)
        means = [float(np.mean(by_method[m])) for m in methods]
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.bar(methods, means, color="tab:blue")
        ax.set_ylabel(metric)
        ax.set_title(f"{metric} by method (mean over seeds)")
        fig.tight_layout()
        fig.savefig(os.path.join(args.out, f"plot_{metric}.png"))
        plt.close(fig)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="looc",
        description="Count-supervised object localization pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=False, method=False):
        p.add_argument("--config", default=None, help="YAML config file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--deterministic", action="store_true",
                       help="single-thread math for exact reproducibility")
        if data:
            p.add_argument("--data", required=True,
                           help="dataset root (contains train/ and test/)")
        if method:
            p.add_argument("--method", required=True, choices=METHODS)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one method")
    common(p, data=True, method=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained run on the test split")
    common(p, data=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("audit", help="score final pseudo-labels against "
                                     "hidden training points")
    common(p, data=True)
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("plot", help="bar charts from metrics.csv")
    common(p)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
