"""Static-ranking health check for the dataset: measures how well the
handcrafted objectness score alone solves selection, and how predictive raw
brightness is of the count. Used to keep the benchmark regime in a band
where the fixed score is useful but beatable."""

import argparse

import numpy as np

from looc.config import ExperimentConfig
from looc.data import generate_split
from looc.proposals import generate_proposals
from looc.pseudolabel import score_proposals, select_pseudo_labels


def point_in_box(point, box):
    r0, c0, r1, c1 = box
    return r0 <= point[0] < r1 and c0 <= point[1] < c1


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--n", type=int, default=60)
    args = ap.parse_args()

    cfg = ExperimentConfig()
    split = generate_split(cfg.dataset, args.seed, args.n, "train")

    covered = total = 0
    top1_hits = 0
    sel_hit = sel_dup = sel_total = 0
    brightness, counts = [], []
    pool_sizes = []
    for scene in split.scenes:
        props = generate_proposals(scene.image, config=cfg.proposals)
        pool_sizes.append(len(props.proposals))
        boxes = [p.box for p in props.proposals]
        for pt in scene.gt_points:
            total += 1
            if any(point_in_box(pt, b) for b in boxes):
                covered += 1
        scored = score_proposals(props, None)
        if len(scored):
            best = props.proposals[int(np.argmax(scored.scores))]
            if any(point_in_box(pt, best.box) for pt in scene.gt_points):
                top1_hits += 1
        _, selected = select_pseudo_labels(scored, scene.count, 1.0,
                                           cfg.proposals.nms_iou,
                                           image_id=scene.scene_id)
        claimed = set()
        for p in selected.proposals:
            sel_total += 1
            hits = [i for i, pt in enumerate(scene.gt_points)
                    if point_in_box(pt, p.box)]
            if hits:
                sel_hit += 1
                if all(i in claimed for i in hits):
                    sel_dup += 1
                claimed.update(hits)
        brightness.append(float(scene.image.sum()))
        counts.append(scene.count)

    corr = float(np.corrcoef(brightness, counts)[0, 1])
    print(f"scenes {args.n}  mean count {np.mean(counts):.2f}  "
          f"mean pool {np.mean(pool_sizes):.1f}")
    print(f"pool recall          {covered / total:.3f}")
    print(f"top-1 static hit     {top1_hits / args.n:.3f}")
    print(f"top-c static prec    {sel_hit / sel_total:.3f}  "
          f"(dup {sel_dup / sel_total:.3f})")
    print(f"corr(brightness, c)  {corr:.3f}")


if __name__ == "__main__":
    main()
