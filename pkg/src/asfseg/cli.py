"""Command-line surface: prepare, train, predict, evaluate, edge-gt,
ablation, gradcheck.

Commands communicate only through files; the same config plus the same seed
reproduces every artifact bit-for-bit (set ASFSEG_SEED to override the
config seed).
"""

import argparse
import json
import os
import sys
import time

import numpy as np

from .ablation import load_ablation_spec, run_ablation, format_tables
from .config import load_run_config
from .errors import ConfigError, UsageError, VolumeFormatError, TrainingAbort
from .gradsuite import check_primitives, check_full_model
from .imaging import EdgeGtParams, build_edge_gt
from .metrics import evaluate_volume
from .pipeline import prepare
from .training import train_run, predict_to_dir
from .volume import Volume, load_volume, save_volume


def cmd_prepare(args):
    cfg = load_run_config(args.config)
    prepare(cfg)
    return 0


def cmd_train(args):
    cfg = load_run_config(args.config)
    result = train_run(cfg, resume=args.resume)
    print(f"checkpoint: {result.checkpoint}")
    print(f"log: {result.log_path}")
    return 0


def cmd_predict(args):
    prob_path, mask_path = predict_to_dir(args.ckpt, args.volume, args.out,
                                          threshold=args.threshold)
    print(f"probability volume: {prob_path}")
    print(f"mask volume: {mask_path}")
    return 0


def cmd_evaluate(args):
    pred = load_volume(args.pred)
    gt = load_volume(args.gt)
    report = evaluate_volume(pred, gt, threshold=args.threshold)
    os.makedirs(args.out, exist_ok=True)
    json_path = os.path.join(args.out, "eval_report.json")
    with open(json_path, "w", encoding="utf-8") as f:
        f.write(report.to_json())
    table_path = os.path.join(args.out, "eval_report.txt")
    with open(table_path, "w", encoding="utf-8") as f:
        f.write(report.to_table() + "\n")
    print(report.to_table())
    return 0


def _overlay_png(path, mask, edge):
    from PIL import Image
    rgb = np.stack([mask * 96, mask * 96, mask * 96], axis=-1).astype(np.uint8)
    rgb[edge > 0] = (255, 64, 64)
    Image.fromarray(rgb, mode="RGB").save(path)


def cmd_edge_gt(args):
    params = EdgeGtParams(sigma=args.sigma, kernel=args.kernel,
                          canny_low=args.canny_low, canny_high=args.canny_high,
                          band_threshold=args.band_threshold)
    masks = load_volume(args.mask)
    os.makedirs(args.out, exist_ok=True)
    edges = np.stack([build_edge_gt(masks.voxels[i], params)
                      for i in range(masks.dims[0])])
    stem = os.path.splitext(os.path.basename(str(args.mask)))[0]
    out_path = os.path.join(args.out, f"{stem}_edge")
    save_volume(out_path, Volume(edges.astype(np.uint8), masks.spacing))
    for i in range(masks.dims[0]):
        _overlay_png(os.path.join(args.out, f"{stem}_edge_{i:03d}.png"),
                     masks.voxels[i], edges[i])
    print(f"edge volume: {out_path} ({int(edges.sum())} band pixels, "
          f"{masks.dims[0]} overlay images)")
    return 0


def cmd_ablation(args):
    cfg_path, variants, seeds = load_ablation_spec(args.spec)
    base = load_run_config(cfg_path)
    results = run_ablation(base, variants, seeds)
    os.makedirs(base.out_dir, exist_ok=True)
    tables = format_tables(results)
    with open(os.path.join(base.out_dir, "ablation_report.json"), "w", encoding="utf-8") as f:
        json.dump({"variants": results, "seeds": seeds}, f, indent=2, sort_keys=True)
    with open(os.path.join(base.out_dir, "ablation_tables.txt"), "w", encoding="utf-8") as f:
        f.write(tables + "\n")
    print(tables)
    return 0


def cmd_gradcheck(args):
    t0 = time.time()
    seed = 0
    if args.config:
        seed = load_run_config(args.config).seed
    rows = check_primitives(seeds=args.seeds)
    full_row, _ = check_full_model(seed=seed)
    rows.append(full_row)
    width = max(len(r.name) for r in rows)
    failed = 0
    for r in rows:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  max_rel_err={r.max_rel_err:.2e}  tol={r.tolerance:.0e}  {status}")
        failed += 0 if r.passed else 1
    print(f"{len(rows) - failed}/{len(rows)} checks passed in {time.time() - t0:.1f}s")
    return 1 if failed else 0


def build_parser():
    p = argparse.ArgumentParser(prog="asfseg",
                                description="2.5D adjacent-slice-fusion segmentation toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("prepare", help="generate phantoms and the training manifest")
    sp.add_argument("--config", required=True)
    sp.set_defaults(func=cmd_prepare)

    sp = sub.add_parser("train", help="train per config; writes checkpoint + JSONL log")
    sp.add_argument("--config", required=True)
    sp.add_argument("--resume", default=None, help="checkpoint to continue from")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("predict", help="segment a volume with a trained checkpoint")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--volume", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--threshold", type=float, default=None)
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("evaluate", help="score a predicted volume against ground truth")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("edge-gt", help="build the edge-band ground truth for a mask volume")
    sp.add_argument("--mask", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--sigma", type=float, default=15.0)
    sp.add_argument("--kernel", type=int, default=25)
    sp.add_argument("--canny-low", type=float, default=0.1)
    sp.add_argument("--canny-high", type=float, default=0.3)
    sp.add_argument("--band-threshold", type=float, default=1e-3)
    sp.set_defaults(func=cmd_edge_gt)

    sp = sub.add_parser("ablation", help="run the component/fusion ablation matrix")
    sp.add_argument("--spec", required=True)
    sp.set_defaults(func=cmd_ablation)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every primitive "
                                          "and the full training graph")
    sp.add_argument("--config", default=None)
    sp.add_argument("--seeds", type=int, default=10)
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UsageError, VolumeFormatError, TrainingAbort, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
