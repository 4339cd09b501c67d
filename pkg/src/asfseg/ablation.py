"""Ablation matrix: component toggles (M-series) and fusion variants (F-series).

Each variant trains from the same base config (only the toggled fields
differ), evaluates on the validation volumes (train volumes when no split
is configured), and lands in two tables: modules/losses and fusion models.
DSC ordering across variants is reported, never asserted; at phantom scale
the gaps between variants are within training noise.
"""

import dataclasses
import json
import os

import yaml

from .config import save_run_config
from .errors import ConfigError, UsageError
from .metrics import evaluate_volume
from .pipeline import MANIFEST_NAME
from .training import train_run, network_from_checkpoint, predict_volume
from .volume import load_volume

# variant -> (asf_variant, msf, edge loss, ms loss)
VARIANTS = {
    "M0": ("F0", False, False, False),
    "M1": ("F3", False, False, False),
    "M2": ("F3", True, False, False),
    "M3": ("F3", True, True, False),
    "M4": ("F3", True, True, True),
    "M5": ("F1", False, False, False),
    "M6": ("F2", False, False, False),
}

MODULE_TABLE_ROWS = ("M0", "M1", "M2", "M3", "M4")
# fusion table: F0 -> M0, F1 -> M5, F2 -> M6, F3 -> M1
FUSION_TABLE_ROWS = (("M0", "F0"), ("M5", "F1"), ("M6", "F2"), ("M1", "F3"))


def variant_config(base, name, seed):
    """Base run config with exactly the variant toggles and seed changed."""
    if name not in VARIANTS:
        raise UsageError(f"unknown ablation variant '{name}'")
    asf, msf, edge, ms = VARIANTS[name]
    network = dataclasses.replace(base.network, asf_variant=asf, msf_enabled=msf,
                                  edge_branch_enabled=edge, ms_outputs_enabled=ms,
                                  seed=seed)
    cfg = dataclasses.replace(base, network=network, seed=seed)
    cfg.out_dir = os.path.join(base.out_dir, f"{name.lower()}_seed{seed}")
    return cfg


def load_ablation_spec(path):
    with open(path, encoding="utf-8") as f:
        raw = yaml.safe_load(f) or {}
    if "config" not in raw:
        raise ConfigError("ablation.config", "spec must name a base run config file")
    variants = raw.get("variants", list(VARIANTS))
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ConfigError("ablation.variants", f"unknown variants {unknown}")
    seeds = raw.get("seeds", [0])
    if not seeds:
        raise ConfigError("ablation.seeds", "need at least one seed")
    base_dir = os.path.dirname(os.path.abspath(path))
    cfg_path = raw["config"]
    if not os.path.isabs(cfg_path):
        cfg_path = os.path.join(base_dir, cfg_path)
    return cfg_path, list(variants), [int(s) for s in seeds]


def _eval_volumes(base, ckpt_path):
    """Aggregate DSC over the evaluation volumes (val split, else train)."""
    with open(os.path.join(base.data_dir, MANIFEST_NAME), encoding="utf-8") as f:
        manifest = json.load(f)
    vols = [v for v in manifest["volumes"] if v["split"] == "val"]
    if not vols:
        vols = manifest["volumes"]
    net, meta = network_from_checkpoint(ckpt_path)
    norm = meta["normalize"]
    scores = []
    for v in vols:
        vol = load_volume(os.path.join(base.data_dir, v["id"]))
        gt = load_volume(os.path.join(base.data_dir, v["id"] + "_mask"))
        _, mask = predict_volume(net, vol, normalize=(norm["lo"], norm["hi"]),
                                 threshold=meta.get("threshold", 0.5))
        report = evaluate_volume(mask, gt)
        if report.aggregate is not None:
            scores.append(report.aggregate["dsc"])
    if not scores:
        raise UsageError("no nodule slices in any evaluation volume")
    return sum(scores) / len(scores)


def run_ablation(base, variants, seeds, log=print):
    """Train/evaluate every (variant, seed); returns the report dict."""
    results = {}
    for name in variants:
        per_seed = []
        for seed in seeds:
            cfg = variant_config(base, name, seed)
            os.makedirs(cfg.out_dir, exist_ok=True)
            save_run_config(os.path.join(cfg.out_dir, "config.yaml"), cfg)
            log(f"[{name} seed {seed}] training {cfg.schedule.steps} steps")
            result = train_run(cfg, log=lambda *_: None)
            dsc = _eval_volumes(base, result.checkpoint)
            per_seed.append({"seed": seed, "dsc": dsc})
            log(f"[{name} seed {seed}] DSC {dsc:.4f}")
        results[name] = {"per_seed": per_seed,
                         "dsc": sum(r["dsc"] for r in per_seed) / len(per_seed)}
    return results


def format_tables(results):
    check = lambda on: "x" if on else " "
    lines = ["modules and losses (DSC mean over seeds)",
             f"{'variant':>8} {'ASF':>4} {'MSF':>4} {'L_edge':>7} {'L_MS':>5} {'DSC':>8}"]
    for name in MODULE_TABLE_ROWS:
        if name not in results:
            continue
        asf, msf, edge, ms = VARIANTS[name]
        lines.append(f"{name:>8} {check(asf != 'F0'):>4} {check(msf):>4} "
                     f"{check(edge):>7} {check(ms):>5} {results[name]['dsc']:>8.4f}")
    lines.append("")
    lines.append("slice fusion models (DSC mean over seeds)")
    lines.append(f"{'variant':>8} {'F0':>3} {'F1':>3} {'F2':>3} {'F3':>3} {'DSC':>8}")
    for name, fvar in FUSION_TABLE_ROWS:
        if name not in results:
            continue
        marks = [check(fvar == f"F{i}") for i in range(4)]
        lines.append(f"{name:>8} {marks[0]:>3} {marks[1]:>3} {marks[2]:>3} {marks[3]:>3} "
                     f"{results[name]['dsc']:>8.4f}")
    lines.append("")
    lines.append("note: ordering is reported, not asserted; phantom-scale training")
    lines.append("noise can invert small gaps between variants.")
    return "\n".join(lines)
