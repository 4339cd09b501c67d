"""Seeded training loop and volume inference.

Each step: sample a batch of tile triples, evaluate the total-loss graph,
backpropagate, apply one Adam update. Every step appends one JSON record to
the run log (no wall-clock fields, so logs are bit-reproducible); a numeric
fault aborts with the offending loss term or graph node named. Checkpoints
embed the network and preprocessing configuration, so inference needs the
checkpoint alone.
"""

import json
import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import NumericFaultError, TrainingAbort, UsageError
from .losses import build_loss_graph
from .network import Network, NetworkConfig
from .pipeline import TileDataset, pad_volume, tile_multiple
from .volume import (Volume, load_volume, save_volume, normalize_hu,
                     make_triplets, tile_slice, assemble_tiles, crop_slice)

CKPT_FINAL = "checkpoint_final.ckpt"
LOG_NAME = "train_log.jsonl"


def _stack(samples, attr):
    return np.stack([getattr(s, attr) for s in samples]).astype(np.float32)[:, None]


def batch_bindings(samples, input_keys):
    b = {"input/cur": _stack(samples, "cur"),
         "target/mask": _stack(samples, "mask"),
         "target/edge": _stack(samples, "edge")}
    if "input/prev" in input_keys:
        b["input/prev"] = _stack(samples, "prev")
        b["input/next"] = _stack(samples, "next")
    for i in range(3):
        b[f"target/scale{i}"] = np.stack(
            [s.scales[i] for s in samples]).astype(np.float32)[:, None]
    return b


def checkpoint_meta(cfg):
    return {"network": cfg.network.to_dict(),
            "normalize": {"lo": cfg.normalize[0], "hi": cfg.normalize[1]},
            "threshold": cfg.threshold,
            "loss": cfg.loss.to_dict(),
            "seed": cfg.seed}


@dataclass
class TrainResult:
    checkpoint: str
    log_path: str
    first_loss: float
    last_loss: float
    steps: int


def train_run(cfg, resume=None, log=print):
    """Train per config; returns paths of the final checkpoint and log."""
    dataset = TileDataset(cfg.data_dir, split="train" if cfg.split.val_fraction > 0 else "all")
    os.makedirs(cfg.out_dir, exist_ok=True)

    net = Network(cfg.network)
    adam = ad.AdamState()
    start_step = 0
    if resume is not None:
        ckpt = ad.load_checkpoint(resume)
        if ckpt.meta.get("network") != cfg.network.to_dict():
            raise UsageError(f"checkpoint network config does not match run config: {resume}")
        net = Network(cfg.network, params=ckpt.params, buffers=ckpt.buffers)
        adam = ckpt.adam or ad.AdamState()
        start_step = ckpt.step

    graph = net.graph(dataset.tile_hw)
    targets = {"mask": ad.leaf("target/mask"), "edge": ad.leaf("target/edge")}
    for i in range(3):
        targets[f"scale{i}"] = ad.leaf(f"target/scale{i}")
    loss_graph = build_loss_graph(graph.outputs, targets, cfg.loss)

    params = net.params
    net.set_training(True)
    opt = cfg.optimizer
    meta = checkpoint_meta(cfg)
    log_path = os.path.join(cfg.out_dir, LOG_NAME)
    ckpt_path = os.path.join(cfg.out_dir, CKPT_FINAL)
    stream = dataset.batches(cfg.schedule.batch_size, cfg.seed + 1)

    first_loss = last_loss = float("nan")
    with open(log_path, "w", encoding="utf-8") as logf:
        for step in range(start_step, cfg.schedule.steps):
            samples = next(stream)
            bindings = dict(params)
            bindings.update(batch_bindings(samples, graph.input_keys))
            try:
                ad.evaluate(loss_graph.total, bindings)
            except NumericFaultError as e:
                raise TrainingAbort(f"step {step}: non-finite output in '{e.node_name}'") from e
            report = loss_graph.report()
            for term, value in (("l_bin", report.l_bin), ("l_edge", report.l_edge),
                                ("l_ms", report.l_ms), ("l_total", report.l_total)):
                if not np.isfinite(value):
                    raise TrainingAbort(f"step {step}: loss term '{term}' is non-finite")
            grads = ad.backward(loss_graph.total, ad.Tensor.scalar(1.0))
            params, adam = ad.adam_step(params, grads, adam, lr=opt.lr,
                                        beta1=opt.beta1, beta2=opt.beta2, eps=opt.eps)

            record = {"step": step, **{k: round(v, 8) for k, v in report.to_dict().items()}}
            logf.write(json.dumps(record, sort_keys=True) + "\n")
            if step == start_step:
                first_loss = report.l_total
            last_loss = report.l_total
            if (step + 1) % cfg.schedule.log_interval == 0 or step + 1 == cfg.schedule.steps:
                log(f"step {step + 1}/{cfg.schedule.steps}  l_total={report.l_total:.4f}  "
                    f"l_bin={report.l_bin:.4f}  l_edge={report.l_edge:.4f}  l_ms={report.l_ms:.4f}")
            if (step + 1) % cfg.schedule.checkpoint_interval == 0 and step + 1 < cfg.schedule.steps:
                net.params = params
                ad.save_checkpoint(os.path.join(cfg.out_dir, f"checkpoint_step{step + 1}.ckpt"),
                                   params, net.export_buffers(), adam, meta=meta)

    net.params = params
    ad.save_checkpoint(ckpt_path, params, net.export_buffers(), adam,
                       step=cfg.schedule.steps, meta=meta)
    return TrainResult(checkpoint=ckpt_path, log_path=log_path,
                       first_loss=first_loss, last_loss=last_loss,
                       steps=cfg.schedule.steps - start_step)


# ---------------------------------------------------------------------------
# inference

def network_from_checkpoint(path):
    ckpt = ad.load_checkpoint(path)
    if "network" not in ckpt.meta:
        raise UsageError(f"{path}: checkpoint carries no network config")
    cfg = NetworkConfig.from_dict(ckpt.meta["network"])
    return Network(cfg, params=ckpt.params, buffers=ckpt.buffers), ckpt.meta


def predict_volume(net, vol, normalize=(0.0, 1.0), threshold=0.5):
    """Segment a whole volume: triplets, 16 tiles per slice, eval-mode
    forward, reassembly, crop back to the input dims.

    Returns (probability Volume float32, mask Volume u8)."""
    vol = normalize_hu(vol, *normalize)
    orig_hw = vol.dims[1:]
    vol, _ = pad_volume(vol, tile_multiple(net.cfg.encoder_depth))
    prob_slices = []
    for t in make_triplets(vol):
        tiles_prev = np.stack(tile_slice(t.prev))[:, None]
        tiles_cur = np.stack(tile_slice(t.cur))[:, None]
        tiles_next = np.stack(tile_slice(t.next))[:, None]
        out = net.forward(tiles_prev, tiles_cur, tiles_next, train=False)
        prob = assemble_tiles([out.final[k, 0] for k in range(out.final.shape[0])])
        prob_slices.append(crop_slice(prob, orig_hw))
    prob_vol = Volume(np.stack(prob_slices).astype(np.float32), vol.spacing)
    mask_vol = Volume((prob_vol.voxels >= threshold).astype(np.uint8), vol.spacing)
    return prob_vol, mask_vol


def predict_to_dir(ckpt_path, volume_path, out_dir, threshold=None):
    net, meta = network_from_checkpoint(ckpt_path)
    vol = load_volume(volume_path)
    norm = meta.get("normalize", {"lo": 0.0, "hi": 1.0})
    thr = meta.get("threshold", 0.5) if threshold is None else threshold
    prob, mask = predict_volume(net, vol, normalize=(norm["lo"], norm["hi"]), threshold=thr)
    os.makedirs(out_dir, exist_ok=True)
    stem = os.path.splitext(os.path.basename(str(volume_path)))[0]
    prob_path = os.path.join(out_dir, f"{stem}_prob")
    mask_path = os.path.join(out_dir, f"{stem}_mask")
    save_volume(prob_path, prob)
    save_volume(mask_path, mask)
    return prob_path, mask_path
