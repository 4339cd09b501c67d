"""Dataset preparation and loading.

`prepare` renders phantom volumes, normalizes them, precomputes the
edge-band ground truth per full slice, splits volumes into train/val with
a seeded permutation, and writes everything plus a manifest with per-sample
checksums. Training then cuts slice triplets into 4x4 tile triples on load
and verifies each sample against its manifest checksum.

Slices are zero-padded up to a multiple of 4 * 2**encoder_depth so that the
16 tiles of a slice are legal network inputs; predictions are cropped back.
"""

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import UsageError, VolumeFormatError
from .volume import (Volume, save_volume, load_volume, normalize_hu, make_triplets,
                     tile_slice, pad_slice, gen_phantom, build_mask_set, TILE_GRID)
from .imaging import EdgeGtParams, build_edge_gt

MANIFEST_NAME = "manifest.json"


def _checksum(*arrays):
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()[:16]


def pad_volume(vol, multiple):
    padded, orig_hw = [], None
    for i in range(vol.dims[0]):
        p, orig_hw = pad_slice(vol.voxels[i], multiple)
        padded.append(p)
    return Volume(np.stack(padded), vol.spacing), orig_hw


def tile_multiple(encoder_depth):
    return TILE_GRID * 2 ** encoder_depth


def prepare(cfg, log=print):
    """Generate / normalize the dataset under cfg.data_dir; returns manifest."""
    data_dir = cfg.data_dir
    os.makedirs(data_dir, exist_ok=True)
    multiple = tile_multiple(cfg.network.encoder_depth)

    count = cfg.phantoms.count
    rng = np.random.default_rng(cfg.split.seed)
    n_val = int(round(count * cfg.split.val_fraction))
    val_ids = set(rng.permutation(count)[:n_val].tolist())

    volumes, triplet_count, samples = [], 0, []
    for vi in range(count):
        vol, mask = gen_phantom(cfg.seed + vi, cfg.phantoms.phantom)
        vol = normalize_hu(vol, *cfg.normalize)
        orig_dims = vol.dims
        vol, _ = pad_volume(vol, multiple)
        mask, _ = pad_volume(mask, multiple)

        edge = np.stack([build_edge_gt(mask.voxels[i], cfg.edge_gt)
                         for i in range(mask.dims[0])])
        edge_vol = Volume(edge.astype(np.uint8), mask.spacing)

        name = f"vol{vi:03d}"
        save_volume(os.path.join(data_dir, name), vol)
        save_volume(os.path.join(data_dir, f"{name}_mask"), mask)
        save_volume(os.path.join(data_dir, f"{name}_edge"), edge_vol)

        split = "val" if vi in val_ids else "train"
        volumes.append({
            "id": name, "split": split,
            "dims": list(vol.dims), "orig_dims": list(orig_dims),
            "checksum_vol": _checksum(vol.voxels),
            "checksum_mask": _checksum(mask.voxels),
            "checksum_edge": _checksum(edge_vol.voxels),
        })

        for smp in iter_samples(vol, mask, edge_vol, cfg.edge_gt, name):
            samples.append({"volume": name, "slice": smp.slice_index, "tile": smp.tile_index,
                            "split": split, "checksum": smp.checksum})
        triplet_count += vol.dims[0]

    manifest = {
        "seed": cfg.seed,
        "split_seed": cfg.split.seed,
        "normalize": {"lo": cfg.normalize[0], "hi": cfg.normalize[1]},
        "edge_gt": cfg.edge_gt.to_dict(),
        "tile_grid": TILE_GRID,
        "triplets": triplet_count,
        "volumes": volumes,
        "samples": samples,
    }
    path = os.path.join(data_dir, MANIFEST_NAME)
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    os.replace(tmp, path)
    log(f"prepared {count} volumes, {triplet_count} triplets, {len(samples)} tile-triples -> {data_dir}")
    return manifest


@dataclass
class TileSample:
    volume: str
    slice_index: int
    tile_index: int
    prev: np.ndarray
    cur: np.ndarray
    next: np.ndarray
    mask: np.ndarray
    edge: np.ndarray
    scales: list
    checksum: str


def iter_samples(vol, mask, edge_vol, edge_params, name):
    """Tile every slice triplet of one volume into 16 training samples."""
    triplets = make_triplets(vol, mask, edge_params, edge_volume=edge_vol)
    for t in triplets:
        tiles = [tile_slice(t.prev), tile_slice(t.cur), tile_slice(t.next)]
        mask_tiles = tile_slice(t.gt.mask)
        edge_tiles = tile_slice(t.gt.edge)
        for k in range(TILE_GRID * TILE_GRID):
            gt = build_mask_set(mask_tiles[k], edge_params, edge=edge_tiles[k])
            yield TileSample(
                volume=name, slice_index=t.index, tile_index=k,
                prev=tiles[0][k], cur=tiles[1][k], next=tiles[2][k],
                mask=gt.mask, edge=gt.edge, scales=gt.scales,
                checksum=_checksum(tiles[0][k], tiles[1][k], tiles[2][k],
                                   gt.mask, gt.edge))


class TileDataset:
    """In-memory training samples reconstructed from a prepared data dir."""

    def __init__(self, data_dir, split="train", verify=True):
        path = os.path.join(data_dir, MANIFEST_NAME)
        try:
            with open(path, encoding="utf-8") as f:
                self.manifest = json.load(f)
        except OSError:
            raise UsageError(f"no manifest at {path}; run prepare first") from None
        edge_params = EdgeGtParams(**self.manifest["edge_gt"])

        expected = {(s["volume"], s["slice"], s["tile"]): s["checksum"]
                    for s in self.manifest["samples"] if split in (s["split"], "all")}
        self.samples = []
        self.volumes = {}
        for v in self.manifest["volumes"]:
            if split != "all" and v["split"] != split:
                continue
            vol = load_volume(os.path.join(data_dir, v["id"]))
            mask = load_volume(os.path.join(data_dir, v["id"] + "_mask"))
            edge = load_volume(os.path.join(data_dir, v["id"] + "_edge"))
            if verify and _checksum(vol.voxels) != v["checksum_vol"]:
                raise VolumeFormatError(f"{v['id']}: volume checksum mismatch vs manifest")
            self.volumes[v["id"]] = (vol, mask, v)
            for smp in iter_samples(vol, mask, edge, edge_params, v["id"]):
                want = expected.get((smp.volume, smp.slice_index, smp.tile_index))
                if verify and want is not None and want != smp.checksum:
                    raise VolumeFormatError(
                        f"{v['id']} slice {smp.slice_index} tile {smp.tile_index}: checksum mismatch")
                self.samples.append(smp)
        if not self.samples:
            raise UsageError(f"no '{split}' samples in {data_dir}")
        self.tile_hw = self.samples[0].cur.shape

    def __len__(self):
        return len(self.samples)

    def batches(self, batch_size, seed):
        """Endless deterministic batch stream; each epoch is a fresh shuffle
        and batches may straddle epoch boundaries."""
        rng = np.random.default_rng(seed)
        pool = []
        while True:
            while len(pool) < batch_size:
                pool.extend(rng.permutation(len(self.samples)).tolist())
            yield [self.samples[i] for i in pool[:batch_size]]
            del pool[:batch_size]
