"""Volume ingestion, slice-triplet grouping, 4x4 tiling, and phantoms.

On-disk format: `<name>.json` header {"dims": [D,H,W], "spacing": [sz,sy,sx],
"dtype": "f32"|"u8"} plus `<name>.raw` little-endian payload, slice-major
(D outermost, W innermost). Masks are u8 with values {0,1}.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import UsageError, VolumeFormatError
from .imaging import EdgeGtParams, build_edge_gt, downsample_mask, gaussian_blur

TILE_GRID = 4
SCALE_FACTORS = (1, 2, 4)

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


@dataclass(frozen=True)
class Volume:
    voxels: np.ndarray                      # (D, H, W) float32 or uint8
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise UsageError(f"volume must be (D,H,W) with positive dims, got {self.voxels.shape}")

    @property
    def dims(self):
        return self.voxels.shape


def _paths(path):
    base, ext = os.path.splitext(str(path))
    if ext not in (".json", ".raw", ""):
        base = str(path)
    return base + ".json", base + ".raw"


def save_volume(path, vol):
    header_path, raw_path = _paths(path)
    if vol.voxels.dtype == np.float32:
        dtype = "f32"
    elif vol.voxels.dtype == np.uint8:
        dtype = "u8"
    else:
        raise VolumeFormatError(f"unsupported voxel dtype {vol.voxels.dtype}")
    header = {"dims": list(vol.dims), "spacing": list(vol.spacing), "dtype": dtype}
    with open(header_path, "w", encoding="utf-8") as f:
        json.dump(header, f, sort_keys=True)
    arr = np.ascontiguousarray(vol.voxels.astype(_DTYPES[dtype], copy=False))
    tmp = raw_path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(arr.tobytes())
    os.replace(tmp, raw_path)


def load_volume(path):
    header_path, raw_path = _paths(path)
    try:
        with open(header_path, encoding="utf-8") as f:
            header = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise VolumeFormatError(f"{header_path}: cannot read header ({e})") from None
    for key in ("dims", "dtype"):
        if key not in header:
            raise VolumeFormatError(f"{header_path}: missing '{key}'")
    dims = tuple(int(d) for d in header["dims"])
    if len(dims) != 3 or min(dims) < 1:
        raise VolumeFormatError(f"{header_path}: bad dims {header['dims']}")
    dtype = header["dtype"]
    if dtype not in _DTYPES:
        raise VolumeFormatError(f"{header_path}: unknown dtype '{dtype}'")
    with open(raw_path, "rb") as f:
        payload = f.read()
    expected = int(np.prod(dims)) * _DTYPES[dtype].itemsize
    if len(payload) != expected:
        raise VolumeFormatError(
            f"{raw_path}: payload is {len(payload)} bytes, header implies {expected}")
    voxels = np.frombuffer(payload, dtype=_DTYPES[dtype]).reshape(dims)
    if dtype == "f32":
        voxels = voxels.astype(np.float32)
    else:
        voxels = voxels.copy()
    spacing = tuple(float(s) for s in header.get("spacing", (1.0, 1.0, 1.0)))
    return Volume(voxels, spacing)


def normalize_hu(vol, lo=-1000.0, hi=400.0):
    """Clip to [lo, hi] and map affinely to [0, 1]."""
    if lo >= hi:
        raise UsageError(f"normalize needs lo < hi, got {lo} >= {hi}")
    v = np.clip(vol.voxels.astype(np.float32), lo, hi)
    return Volume(((v - lo) / (hi - lo)).astype(np.float32), vol.spacing)


# ---------------------------------------------------------------------------
# ground-truth bundles and slice triplets

@dataclass
class MaskSet:
    mask: np.ndarray                        # (H, W) u8, full resolution
    edge: np.ndarray                        # (H, W) u8 edge band, subset of mask
    scales: list = field(default_factory=list)  # masks at 1, 1/2, 1/4 resolution

    def validate(self):
        if ((self.edge == 1) & (self.mask == 0)).any():
            raise UsageError("edge band leaks outside the mask")


@dataclass
class SliceTriplet:
    index: int
    prev: np.ndarray
    cur: np.ndarray
    next: np.ndarray
    gt: "MaskSet | None" = None


def build_mask_set(mask, edge_params=EdgeGtParams(), edge=None):
    """MaskSet for one slice; `edge` can be passed in when precomputed."""
    mask = np.asarray(mask, dtype=np.uint8)
    if edge is None:
        edge = build_edge_gt(mask, edge_params)
    scales = [downsample_mask(mask, f) for f in SCALE_FACTORS]
    return MaskSet(mask=mask, edge=np.asarray(edge, dtype=np.uint8), scales=scales)


def make_triplets(vol, masks=None, edge_params=EdgeGtParams(), edge_volume=None):
    """One triplet per slice; boundary slices replicate their neighbor.

    When `masks` is given, every triplet carries the edge band (computed on
    the full slice before any tiling, so bands are seam-consistent) and the
    multi-scale masks for its middle slice.
    """
    d = vol.dims[0]
    if masks is not None and masks.dims != vol.dims:
        raise UsageError(f"mask dims {masks.dims} != volume dims {vol.dims}")
    if edge_volume is not None and edge_volume.dims != vol.dims:
        raise UsageError(f"edge volume dims {edge_volume.dims} != volume dims {vol.dims}")
    vox = vol.voxels
    triplets = []
    for i in range(d):
        gt = None
        if masks is not None:
            edge = edge_volume.voxels[i] if edge_volume is not None else None
            gt = build_mask_set(masks.voxels[i], edge_params, edge=edge)
        triplets.append(SliceTriplet(
            index=i,
            prev=vox[max(i - 1, 0)],
            cur=vox[i],
            next=vox[min(i + 1, d - 1)],
            gt=gt,
        ))
    return triplets


# ---------------------------------------------------------------------------
# 16-tile cutting and reassembly (row-major 4x4 grid)

def tile_slice(sl):
    sl = np.asarray(sl)
    h, w = sl.shape
    if h % TILE_GRID or w % TILE_GRID:
        raise UsageError(f"slice shape {sl.shape} not divisible by {TILE_GRID}")
    th, tw = h // TILE_GRID, w // TILE_GRID
    return [sl[r * th:(r + 1) * th, c * tw:(c + 1) * tw]
            for r in range(TILE_GRID) for c in range(TILE_GRID)]


def assemble_tiles(tiles):
    if len(tiles) != TILE_GRID * TILE_GRID:
        raise UsageError(f"expected {TILE_GRID * TILE_GRID} tiles, got {len(tiles)}")
    shape = tiles[0].shape
    if any(t.shape != shape for t in tiles):
        raise UsageError("tiles have inconsistent shapes")
    rows = [np.concatenate(tiles[r * TILE_GRID:(r + 1) * TILE_GRID], axis=1)
            for r in range(TILE_GRID)]
    return np.concatenate(rows, axis=0)


def assemble_slices(slices, spacing=(1.0, 1.0, 1.0)):
    if not slices:
        raise UsageError("no slices to assemble")
    shape = slices[0].shape
    if any(s.shape != shape for s in slices):
        raise UsageError("slices have inconsistent shapes")
    return Volume(np.stack(slices, axis=0), spacing)


def pad_slice(sl, multiple):
    """Zero-pad H and W up to the next multiple; returns (padded, (H, W))."""
    h, w = sl.shape
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return sl, (h, w)
    return np.pad(sl, ((0, ph), (0, pw))), (h, w)


def crop_slice(sl, orig_hw):
    return sl[:orig_hw[0], :orig_hw[1]]


# ---------------------------------------------------------------------------
# synthetic phantoms

@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple = (8, 64, 64)
    nodule_count: int = 2
    radius_range: tuple = (4.0, 8.0)        # in-plane semi-axes (y, x)
    z_radius_range: "tuple | None" = None   # defaults to radius_range
    intensity: float = 0.7
    noise_sigma: float = 0.05

    def to_dict(self):
        return {"dims": list(self.dims), "nodule_count": self.nodule_count,
                "radius_range": list(self.radius_range),
                "z_radius_range": None if self.z_radius_range is None else list(self.z_radius_range),
                "intensity": self.intensity, "noise_sigma": self.noise_sigma}


def gen_phantom(seed, cfg):
    """Synthetic lung-like volume plus its exact nodule mask.

    Background is smoothed noise around 0.2; nodules are brighter ellipsoids
    at integer centers with per-axis radii drawn from the configured ranges.
    Deterministic per seed. Intensities live in the normalized [0,1] domain.
    """
    d, h, w = cfg.dims
    if cfg.nodule_count < 0:
        raise UsageError(f"nodule_count must be non-negative, got {cfg.nodule_count}")
    rng = np.random.default_rng(seed)
    vol = rng.normal(0.2, cfg.noise_sigma, size=cfg.dims)
    for i in range(d):
        vol[i] = gaussian_blur(vol[i], sigma=1.5, kernel=7)
    mask = np.zeros(cfg.dims, dtype=np.uint8)

    z_range = cfg.z_radius_range if cfg.z_radius_range is not None else cfg.radius_range
    zz, yy, xx = np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij")
    for _ in range(cfg.nodule_count):
        rz = rng.uniform(*z_range)
        ry = rng.uniform(*cfg.radius_range)
        rx = rng.uniform(*cfg.radius_range)
        for r, dim, axis in ((rz, d, "z"), (ry, h, "y"), (rx, w, "x")):
            if dim - 1 - int(np.ceil(r)) < int(np.ceil(r)):
                raise UsageError(f"nodule radius {r:.1f} does not fit axis {axis} of extent {dim}")
        # integer centers drawn so the whole ellipsoid stays inside the grid
        cz = int(rng.integers(int(np.ceil(rz)), d - int(np.ceil(rz))))
        cy = int(rng.integers(int(np.ceil(ry)), h - int(np.ceil(ry))))
        cx = int(rng.integers(int(np.ceil(rx)), w - int(np.ceil(rx))))
        inside = (((zz - cz) / rz) ** 2 + ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2) <= 1.0
        mask[inside] = 1
        vol[inside] = cfg.intensity + rng.normal(0.0, cfg.noise_sigma / 2, size=int(inside.sum()))

    return Volume(vol.astype(np.float32)), Volume(mask)
