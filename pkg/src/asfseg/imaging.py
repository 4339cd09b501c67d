"""Non-differentiable image kernels for ground-truth construction.

Builds the edge-band ground truth (Canny on the binary mask, Gaussian
dilation of the detected boundary, binarize, intersect with the mask) and
the coarse-scale masks used by the multi-scale supervision. All float work
is float64; masks are uint8 {0,1}. Borders use reflect padding so the band
is not biased at image edges.
"""

from dataclasses import dataclass

import numpy as np

from .errors import UsageError


@dataclass(frozen=True)
class EdgeGtParams:
    sigma: float = 15.0
    kernel: int = 25
    canny_low: float = 0.1
    canny_high: float = 0.3
    band_threshold: float = 1e-3

    def __post_init__(self):
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise UsageError(f"kernel must be odd and positive, got {self.kernel}")
        if not 0 < self.canny_low < self.canny_high:
            raise UsageError(f"need 0 < canny_low < canny_high, got {self.canny_low}, {self.canny_high}")
        if self.band_threshold <= 0:
            raise UsageError(f"band_threshold must be positive, got {self.band_threshold}")

    def to_dict(self):
        return {"sigma": self.sigma, "kernel": self.kernel, "canny_low": self.canny_low,
                "canny_high": self.canny_high, "band_threshold": self.band_threshold}


def gaussian_kernel_1d(sigma, size):
    if size < 1 or size % 2 == 0:
        raise UsageError(f"gaussian kernel size must be odd and positive, got {size}")
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-(r * r) / (2.0 * sigma * sigma))
    return k / k.sum()


def _correlate_rows(img, k):
    """1-D correlation along the last axis with reflect padding."""
    r = len(k) // 2
    padded = np.pad(img, ((0, 0), (r, r)), mode="reflect")
    out = np.zeros_like(img)
    for i, kv in enumerate(k):
        out += kv * padded[:, i:i + img.shape[1]]
    return out


def gaussian_blur(image, sigma, kernel):
    """Separable Gaussian blur; kernel normalized so constants are preserved."""
    img = np.asarray(image, dtype=np.float64)
    k = gaussian_kernel_1d(sigma, kernel)
    out = _correlate_rows(img, k)
    out = _correlate_rows(out.T, k).T
    return out


_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.T


def _correlate2d(img, kern):
    kh, kw = kern.shape
    rh, rw = kh // 2, kw // 2
    padded = np.pad(img, ((rh, rh), (rw, rw)), mode="reflect")
    out = np.zeros_like(img)
    for i in range(kh):
        for j in range(kw):
            out += kern[i, j] * padded[i:i + img.shape[0], j:j + img.shape[1]]
    return out


def canny(image, low=0.1, high=0.3):
    """Classic Canny: smooth, Sobel, non-maximum suppression, hysteresis.

    `low` and `high` are fractions of the peak gradient magnitude, which
    makes the detector invariant to constant offsets and global scaling.
    Returns a uint8 {0,1} edge mask.
    """
    if low >= high:
        raise UsageError(f"canny needs low < high, got {low} >= {high}")
    img = np.asarray(image, dtype=np.float64)
    smoothed = gaussian_blur(img, sigma=1.0, kernel=5)
    gx = _correlate2d(smoothed, _SOBEL_X)
    gy = _correlate2d(smoothed, _SOBEL_Y)
    mag = np.hypot(gx, gy)
    peak = mag.max()
    # flat images leave only float residue in the gradients; without this
    # guard the relative thresholds would promote that noise to edges
    if peak <= 1e-9 * max(1.0, np.abs(smoothed).max()):
        return np.zeros(img.shape, dtype=np.uint8)

    # quantize gradient direction to 4 bins and keep local maxima
    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    h, w = mag.shape
    nms = np.zeros_like(mag)
    offsets = [((0, 1), (0, -1)), ((-1, 1), (1, -1)), ((-1, 0), (1, 0)), ((-1, -1), (1, 1))]
    bins = np.zeros(mag.shape, dtype=np.int8)
    bins[(angle >= 22.5) & (angle < 67.5)] = 1
    bins[(angle >= 67.5) & (angle < 112.5)] = 2
    bins[(angle >= 112.5) & (angle < 157.5)] = 3
    for b, ((dy1, dx1), (dy2, dx2)) in enumerate(offsets):
        sel = bins[1:h - 1, 1:w - 1] == b
        center = mag[1:h - 1, 1:w - 1]
        n1 = mag[1 + dy1:h - 1 + dy1, 1 + dx1:w - 1 + dx1]
        n2 = mag[1 + dy2:h - 1 + dy2, 1 + dx2:w - 1 + dx2]
        keep = sel & (center >= n1) & (center >= n2)
        nms[1:h - 1, 1:w - 1][keep] = center[keep]

    strong = nms >= high * peak
    weak = nms >= low * peak
    return _hysteresis(strong, weak)


def _hysteresis(strong, weak):
    """Grow strong seeds through 8-connected weak pixels (BFS)."""
    out = strong.copy()
    stack = list(zip(*np.nonzero(strong)))
    h, w = strong.shape
    while stack:
        y, x = stack.pop()
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                ny, nx = y + dy, x + dx
                if 0 <= ny < h and 0 <= nx < w and weak[ny, nx] and not out[ny, nx]:
                    out[ny, nx] = True
                    stack.append((ny, nx))
    return out.astype(np.uint8)


def _check_binary(mask, what="mask"):
    arr = np.asarray(mask)
    if not np.isin(arr, (0, 1)).all():
        raise UsageError(f"{what} must be binary 0/1")
    return arr.astype(np.uint8)


def build_edge_gt(mask, params=EdgeGtParams()):
    """Edge-band ground truth: the mask's interior pixels near its boundary.

    Pipeline: Canny on the binary mask, Gaussian blur of the edge map
    (sigma/kernel from params), binarize at band_threshold, then elementwise
    AND with the mask.
    """
    g = _check_binary(mask)
    edges = canny(g.astype(np.float64), params.canny_low, params.canny_high)
    band = gaussian_blur(edges.astype(np.float64), params.sigma, params.kernel)
    return ((band > params.band_threshold) & (g > 0)).astype(np.uint8)


def downsample_mask(mask, factor):
    """Max-pool a binary mask by `factor` (any covered 1 survives)."""
    g = _check_binary(mask)
    if factor < 1 or factor & (factor - 1):
        raise UsageError(f"factor must be a power of two, got {factor}")
    h, w = g.shape
    if h % factor or w % factor:
        raise UsageError(f"mask shape {g.shape} not divisible by factor {factor}")
    if factor == 1:
        return g.copy()
    return g.reshape(h // factor, factor, w // factor, factor).max(axis=(1, 3))
