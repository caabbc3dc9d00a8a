"""Forward degradation simulators and bicubic resizing.

Images live in [0, 1] as float64 arrays.  Noise levels are quoted in 8-bit
intensity units (0..255) and divided by 255 internally.  Nothing is clipped
here; clamping happens only when an image is written to an 8/16-bit file.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from scipy import ndimage

Variant = Literal["eq2", "synthetic_I", "synthetic_II"]
SeedLike = int | np.random.Generator | None

KEYS_A = -0.5


def _rng(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def derive_seed(master: int, index: int) -> int:
    """Per-sample seed derived from a master seed; stable across runs and platforms."""
    return int(np.random.SeedSequence([int(master), int(index)]).generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class GaussianKernel:
    sigma: float
    size: int
    taps: np.ndarray = field(repr=False)


def gaussian_kernel(sigma: float, size: int | None = None) -> GaussianKernel:
    """Normalized isotropic Gaussian taps; ``sigma == 0`` gives the discrete delta."""
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    recommended = 2 * math.ceil(3 * sigma) + 1
    if size is None:
        size = recommended
    if size % 2 == 0 or size < 1:
        raise ValueError(f"kernel size must be a positive odd integer, got {size}")
    if size < recommended:
        warnings.warn(f"kernel size {size} truncates sigma={sigma}; {recommended} recommended", stacklevel=2)
    half = size // 2
    if sigma == 0:
        taps = np.zeros((size, size))
        taps[half, half] = 1.0
    else:
        r = np.arange(-half, half + 1, dtype=np.float64)
        g = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2.0 * sigma * sigma))
        taps = g / g.sum()
    return GaussianKernel(sigma=float(sigma), size=size, taps=taps)


def blur(image: np.ndarray, kernel: GaussianKernel) -> np.ndarray:
    if kernel.sigma == 0:
        return np.array(image, dtype=np.float64)
    return ndimage.convolve(np.asarray(image, dtype=np.float64), kernel.taps, mode="mirror")


def degrade_eq2(x_hr: np.ndarray, kernel: GaussianKernel, s: int, noise_sigma: float, seed: SeedLike = None) -> np.ndarray:
    """Blur, keep every ``s``-th pixel from offset 0, add white Gaussian noise."""
    x_hr = np.asarray(x_hr, dtype=np.float64)
    if s < 1:
        raise ValueError(f"scale must be >= 1, got {s}")
    h, w = x_hr.shape
    if h % s or w % s:
        raise ValueError(f"HR extents {h}x{w} are not divisible by scale {s}")
    y = blur(x_hr, kernel)[::s, ::s]
    if noise_sigma > 0:
        y = y + _rng(seed).normal(0.0, noise_sigma / 255.0, size=y.shape)
    return y


# ------------------------------------------------------------------ bicubic


def _keys(x: np.ndarray, a: float = KEYS_A) -> np.ndarray:
    ax = np.abs(x)
    ax2, ax3 = ax * ax, ax * ax * ax
    near = (a + 2.0) * ax3 - (a + 3.0) * ax2 + 1.0
    far = a * ax3 - 5.0 * a * ax2 + 8.0 * a * ax - 4.0 * a
    return np.where(ax <= 1.0, near, np.where(ax < 2.0, far, 0.0))


def _mirror_index(idx: np.ndarray, n: int) -> np.ndarray:
    # half-sample symmetric extension: ... b a | a b c ... z | z y ...
    period = 2 * n
    m = np.mod(idx, period)
    return np.where(m < n, m, period - 1 - m)


def _resize_matrix(n_in: int, n_out: int, antialias: bool) -> np.ndarray:
    scale = n_out / n_in
    if n_in == n_out:
        return np.eye(n_in)
    shrink = antialias and scale < 1.0
    kscale = scale if shrink else 1.0
    support = 2.0 / kscale
    centers = (np.arange(n_out) + 0.5) / scale - 0.5
    left = np.floor(centers - support).astype(int)
    taps = int(math.ceil(2 * support)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    wts = kscale * _keys(kscale * (centers[:, None] - idx))
    wts /= wts.sum(axis=1, keepdims=True)
    mat = np.zeros((n_out, n_in))
    rows = np.repeat(np.arange(n_out), taps)
    np.add.at(mat, (rows, _mirror_index(idx, n_in).ravel()), wts.ravel())
    return mat


def bicubic_resize(image: np.ndarray, out_h: int, out_w: int, antialias: bool = True) -> np.ndarray:
    """Separable Keys (a = -0.5) resampling on pixel-center-aligned grids.

    When shrinking, the kernel is stretched by the inverse scale (the usual
    antialiased convention for "bicubic down-sampling").
    """
    image = np.asarray(image, dtype=np.float64)
    if out_h < 4 or out_w < 4:
        raise ValueError(f"output extents must be >= 4, got {out_h}x{out_w}")
    h, w = image.shape
    if (h, w) == (out_h, out_w):
        return image.copy()
    rows = _resize_matrix(h, out_h, antialias)
    cols = _resize_matrix(w, out_w, antialias)
    return rows @ image @ cols.T


# ------------------------------------------------------------------ training pairs


@dataclass(frozen=True)
class DegradationConfig:
    variant: Variant = "synthetic_II"
    scale_s: int = 2
    blur_sigma_range: tuple[float, float] = (0.0, 3.0)
    pre_noise_sigma_range: tuple[float, float] = (20.0, 40.0)
    post_noise_sigma_range: tuple[float, float] = (5.0, 15.0)
    seed: int = 0

    def __post_init__(self):
        if self.variant not in ("eq2", "synthetic_I", "synthetic_II"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.scale_s < 1:
            raise ValueError(f"scale_s must be >= 1, got {self.scale_s}")
        for name in ("blur_sigma_range", "pre_noise_sigma_range", "post_noise_sigma_range"):
            lo, hi = getattr(self, name)
            if lo < 0 or lo > hi:
                raise ValueError(f"{name} must satisfy 0 <= lo <= hi, got {(lo, hi)}")


@dataclass
class PairedSample:
    lr: np.ndarray
    hr: np.ndarray
    provenance: dict = field(default_factory=dict)


def _uniform(rng: np.random.Generator, lo_hi: tuple[float, float]) -> float:
    lo, hi = lo_hi
    return float(rng.uniform(lo, hi)) if hi > lo else float(lo)


def synthetic_pair(x_hr: np.ndarray, config: DegradationConfig) -> PairedSample:
    """Synthesize an (LR, HR) pair from a clean HR image.

    ``synthetic_I``: bicubic down-sampling only.
    ``synthetic_II``: random Gaussian blur, strong noise, bicubic
    down-sampling, then weaker noise; all draws come from ``config.seed``.
    """
    x_hr = np.asarray(x_hr, dtype=np.float64)
    s = config.scale_s
    h, w = x_hr.shape
    if h % s or w % s:
        raise ValueError(f"HR extents {h}x{w} are not divisible by scale {s}")
    if config.variant == "eq2":
        raise ValueError("synthetic_pair handles synthetic_I / synthetic_II; use degrade_eq2 for eq2")
    prov: dict = {"variant": config.variant, "seed": config.seed, "scale": s}
    if config.variant == "synthetic_I":
        lr = bicubic_resize(x_hr, h // s, w // s) if s > 1 else x_hr.copy()
        return PairedSample(lr=lr, hr=x_hr.copy(), provenance=prov)

    rng = np.random.default_rng(config.seed)
    blur_sigma = _uniform(rng, config.blur_sigma_range)
    pre_sigma = _uniform(rng, config.pre_noise_sigma_range)
    post_sigma = _uniform(rng, config.post_noise_sigma_range)
    v = blur(x_hr, gaussian_kernel(blur_sigma))
    v = v + rng.normal(0.0, pre_sigma / 255.0, size=v.shape)
    if s > 1:
        v = bicubic_resize(v, h // s, w // s)
    v = v + rng.normal(0.0, post_sigma / 255.0, size=v.shape)
    prov.update(blur_sigma=blur_sigma, pre_noise_sigma=pre_sigma, post_noise_sigma=post_sigma)
    return PairedSample(lr=v, hr=x_hr.copy(), provenance=prov)


def make_noisier(y: np.ndarray, sigma_range: tuple[float, float] = (0.0, 5.0), seed: SeedLike = None) -> np.ndarray:
    """Add white Gaussian noise whose std is drawn uniformly from ``sigma_range`` / 255."""
    lo, hi = sigma_range
    if lo < 0 or lo > hi:
        raise ValueError(f"sigma_range must satisfy 0 <= lo <= hi, got {sigma_range}")
    y = np.asarray(y, dtype=np.float64)
    rng = _rng(seed)
    sigma = _uniform(rng, sigma_range) / 255.0
    if sigma == 0:
        return y.copy()
    return y + rng.normal(0.0, sigma, size=y.shape)
