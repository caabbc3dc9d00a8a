"""SSIM, PSNR and Fourier ring correlation for image pairs in [0, L]."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class SsimParams:
    L: float = 1.0
    mode: Literal["global", "windowed"] = "global"
    window: int = 8
    k1: float = 0.01
    k2: float = 0.03

    @property
    def c1(self) -> float:
        return (self.k1 * self.L) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.L) ** 2


def _pair(x, x_hat) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(x_hat, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"image extents differ: {a.shape} vs {b.shape}")
    return a, b


def _ssim_stats(a: np.ndarray, b: np.ndarray, c1: float, c2: float) -> float:
    mu_a, mu_b = a.mean(), b.mean()
    da, db = a - mu_a, b - mu_b
    var_a, var_b = (da * da).mean(), (db * db).mean()
    cov = (da * db).mean()
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))


def ssim(x, x_hat, params: SsimParams | None = None) -> float:
    """Structural similarity with population (1/N) moments.

    ``global`` evaluates the formula once over the whole image; ``windowed``
    averages it over non-overlapping ``window``-sized tiles.
    """
    p = params or SsimParams()
    a, b = _pair(x, x_hat)
    if p.mode == "global":
        return float(_ssim_stats(a, b, p.c1, p.c2))
    if p.mode != "windowed":
        raise MetricError(f"unknown SSIM mode {p.mode!r}")
    w = p.window
    h, wd = a.shape
    if h < w or wd < w:
        raise MetricError(f"image {h}x{wd} smaller than SSIM window {w}")
    vals = [
        _ssim_stats(a[i : i + w, j : j + w], b[i : i + w, j : j + w], p.c1, p.c2)
        for i in range(0, h - w + 1, w)
        for j in range(0, wd - w + 1, w)
    ]
    return float(np.mean(vals))


def psnr(x, x_hat, L: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` when the images are identical."""
    a, b = _pair(x, x_hat)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(L * L / mse)


def dft2(image) -> np.ndarray:
    """Unnormalized forward 2-D DFT."""
    return np.fft.fft2(np.asarray(image, dtype=np.float64))


@dataclass
class FrcCurve:
    ring_index: np.ndarray
    mean_radius: np.ndarray
    correlation: np.ndarray
    mean_frc: float = field(init=False)

    def __post_init__(self):
        self.mean_frc = float(np.mean(self.correlation))

    @property
    def rings(self) -> list[tuple[int, float, float]]:
        return [(int(i), float(r), float(c)) for i, r, c in zip(self.ring_index, self.mean_radius, self.correlation)]


def _ring_labels(side: int, num_rings: int) -> tuple[np.ndarray, np.ndarray]:
    k = np.arange(side) - side // 2
    radius = np.hypot(k[:, None], k[None, :])
    nyquist = side / 2.0
    width = nyquist / num_rings
    labels = np.minimum((radius / width).astype(int), num_rings - 1)
    labels[radius > nyquist] = -1
    return labels, radius


def max_rings(side: int) -> int:
    """Largest ring count for which every annulus holds at least one frequency bin."""
    best = 1
    for n in range(1, 2 * side + 1):
        labels, _ = _ring_labels(side, n)
        if np.bincount(labels[labels >= 0], minlength=n).min() > 0:
            best = n
    return best


def frc(x, x_hat, num_rings: int | None = None) -> FrcCurve:
    """Fourier ring correlation over equal-width annuli from DC to Nyquist.

    Each ring's value is the real part of the summed cross-spectrum divided
    by the geometric mean of the two ring energies.  A ring where either
    image has no energy reports 0.
    """
    a, b = _pair(x, x_hat)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise MetricError(f"FRC needs square 2-D images, got {a.shape}")
    side = a.shape[0]
    if num_rings is None:
        num_rings = max(1, side // 4)
    if num_rings < 1:
        raise MetricError(f"num_rings must be >= 1, got {num_rings}")
    labels, radius = _ring_labels(side, num_rings)
    inside = labels >= 0
    lab = labels[inside]
    counts = np.bincount(lab, minlength=num_rings)
    if counts.min() == 0:
        raise MetricError(f"{num_rings} rings leave an empty ring for a {side}x{side} image; max is {max_rings(side)}")

    fa = np.fft.fftshift(dft2(a))[inside]
    fb = np.fft.fftshift(dft2(b))[inside]
    cross = np.bincount(lab, weights=(fa * np.conj(fb)).real, minlength=num_rings)
    ea = np.bincount(lab, weights=np.abs(fa) ** 2, minlength=num_rings)
    eb = np.bincount(lab, weights=np.abs(fb) ** 2, minlength=num_rings)
    denom = np.sqrt(ea * eb)
    corr = np.divide(cross, denom, out=np.zeros(num_rings), where=denom > 0)
    mean_r = np.bincount(lab, weights=radius[inside], minlength=num_rings) / counts
    return FrcCurve(ring_index=np.arange(num_rings), mean_radius=mean_r, correlation=corr)


@dataclass
class MetricReport:
    ssim: float
    psnr: float
    frc: FrcCurve
    ssim_mode: str = "global"

    @property
    def mean_frc(self) -> float:
        return self.frc.mean_frc


def evaluate(x, x_hat, num_rings: int | None = None, params: SsimParams | None = None) -> MetricReport:
    p = params or SsimParams()
    return MetricReport(ssim=ssim(x, x_hat, p), psnr=psnr(x, x_hat, p.L), frc=frc(x, x_hat, num_rings), ssim_mode=p.mode)
