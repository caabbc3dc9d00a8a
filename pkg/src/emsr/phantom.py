"""Procedural EM-like phantoms: dark membrane rings on a textured background."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage


class PlacementError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomConfig:
    size: int = 96
    num_structures: int = 10
    membrane_width: float = 2.0
    background: float = 0.55
    interior: float = 0.78
    membrane: float = 0.12
    texture_amplitude: float = 0.03
    seed: int = 0

    def __post_init__(self):
        if self.size < 64:
            raise ValueError(f"phantom size must be >= 64, got {self.size}")
        if self.num_structures < 0:
            raise ValueError("num_structures must be >= 0")
        for name in ("background", "interior", "membrane"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} intensity {v} outside [0, 1]")


@dataclass
class Phantom:
    image: np.ndarray
    ring_mask: np.ndarray
    interior_mask: np.ndarray


def _texture(rng: np.random.Generator, size: int, amplitude: float) -> np.ndarray:
    if amplitude == 0:
        return np.zeros((size, size))
    field = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=size / 12.0, mode="wrap")
    field /= np.abs(field).max()
    return amplitude * field


def render_phantom(cfg: PhantomConfig) -> Phantom:
    rng = np.random.default_rng(cfg.seed)
    n = cfg.size
    img = cfg.background + _texture(rng, n, cfg.texture_amplitude)
    ring = np.zeros((n, n), dtype=bool)
    inner = np.zeros((n, n), dtype=bool)
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)

    placed: list[tuple[float, float, float]] = []
    lo, hi = n / 24.0, n / 11.0
    for _ in range(cfg.num_structures):
        for attempt in range(2000):
            # crowded canvases: let later attempts favour smaller structures
            top = max(lo, hi - (hi - lo) * attempt / 500)
            a = rng.uniform(lo, top)
            b = rng.uniform(lo, top)
            reach = max(a, b) + cfg.membrane_width + 1.0
            cy = rng.uniform(reach, n - reach)
            cx = rng.uniform(reach, n - reach)
            if all(math.hypot(cy - py, cx - px) > reach + pr for py, px, pr in placed):
                break
        else:
            raise PlacementError(
                f"could not place {cfg.num_structures} structures in a {n}x{n} phantom; reduce num_structures"
            )
        placed.append((cy, cx, reach))
        theta = rng.uniform(0.0, math.pi)
        c, s = math.cos(theta), math.sin(theta)
        u = (xx - cx) * c + (yy - cy) * s
        v = -(xx - cx) * s + (yy - cy) * c
        rho = np.sqrt((u / a) ** 2 + (v / b) ** 2)
        dist = (rho - 1.0) * min(a, b)  # approximate signed distance to the contour
        in_mask = dist < -cfg.membrane_width / 2
        ring_mask = np.abs(dist) <= cfg.membrane_width / 2
        img = np.where(in_mask, cfg.interior + 0.5 * (img - cfg.background), img)
        img = np.where(ring_mask, cfg.membrane, img)
        ring |= ring_mask
        inner |= in_mask

    # soften pixel staircase on the contours
    img = ndimage.gaussian_filter(img, sigma=0.6, mode="mirror")
    return Phantom(image=np.clip(img, 0.0, 1.0), ring_mask=ring, interior_mask=inner)


def generate_phantom(cfg: PhantomConfig) -> np.ndarray:
    """Deterministic phantom image in [0, 1] for ``cfg.seed``."""
    return render_phantom(cfg).image


def phantom_set(count: int, seed: int, size: int = 96, **overrides) -> list[np.ndarray]:
    from .degradation import derive_seed

    return [generate_phantom(PhantomConfig(size=size, seed=derive_seed(seed, i), **overrides)) for i in range(count)]
