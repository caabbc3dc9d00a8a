"""À-trous wavelet decomposition used as a multi-scale edge extractor.

Each level smooths the previous one with the separable B3-spline kernel
dilated by ``2**(j-1)``; the detail layer is the difference of successive
smoothings.  Boundaries are mirrored without repeating the edge pixel
(``d c b | a b c d``), so the smoothing operator is linear and its adjoint
is available for backpropagation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ShapeError, Tensor, concat

B3_TAPS = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


@dataclass(frozen=True)
class AtwKernel:
    base: np.ndarray = field(default_factory=lambda: B3_TAPS.copy())

    def __post_init__(self):
        taps = np.asarray(self.base, dtype=np.float64)
        if taps.ndim != 1 or taps.size % 2 == 0:
            raise ValueError(f"kernel needs an odd number of 1-D taps, got shape {taps.shape}")
        if not np.allclose(taps, taps[::-1], rtol=0, atol=0):
            raise ValueError("kernel taps must be symmetric")
        if abs(taps.sum() - 1.0) > 1e-12:
            raise ValueError(f"kernel taps must sum to 1, got {taps.sum()!r}")
        object.__setattr__(self, "base", taps)

    @property
    def half_width(self) -> int:
        return self.base.size // 2


@dataclass
class EdgePyramid:
    smoothings: list[np.ndarray]
    details: list[np.ndarray]

    @property
    def scales(self) -> int:
        return len(self.details)

    def reconstruct(self) -> np.ndarray:
        return self.smoothings[-1] + sum(self.details)


def min_size(scales: int, kernel: AtwKernel | None = None) -> int:
    """Smallest image side that a single mirror reflection can pad at ``scales``."""
    kernel = kernel or AtwKernel()
    return kernel.half_width * 2 ** (scales - 1) + 1


def _check(shape: tuple[int, ...], scales: int, kernel: AtwKernel) -> None:
    if scales < 1:
        raise ValueError(f"scales must be >= 1, got {scales}")
    need = min_size(scales, kernel)
    if min(shape[-2:]) < need:
        raise ShapeError(
            f"image {shape[-2]}x{shape[-1]} too small for {scales} scales; minimum side is {need}"
        )


def _smooth_last(v: np.ndarray, taps: np.ndarray, step: int) -> np.ndarray:
    pad = (taps.size // 2) * step
    n = v.shape[-1]
    vp = np.concatenate([v[..., 1 : pad + 1][..., ::-1], v, v[..., n - 1 - pad : n - 1][..., ::-1]], axis=-1)
    out = np.zeros_like(v)
    for k, t in enumerate(taps):
        out += t * vp[..., k * step : k * step + n]
    return out


def _smooth_last_adjoint(g: np.ndarray, taps: np.ndarray, step: int) -> np.ndarray:
    pad = (taps.size // 2) * step
    n = g.shape[-1]
    gp = np.zeros(g.shape[:-1] + (n + 2 * pad,))
    for k, t in enumerate(taps):
        gp[..., k * step : k * step + n] += t * g
    # fold the mirrored borders back onto the pixels they were copied from
    out = gp[..., pad : pad + n].copy()
    if pad:
        out[..., 1 : pad + 1] += gp[..., :pad][..., ::-1]
        out[..., n - 1 - pad : n - 1] += gp[..., pad + n :][..., ::-1]
    return out


def _smooth_axis(v, taps, step, axis):
    return np.moveaxis(_smooth_last(np.moveaxis(v, axis, -1), taps, step), -1, axis)


def _smooth_axis_adjoint(g, taps, step, axis):
    return np.moveaxis(_smooth_last_adjoint(np.moveaxis(g, axis, -1), taps, step), -1, axis)


def smooth(v: np.ndarray, level: int, kernel: AtwKernel) -> np.ndarray:
    """Apply the level-``level`` dilated separable low-pass over the last two axes."""
    step = 2 ** (level - 1)
    return _smooth_axis(_smooth_axis(v, kernel.base, step, -2), kernel.base, step, -1)


def smooth_adjoint(g: np.ndarray, level: int, kernel: AtwKernel) -> np.ndarray:
    step = 2 ** (level - 1)
    return _smooth_axis_adjoint(_smooth_axis_adjoint(g, kernel.base, step, -1), kernel.base, step, -2)


def atw_decompose(image: np.ndarray, scales: int, kernel: AtwKernel | None = None) -> EdgePyramid:
    """Decompose a 2-D image into ``scales`` detail layers plus a coarse residual."""
    kernel = kernel or AtwKernel()
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ShapeError(f"expected a 2-D image, got shape {image.shape}")
    if not np.all(np.isfinite(image)):
        raise ValueError("image contains non-finite values")
    _check(image.shape, scales, kernel)
    cs = [image]
    ws = []
    for j in range(1, scales + 1):
        c = smooth(cs[-1], j, kernel)
        ws.append(cs[-1] - c)
        cs.append(c)
    return EdgePyramid(smoothings=cs, details=ws)


def _details(v: np.ndarray, scales: int, kernel: AtwKernel) -> np.ndarray:
    """Stack detail layers along a new channel axis: (N, 1, H, W) -> (N, J, H, W)."""
    c = v[:, 0]
    out = []
    for j in range(1, scales + 1):
        nxt = smooth(c, j, kernel)
        out.append(c - nxt)
        c = nxt
    return np.stack(out, axis=1)


def _details_adjoint(g: np.ndarray, scales: int, kernel: AtwKernel) -> np.ndarray:
    # w_j = c_{j-1} - S_j c_{j-1}, c_j = S_j c_{j-1}; walk from the coarsest level down
    gc = np.zeros_like(g[:, 0])
    for j in range(scales, 0, -1):
        gw = g[:, j - 1]
        gc = gw + smooth_adjoint(gc - gw, j, kernel)
    return gc[:, None]


def atw_details(x: Tensor, scales: int, kernel: AtwKernel | None = None) -> Tensor:
    """Differentiable detail stack of a single-channel batch (N, 1, H, W) -> (N, J, H, W)."""
    kernel = kernel or AtwKernel()
    if x.data.ndim != 4 or x.shape[1] != 1:
        raise ShapeError(f"atw_details expects (N, 1, H, W), got {x.shape}")
    _check(x.shape, scales, kernel)
    out = _details(x.data, scales, kernel)
    return Tensor._from_op(out, (x,), lambda g: (_details_adjoint(g, scales, kernel),), "atw_details")


def edge_stack(lr_image, recon_image, scales: int, kernel: AtwKernel | None = None) -> Tensor:
    """Concatenate detail layers of two same-size images: (lr w_1..w_J, recon w_1..w_J).

    Accepts 2-D arrays or (N, 1, H, W) tensors; gradients flow into tensor inputs.
    """
    lr = _as_batch(lr_image)
    rc = _as_batch(recon_image)
    if lr.shape != rc.shape:
        raise ShapeError(f"edge_stack: size mismatch {lr.shape} vs {rc.shape}")
    return concat([atw_details(lr, scales, kernel), atw_details(rc, scales, kernel)], axis=1)


def _as_batch(v) -> Tensor:
    if isinstance(v, Tensor):
        return v
    a = np.asarray(v, dtype=np.float64)
    if a.ndim == 2:
        a = a[None, None]
    return Tensor(a)
