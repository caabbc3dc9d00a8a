"""Loss, optimizer, data sampling and the training loop.

One optimization step draws a batch of aligned (LR, HR) crops, builds the
noisier copy ``y'`` of each LR crop, runs both inputs through the shared
network and minimizes

    lambda1 * l_p(f(y), x) + lambda2 * l_p(f(y'), x) + lambda3 * l_p(f(y), f(y'))

with each term mean-reduced over pixels.  Randomness for step ``t`` comes
from a generator seeded with ``(seed, t)``, so a resumed run replays the
same batches as an uninterrupted one.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .degradation import PairedSample, make_noisier
from .net import EmsrConfig, EmsrModel, forward_shared

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "lr", "loss", "term1", "term2", "term3")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    p: int = 1

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.lambda1 == self.lambda2 == self.lambda3 == 0:
            raise ValueError("at least one loss weight must be positive")
        if self.p not in (1, 2):
            raise ValueError(f"p must be 1 or 2, got {self.p}")


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-4
    total_steps: int = 200_000
    halve_every: int = 50_000
    batch: int = 2
    patch_lr: int = 32
    aug_noise_range: tuple[float, float] = (0.0, 5.0)
    input_noise_range: tuple[float, float] = (0.0, 5.0)
    augment: bool = True
    seed: int = 0
    loss: LossWeights = field(default_factory=LossWeights)
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if self.halve_every <= 0:
            raise ValueError(f"halve_every must be positive, got {self.halve_every}")
        if self.batch < 1 or self.total_steps < 0:
            raise ValueError("batch must be >= 1 and total_steps >= 0")

    def validate_for(self, model_cfg: EmsrConfig) -> None:
        if self.patch_lr % model_cfg.window:
            raise ValueError(f"patch_lr {self.patch_lr} not divisible by window {model_cfg.window}")


# ---------------------------------------------------------------- loss


def lp_loss(a: Tensor, b: Tensor, p: int = 1) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"loss operands differ: {a.shape} vs {b.shape}")
    diff = ad.sub(a, b)
    return ad.mean(ad.abs_(diff) if p == 1 else ad.square(diff))


def loss_terms(f_y: Tensor, f_yp: Tensor, x, w: LossWeights) -> tuple[Tensor, Tensor, Tensor]:
    x = x if isinstance(x, Tensor) else Tensor(x)
    return lp_loss(f_y, x, w.p), lp_loss(f_yp, x, w.p), lp_loss(f_y, f_yp, w.p)


def total_loss(f_y: Tensor, f_yp: Tensor, x, w: LossWeights | None = None) -> Tensor:
    w = w or LossWeights()
    t1, t2, t3 = loss_terms(f_y, f_yp, x, w)
    return _combine((t1, t2, t3), w)


def _combine(terms: Sequence[Tensor], w: LossWeights) -> Tensor:
    t1, t2, t3 = terms
    return ad.add(ad.add(ad.scale(t1, w.lambda1), ad.scale(t2, w.lambda2)), ad.scale(t3, w.lambda3))


# ---------------------------------------------------------------- optimizer


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    return cfg.lr0 * 0.5 ** (step // cfg.halve_every)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict[str, Tensor], **kw) -> AdamState:
        return cls(m={k: np.zeros_like(p.data) for k, p in params.items()},
                   v={k: np.zeros_like(p.data) for k, p in params.items()}, **kw)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, applied in place to ``params`` and ``state``."""
    for name in params:
        if name not in grads or grads[name] is None:
            raise TrainingError(f"no gradient for parameter {name!r}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------- data


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def augment(pair: PairedSample, seed=None, noise_range: tuple[float, float] = (0.0, 5.0),
            geometric: bool = True) -> PairedSample:
    """Random rotation by a multiple of 90 degrees and flips, applied to both images,
    plus white noise on the LR image only."""
    rng = _rng(seed)
    lr, hr = pair.lr, pair.hr
    ops = {"rot90": 0, "flip_h": False, "flip_v": False}
    if geometric:
        ops = {"rot90": int(rng.integers(0, 4)), "flip_h": bool(rng.integers(0, 2)), "flip_v": bool(rng.integers(0, 2))}
        lr, hr = np.rot90(lr, ops["rot90"]), np.rot90(hr, ops["rot90"])
        if ops["flip_h"]:
            lr, hr = lr[:, ::-1], hr[:, ::-1]
        if ops["flip_v"]:
            lr, hr = lr[::-1], hr[::-1]
    lr = make_noisier(np.ascontiguousarray(lr), noise_range, rng)
    return PairedSample(lr=lr, hr=np.ascontiguousarray(hr), provenance={**pair.provenance, "augment": ops})


def sample_batch(dataset: Sequence[PairedSample], cfg: TrainConfig, model_cfg: EmsrConfig, seed=None):
    """Draw ``cfg.batch`` aligned crops as ``(y, x, y')`` triples of 2-D arrays."""
    if not dataset:
        raise TrainingError("dataset is empty")
    rng = _rng(seed)
    tau, p = model_cfg.tau, cfg.patch_lr
    if p < model_cfg.window:
        raise TrainingError(f"patch {p} smaller than window {model_cfg.window}")
    out = []
    for _ in range(cfg.batch):
        s = dataset[int(rng.integers(len(dataset)))]
        h, w = s.lr.shape
        if s.hr.shape != (tau * h, tau * w):
            raise TrainingError(f"pair extents {s.lr.shape}/{s.hr.shape} do not match tau={tau}")
        if p > h or p > w:
            raise TrainingError(f"patch {p} larger than LR image {h}x{w}")
        i = int(rng.integers(0, h - p + 1))
        j = int(rng.integers(0, w - p + 1))
        crop = PairedSample(lr=s.lr[i : i + p, j : j + p], hr=s.hr[tau * i : tau * (i + p), tau * j : tau * (j + p)],
                            provenance=s.provenance)
        if cfg.augment:
            crop = augment(crop, rng, cfg.input_noise_range)
        y = np.ascontiguousarray(crop.lr)
        y_prime = make_noisier(y, cfg.aug_noise_range, rng)
        out.append((y, np.ascontiguousarray(crop.hr), y_prime))
    return out


def _stack(arrs) -> Tensor:
    return Tensor(np.stack(arrs)[:, None])


# ---------------------------------------------------------------- loop


@dataclass
class TrainResult:
    model: EmsrModel
    adam: AdamState
    log_rows: list[dict]

    def log_csv(self) -> str:
        return format_log(self.log_rows)


def format_log(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LOG_FIELDS)
    for r in rows:
        writer.writerow([r["step"]] + [repr(float(r[k])) for k in LOG_FIELDS[1:]])
    return buf.getvalue()


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(step)]))


def train_loop(model: EmsrModel, dataset: Sequence[PairedSample], cfg: TrainConfig, adam: AdamState | None = None,
               checkpoint_path=None, log_path=None) -> TrainResult:
    """Optimize ``model`` in place for ``cfg.total_steps`` steps (resuming at ``adam.t``)."""
    from .io import save_checkpoint

    cfg.validate_for(model.config)
    adam = adam or AdamState.for_params(model.params)
    rows: list[dict] = []
    w = cfg.loss
    for step in range(adam.t, cfg.total_steps):
        lr = lr_schedule(step, cfg)
        triples = sample_batch(dataset, cfg, model.config, step_rng(cfg.seed, step))
        y, x, yp = (_stack(t) for t in zip(*triples))
        f_y, f_yp = forward_shared(y, yp, model)
        terms = loss_terms(f_y, f_yp, x, w)
        loss = _combine(terms, w)
        values = [loss.item()] + [t.item() for t in terms]
        if not all(math.isfinite(v) for v in values):
            bad = [n for n, v in zip(("loss", "term1", "term2", "term3"), values) if not math.isfinite(v)]
            raise TrainingError(f"non-finite loss at step {step}: {', '.join(bad)} = {values}")
        model.zero_grad()
        grads = ad.backward(loss)
        adam_step(model.params, grads, adam, lr)
        rows.append(dict(zip(LOG_FIELDS, [step, lr] + values)))
        if step % 100 == 0:
            log.info("step %d lr %.3g loss %.5f", step, lr, values[0])
        if checkpoint_path and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(model, checkpoint_path, adam)
    if checkpoint_path:
        save_checkpoint(model, checkpoint_path, adam)
    if log_path:
        Path(log_path).write_text(format_log(rows))
    return TrainResult(model=model, adam=adam, log_rows=rows)
