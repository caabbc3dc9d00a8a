"""Monte Carlo checks of training with a corrupted reference.

The reference is ``x_hat = x + n`` with i.i.d. noise of mean ``mu`` and
per-component variance ``sigma_n**2``.  The checks compare the expected
prediction error against ``x_hat`` with the error against the clean ``x``:

* ``l2_identity_check``: E||f - x_hat||^2 against
  E||f - x||^2 - 2 mu^T E[f - x] + d sigma_n^2 + ||mu||^2.
* ``l1_bound_I_check``: E||f - x_hat||_1 - E||f - x||_1 <= sqrt(d) sqrt(d sigma_n^2 + ||mu||^2).
* ``l1_bound_II_check``: the same difference, in absolute value, against
  |-2 mu^T E[f - x] + d sigma_n^2 + ||mu||^2| / g with
  g = (sqrt(E||f - x_hat||^2) + sqrt(E||f - x||^2)) / sqrt(d).

Predictions are passed in as data: a single vector or a (k, d) stack, row
``t % k`` being used at trial ``t``.  All sums over trials go through
``math.fsum`` so chunking never changes a reported value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

CHUNK = 8192


@dataclass(frozen=True)
class NoiseModel:
    mu: float | tuple[float, ...] = 0.0
    sigma_n: float = 0.0
    dim: int = 16
    kind: Literal["gaussian", "uniform"] = "gaussian"

    def __post_init__(self):
        if self.sigma_n < 0:
            raise ValueError(f"sigma_n must be >= 0, got {self.sigma_n}")
        if self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")
        if self.kind not in ("gaussian", "uniform"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if np.ndim(self.mu) and np.size(self.mu) != self.dim:
            raise ValueError(f"mu has {np.size(self.mu)} components, dim is {self.dim}")

    @property
    def mu_vec(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.mu, dtype=np.float64), (self.dim,)).copy()

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "gaussian":
            z = rng.standard_normal((n, self.dim))
        else:
            z = rng.uniform(-math.sqrt(3.0), math.sqrt(3.0), size=(n, self.dim))
        return self.mu_vec + self.sigma_n * z


@dataclass
class TheoryReport:
    check: str
    lhs: float
    rhs: float
    trials: int
    holds: bool | None = None
    nonnegative: bool | None = None
    degenerate: bool = False
    extras: dict = field(default_factory=dict)

    @property
    def abs_gap(self) -> float:
        return abs(self.lhs - self.rhs)

    @property
    def rel_gap(self) -> float:
        return self.abs_gap / max(abs(self.lhs), abs(self.rhs), 1e-300)

    def as_row(self) -> dict:
        row = dict(check=self.check, lhs=self.lhs, rhs=self.rhs, abs_gap=self.abs_gap,
                   rel_gap=self.rel_gap, trials=self.trials, holds=self.holds,
                   nonnegative=self.nonnegative, degenerate=self.degenerate)
        row.update(self.extras)
        return row


@dataclass
class _Moments:
    l2_u: float  # E||f - x_hat||^2
    l2_v: float  # E||f - x||^2
    l1_u: float  # E||f - x_hat||_1
    l1_v: float
    mean_v: np.ndarray  # E[f - x]
    jensen_ok: bool
    trials: int


def _prepare(f_vals, x, noise: NoiseModel) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64).ravel()
    f = np.atleast_2d(np.asarray(f_vals, dtype=np.float64))
    if x.size != noise.dim or f.shape[1] != noise.dim:
        raise ValueError(f"dimension mismatch: x {x.size}, f {f.shape[1]}, noise {noise.dim}")
    return f, x


def _jensen(norm1: np.ndarray, norm2sq: np.ndarray, d: int) -> bool:
    # (E||u||_1)^2 <= E||u||_1^2 <= d E||u||_2^2 on this batch
    e1 = math.fsum(norm1) / norm1.size
    e1sq = math.fsum(norm1 * norm1) / norm1.size
    e2sq = math.fsum(norm2sq) / norm2sq.size
    tol = 1e-12 * max(1.0, e1sq)
    return e1 * e1 <= e1sq + tol and e1sq <= d * e2sq + tol


def _moments(f_vals, x, noise: NoiseModel, trials: int, seed: int) -> _Moments:
    f, x = _prepare(f_vals, x, noise)
    rng = np.random.default_rng(seed)
    d = noise.dim
    l2u, l2v, l1u, l1v = [], [], [], []
    jensen_ok = True
    for start in range(0, trials, CHUNK):
        n = min(CHUNK, trials - start)
        rows = f[(start + np.arange(n)) % f.shape[0]]
        v = rows - x
        u = v - noise.sample(rng, n)
        a2u, a2v = (u * u).sum(axis=1), (v * v).sum(axis=1)
        a1u, a1v = np.abs(u).sum(axis=1), np.abs(v).sum(axis=1)
        l2u.extend(a2u)
        l2v.extend(a2v)
        l1u.extend(a1u)
        l1v.extend(a1v)
        jensen_ok &= _jensen(a1u, a2u, d) and _jensen(a1v, a2v, d)
    # f - x does not depend on the noise: weight each predictor row by how often it is used
    k = f.shape[0]
    counts = np.array([len(range(j, trials, k)) for j in range(k)], dtype=np.float64)
    rows_v = f - x
    mean_v = np.array([math.fsum(counts * rows_v[:, i]) / trials for i in range(d)])
    return _Moments(
        l2_u=math.fsum(l2u) / trials,
        l2_v=math.fsum(l2v) / trials,
        l1_u=math.fsum(l1u) / trials,
        l1_v=math.fsum(l1v) / trials,
        mean_v=mean_v,
        jensen_ok=bool(jensen_ok),
        trials=trials,
    )


def _noise_energy(noise: NoiseModel) -> float:
    mu = noise.mu_vec
    return noise.dim * noise.sigma_n**2 + float(mu @ mu)


def l2_identity_check(f_vals, x, noise: NoiseModel, trials: int = 100_000, seed: int = 0) -> TheoryReport:
    m = _moments(f_vals, x, noise, trials, seed)
    rhs = m.l2_v - 2.0 * float(noise.mu_vec @ m.mean_v) + _noise_energy(noise)
    return TheoryReport("l2", lhs=m.l2_u, rhs=rhs, trials=trials,
                        extras={"E_l2_clean": m.l2_v, "jensen_ok": m.jensen_ok})


def l1_bound_I_check(f_vals, x, noise: NoiseModel, trials: int = 100_000, seed: int = 0) -> TheoryReport:
    m = _moments(f_vals, x, noise, trials, seed)
    diff = m.l1_u - m.l1_v
    bound = math.sqrt(noise.dim) * math.sqrt(_noise_energy(noise))
    return TheoryReport("l1a", lhs=diff, rhs=bound, trials=trials, holds=diff <= bound,
                        nonnegative=diff >= 0,
                        extras={"E_l1_noisy": m.l1_u, "E_l1_clean": m.l1_v, "jensen_ok": m.jensen_ok})


def l1_bound_II_check(f_vals, x, noise: NoiseModel, trials: int = 100_000, seed: int = 0) -> TheoryReport:
    m = _moments(f_vals, x, noise, trials, seed)
    diff = m.l1_u - m.l1_v
    numer = abs(-2.0 * float(noise.mu_vec @ m.mean_v) + _noise_energy(noise))
    g = (math.sqrt(m.l2_u) + math.sqrt(m.l2_v)) / math.sqrt(noise.dim)
    extras = {"E_l1_noisy": m.l1_u, "E_l1_clean": m.l1_v, "g": g, "numerator": numer, "jensen_ok": m.jensen_ok}
    if g == 0.0:
        return TheoryReport("l1b", lhs=abs(diff), rhs=numer, trials=trials, holds=abs(diff) <= numer,
                            nonnegative=diff >= 0, degenerate=True, extras=extras)
    bound = numer / g
    return TheoryReport("l1b", lhs=abs(diff), rhs=bound, trials=trials, holds=abs(diff) <= bound,
                        nonnegative=diff >= 0, extras=extras)


# ---------------------------------------------------------------- scenarios


def default_scenario(seed: int = 0, dim: int = 16) -> tuple[np.ndarray, np.ndarray, NoiseModel]:
    """Biased Gaussian noise on a random clean vector with an imperfect predictor."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, dim)
    f = x + 0.1 * rng.standard_normal(dim)
    return f, x, NoiseModel(mu=0.05, sigma_n=0.2, dim=dim)


def random_scenario(seed: int) -> tuple[np.ndarray, np.ndarray, NoiseModel]:
    """A randomized scenario: dimension, predictor error, noise law and bias all drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    dim = int(rng.choice([4, 16, 64]))
    x = rng.uniform(0.0, 1.0, dim)
    k = int(rng.integers(1, 5))
    f = x + rng.uniform(0.0, 0.3) * rng.standard_normal((k, dim))
    mu = tuple(rng.uniform(-0.1, 0.1, dim)) if rng.uniform() < 0.5 else float(rng.uniform(-0.1, 0.1))
    noise = NoiseModel(mu=mu, sigma_n=float(rng.uniform(0.02, 0.5)), dim=dim,
                       kind="gaussian" if rng.uniform() < 0.7 else "uniform")
    return f, x, noise


# ---------------------------------------------------------------- corruption level


@dataclass
class ConditionStats:
    mean_noisy: float
    mean_clean: float
    mean_noise: float
    var_noisy: float
    var_clean: float
    var_noise: float
    cov_clean_noise: float
    threshold: float = 10.0

    @property
    def mean_ratio(self) -> float:
        # |E[n]| so that a slightly negative noise mean is not read as a violation
        return self.mean_clean / abs(self.mean_noise) if self.mean_noise != 0 else math.inf

    @property
    def var_ratio(self) -> float:
        return self.var_clean / self.var_noise if self.var_noise != 0 else math.inf

    @property
    def mean_condition(self) -> bool:
        return self.mean_ratio >= self.threshold

    @property
    def var_condition(self) -> bool:
        return self.var_ratio >= self.threshold

    @property
    def satisfied(self) -> bool:
        return self.mean_condition and self.var_condition

    @property
    def additivity_gap(self) -> float:
        return abs(self.var_noisy - (self.var_clean + self.var_noise))

    def summary(self) -> str:
        return "\n".join([
            f"mean_noisy={self.mean_noisy:.2e} mean_clean={self.mean_clean:.2e} mean_noise={self.mean_noise:.2e}",
            f"var_noisy={self.var_noisy:.2e} var_clean={self.var_clean:.2e} var_noise={self.var_noise:.2e}",
            f"mean_ratio={self.mean_ratio:.3g} var_ratio={self.var_ratio:.3g} cov={self.cov_clean_noise:.2e}",
            f"verdict={'feasible' if self.satisfied else 'infeasible'} (threshold {self.threshold:g})",
        ])


def condition_check(noisy, clean, threshold: float = 10.0) -> ConditionStats:
    """Mean/variance decomposition of a corrupted image into content and noise."""
    noisy = np.asarray(noisy, dtype=np.float64)
    clean = np.asarray(clean, dtype=np.float64)
    if noisy.shape != clean.shape:
        raise ValueError(f"extents differ: {noisy.shape} vs {clean.shape}")
    n = noisy - clean
    cc = clean - clean.mean()
    nc = n - n.mean()
    return ConditionStats(
        mean_noisy=float(noisy.mean()),
        mean_clean=float(clean.mean()),
        mean_noise=float(n.mean()),
        var_noisy=float(noisy.var()),
        var_clean=float(clean.var()),
        var_noise=float(n.var()),
        cov_clean_noise=float((cc * nc).mean()),
        threshold=threshold,
    )


def moment_matched_pair(shape: tuple[int, int], mean_clean: float, var_clean: float, mean_noise: float,
                        var_noise: float, cov: float = 0.0, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """(noisy, clean) images whose sample moments hit the requested values exactly.

    Used to feed the condition checker a stand-in with prescribed statistics.
    """
    rng = np.random.default_rng(seed)
    a = rng.standard_normal(shape)
    b = rng.standard_normal(shape)
    a = (a - a.mean()) / a.std()
    b = b - b.mean()
    b = b - (a * b).mean() * a
    b = b / b.std()
    clean = mean_clean + math.sqrt(var_clean) * a
    # noise = alpha * a + beta * b gives cov(clean, noise) = sqrt(var_clean) * alpha
    alpha = cov / math.sqrt(var_clean)
    beta = math.sqrt(var_noise - alpha * alpha)
    noise = mean_noise + alpha * a + beta * b
    return clean + noise, clean
