"""Replica-symmetric performance prediction for the one-hot MMV problem.

Under the symmetric ansatz the free entropy depends on one scalar ``d`` with
error matrix ``E = d I - (d / 2^L) 11^T`` (so ``MSE = trace E = d (2^L - 1)``)
and effective noise ``v = sigma2 + d / alpha`` on the subspace orthogonal to
the all-ones vector.  The Gaussian expectation inside the free entropy is
estimated by Monte Carlo with common random numbers across ``d``, drawn in
antithetic pairs.

Two conventions for the Gaussian term are supported:

``"complex"`` (default)
    The expectation is over ``Re(z)`` with ``z ~ CN(0, I)``, equivalently
    ``sqrt(2) * z`` with ``z`` standard real.  This is the Bayes-consistent
    channel for a real one-hot signal seen through complex signatures and
    complex noise, and its stationary points coincide with AMP fixed points.
``"doubled"``
    Coefficient ``2`` on a standard real ``z``.  Kept for comparison; it is
    not a consistent Gaussian channel and produces no bistability.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import logsumexp

from .rng import stream

logger = logging.getLogger(__name__)

_NOISE_COEFF = {"complex": math.sqrt(2.0), "doubled": 2.0}


def default_d_grid(d_max: float = 1.0, points: int = 400, d_min: float = 1e-7) -> np.ndarray:
    return np.geomspace(d_min, d_max, points)


@dataclass(frozen=True)
class ReplicaConfig:
    alpha: float
    sigma2: float
    L: int
    J_minus_1: int = 42
    d_grid: np.ndarray = field(default_factory=default_d_grid, repr=False)
    mc_samples: int = 100_000
    seed: int = 0
    convention: str = "complex"

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be > 0 (got {self.alpha})")
        if not self.sigma2 > 0:
            raise ValueError(f"sigma2 must be > 0 (got {self.sigma2})")
        if self.L < 1:
            raise ValueError(f"L must be >= 1 (got {self.L})")
        if self.J_minus_1 < 0:
            raise ValueError(f"J_minus_1 must be >= 0 (got {self.J_minus_1})")
        grid = np.asarray(self.d_grid, dtype=float)
        if grid.ndim != 1 or grid.size == 0 or np.any(grid <= 0) or np.any(np.diff(grid) <= 0):
            raise ValueError("d_grid must be a nonempty, positive, strictly increasing 1-D array")
        if self.mc_samples < 1000:
            raise ValueError(f"mc_samples must be >= 1000 (got {self.mc_samples})")
        if self.convention not in _NOISE_COEFF:
            raise ValueError(f"convention must be one of {sorted(_NOISE_COEFF)}")
        grid.setflags(write=False)
        object.__setattr__(self, "d_grid", grid)

    @property
    def n(self) -> int:
        return 2**self.L


@dataclass(frozen=True)
class FreeEntropyCurve:
    """Sampled free entropy with its classified extreme points.

    ``points`` is an array of rows ``(d, phi, std_error)``; ``extrema`` is a
    list of ``(d, kind)`` with kind ``"local_max"`` or ``"local_min"``.
    """

    points: np.ndarray
    extrema: list[tuple[float, str]]
    bayes_optimal_d: float
    amp_d: float
    phi_at: dict[float, float] = field(default_factory=dict, repr=False)

    @property
    def maxima(self) -> list[float]:
        return [d for d, kind in self.extrema if kind == "local_max"]

    @property
    def n_local_max(self) -> int:
        return len(self.maxima)


@dataclass(frozen=True)
class EquivalentChannel:
    """Decoupled channel ``r = x + noise`` with covariance built from ``Sigma``.

    ``Sigma = v (I - 11^T/n) + sigma2 11^T/n`` with ``v = sigma2 + d*/alpha``.
    """

    Sigma: np.ndarray
    d_star: float
    sigma2: float
    alpha: float

    @property
    def n(self) -> int:
        return self.Sigma.shape[0]

    @property
    def v(self) -> float:
        return self.sigma2 + self.d_star / self.alpha

    def _spectral(self, f) -> np.ndarray:
        n = self.n
        par = np.full((n, n), 1.0 / n)
        return f(self.v) * (np.eye(n) - par) + f(self.sigma2) * par

    def inverse(self) -> np.ndarray:
        return self._spectral(lambda x: 1.0 / x)

    def sqrt(self) -> np.ndarray:
        return self._spectral(np.sqrt)

    def inv_sqrt(self) -> np.ndarray:
        return self._spectral(lambda x: 1.0 / np.sqrt(x))


@lru_cache(maxsize=16)
def _crn_samples(seed: int, n: int, mc_samples: int) -> np.ndarray:
    # antithetic pairs (z, -z): odd sample moments vanish exactly, otherwise the
    # term c z / sqrt(v) drifts with d and fakes a maximum where phi is flat
    half = stream(seed, "replica", n).standard_normal((mc_samples // 2, n))
    z = np.concatenate([half, -half])
    z.setflags(write=False)
    return z


def _pair_se(values: np.ndarray) -> float:
    """Standard error of the mean of antithetic samples, computed on pair means."""
    h = values.size // 2
    pairs = 0.5 * (values[:h] + values[h:])
    return float(pairs.std(ddof=1) / math.sqrt(h))


def _closed_form_terms(d, alpha, sigma2, n):
    v = sigma2 + d / alpha
    return -(d + n * alpha * sigma2 + 1.0) / v - (n - 1) * alpha * np.log(v)


def eval_free_entropy(d: float, cfg: ReplicaConfig) -> tuple[float, float]:
    """Free entropy at ``d`` and the Monte Carlo standard error of its estimate.

    The same Gaussian samples (addressed by ``cfg.seed``) are reused for every
    ``d``, so differences along a curve carry far less noise than the
    per-point standard error suggests.
    """
    if d < 0:
        raise ValueError(f"d must be >= 0 (got {d})")
    n = cfg.n
    z = _crn_samples(cfg.seed, n, cfg.mc_samples)
    v = cfg.sigma2 + d / cfg.alpha
    expo = (_NOISE_COEFF[cfg.convention] / np.sqrt(v)) * z
    expo[:, 0] += 1.0 / v
    expo[:, 1:] -= 1.0 / v
    lse = logsumexp(expo, axis=1)
    phi = float(_closed_form_terms(d, cfg.alpha, cfg.sigma2, n) + lse.mean())
    return phi, _pair_se(lse)


def _refine(f, lo, mid, hi, maximize):
    # golden-section search in log(d); the grid point ``mid`` brackets the extremum
    sign = -1.0 if maximize else 1.0
    res = minimize_scalar(
        lambda u: sign * f(math.exp(u)),
        bracket=(math.log(lo), math.log(mid), math.log(hi)),
        method="golden",
        options={"xtol": 1e-6},
    )
    u = float(np.clip(res.x, math.log(lo), math.log(hi)))
    return math.exp(u)


def scan_extremes(cfg: ReplicaConfig, *, refine: bool = True) -> FreeEntropyCurve:
    """Locate and classify the local extrema of the free entropy on ``cfg.d_grid``.

    A decrease at the left end of the grid is reported as a maximum at the
    first grid point (the low-MSE solution lies below the grid resolution);
    likewise an increase at the right end is a maximum at ``d_max``, which
    usually means the grid is too short and is logged as a warning.
    """
    grid = cfg.d_grid
    vals = np.array([eval_free_entropy(d, cfg) for d in grid])
    phi, se = vals[:, 0], vals[:, 1]
    points = np.column_stack([grid, phi, se])

    def f(d):
        return eval_free_entropy(d, cfg)[0]

    extrema: list[tuple[float, str]] = []
    if grid.size < 3:
        best = float(grid[np.argmax(phi)])
        return FreeEntropyCurve(points, [(best, "local_max")], best, best)

    dphi = np.diff(phi)
    if dphi[0] < 0:
        extrema.append((float(grid[0]), "local_max"))
    for i in range(1, grid.size - 1):
        left, right = dphi[i - 1], dphi[i]
        if left > 0 and right <= 0:
            kind = "local_max"
        elif left < 0 and right >= 0:
            kind = "local_min"
        else:
            continue
        d = float(grid[i])
        if refine:
            d = _refine(f, grid[i - 1], grid[i], grid[i + 1], kind == "local_max")
        extrema.append((d, kind))
    if dphi[-1] > 0:
        logger.warning("free entropy still increasing at d_max=%g; extend d_grid", grid[-1])
        extrema.append((float(grid[-1]), "local_max"))

    # the symmetric free entropy has at most two maxima; more means MC jitter
    if sum(kind == "local_max" for _, kind in extrema) > 2:
        warnings.warn("d_grid may be too coarse or MC noise too large for stable extrema")

    maxima = [d for d, kind in extrema if kind == "local_max"]
    if not maxima:
        maxima = [float(grid[np.argmax(phi)])]
        extrema.append((maxima[0], "local_max"))
    phi_at = {d: f(d) for d in maxima}
    bayes_d = max(maxima, key=lambda d: phi_at[d])
    amp_d = max(maxima)
    extrema.sort()
    return FreeEntropyCurve(points, extrema, bayes_d, amp_d, phi_at)


def mmse_from_d(d_star: float, L: int) -> tuple[np.ndarray, float]:
    """Error matrix ``d I - (d/2^L) 11^T`` and its trace ``d (2^L - 1)``."""
    if d_star < 0:
        raise ValueError(f"d_star must be >= 0 (got {d_star})")
    n = 2**L
    E = d_star * np.eye(n) - (d_star / n) * np.ones((n, n))
    return E, d_star * (n - 1)


def equivalent_channel(d_star: float, sigma2: float, alpha: float, L: int) -> EquivalentChannel:
    E, _ = mmse_from_d(d_star, L)
    Sigma = sigma2 * np.eye(2**L) + E / alpha
    return EquivalentChannel(Sigma, float(d_star), float(sigma2), float(alpha))


def _precision(Sigma):
    if isinstance(Sigma, EquivalentChannel):
        return Sigma.inverse()
    Sigma = np.asarray(Sigma, dtype=float)
    try:
        chol = np.linalg.cholesky(Sigma)
    except np.linalg.LinAlgError as exc:
        raise ValueError("Sigma must be symmetric positive definite") from exc
    inv_chol = np.linalg.inv(chol)
    return inv_chol.T @ inv_chol


def eta_log_weights(r, Sigma, rho: float = 1.0) -> np.ndarray:
    """Unnormalized log posterior weights of the one-hot atoms ``rho e_i``.

    Equal to ``-(rho e_i - r)^T Sigma^{-1} (rho e_i - r)`` up to a term that
    does not depend on ``i``.
    """
    P = _precision(Sigma)
    r = np.asarray(r, dtype=float)
    return 2.0 * rho * (r @ P) - rho**2 * np.diag(P)


def eta_denoiser(r, Sigma, rho: float = 1.0) -> np.ndarray:
    """Posterior mean of the one-hot vector given ``r``; works on batches of rows."""
    logw = eta_log_weights(r, Sigma, rho)
    w = np.exp(logw - logsumexp(logw, axis=-1, keepdims=True))
    return rho * w


def section_error_probability(d_star: float, cfg: ReplicaConfig) -> tuple[float, float]:
    """Probability that MAP on the equivalent channel misses the true atom, with its MC error."""
    if d_star < 0:
        raise ValueError(f"d_star must be >= 0 (got {d_star})")
    ch = equivalent_channel(d_star, cfg.sigma2, cfg.alpha, cfg.L)
    z = _crn_samples(cfg.seed + 1, cfg.n, cfg.mc_samples)
    scale = _NOISE_COEFF[cfg.convention] / 2.0
    r = scale * (z @ ch.sqrt())
    r[:, 0] += 1.0
    eta = eta_denoiser(r, ch)
    wrong = np.any(eta[:, 1:] > eta[:, :1], axis=1)
    return float(wrong.mean()), _pair_se(wrong.astype(float))


def predict_pe(d_star: float, cfg: ReplicaConfig) -> float:
    """Per-user error probability over ``J - 1`` independent sub-blocks."""
    if cfg.J_minus_1 == 0:
        return 0.0
    p_sec, _ = section_error_probability(d_star, cfg)
    return float(1.0 - (1.0 - p_sec) ** cfg.J_minus_1)


def free_entropy_matrix(E, cfg: ReplicaConfig) -> float:
    """Free entropy for a general symmetric error matrix ``E`` (diagnostic only).

    Evaluated with ``C = I / 2^L`` and an exact average over the true atom.
    At ``E = d I - (d/2^L) 11^T`` it equals
    ``eval_free_entropy(d) - alpha log(sigma2) - log(2^L)`` under the
    ``"complex"`` convention.
    """
    n = cfg.n
    E = np.asarray(E, dtype=float)
    Sigma = cfg.sigma2 * np.eye(n) + E / cfg.alpha
    w, V = np.linalg.eigh(Sigma)
    if np.any(w <= 0):
        raise ValueError("sigma2 I + E/alpha must be positive definite")
    P = (V / w) @ V.T
    P_half = (V / np.sqrt(w)) @ V.T
    C = np.eye(n) / n
    closed = -np.trace(P @ (cfg.alpha * cfg.sigma2 * np.eye(n) + C)) - cfg.alpha * np.sum(np.log(w))
    z = _crn_samples(cfg.seed, n, cfg.mc_samples)
    noise = _NOISE_COEFF[cfg.convention] * (z @ P_half)
    total = 0.0
    for j in range(n):
        expo = 2.0 * P[:, j] - np.diag(P) + noise
        total += float(np.mean(logsumexp(expo, axis=1))) - math.log(n)
    return float(closed + total / n)
