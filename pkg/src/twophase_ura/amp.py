"""Hybrid AMP decoder for ``Y = S X + Xi`` with one-hot rows.

The weak (dense) part of the factor graph is handled by GAMP updates with an
AWGN output channel; the per-user one-hot constraint is handled exactly through
leave-one-out LLRs that act as the prior on each entry for the next iteration.
The noise variance can be re-estimated by EM after every iteration.

Two schedules are available.  ``"scalar"`` is the plain entrywise form: every
entry carries its own variance and the denoiser uses the LLRs of the previous
iteration as prior.  ``"vector"`` runs the same updates with the full
``2^L x 2^L`` posterior covariance of each user row and refreshes the one-hot
posterior within the iteration, so the Onsager term includes the negative
cross-covariances between sections of a row.  The vector schedule converges
inside the bistable region, where the scalar one oscillates.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
from scipy.special import expit, logsumexp

from .system_model import IndexMatrix, SystemConfig

_VAR_FLOOR = 1e-300


class NumericalFailure(RuntimeError):
    """Raised when an AMP iteration produces a non-finite value."""

    def __init__(self, iteration: int, what: str):
        super().__init__(f"non-finite {what} at AMP iteration {iteration}")
        self.iteration = iteration


@dataclass(frozen=True)
class AmpConfig:
    """Decoder settings.

    ``sigma2_init=None`` starts from ``mean(|Y|^2)``, an over-estimate that is
    a safe starting point for EM.  ``qx_init`` selects the initial posterior
    variance: ``"scaled"`` uses ``eps * rho_k``; ``"variance"`` uses the prior
    variance ``eps (1 - eps) rho_k^2``.
    """

    T_max: int = 200
    eps_stop: float = 1e-8
    sigma2_init: float | None = None
    em_enabled: bool = True
    damping: float = 1.0
    qx_init: str = "scaled"
    schedule: str = "vector"

    def __post_init__(self):
        if self.T_max < 1:
            raise ValueError(f"T_max must be >= 1 (got {self.T_max})")
        if not self.eps_stop > 0:
            raise ValueError(f"eps_stop must be > 0 (got {self.eps_stop})")
        if self.sigma2_init is not None and not self.sigma2_init > 0:
            raise ValueError(f"sigma2_init must be > 0 (got {self.sigma2_init})")
        if not 0 < self.damping <= 1:
            raise ValueError(f"damping must lie in (0, 1] (got {self.damping})")
        if self.qx_init not in ("scaled", "variance"):
            raise ValueError(f"qx_init must be 'scaled' or 'variance' (got {self.qx_init!r})")
        if self.schedule not in ("scalar", "vector"):
            raise ValueError(f"schedule must be 'scalar' or 'vector' (got {self.schedule!r})")


@dataclass(frozen=True)
class AmpState:
    """Decoder state after ``t`` completed iterations.

    Output-side arrays are ``M x 2^L``; input-side arrays are ``K x 2^L``.
    The output-side and ``r`` quantities are ``None`` before the first
    iteration.  ``llr`` holds the logit of ``eps`` and is what the denoiser
    actually consumes, so that ``eps`` saturating at 1.0 loses nothing.
    """

    x_hat: np.ndarray
    Q_x: np.ndarray
    s_hat: np.ndarray
    eps: np.ndarray
    llr: np.ndarray
    sigma2_t: float
    rho: np.ndarray
    t: int = 0
    p_hat: np.ndarray | None = field(default=None, repr=False)
    Q_p: np.ndarray | None = field(default=None, repr=False)
    z_hat: np.ndarray | None = field(default=None, repr=False)
    Q_z: np.ndarray | None = field(default=None, repr=False)
    Q_s: np.ndarray | None = field(default=None, repr=False)
    r_hat: np.ndarray | None = field(default=None, repr=False)
    Q_r: np.ndarray | None = field(default=None, repr=False)
    C_x: np.ndarray | None = field(default=None, repr=False)

    def variances(self) -> dict[str, np.ndarray]:
        names = ("Q_p", "Q_z", "Q_s", "Q_r", "Q_x")
        return {k: getattr(self, k) for k in names if getattr(self, k) is not None}


class Diagnostics(NamedTuple):
    iterations: int
    converged: bool
    sigma2_hat: float
    mse_trace: list[float]
    state: AmpState


class DecoderResult(NamedTuple):
    x_hat: np.ndarray
    Q_x: np.ndarray
    diagnostics: Diagnostics


def _eps_from_llr(llr):
    # keep eps in the open interval even when the logistic saturates
    return np.clip(expit(llr), _VAR_FLOOR, np.nextafter(1.0, 0.0))


def amp_init(config: SystemConfig, amp_config: AmpConfig, Y, S) -> AmpState:
    Y = np.asarray(Y)
    S = np.asarray(S)
    K, n = config.K, config.n_codewords
    if S.shape != (config.M, K) or Y.shape != (config.M, n):
        raise ValueError(
            f"expected S {(config.M, K)} and Y {(config.M, n)}, got {S.shape} and {Y.shape}"
        )
    rho = config.rho_vec[:, None]
    eps0 = 1.0 / n
    eps = np.full((K, n), eps0)
    if amp_config.qx_init == "scaled":
        Q_x = eps * rho
    else:
        Q_x = eps * (1 - eps) * rho**2
    sigma2 = amp_config.sigma2_init
    if sigma2 is None:
        sigma2 = float(np.mean(np.abs(Y) ** 2))
    C_x = None
    if amp_config.schedule == "vector":
        # prior row covariance of a uniform one-hot vector
        C_x = (np.eye(n) / n - 1.0 / n**2) * (rho**2)[:, :, None]
    return AmpState(
        x_hat=np.zeros((K, n)),
        Q_x=Q_x,
        s_hat=np.zeros((config.M, n), dtype=complex),
        eps=eps,
        llr=np.full((K, n), np.log(eps0) - np.log1p(-eps0)),
        sigma2_t=float(sigma2),
        rho=rho,
        C_x=C_x,
    )


def _likelihood_scores(r_hat, Q_r, rho):
    r_hat = np.asarray(r_hat)
    return (np.abs(r_hat) ** 2 - np.abs(r_hat - rho) ** 2) / Q_r


def compute_llr(r_hat, Q_r, rho) -> np.ndarray:
    """Leave-one-out LLRs from the one-hot constraint node.

    ``LLR[k, j] = -log sum_{i != j} exp(u[k, i])`` with
    ``u = (|r|^2 - |r - rho|^2) / Q_r``, evaluated by log-sum-exp.
    """
    rho = np.asarray(rho, dtype=float)
    if rho.ndim == 1:
        rho = rho[:, None]
    u = _likelihood_scores(r_hat, Q_r, rho)
    n = u.shape[-1]
    if n == 1:
        raise ValueError("need at least two sections per row")
    return _loo_llr(u)


def denoise(r_hat, Q_r, eps, rho, *, llr=None) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and variance of each entry under a Bernoulli(eps) prior on {0, rho}.

    Parameters
    ----------
    r_hat, Q_r : array_like
        Pseudo-observations (complex) and their variances, ``K x 2^L``.
    eps : array_like
        Prior probability that the entry equals ``rho_k``.
    rho : array_like
        Per-row amplitude, shape ``(K,)``, ``(K, 1)`` or scalar.
    llr : array_like, optional
        Logit of ``eps``; used instead of ``eps`` when given.

    Returns
    -------
    x_hat, Q_x : ndarray
        ``rho * P`` and ``rho^2 * P (1 - P)`` where ``P`` is the posterior
        probability of the nonzero value.
    """
    rho = np.asarray(rho, dtype=float)
    if rho.ndim == 1:
        rho = rho[:, None]
    if llr is None:
        eps = np.asarray(eps, dtype=float)
        llr = np.log(eps) - np.log1p(-eps)
    a = _likelihood_scores(r_hat, Q_r, rho) + llr
    p = expit(a)
    x_hat = rho * p
    Q_x = np.maximum(rho**2 * p * expit(-a), _VAR_FLOOR)
    return x_hat, Q_x


def em_noise_update(Y, z_hat, Q_z) -> float:
    """M-step noise variance: mean of ``|y - z_hat|^2 + Q_z``."""
    Y = np.asarray(Y)
    return float(np.mean(np.abs(Y - z_hat) ** 2 + Q_z))


def amp_iteration(state: AmpState, Y, S, *, damping: float = 1.0) -> AmpState:
    """One pass of the GAMP updates, the denoiser and the LLR refresh."""
    Y = np.asarray(Y)
    S = np.asarray(S)
    S2 = np.abs(S) ** 2
    sigma2 = state.sigma2_t
    t = state.t + 1

    Q_p = S2 @ state.Q_x
    p_hat = S @ state.x_hat - Q_p * state.s_hat
    denom = Q_p + sigma2
    Q_z = Q_p * sigma2 / denom
    z_hat = (Y * Q_p + p_hat * sigma2) / denom
    # (1 - Q_z/Q_p)/Q_p and (z - p)/Q_p written without the cancellation
    Q_s = 1.0 / denom
    s_hat = (Y - p_hat) / denom
    if damping < 1:
        s_hat = damping * s_hat + (1 - damping) * state.s_hat

    Q_r = 1.0 / (S2.T @ Q_s)
    r_hat = state.x_hat + Q_r * (S.conj().T @ s_hat)

    x_hat, Q_x = denoise(r_hat, Q_r, state.eps, state.rho, llr=state.llr)
    if damping < 1:
        x_hat = damping * x_hat + (1 - damping) * state.x_hat
    llr = compute_llr(r_hat, Q_r, state.rho)

    for name, arr in (("r_hat", r_hat), ("x_hat", x_hat), ("Q_r", Q_r), ("p_hat", p_hat)):
        if not np.all(np.isfinite(arr)):
            raise NumericalFailure(t, name)

    return replace(
        state,
        t=t,
        x_hat=x_hat,
        Q_x=Q_x,
        s_hat=s_hat,
        llr=llr,
        eps=_eps_from_llr(llr),
        p_hat=p_hat,
        Q_p=Q_p,
        z_hat=z_hat,
        Q_z=Q_z,
        Q_s=Q_s,
        r_hat=r_hat,
        Q_r=Q_r,
    )


def row_log_weights(r_hat, Qr_inv, rho) -> np.ndarray:
    """Log-likelihood of each one-hot hypothesis ``rho_k e_i`` relative to zero.

    ``r_hat`` is ``K x n`` and ``Qr_inv`` is the ``K x n x n`` (real) precision
    of the pseudo-observation noise.  Reduces to ``(|r|^2 - |r - rho|^2)/Q_r``
    when the precision is diagonal.
    """
    rho = np.asarray(rho, dtype=float).reshape(-1, 1)
    proj = _bmv(Qr_inv, np.real(r_hat))
    return 2 * rho * proj - rho**2 * np.diagonal(Qr_inv, axis1=1, axis2=2)


def _bmv(A, x):
    # batched matrix-vector product A[b] @ x[b]
    return np.matmul(A, x[..., None])[..., 0]


def _loo_llr(u):
    """``-log sum_{i != j} exp(u_i)`` for every ``j`` in O(n) per row.

    For entries below the row maximum the total is reduced with ``log1p``,
    which is well conditioned because the removed term is at most half of
    the total; the maximum's own value is summed directly.
    """
    u = np.asarray(u, dtype=float)
    total = logsumexp(u, axis=-1, keepdims=True)
    with np.errstate(divide="ignore"):
        rest = total + np.log1p(-np.exp(u - total))
    top = np.argmax(u, axis=-1)[..., None]
    masked = u.copy()
    np.put_along_axis(masked, top, -np.inf, axis=-1)
    np.put_along_axis(rest, top, logsumexp(masked, axis=-1, keepdims=True), axis=-1)
    return -rest


def vector_iteration(state: AmpState, Y, S, *, damping: float = 1.0) -> AmpState:
    """GAMP pass that keeps the full posterior covariance of every user row.

    The diagonal fields of the returned state (``Q_p``, ``Q_r``, ...) are the
    diagonals of the corresponding matrices.
    """
    Y = np.asarray(Y)
    S = np.asarray(S)
    S2 = np.abs(S) ** 2
    sigma2 = state.sigma2_t
    t = state.t + 1
    n = Y.shape[1]
    eye = np.eye(n)

    M, K = S.shape
    C_p = (S2 @ state.C_x.reshape(K, n * n)).reshape(M, n, n)
    p_hat = S @ state.x_hat - _bmv(C_p, state.s_hat)
    A = np.linalg.inv(C_p + sigma2 * eye)
    s_hat = _bmv(A, Y - p_hat)
    z_hat = p_hat + _bmv(C_p, s_hat)
    C_z = C_p - C_p @ A @ C_p
    if damping < 1:
        s_hat = damping * s_hat + (1 - damping) * state.s_hat

    Qr_inv = (S2.T @ A.reshape(M, n * n)).reshape(K, n, n)
    C_r = np.linalg.inv(Qr_inv)
    r_hat = state.x_hat + _bmv(C_r, S.conj().T @ s_hat)

    u = row_log_weights(r_hat, Qr_inv, state.rho)
    P = np.exp(u - logsumexp(u, axis=1, keepdims=True))
    rho = state.rho
    x_hat = rho * P
    C_x = (rho**2)[:, :, None] * (P[:, :, None] * eye - P[:, :, None] * P[:, None, :])
    if damping < 1:
        x_hat = damping * x_hat + (1 - damping) * state.x_hat
    llr = _loo_llr(u)

    for name, arr in (("r_hat", r_hat), ("x_hat", x_hat), ("Q_r", C_r), ("p_hat", p_hat)):
        if not np.all(np.isfinite(arr)):
            raise NumericalFailure(t, name)

    diag = lambda a: np.diagonal(a, axis1=1, axis2=2).copy()
    return replace(
        state,
        t=t,
        x_hat=x_hat,
        Q_x=np.maximum(diag(C_x), _VAR_FLOOR),
        C_x=C_x,
        s_hat=s_hat,
        llr=llr,
        eps=_eps_from_llr(llr),
        p_hat=p_hat,
        Q_p=diag(C_p),
        z_hat=z_hat,
        Q_z=diag(C_z),
        Q_s=diag(A),
        r_hat=r_hat,
        Q_r=diag(C_r),
    )


def run_decoder(
    config: SystemConfig, amp_config: AmpConfig, Y, S, truth=None
) -> DecoderResult:
    """Iterate until the relative change of ``x_hat`` drops below ``eps_stop``.

    Non-convergence within ``T_max`` iterations is reported through
    ``diagnostics.converged`` and is not an error.  When ``truth`` (an
    ``IndexMatrix`` or array) is given, the per-iteration MSE is recorded.
    """
    Y = np.asarray(Y)
    S = np.asarray(S)
    X_true = None if truth is None else np.asarray(getattr(truth, "entries", truth))
    state = amp_init(config, amp_config, Y, S)
    sigma2_floor = 1e-12 * max(float(np.mean(np.abs(Y) ** 2)), _VAR_FLOOR)
    trace: list[float] = []
    converged = False
    step = vector_iteration if amp_config.schedule == "vector" else amp_iteration
    while state.t < amp_config.T_max:
        prev = state.x_hat
        state = step(state, Y, S, damping=amp_config.damping)
        if amp_config.em_enabled:
            sigma2 = max(em_noise_update(Y, state.z_hat, state.Q_z), sigma2_floor)
            state = replace(state, sigma2_t=sigma2)
        if X_true is not None:
            trace.append(float(np.sum((state.x_hat - X_true) ** 2) / config.K))
        change = np.sum((state.x_hat - prev) ** 2)
        if change <= amp_config.eps_stop * np.sum(state.x_hat**2):
            converged = True
            break
    diag = Diagnostics(state.t, converged, state.sigma2_t, trace, state)
    return DecoderResult(state.x_hat, state.Q_x, diag)


def map_threshold(x_hat, rho) -> IndexMatrix:
    """Keep only the per-row maximum (first index on ties), set to ``rho_k``."""
    x_hat = np.asarray(x_hat)
    support = np.argmax(x_hat, axis=1)
    return_rho = np.broadcast_to(np.asarray(rho, dtype=float).reshape(-1), (x_hat.shape[0],))
    X = np.zeros(x_hat.shape)
    X[np.arange(x_hat.shape[0]), support] = return_rho
    return IndexMatrix(X, support)
