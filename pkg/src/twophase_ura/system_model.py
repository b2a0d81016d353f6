"""Second-phase signal model: messages, index matrices, channels, despreading, metrics.

Conventions
-----------
* ``CN(0, v)`` is circular: real and imaginary parts are independent with
  variance ``v / 2`` each.
* Channel signatures ``S`` are ``M x K`` with i.i.d. ``CN(0, 1/M)`` entries, so
  ``E||s_k||^2 = 1``.
* A sub-block is described by the equivalent (despread) model
  ``Y = S X + Xi`` with ``Y`` of shape ``M x 2^L``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .rng import complex_normal


@dataclass(frozen=True)
class SystemConfig:
    """Scheme and channel parameters.

    ``sigma2`` is the per-element complex noise variance of the despread
    second-phase model; ``csi_error_var`` is the per-element variance of the
    channel-estimate error in units of the ``1/M`` channel normalization.
    """

    K: int
    M: int
    L: int
    B: int = 100
    L0: int = 16
    n: int = 500
    sigma2: float = 0.01
    csi_error_var: float = 0.0
    rho: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.K < 1 or self.M < 1 or self.L < 1:
            raise ValueError(f"K, M, L must be >= 1 (got K={self.K}, M={self.M}, L={self.L})")
        if self.B < self.L0 or self.L0 < 0:
            raise ValueError(f"need 0 <= L0 <= B (got L0={self.L0}, B={self.B})")
        if (self.B - self.L0) % self.L != 0:
            raise ValueError(f"B - L0 = {self.B - self.L0} is not divisible by L = {self.L}")
        if self.n < 1:
            raise ValueError(f"n must be >= 1 (got {self.n})")
        if not self.sigma2 > 0:
            raise ValueError(f"sigma2 must be > 0 (got {self.sigma2})")
        if self.csi_error_var < 0:
            raise ValueError(f"csi_error_var must be >= 0 (got {self.csi_error_var})")
        if self.rho is not None:
            rho = tuple(float(r) for r in self.rho)
            if len(rho) != self.K:
                raise ValueError(f"rho has {len(rho)} entries, expected K={self.K}")
            if min(rho) <= 0:
                raise ValueError("all rho_k must be > 0")
            object.__setattr__(self, "rho", rho)

    @property
    def J_minus_1(self) -> int:
        return (self.B - self.L0) // self.L

    @property
    def n_codewords(self) -> int:
        return 2**self.L

    @property
    def alpha(self) -> float:
        return self.M / self.K

    @property
    def rho_vec(self) -> np.ndarray:
        if self.rho is None:
            return np.ones(self.K)
        return np.asarray(self.rho, dtype=float)


@dataclass(frozen=True)
class IndexMatrix:
    """``K x 2^L`` matrix with a single nonzero ``rho_k`` in row ``k``."""

    entries: np.ndarray
    row_support: np.ndarray

    def __post_init__(self):
        entries = np.asarray(self.entries, dtype=float)
        support = np.asarray(self.row_support, dtype=np.int64)
        if entries.ndim != 2 or support.shape != (entries.shape[0],):
            raise ValueError("entries must be K x 2^L and row_support a length-K vector")
        k = np.arange(entries.shape[0])
        if np.any(support < 0) or np.any(support >= entries.shape[1]):
            raise ValueError("row_support index out of range")
        if np.any(entries[k, support] <= 0):
            raise ValueError("supported entries must be positive")
        if np.any(np.count_nonzero(entries, axis=1) != 1):
            raise ValueError("each row must have exactly one nonzero entry")
        entries.setflags(write=False)
        support.setflags(write=False)
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "row_support", support)

    @property
    def shape(self) -> tuple[int, int]:
        return self.entries.shape


@dataclass(frozen=True)
class ChannelMatrix:
    S: np.ndarray
    estimated: bool = False


@dataclass(frozen=True)
class ReceivedBlock:
    Y: np.ndarray
    raw: np.ndarray | None = field(default=None, repr=False)


@dataclass(frozen=True)
class Metrics:
    pe: float
    mse: float
    spectral_efficiency: float


def sample_messages(config: SystemConfig, rng: np.random.Generator) -> np.ndarray:
    """Uniform sub-block messages, shape ``K x (J-1)``, values in ``[0, 2^L)``."""
    return rng.integers(0, config.n_codewords, size=(config.K, config.J_minus_1))


def build_index_matrix(messages, rho, L: int) -> IndexMatrix:
    """Place ``rho_k`` at column ``messages[k]`` of row ``k``.

    Several users may choose the same column; collisions are kept as is.
    """
    messages = np.asarray(messages, dtype=np.int64)
    if messages.ndim != 1:
        raise ValueError("messages must be a 1-D vector of per-user indices")
    n_cols = 2**L
    if np.any(messages < 0) or np.any(messages >= n_cols):
        raise ValueError(f"message indices must lie in [0, {n_cols})")
    rho = np.broadcast_to(np.asarray(rho, dtype=float), messages.shape)
    X = np.zeros((messages.size, n_cols))
    X[np.arange(messages.size), messages] = rho
    return IndexMatrix(X, messages)


def sample_channel(config: SystemConfig, rng: np.random.Generator) -> ChannelMatrix:
    return ChannelMatrix(complex_normal(rng, (config.M, config.K), 1.0 / config.M))


def inject_csi_error(
    channel: ChannelMatrix, csi_error_var: float, rng: np.random.Generator
) -> ChannelMatrix:
    """Estimated channel ``S + W`` with ``W ~ CN(0, csi_error_var / M)`` per element."""
    if csi_error_var < 0:
        raise ValueError(f"csi_error_var must be >= 0 (got {csi_error_var})")
    S = np.asarray(channel.S)
    if csi_error_var == 0:
        return ChannelMatrix(S.copy(), estimated=True)
    W = complex_normal(rng, S.shape, csi_error_var / S.shape[0])
    return ChannelMatrix(S + W, estimated=True)


def orthonormal_codebook(L: int) -> np.ndarray:
    """Unitary DFT codebook ``C`` (``2^L x 2^L``, ``C^H C = I``)."""
    n = 2**L
    return np.fft.fft(np.eye(n)) / np.sqrt(n)


def despread(raw: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """Map a raw ``T x M`` block to the equivalent ``M x 2^L`` model."""
    return (codebook.conj().T @ raw).T


def transmit_and_despread(
    X,
    S: np.ndarray,
    sigma2: float,
    rng: np.random.Generator,
    *,
    keep_raw: bool = False,
) -> ReceivedBlock:
    """Form ``Y = S X + Xi`` with ``Xi ~ CN(0, sigma2)`` i.i.d.

    With ``keep_raw`` the block is instead generated in the spread domain
    (``raw = C (S X)^T + noise`` with a unitary DFT codebook) and despread,
    which has the same distribution but consumes the random stream differently.
    """
    X = np.asarray(getattr(X, "entries", X))
    S = np.asarray(S)
    if S.ndim != 2 or X.ndim != 2 or S.shape[1] != X.shape[0]:
        raise ValueError(f"dimension mismatch: S is {S.shape}, X is {X.shape}")
    if sigma2 < 0:
        raise ValueError(f"sigma2 must be >= 0 (got {sigma2})")
    M, n = S.shape[0], X.shape[1]
    clean = S @ X
    if keep_raw:
        L = int(round(np.log2(n)))
        if 2**L != n:
            raise ValueError("raw path requires 2^L columns")
        C = orthonormal_codebook(L)
        raw = C @ clean.T
        if sigma2 > 0:
            raw = raw + complex_normal(rng, raw.shape, sigma2)
        return ReceivedBlock(despread(raw, C), raw)
    if sigma2 == 0:
        return ReceivedBlock(clean.astype(complex))
    return ReceivedBlock(clean + complex_normal(rng, (M, n), sigma2))


def per_user_error(decoded: Sequence[IndexMatrix], truth: Sequence[IndexMatrix]) -> float:
    """Fraction of users with at least one wrong sub-block.

    Row ``k`` of every block belongs to the user with channel column ``k``.
    """
    if len(decoded) != len(truth):
        raise ValueError(f"got {len(decoded)} decoded blocks for {len(truth)} true blocks")
    if not truth:
        return 0.0
    K = truth[0].shape[0]
    wrong = np.zeros(K, dtype=bool)
    for dec, tru in zip(decoded, truth):
        if dec.shape != tru.shape or tru.shape[0] != K:
            raise ValueError(f"block shape mismatch: {dec.shape} vs {tru.shape}")
        wrong |= np.any(dec.entries != tru.entries, axis=1)
    return float(wrong.mean())


def mse(X_hat, X) -> float:
    """``(1/K) sum_k ||x_k - x_hat_k||^2``."""
    X_hat = np.asarray(getattr(X_hat, "entries", X_hat))
    X = np.asarray(getattr(X, "entries", X))
    if X_hat.shape != X.shape:
        raise ValueError(f"shape mismatch: {X_hat.shape} vs {X.shape}")
    return float(np.sum(np.abs(X - X_hat) ** 2) / X.shape[0])


def spectral_efficiency(config: SystemConfig) -> float:
    """Total bits per channel use, ``K B / (n + (B - L0) 2^L / L)``."""
    uses = config.n + (config.B - config.L0) * config.n_codewords / config.L
    return config.K * config.B / uses
