"""Truncated multimodal stick-breaking.

The M*K sticks are laid out k-major, m-minor: the stick of modality m and
mixture index k sits at linear position ``(k-1)*M + m`` (1-based). Breaking
the sticks in that order reproduces the double product of the multimodal
weight formula: position r keeps ``beta_r`` of whatever the earlier
positions left over.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mathcore import digamma, kl_beta_vec


def linear_index(m: int, k: int, M: int, K: int | None = None) -> int:
    """1-based linear position of component (m, k)."""
    if not 1 <= m <= M or k < 1 or (K is not None and k > K):
        raise ValueError(f"component index (m={m}, k={k}) out of range for M={M}, K={K}")
    return (k - 1) * M + m


def component_of(r: int, M: int) -> tuple[int, int]:
    """Inverse of :func:`linear_index`: returns 1-based (m, k)."""
    if r < 1:
        raise ValueError(f"linear position must be >= 1, got {r}")
    return (r - 1) % M + 1, (r - 1) // M + 1


def to_linear(arr: np.ndarray) -> np.ndarray:
    """Reorder an (M, K, ...) array into linear (M*K, ...) order."""
    M, K = arr.shape[:2]
    return np.swapaxes(arr, 0, 1).reshape((M * K,) + arr.shape[2:])


def from_linear(arr: np.ndarray, M: int) -> np.ndarray:
    """Inverse of :func:`to_linear`."""
    K = arr.shape[0] // M
    return np.swapaxes(arr.reshape((K, M) + arr.shape[1:]), 0, 1)


@dataclass(frozen=True)
class StickState:
    gamma1: np.ndarray
    gamma2: np.ndarray
    eta: float
    M: int
    K: int

    def __post_init__(self):
        g1 = np.asarray(self.gamma1, dtype=np.float64).reshape(-1)
        g2 = np.asarray(self.gamma2, dtype=np.float64).reshape(-1)
        if g1.size != self.M * self.K or g2.size != self.M * self.K:
            raise ValueError(f"stick vectors must have length M*K={self.M * self.K}")
        if np.any(~(g1 > 0)) or np.any(~(g2 > 0)) or not self.eta > 0:
            raise ValueError("stick shapes and eta must be positive")
        g1.setflags(write=False)
        g2.setflags(write=False)
        object.__setattr__(self, "gamma1", g1)
        object.__setattr__(self, "gamma2", g2)

    @classmethod
    def prior(cls, eta: float, M: int, K: int) -> "StickState":
        n = M * K
        return cls(np.ones(n), np.full(n, float(eta)), float(eta), M, K)

    @property
    def size(self) -> int:
        return self.M * self.K


def weights_from_sticks(beta) -> np.ndarray:
    """Stick proportions (linear order, last entry 1) to mixture weights."""
    beta = np.asarray(beta, dtype=np.float64)
    if beta.ndim == 0 or beta.shape[-1] == 0:
        raise ValueError("need at least one stick")
    if np.any(~((beta > 0) & (beta <= 1))):
        raise ValueError("stick proportions must lie in (0, 1]")
    remaining = np.cumprod(1.0 - beta, axis=-1)
    left = np.concatenate([np.ones(beta.shape[:-1] + (1,)), remaining[..., :-1]], axis=-1)
    return beta * left


def expected_log_sticks(s: StickState) -> tuple[np.ndarray, np.ndarray]:
    """E[log beta] and E[log(1 - beta)] under q(beta_r) = Beta(gamma1_r, gamma2_r)."""
    dsum = digamma(s.gamma1 + s.gamma2)
    return digamma(s.gamma1) - dsum, digamma(s.gamma2) - dsum


def expected_log_weights(s: StickState) -> np.ndarray:
    """E[log pi_r] = E[log beta_r] + sum_{s<r} E[log(1 - beta_s)]."""
    elog, elog1m = expected_log_sticks(s)
    prev = np.concatenate([[0.0], np.cumsum(elog1m)[:-1]])
    return elog + prev


def mean_weights(s: StickState) -> np.ndarray:
    """Plug-in weights from posterior-mean sticks, last stick closed at 1."""
    beta_bar = s.gamma1 / (s.gamma1 + s.gamma2)
    beta_bar[-1] = 1.0
    return weights_from_sticks(beta_bar)


def sample_prior_weights(eta: float, M: int, K: int, rng_seed=None, size: int | None = None) -> np.ndarray:
    """Draw truncated stick-breaking weights with Beta(1, eta) sticks.

    ``size`` draws a (size, M*K) batch; the default returns one vector.
    """
    if not eta > 0:
        raise ValueError("eta must be positive")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    n = M * K
    shape = (n,) if size is None else (size, n)
    beta = rng.beta(1.0, eta, size=shape)
    # Beta(1, eta) underflows to exactly 0 for tiny eta only with probability ~0;
    # guard anyway so weights_from_sticks accepts the draw.
    beta = np.clip(beta, np.finfo(float).tiny, 1.0)
    beta[..., -1] = 1.0
    return weights_from_sticks(beta)


def kl_sticks(s: StickState, include_last: bool = False) -> float:
    """Sum of KL(q(beta_r) || Beta(1, eta)).

    The last stick is deterministic under truncation and is skipped unless
    ``include_last`` is set (used by the coordinate-ascent objective, whose
    expected log weights treat the last stick as a real Beta factor).
    """
    n = s.size if include_last else s.size - 1
    if n <= 0:
        return 0.0
    kl = kl_beta_vec(s.gamma1[:n], s.gamma2[:n], 1.0, s.eta)
    return float(np.sum(kl))
