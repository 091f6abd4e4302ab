"""Special functions, diagonal Gaussians, Beta distributions and their KLs.

Everything here works in float64. Digamma and log-gamma are evaluated with
upward recurrence followed by the asymptotic (Stirling) series so results do
not depend on the platform's libm.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)

# Bernoulli-number coefficients B_2k / (2k) for the digamma series and
# B_2k / (2k (2k-1)) for the log-gamma series, k = 1..8.
_PSI_COEF = (
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
    -3617.0 / 8160.0,
)
_LGAMMA_COEF = (
    1.0 / 12.0,
    -1.0 / 360.0,
    1.0 / 1260.0,
    -1.0 / 1680.0,
    1.0 / 1188.0,
    -691.0 / 360360.0,
    1.0 / 156.0,
    -3617.0 / 122400.0,
)
_SHIFT = 10.0


@dataclass(frozen=True)
class DiagGaussian:
    mu: np.ndarray
    log_var: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64).reshape(-1)
        log_var = np.asarray(self.log_var, dtype=np.float64).reshape(-1)
        if mu.shape != log_var.shape:
            raise ValueError(f"mu has length {mu.size} but log_var has length {log_var.size}")
        if not np.all(np.isfinite(log_var)):
            raise ValueError("log_var must be finite")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "log_var", log_var)

    @property
    def dim(self) -> int:
        return self.mu.size


@dataclass(frozen=True)
class BetaParams:
    a: float
    b: float

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise ValueError(f"Beta shapes must be positive, got ({self.a}, {self.b})")


def log_sum_exp(v, axis=None):
    """Stable ``log(sum(exp(v)))``.

    With ``axis=None`` the input must be a nonempty vector and a float is
    returned; otherwise the reduction runs along ``axis``.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("log_sum_exp of an empty input")
    if axis is None:
        m = v.max()
        if m == -np.inf:
            raise ValueError("log_sum_exp with all entries -inf")
        if v.size == 1:
            return float(v.reshape(-1)[0])
        return float(m + math.log(np.exp(v - m).sum()))
    m = v.max(axis=axis, keepdims=True)
    if np.any(m == -np.inf):
        raise ValueError("log_sum_exp with all entries -inf along a slice")
    out = m + np.log(np.exp(v - m).sum(axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def _as_positive(x, name):
    arr = np.asarray(x, dtype=np.float64)
    if np.any(~(arr > 0)):
        raise ValueError(f"{name} requires positive arguments")
    return arr


def digamma(x):
    """Digamma function for positive real ``x`` (scalar or array)."""
    arr = _as_positive(x, "digamma")
    x = np.array(arr, dtype=np.float64, copy=True)
    acc = np.zeros_like(x)
    small = x < _SHIFT
    while np.any(small):
        acc[small] -= 1.0 / x[small]
        x[small] += 1.0
        small = x < _SHIFT
    inv2 = 1.0 / (x * x)
    series = np.zeros_like(x)
    for c in reversed(_PSI_COEF):
        series = (series + c) * inv2
    out = acc + np.log(x) - 0.5 / x - series
    return float(out) if out.ndim == 0 else out


def log_gamma(x):
    """Natural log of the Gamma function for positive real ``x``."""
    arr = _as_positive(x, "log_gamma")
    x = np.array(arr, dtype=np.float64, copy=True)
    log_prod = np.zeros_like(x)
    small = x < _SHIFT
    while np.any(small):
        log_prod[small] += np.log(x[small])
        x[small] += 1.0
        small = x < _SHIFT
    inv = 1.0 / x
    inv2 = inv * inv
    series = np.zeros_like(x)
    for c in reversed(_LGAMMA_COEF):
        series = series * inv2 + c
    out = (x - 0.5) * np.log(x) - x + 0.5 * LOG_2PI + series * inv - log_prod
    return float(out) if out.ndim == 0 else out


def log_beta_fn(a, b):
    """``ln B(a, b)`` via log-gamma."""
    a = _as_positive(a, "log_beta_fn")
    b = _as_positive(b, "log_beta_fn")
    return log_gamma(a) + log_gamma(b) - log_gamma(a + b)


def _check_dims(z, g: DiagGaussian):
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    if z.size != g.dim:
        raise ValueError(f"dimension mismatch: z has {z.size}, Gaussian has {g.dim}")
    return z


def diag_gauss_log_pdf(z, g: DiagGaussian) -> float:
    z = _check_dims(z, g)
    quad = np.sum((z - g.mu) ** 2 * np.exp(-g.log_var))
    return float(-0.5 * g.dim * LOG_2PI - 0.5 * np.sum(g.log_var) - 0.5 * quad)


def diag_gauss_log_pdf_matrix(z, mu, log_var):
    """Log densities of every row of ``z`` under every component.

    ``z`` is (n, d); ``mu`` and ``log_var`` are (r, d). Returns (n, r).
    """
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    mu = np.atleast_2d(mu)
    log_var = np.atleast_2d(log_var)
    if z.shape[1] != mu.shape[1] or mu.shape != log_var.shape:
        raise ValueError(f"dimension mismatch: z {z.shape}, mu {mu.shape}, log_var {log_var.shape}")
    prec = np.exp(-log_var)
    diff = z[:, None, :] - mu[None, :, :]
    quad = np.einsum("nrd,rd->nr", diff * diff, prec)
    const = -0.5 * mu.shape[1] * LOG_2PI - 0.5 * log_var.sum(axis=1)
    return const[None, :] - 0.5 * quad


def diag_gauss_sample(g: DiagGaussian, eps) -> np.ndarray:
    """Reparameterized draw ``mu + exp(log_var / 2) * eps``."""
    eps = _check_dims(eps, g)
    return g.mu + np.exp(0.5 * g.log_var) * eps


def kl_gauss_diag(q: DiagGaussian, p: DiagGaussian) -> float:
    """KL(q || p) for diagonal-covariance Gaussians."""
    if q.dim != p.dim:
        raise ValueError(f"dimension mismatch: {q.dim} vs {p.dim}")
    ratio = np.exp(q.log_var - p.log_var)
    maha = (p.mu - q.mu) ** 2 * np.exp(-p.log_var)
    return float(0.5 * np.sum(p.log_var - q.log_var - 1.0 + ratio + maha))


def kl_beta(q: BetaParams, p: BetaParams) -> float:
    """KL(q || p) between two Beta distributions."""
    sq = q.a + q.b
    out = (
        log_beta_fn(p.a, p.b)
        - log_beta_fn(q.a, q.b)
        + (q.a - p.a) * digamma(q.a)
        + (q.b - p.b) * digamma(q.b)
        + (p.a - q.a + p.b - q.b) * digamma(sq)
    )
    # rounding can leave a tiny negative value for q == p
    return max(float(out), 0.0)


def kl_beta_vec(a_q, b_q, a_p, b_p):
    """Elementwise Beta KL over arrays of shapes."""
    a_q, b_q = np.asarray(a_q, float), np.asarray(b_q, float)
    a_p, b_p = np.broadcast_to(a_p, a_q.shape), np.broadcast_to(b_p, b_q.shape)
    out = (
        log_beta_fn(a_p, b_p)
        - log_beta_fn(a_q, b_q)
        + (a_q - a_p) * digamma(a_q)
        + (b_q - b_p) * digamma(b_q)
        + (a_p - a_q + b_p - b_q) * digamma(a_q + b_q)
    )
    return np.maximum(out, 0.0)
