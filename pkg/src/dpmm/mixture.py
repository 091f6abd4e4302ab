"""DP Gaussian mixture over the embeddings of all modalities.

The bank holds ``M*K`` diagonal Gaussians stored as ``(M, K, d)`` arrays;
anything that competes across all components (joint density,
responsibilities, stick updates) works in the linear stick order from
:mod:`dpmm.sticks`.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .mathcore import DiagGaussian, diag_gauss_log_pdf_matrix, log_sum_exp
from .sticks import (
    StickState,
    expected_log_weights,
    from_linear,
    kl_sticks,
    mean_weights,
    to_linear,
)

log = logging.getLogger(__name__)


class DegenerateInputError(ValueError):
    pass


@dataclass
class ComponentBank:
    mu: np.ndarray  # (M, K, d)
    log_var: np.ndarray  # (M, K, d)

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.log_var = np.asarray(self.log_var, dtype=np.float64)
        if self.mu.ndim != 3 or self.mu.shape != self.log_var.shape:
            raise ValueError(f"bank arrays must share an (M, K, d) shape, got {self.mu.shape} and {self.log_var.shape}")

    @classmethod
    def zeros(cls, M: int, K: int, d: int) -> "ComponentBank":
        return cls(np.zeros((M, K, d)), np.zeros((M, K, d)))

    @property
    def M(self) -> int:
        return self.mu.shape[0]

    @property
    def K(self) -> int:
        return self.mu.shape[1]

    @property
    def d(self) -> int:
        return self.mu.shape[2]

    def component(self, m: int, k: int) -> DiagGaussian:
        """0-based access to one component."""
        return DiagGaussian(self.mu[m, k], self.log_var[m, k])

    def linear(self) -> tuple[np.ndarray, np.ndarray]:
        return to_linear(self.mu), to_linear(self.log_var)

    def copy(self) -> "ComponentBank":
        return ComponentBank(self.mu.copy(), self.log_var.copy())


@dataclass
class MixtureState:
    sticks: StickState
    bank: ComponentBank
    lambda_dp: float = 1e-5
    n_total: int = 1

    def __post_init__(self):
        if self.lambda_dp < 0:
            raise ValueError("lambda_dp must be nonnegative")
        if (self.sticks.M, self.sticks.K) != (self.bank.M, self.bank.K):
            raise ValueError("stick state and component bank disagree on (M, K)")

    @classmethod
    def init(cls, M: int, K: int, d: int, eta: float, lambda_dp: float = 1e-5, n_total: int = 1):
        return cls(StickState.prior(eta, M, K), ComponentBank.zeros(M, K, d), lambda_dp, n_total)


# ---------------------------------------------------------------- densities


def component_log_liks(z, bank: ComponentBank) -> np.ndarray:
    """Log density of ``z`` (d,) or (n, d) under each component, linear order."""
    z = np.asarray(z, dtype=np.float64)
    mu, lv = bank.linear()
    if z.shape[-1] != bank.d:
        raise ValueError(f"dimension mismatch: z has {z.shape[-1]}, bank has {bank.d}")
    out = diag_gauss_log_pdf_matrix(np.atleast_2d(z), mu, lv)
    return out[0] if z.ndim == 1 else out


def _log_weights(pi) -> np.ndarray:
    pi = np.asarray(pi, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return np.log(pi)


def joint_log_density(z, pi, bank: ComponentBank):
    """log sum_r pi_r N(z; mu_r, Sigma_r) over all M*K components."""
    ll = component_log_liks(z, bank)
    a = _log_weights(pi) + ll
    if a.ndim == 1:
        return log_sum_exp(a)
    return log_sum_exp(a, axis=1)


def modality_log_weights(pi, m: int, M: int) -> np.ndarray:
    """Within-modality renormalized log weights for 0-based modality ``m``."""
    w = from_linear(np.asarray(pi, dtype=np.float64), M)[m]
    total = w.sum()
    if not total > 0:
        raise DegenerateInputError(f"modality {m} carries no mixture weight")
    return _log_weights(w / total)


def marginal_log_density(z, m: int, state: MixtureState, pi=None):
    """Log density of the renormalized K-mixture of 0-based modality ``m``."""
    if not 0 <= m < state.bank.M:
        raise ValueError(f"modality {m} out of range")
    pi = mean_weights(state.sticks) if pi is None else pi
    logw = modality_log_weights(pi, m, state.bank.M)
    z = np.asarray(z, dtype=np.float64)
    ll = diag_gauss_log_pdf_matrix(np.atleast_2d(z), state.bank.mu[m], state.bank.log_var[m])
    out = log_sum_exp(logw[None, :] + ll, axis=1)
    return float(out[0]) if z.ndim == 1 else out


# ---------------------------------------------------------------- variational updates


def responsibilities(z, state: MixtureState, elog_pi=None) -> np.ndarray:
    """Normalized responsibilities over all M*K components for rows of ``z``.

    ``z`` is (n, d). The entropy of the component-conditional factor is a
    constant for deterministic encoders and drops out in normalization.
    """
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if z.shape[0] == 0:
        raise ValueError("responsibilities of an empty batch")
    elog_pi = expected_log_weights(state.sticks) if elog_pi is None else elog_pi
    a = elog_pi[None, :] + component_log_liks(z, state.bank)
    m = a.max(axis=1, keepdims=True)
    if np.any(~np.isfinite(m)):
        raise DegenerateInputError("every component assigns -inf log-likelihood to some row")
    phi = np.exp(a - m)
    phi /= phi.sum(axis=1, keepdims=True)
    return phi


def update_gamma(phi, state: MixtureState, batch_size: int | None = None, step: float = 1.0) -> StickState:
    """Blend the sticks toward the batch-scaled closed-form update.

    Targets are ``1 + (n/B) sum_i phi_ir`` and
    ``eta + (n/B) sum_i sum_{s>r} phi_is``; with ``step=1`` on the full data
    they are returned as-is.
    """
    if not 0.0 < step <= 1.0:
        raise ValueError(f"step must lie in (0, 1], got {step}")
    phi = np.atleast_2d(np.asarray(phi, dtype=np.float64))
    B = phi.shape[0] if batch_size is None else batch_size
    if B < 1:
        raise ValueError("batch_size must be >= 1")
    s = state.sticks
    scale_ = state.n_total / B
    counts = phi.sum(axis=0)
    tail = np.concatenate([np.cumsum(counts[::-1])[::-1][1:], [0.0]])
    g1_hat = 1.0 + scale_ * counts
    g2_hat = s.eta + scale_ * tail
    g1 = (1.0 - step) * s.gamma1 + step * g1_hat
    g2 = (1.0 - step) * s.gamma2 + step * g2_hat
    return replace(s, gamma1=g1, gamma2=g2)


# ---------------------------------------------------------------- losses


def dp_loss_tape(tape: ad.Tape, z, observed, mu, log_var, log_pi, kl_term: float, n_total: int) -> ad.Tensor:
    """Differentiable DP regularizer.

    ``z`` is an (N, d) tensor of embeddings, ``observed`` a boolean mask,
    ``mu``/``log_var`` (M, K, d) tensors and ``log_pi`` the linear-order log
    weights (array or tensor). Returns
    ``(1/N) sum_{observed} -log F(z_i) + kl_term / n_total``.
    """
    z = ad.as_tensor(z)
    observed = np.asarray(observed, dtype=bool)
    N = z.shape[0]
    if N == 0:
        raise ValueError("dp_loss of an empty batch")
    const = kl_term / n_total
    rows = np.flatnonzero(observed)
    if rows.size == 0:
        return ad.Tensor(const)
    M, K, d = mu.shape
    mu_lin = ad.reshape(tape, ad.swapaxes(tape, mu, 0, 1), (M * K, d))
    lv_lin = ad.reshape(tape, ad.swapaxes(tape, log_var, 0, 1), (M * K, d))
    zo = ad.take(tape, z, rows) if rows.size < N else z
    ll = ad.gauss_log_pdf(tape, zo, mu_lin, lv_lin)
    joint = ad.logsumexp(tape, ad.add(tape, ll, log_pi), axis=1)
    nll = ad.scale(tape, ad.sum_(tape, joint), -1.0 / N)
    return ad.add(tape, nll, const)


def dp_loss(z, observed, state: MixtureState, pi=None) -> float:
    """Mean negative joint log density of observed embeddings plus KL(sticks)/n."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    pi = mean_weights(state.sticks) if pi is None else pi
    tape = ad.Tape()
    out = dp_loss_tape(tape, z, observed, state.bank.mu, state.bank.log_var,
                       _log_weights(pi), kl_sticks(state.sticks), state.n_total)
    return float(out.value)


def elbo(z, observed, state: MixtureState, task_loss: float) -> float:
    """Negative of the training objective ``task + lambda_DP * dp_loss``."""
    if not np.isfinite(task_loss):
        raise ValueError("task_loss must be finite")
    if state.lambda_dp == 0:
        return -float(task_loss)
    return -(float(task_loss) + state.lambda_dp * dp_loss(z, observed, state))


def surrogate_objective(z, state: MixtureState) -> float:
    """Collapsed mean-field bound tracked by coordinate ascent.

    ``sum_i log sum_r exp(E[log pi_r] + log N(z_i | r)) - KL(q(beta) || p(beta))``,
    the KL including the last stick because E[log pi] treats it as a Beta
    factor. With the Gaussians fixed, alternating :func:`responsibilities`
    and a full-batch :func:`update_gamma` never decreases it.
    """
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    a = expected_log_weights(state.sticks)[None, :] + component_log_liks(z, state.bank)
    return float(np.sum(log_sum_exp(a, axis=1)) - kl_sticks(state.sticks, include_last=True))


# ---------------------------------------------------------------- sampling


def sample_marginal(m: int, state: MixtureState, tau: float, rng: np.random.Generator, hard: bool = True,
                    pi=None, size: int | None = None):
    """Gradient-preserving draw from the marginal mixture of modality ``m``.

    Returns ``(z, soft_weights)``; with ``size`` both gain a leading batch
    axis. Component selection is a Gumbel-softmax over the renormalized
    within-modality log weights.
    """
    if not tau > 0:
        raise ValueError("temperature must be positive")
    pi = mean_weights(state.sticks) if pi is None else pi
    logw = modality_log_weights(pi, m, state.bank.M)
    n = 1 if size is None else size
    K, d = state.bank.K, state.bank.d
    g = ad.sample_gumbel(rng, (n, K))
    eps = rng.standard_normal((n, K, d))
    z, soft = gps_tape(ad.Tape(), logw, state.bank.mu[m], state.bank.log_var[m], tau, g, eps, hard)
    if size is None:
        return z.value[0], soft[0]
    return z.value, soft


def gps_tape(tape: ad.Tape, logits, mu_m, log_var_m, tau: float, gumbel, eps, hard: bool = True):
    """Tape version of the marginal draw for fixed noise.

    ``logits`` (K,) or (n, K); ``mu_m``/``log_var_m`` (K, d); ``gumbel``
    (n, K); ``eps`` (n, K, d). Returns the (n, d) draw and the soft weights.
    """
    n, K = gumbel.shape
    logits = ad.as_tensor(logits)
    if logits.value.ndim == 1:
        logits = ad.add(tape, ad.Tensor(np.zeros((n, K))), logits)
    sel = ad.gumbel_softmax(tape, logits, tau, gumbel, hard=hard)
    a = (logits.value + gumbel) / tau
    soft = np.exp(a - a.max(axis=1, keepdims=True))
    soft /= soft.sum(axis=1, keepdims=True)
    comps = ad.reparam_sample(tape, mu_m, log_var_m, eps)
    return ad.mix_components(tape, sel, comps), soft


# ---------------------------------------------------------------- standalone fitting


@dataclass
class MixtureFit:
    state: MixtureState
    objective: list
    n_iter: int


def fit_mixture(z, K: int, eta: float, rng=None, M: int = 1, max_iter: int = 500, tol: float = 1e-8,
                var_floor: float = 1e-6, init: str = "data", reorder: bool = True) -> MixtureFit:
    """Coordinate-ascent fit of a DP mixture to fixed embeddings.

    Alternates responsibilities, the full-batch stick update and the
    closed-form weighted mean / variance update (the maximizer for point-mass
    Gaussian parameters). Components start at randomly chosen data rows.

    With ``reorder`` the components of each modality are sorted by
    decreasing responsibility mass before every stick update, which keeps
    occupied components at the front of the stick order.
    """
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    n, d = z.shape
    gen = np.random.default_rng(rng)
    R = M * K
    if init == "data":
        mu_lin = z[gen.choice(n, size=R, replace=R > n)]
    else:
        mu_lin = np.zeros((R, d))
    lv_lin = np.tile(np.log(z.var(axis=0) + var_floor), (R, 1))
    state = MixtureState(StickState.prior(eta, M, K),
                         ComponentBank(from_linear(mu_lin, M), from_linear(lv_lin, M)), n_total=n)
    history = [surrogate_objective(z, state)]
    it = 0
    for it in range(1, max_iter + 1):
        phi = responsibilities(z, state)
        mu_lin, lv_lin = state.bank.linear()
        mu_lin, lv_lin = mu_lin.copy(), lv_lin.copy()
        if reorder:
            perm = _mass_order(phi.sum(axis=0), M)
            phi, mu_lin, lv_lin = phi[:, perm], mu_lin[perm], lv_lin[perm]
        sticks = update_gamma(phi, state, batch_size=n, step=1.0)
        nk = phi.sum(axis=0)
        live = nk > 1e-10
        mu_lin[live] = (phi[:, live].T @ z) / nk[live, None]
        sq = phi[:, live].T @ (z * z) / nk[live, None] - mu_lin[live] ** 2
        lv_lin[live] = np.log(np.maximum(sq, var_floor))
        state = replace(state, sticks=sticks,
                        bank=ComponentBank(from_linear(mu_lin, M), from_linear(lv_lin, M)))
        history.append(surrogate_objective(z, state))
        if abs(history[-1] - history[-2]) <= tol * max(1.0, abs(history[-1])):
            break
    return MixtureFit(state, history, it)


def _mass_order(nk, M: int) -> np.ndarray:
    """Permutation of linear positions sorting each modality's components by mass."""
    blocks = from_linear(np.arange(nk.size), M)
    mass = from_linear(nk, M)
    order = np.argsort(-mass, axis=1, kind="stable")
    return to_linear(np.take_along_axis(blocks, order, axis=1))
