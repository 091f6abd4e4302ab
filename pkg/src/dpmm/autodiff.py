"""Minimal reverse-mode differentiation over numpy arrays.

Every primitive takes the active :class:`Tape` first, computes its forward
value eagerly and, when any input needs a gradient, records a closure that
pushes the output gradient back to its inputs. ``Tape.backward`` runs the
closures in exact reverse order of recording.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

BCE_CLAMP = 1e-7


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def _acc(self, g):
        if not self.requires_grad:
            return
        g = np.asarray(g, dtype=np.float64)
        if g.shape != self.value.shape:
            g = _unbroadcast(g, self.value.shape)
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.shape}, name={self.name!r})"


class Param(Tensor):
    """A persistent leaf whose gradient accumulates across a backward pass."""

    __slots__ = ()

    def __init__(self, value, name: str | None = None):
        super().__init__(value, requires_grad=True, name=name)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


class Tape:
    def __init__(self):
        self._ops: list[Callable[[], None]] = []

    def __len__(self):
        return len(self._ops)

    def _emit(self, value, inputs: Sequence[Tensor], backward) -> Tensor:
        out = Tensor(value, requires_grad=any(t.requires_grad for t in inputs))
        if out.requires_grad:
            self._ops.append(lambda: None if out.grad is None else backward(out.grad))
        return out

    def backward(self, out: Tensor, seed=None):
        if not out.requires_grad:
            return
        out.grad = np.ones_like(out.value) if seed is None else np.asarray(seed, dtype=np.float64)
        for fn in reversed(self._ops):
            fn()


# ---------------------------------------------------------------- elementwise


def add(tape: Tape, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        a._acc(g)
        b._acc(g)

    return tape._emit(a.value + b.value, (a, b), bw)


def sub(tape: Tape, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        a._acc(g)
        b._acc(-g)

    return tape._emit(a.value - b.value, (a, b), bw)


def mul(tape: Tape, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        a._acc(g * b.value)
        b._acc(g * a.value)

    return tape._emit(a.value * b.value, (a, b), bw)


def div(tape: Tape, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    y = a.value / b.value

    def bw(g):
        a._acc(g / b.value)
        b._acc(-g * y / b.value)

    return tape._emit(y, (a, b), bw)


def scale(tape: Tape, a, c: float) -> Tensor:
    a = as_tensor(a)
    return tape._emit(a.value * c, (a,), lambda g: a._acc(g * c))


def exp(tape: Tape, a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.value)
    return tape._emit(y, (a,), lambda g: a._acc(g * y))


def log(tape: Tape, a) -> Tensor:
    a = as_tensor(a)
    return tape._emit(np.log(a.value), (a,), lambda g: a._acc(g / a.value))


def sqrt(tape: Tape, a) -> Tensor:
    a = as_tensor(a)
    y = np.sqrt(a.value)
    return tape._emit(y, (a,), lambda g: a._acc(0.5 * g / y))


def square(tape: Tape, a) -> Tensor:
    a = as_tensor(a)
    return tape._emit(a.value**2, (a,), lambda g: a._acc(2.0 * g * a.value))


def tanh_act(tape: Tape, x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.value)
    return tape._emit(y, (x,), lambda g: x._acc(g * (1.0 - y * y)))


def _sigmoid(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid_act(tape: Tape, x) -> Tensor:
    x = as_tensor(x)
    y = _sigmoid(np.atleast_1d(x.value)).reshape(x.shape)
    return tape._emit(y, (x,), lambda g: x._acc(g * y * (1.0 - y)))


# ---------------------------------------------------------------- structural


def sum_(tape: Tape, a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    y = a.value.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._acc(np.broadcast_to(g, a.shape))

    return tape._emit(y, (a,), bw)


def mean(tape: Tape, a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.value.size if axis is None else a.shape[axis]
    return scale(tape, sum_(tape, a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(tape: Tape, a, shape) -> Tensor:
    a = as_tensor(a)
    return tape._emit(a.value.reshape(shape), (a,), lambda g: a._acc(g.reshape(a.shape)))


def swapaxes(tape: Tape, a, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    return tape._emit(np.swapaxes(a.value, i, j), (a,), lambda g: a._acc(np.swapaxes(g, i, j)))


def take(tape: Tape, a, idx, axis: int = 0) -> Tensor:
    """Gather ``a[idx]`` along ``axis`` (idx may be an int or index array)."""
    a = as_tensor(a)
    y = np.take(a.value, idx, axis=axis)

    def bw(g):
        full = np.zeros_like(a.value)
        sl = [slice(None)] * a.value.ndim
        sl[axis] = idx
        np.add.at(full, tuple(sl), g)
        a._acc(full)

    return tape._emit(y, (a,), bw)


def concat(tape: Tape, parts: Sequence, axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            p._acc(np.take(g, np.arange(lo, hi), axis=axis))

    return tape._emit(np.concatenate([p.value for p in parts], axis=axis), parts, bw)


def fill_rows(tape: Tape, a, rows, b=None) -> Tensor:
    """Copy of ``a`` with ``a[rows]`` replaced by ``b`` (zeros when ``b`` is None)."""
    a = as_tensor(a)
    rows = np.asarray(rows, dtype=np.intp)
    y = a.value.copy()
    inputs = [a]
    if b is None:
        y[rows] = 0.0
    else:
        b = as_tensor(b)
        y[rows] = b.value
        inputs.append(b)

    def bw(g):
        ga = g.copy()
        ga[rows] = 0.0
        a._acc(ga)
        if b is not None:
            b._acc(g[rows])

    return tape._emit(y, inputs, bw)


# ---------------------------------------------------------------- layers


def dense(tape: Tape, x, W, b) -> Tensor:
    """``x @ W.T + b`` for x of shape (in,) or (n, in) and W of shape (out, in)."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if x.shape[-1] != W.shape[1] or b.shape != (W.shape[0],):
        raise ValueError(f"dense shape mismatch: x {x.shape}, W {W.shape}, b {b.shape}")
    y = x.value @ W.value.T + b.value

    def bw(g):
        g2 = np.atleast_2d(g)
        x2 = np.atleast_2d(x.value)
        W._acc(g2.T @ x2)
        b._acc(g2.sum(axis=0))
        x._acc(g @ W.value)

    return tape._emit(y, (x, W, b), bw)


def bce_loss(tape: Tape, y_hat, y) -> Tensor:
    """Mean binary cross-entropy of probabilities ``y_hat`` against 0/1 labels.

    Probabilities are clamped to [1e-7, 1 - 1e-7]; the gradient is evaluated
    at the clamped value and passed straight through the clamp, so chained
    with a sigmoid it reduces to ``y_hat - y`` per sample.
    """
    y_hat = as_tensor(y_hat)
    y = np.asarray(y, dtype=np.float64)
    if np.any((y != 0.0) & (y != 1.0)):
        raise ValueError("labels must be 0 or 1")
    p = np.clip(y_hat.value, BCE_CLAMP, 1.0 - BCE_CLAMP)
    y = np.broadcast_to(y, p.shape)
    n = p.size
    loss = -np.sum(y * np.log(p) + (1.0 - y) * np.log1p(-p)) / n

    def bw(g):
        y_hat._acc(g * (p - y) / (p * (1.0 - p)) / n)

    return tape._emit(loss, (y_hat,), bw)


def logsumexp(tape: Tape, a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    m = a.value.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.exp(a.value - m).sum(axis=axis, keepdims=True)
    y = np.log(s) + m

    def bw(g):
        w = np.exp(a.value - y)
        a._acc(np.expand_dims(g, axis) * w)

    return tape._emit(np.squeeze(y, axis=axis), (a,), bw)


def log_softmax(tape: Tape, a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    m = a.value.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(a.value - m).sum(axis=axis, keepdims=True)) + m
    y = a.value - lse
    p = np.exp(y)

    def bw(g):
        a._acc(g - p * g.sum(axis=axis, keepdims=True))

    return tape._emit(y, (a,), bw)


def gauss_log_pdf(tape: Tape, z, mu, log_var) -> Tensor:
    """Diagonal-Gaussian log densities: z (n, d), mu/log_var (r, d) -> (n, r)."""
    z, mu, log_var = as_tensor(z), as_tensor(mu), as_tensor(log_var)
    if z.shape[-1] != mu.shape[-1] or mu.shape != log_var.shape:
        raise ValueError(f"shape mismatch: z {z.shape}, mu {mu.shape}, log_var {log_var.shape}")
    d = mu.shape[-1]
    prec = np.exp(-log_var.value)
    diff = z.value[:, None, :] - mu.value[None, :, :]
    wdiff = diff * prec[None]
    quad = np.einsum("nrd,nrd->nr", diff, wdiff)
    y = -0.5 * d * np.log(2.0 * np.pi) - 0.5 * log_var.value.sum(axis=1)[None, :] - 0.5 * quad

    def bw(g):
        gw = g[:, :, None] * wdiff
        z._acc(-gw.sum(axis=1))
        mu._acc(gw.sum(axis=0))
        log_var._acc(-0.5 * g.sum(axis=0)[:, None] + 0.5 * np.einsum("nr,nrd->rd", g, diff * wdiff))

    return tape._emit(y, (z, mu, log_var), bw)


def reparam_sample(tape: Tape, mu, log_var, eps) -> Tensor:
    """``mu + exp(log_var / 2) * eps`` with eps held fixed."""
    mu, log_var = as_tensor(mu), as_tensor(log_var)
    eps = np.asarray(eps, dtype=np.float64)
    sd = np.exp(0.5 * log_var.value)
    noise = sd * eps

    def bw(g):
        mu._acc(g)
        log_var._acc(0.5 * g * noise)

    return tape._emit(mu.value + noise, (mu, log_var), bw)


def sample_gumbel(rng: np.random.Generator, shape) -> np.ndarray:
    u = rng.random(shape)
    u = np.clip(u, np.finfo(float).tiny, 1.0 - np.finfo(float).epsneg)
    return -np.log(-np.log(u))


def gumbel_softmax(tape: Tape, logits, tau: float, gumbel, hard: bool = True) -> Tensor:
    """Relaxed categorical draw over the last axis with fixed Gumbel noise.

    In hard mode the forward value is the one-hot argmax while the backward
    pass uses the Jacobian of the soft sample (straight-through).
    """
    if not tau > 0:
        raise ValueError("temperature must be positive")
    logits = as_tensor(logits)
    a = (logits.value + gumbel) / tau
    a = a - a.max(axis=-1, keepdims=True)
    e = np.exp(a)
    s = e / e.sum(axis=-1, keepdims=True)
    if hard:
        y = np.zeros_like(s)
        np.put_along_axis(y, np.argmax(s, axis=-1)[..., None], 1.0, axis=-1)
    else:
        y = s

    def bw(g):
        logits._acc(s * (g - (g * s).sum(axis=-1, keepdims=True)) / tau)

    return tape._emit(y, (logits,), bw)


def mix_components(tape: Tape, weights, comps) -> Tensor:
    """Weighted sum over the component axis: (n, k) x (n, k, d) -> (n, d)."""
    weights, comps = as_tensor(weights), as_tensor(comps)
    y = np.einsum("nk,nkd->nd", weights.value, comps.value)

    def bw(g):
        weights._acc(np.einsum("nd,nkd->nk", g, comps.value))
        comps._acc(weights.value[:, :, None] * g[:, None, :])

    return tape._emit(y, (weights, comps), bw)


# ---------------------------------------------------------------- checking


@dataclass
class GradCheck:
    max_rel_error: float
    worst: str
    n_checked: int
    finite: bool = True

    @property
    def ok(self) -> bool:
        return self.finite and self.max_rel_error < 1e-4


def finite_diff_check(f: Callable[[Tape], Tensor], params: Sequence[Param], h: float = 1e-5,
                      max_coords: int | None = None, rng=None) -> GradCheck:
    """Compare analytic gradients of ``f`` against central differences.

    ``f`` builds a scalar on the tape it is handed, reading the current
    values of ``params``. Relative error per coordinate is
    ``|a - n| / max(|a|, |n|, 1e-8)``. ``max_coords`` subsamples coordinates
    of large parameters.
    """
    for p in params:
        p.zero_grad()
    tape = Tape()
    out = f(tape)
    if not np.all(np.isfinite(out.value)):
        return GradCheck(float("inf"), "forward", 0, finite=False)
    tape.backward(out)
    analytic = [p.grad.copy() for p in params]

    def value():
        v = f(Tape()).value
        return float(v)

    worst, worst_name, count = 0.0, "", 0
    gen = np.random.default_rng(rng)
    for pi, p in enumerate(params):
        flat = p.value.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(gen.choice(flat.size, max_coords, replace=False))
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            fp = value()
            flat[c] = orig - h
            fm = value()
            flat[c] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                return GradCheck(float("inf"), f"{p.name or pi}[{c}]", count, finite=False)
            num = (fp - fm) / (2.0 * h)
            a = analytic[pi].reshape(-1)[c]
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            count += 1
            if err > worst:
                worst, worst_name = err, f"{p.name or pi}[{c}]"
    return GradCheck(worst, worst_name, count)
