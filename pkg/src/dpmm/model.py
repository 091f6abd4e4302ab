"""Multimodal network with a DP-mixture regularizer and mixture imputation.

Each modality has a two-layer tanh encoder into a shared latent space. The
embeddings are fused (concatenation or sum) and classified by a dense
sigmoid head. Missing modalities are imputed by a gradient-preserving draw
from their marginal mixture, or zero-filled when that is switched off.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import Dataset
from .metrics import auroc
from .mixture import (
    ComponentBank,
    DegenerateInputError,
    MixtureState,
    dp_loss_tape,
    gps_tape,
    modality_log_weights,
    responsibilities,
    update_gamma,
)
from .sticks import StickState, from_linear, kl_sticks, mean_weights

log = logging.getLogger(__name__)

ALIGNMENT_MODES = ("dp", "cosine", "kl", "none")
FUSION_MODES = ("concat", "sum")
WEIGHT_MODES = ("dp", "learnable")

# named RNG sub-streams derived from the run seed
INIT_STREAM = 10
SHUFFLE_STREAM = 11
GUMBEL_STREAM = 12
EVAL_STREAM = 13

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
MOMENT_VAR_EPS = 1e-6
COSINE_EPS = 1e-12


class TrainingDiverged(RuntimeError):
    def __init__(self, component: str, step: int | None = None):
        self.component = component
        self.step = step
        super().__init__(f"non-finite {component} loss" + (f" at step {step}" if step is not None else ""))


class SchemaMismatch(ValueError):
    pass


@dataclass
class TrainConfig:
    eta: float = 1.0
    K: int = 4
    lambda_dp: float = 1e-5
    tau: float = 0.01
    learning_rate: float = 1e-4
    batch_size: int = 32
    epochs: int = 100
    early_stop_patience: int = 15
    gamma_step: float = 0.05
    seed: int = 0
    fusion_mode: str = "concat"
    gps_enabled: bool = True
    alignment_mode: str = "dp"
    weights: str = "dp"
    hidden_dim: int = 32
    latent_dim: int = 8
    gps_draws: int = 1
    gumbel_hard: bool = True
    mu_init_jitter: float = 0.01
    mu_prior_weight: float = 0.0
    f1_threshold: float = 0.5

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.alignment_mode not in ALIGNMENT_MODES:
            raise ValueError(f"alignment_mode: expected one of {ALIGNMENT_MODES}, got {self.alignment_mode!r}")
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"fusion_mode: expected one of {FUSION_MODES}, got {self.fusion_mode!r}")
        if self.weights not in WEIGHT_MODES:
            raise ValueError(f"weights: expected one of {WEIGHT_MODES}, got {self.weights!r}")
        if not self.eta > 0:
            raise ValueError("eta: must be positive")
        if self.K < 1:
            raise ValueError("K: must be >= 1")
        if self.lambda_dp < 0:
            raise ValueError("lambda_dp: must be nonnegative")
        if not self.tau > 0:
            raise ValueError("tau: must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate: must be nonnegative")
        if self.batch_size < 1 or self.epochs < 0 or self.early_stop_patience < 0:
            raise ValueError("batch_size, epochs and early_stop_patience must be nonnegative (batch_size >= 1)")
        if not 0.0 <= self.gamma_step <= 1.0:
            raise ValueError("gamma_step: must lie in [0, 1]")
        if self.gps_draws < 1 or self.hidden_dim < 1 or self.latent_dim < 1:
            raise ValueError("gps_draws, hidden_dim and latent_dim must be >= 1")

    @classmethod
    def field_names(cls) -> list:
        return [f.name for f in fields(cls)]

    def to_dict(self) -> dict:
        return asdict(self)


def _uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class Adam:
    lr: float
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict):
        self.t += 1
        b1t = 1.0 - ADAM_BETA1**self.t
        b2t = 1.0 - ADAM_BETA2**self.t
        for name, p in params.items():
            g = p.grad
            m = self.m.setdefault(name, np.zeros_like(p.value))
            v = self.v.setdefault(name, np.zeros_like(p.value))
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * g * g
            if self.lr:
                p.value -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + ADAM_EPS)


class ModelState:
    """Parameters, stick posterior, optimizer moments and config of one model."""

    def __init__(self, config: TrainConfig, dims, n_total: int = 1):
        self.config = config
        self.dims = tuple(int(d) for d in dims)
        self.M = len(self.dims)
        self.n_total = int(n_total)
        self.params: dict[str, ad.Param] = {}
        self.sticks = StickState.prior(config.eta, self.M, config.K)
        self.optimizer = Adam(config.learning_rate)
        self._init_params()

    def _init_params(self):
        cfg = self.config
        rng = np.random.default_rng([cfg.seed, INIT_STREAM])
        h, d, K = cfg.hidden_dim, cfg.latent_dim, cfg.K
        for m, din in enumerate(self.dims):
            self.params[f"enc{m}.W1"] = ad.Param(_uniform(rng, (h, din), din), f"enc{m}.W1")
            self.params[f"enc{m}.b1"] = ad.Param(_uniform(rng, (h,), din), f"enc{m}.b1")
            self.params[f"enc{m}.W2"] = ad.Param(_uniform(rng, (d, h), h), f"enc{m}.W2")
            self.params[f"enc{m}.b2"] = ad.Param(_uniform(rng, (d,), h), f"enc{m}.b2")
        fin = self.M * d if cfg.fusion_mode == "concat" else d
        self.params["head.W"] = ad.Param(_uniform(rng, (1, fin), fin), "head.W")
        self.params["head.b"] = ad.Param(_uniform(rng, (1,), fin), "head.b")
        mu = cfg.mu_init_jitter * rng.standard_normal((self.M, K, d))
        self.params["mix.mu"] = ad.Param(mu, "mix.mu")
        self.params["mix.log_var"] = ad.Param(np.zeros((self.M, K, d)), "mix.log_var")
        if cfg.weights == "learnable":
            self.params["mix.logits"] = ad.Param(np.zeros(self.M * K), "mix.logits")

    # -- views

    @property
    def bank(self) -> ComponentBank:
        return ComponentBank(self.params["mix.mu"].value, self.params["mix.log_var"].value)

    @property
    def mixture(self) -> MixtureState:
        return MixtureState(self.sticks, self.bank, self.config.lambda_dp, self.n_total)

    def weights(self) -> np.ndarray:
        """Point mixture weights in linear order."""
        if self.config.weights == "learnable":
            a = self.params["mix.logits"].value
            e = np.exp(a - a.max())
            return e / e.sum()
        return mean_weights(self.sticks)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def snapshot(self) -> dict:
        return {
            "params": {k: p.value.copy() for k, p in self.params.items()},
            "sticks": self.sticks,
            "optimizer": copy.deepcopy(self.optimizer),
        }

    def restore(self, snap: dict):
        for k, v in snap["params"].items():
            self.params[k].value = v.copy()
        self.sticks = snap["sticks"]
        self.optimizer = copy.deepcopy(snap["optimizer"])


# ---------------------------------------------------------------- forward pieces


def _encode_tape(tape, x, m: int, state: ModelState):
    p = state.params
    hdn = ad.tanh_act(tape, ad.dense(tape, x, p[f"enc{m}.W1"], p[f"enc{m}.b1"]))
    return ad.dense(tape, hdn, p[f"enc{m}.W2"], p[f"enc{m}.b2"])


def encode(x, m: int, state: ModelState) -> np.ndarray:
    """Deterministic latent embedding of raw features of modality ``m``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != state.dims[m]:
        raise ValueError(f"modality {m} expects {state.dims[m]} features, got {x.shape[-1]}")
    return _encode_tape(ad.Tape(), x, m, state).value


def _gps_logits(tape, m: int, state: ModelState):
    if state.config.weights == "learnable":
        block = from_linear(np.arange(state.M * state.config.K), state.M)[m]
        return ad.log_softmax(tape, ad.take(tape, state.params["mix.logits"], block))
    return modality_log_weights(mean_weights(state.sticks), m, state.M)


def _impute(tape, m: int, n: int, state: ModelState, rng: np.random.Generator):
    cfg = state.config
    K, d = cfg.K, cfg.latent_dim
    logits = _gps_logits(tape, m, state)
    mu_m = ad.take(tape, state.params["mix.mu"], m)
    lv_m = ad.take(tape, state.params["mix.log_var"], m)
    draws = []
    for _ in range(cfg.gps_draws):
        g = ad.sample_gumbel(rng, (n, K))
        eps = rng.standard_normal((n, K, d))
        z, _ = gps_tape(tape, logits, mu_m, lv_m, cfg.tau, g, eps, hard=cfg.gumbel_hard)
        draws.append(z)
    if len(draws) == 1:
        return draws[0]
    acc = draws[0]
    for z in draws[1:]:
        acc = ad.add(tape, acc, z)
    return ad.scale(tape, acc, 1.0 / len(draws))


def embed_batch(tape, batch: Dataset, state: ModelState, rng: np.random.Generator):
    """Per-modality (n, d) embeddings with missing rows imputed or zeroed."""
    if batch.mask.shape[0] and not batch.mask.any(axis=1).all():
        raise ValueError("every sample needs at least one observed modality")
    zs = []
    for m in range(state.M):
        if batch.dims[m] != state.dims[m]:
            raise SchemaMismatch(f"modality {m}: data has {batch.dims[m]} features, model expects {state.dims[m]}")
        z = _encode_tape(tape, batch.features[m], m, state)
        rows = np.flatnonzero(~batch.mask[:, m])
        if rows.size:
            if state.config.gps_enabled:
                z = ad.fill_rows(tape, z, rows, _impute(tape, m, rows.size, state, rng))
            else:
                z = ad.fill_rows(tape, z, rows, None)
        zs.append(z)
    return zs


def assemble_embeddings(sample, state: ModelState, training: bool = False, rng=None):
    """Embeddings and observed flags for a single :class:`MultimodalSample`.

    ``training`` only selects the default noise stream; imputation is the
    same mixture draw in both phases.
    """
    if not any(sample.mask):
        raise ValueError("sample has no observed modality")
    rng = np.random.default_rng(rng if rng is not None else [state.config.seed,
                                                           GUMBEL_STREAM if training else EVAL_STREAM])
    feats = [np.asarray(f, dtype=np.float64)[None] if ok else np.zeros((1, state.dims[m]))
             for m, (f, ok) in enumerate(zip(sample.features, sample.mask))]
    batch = Dataset(feats, np.asarray(sample.mask)[None], np.array([sample.label]))
    zs = embed_batch(ad.Tape(), batch, state, rng)
    return [z.value[0] for z in zs], list(sample.mask)


def _predict_tape(tape, zs, state: ModelState):
    fused = ad.concat(tape, zs, axis=1) if state.config.fusion_mode == "concat" else _sum_all(tape, zs)
    logit = ad.dense(tape, fused, state.params["head.W"], state.params["head.b"])
    return ad.sigmoid_act(tape, ad.reshape(tape, logit, (logit.shape[0],)))


def _sum_all(tape, zs):
    acc = zs[0]
    for z in zs[1:]:
        acc = ad.add(tape, acc, z)
    return acc


def predict(embeddings, state: ModelState) -> float:
    """Probability of the positive class from M embeddings of one sample."""
    zs = [ad.Tensor(np.asarray(z, dtype=np.float64)[None]) for z in embeddings]
    return float(_predict_tape(ad.Tape(), zs, state).value[0])


# ---------------------------------------------------------------- losses


def _dp_term(tape, zs, mask, state: ModelState):
    cfg = state.config
    z_all = ad.concat(tape, zs, axis=0)
    observed = mask.T.reshape(-1)
    if cfg.weights == "learnable":
        log_pi = ad.log_softmax(tape, state.params["mix.logits"])
        kl = 0.0
    else:
        with np.errstate(divide="ignore"):
            log_pi = np.log(mean_weights(state.sticks))
        kl = kl_sticks(state.sticks)
    out = dp_loss_tape(tape, z_all, observed, state.params["mix.mu"], state.params["mix.log_var"],
                       log_pi, kl, state.n_total)
    if cfg.mu_prior_weight > 0:
        pen = ad.scale(tape, ad.sum_(tape, ad.square(tape, state.params["mix.mu"])),
                       0.5 * cfg.mu_prior_weight / state.n_total)
        out = ad.add(tape, out, pen)
    return out, kl


def _cosine_term(tape, zs, mask):
    terms, count = [], 0
    for l in range(len(zs)):
        for m in range(l + 1, len(zs)):
            rows = np.flatnonzero(mask[:, l] & mask[:, m])
            if rows.size == 0:
                continue
            a, b = ad.take(tape, zs[l], rows), ad.take(tape, zs[m], rows)
            dot = ad.sum_(tape, ad.mul(tape, a, b), axis=1)
            na = ad.sqrt(tape, ad.add(tape, ad.sum_(tape, ad.square(tape, a), axis=1), COSINE_EPS))
            nb = ad.sqrt(tape, ad.add(tape, ad.sum_(tape, ad.square(tape, b), axis=1), COSINE_EPS))
            cos = ad.div(tape, dot, ad.mul(tape, na, nb))
            terms.append(ad.sum_(tape, ad.sub(tape, 1.0, cos)))
            count += rows.size
    if not terms:
        return ad.Tensor(0.0)
    return ad.scale(tape, _sum_all(tape, terms), 1.0 / count)


def _moments(tape, z):
    mean = ad.mean(tape, z, axis=0)
    centered = ad.sub(tape, z, mean)
    var = ad.add(tape, ad.mean(tape, ad.square(tape, centered), axis=0), MOMENT_VAR_EPS)
    return mean, var


def _kl_diag(tape, mq, vq, mp, vp):
    ratio = ad.div(tape, vq, vp)
    maha = ad.div(tape, ad.square(tape, ad.sub(tape, mp, mq)), vp)
    inner = ad.sub(tape, ad.add(tape, ratio, maha), ad.add(tape, ad.log(tape, ratio), 1.0))
    return ad.scale(tape, ad.sum_(tape, inner), 0.5)


def _moment_kl_term(tape, zs, mask):
    terms = []
    for l in range(len(zs)):
        for m in range(l + 1, len(zs)):
            rl, rm = np.flatnonzero(mask[:, l]), np.flatnonzero(mask[:, m])
            if rl.size < 2 or rm.size < 2:
                continue
            ml, vl = _moments(tape, ad.take(tape, zs[l], rl))
            mm, vm = _moments(tape, ad.take(tape, zs[m], rm))
            terms.append(ad.add(tape, _kl_diag(tape, ml, vl, mm, vm), _kl_diag(tape, mm, vm, ml, vl)))
    if not terms:
        return ad.Tensor(0.0)
    return ad.scale(tape, _sum_all(tape, terms), 1.0 / len(terms))


def loss_tape(tape, batch: Dataset, state: ModelState, rng):
    """Build the full objective on ``tape``; returns (loss, parts, embeddings)."""
    cfg = state.config
    zs = embed_batch(tape, batch, state, rng)
    p = _predict_tape(tape, zs, state)
    task = ad.bce_loss(tape, p, batch.labels)
    parts = {"task": float(task.value), "dp": 0.0, "align": 0.0, "kl_sticks": 0.0}
    loss = task
    if cfg.alignment_mode == "dp":
        reg, kl = _dp_term(tape, zs, batch.mask, state)
        parts["dp"] = float(reg.value)
        parts["kl_sticks"] = float(kl)
    elif cfg.alignment_mode == "cosine":
        reg = _cosine_term(tape, zs, batch.mask)
    elif cfg.alignment_mode == "kl":
        reg = _moment_kl_term(tape, zs, batch.mask)
    else:
        reg = None
    if reg is not None:
        parts["align"] = float(reg.value)
        if cfg.lambda_dp:
            loss = ad.add(tape, loss, ad.scale(tape, reg, cfg.lambda_dp))
    parts["loss"] = float(loss.value)
    return loss, parts, zs


def loss_total(batch: Dataset, state: ModelState, rng=None):
    """Objective value and its components (task, dp, align, kl_sticks)."""
    rng = np.random.default_rng(rng if rng is not None else [state.config.seed, EVAL_STREAM])
    _, parts, _ = loss_tape(ad.Tape(), batch, state, rng)
    return parts["loss"], parts


# ---------------------------------------------------------------- training


def _row_keys(ds: Dataset) -> np.ndarray:
    """Content hash per sample, used to order a batch independently of its input order."""
    keys = np.empty(len(ds), dtype=np.uint64)
    for i in range(len(ds)):
        h = hashlib.blake2b(digest_size=8)
        for x in ds.features:
            h.update(x[i].tobytes())
        h.update(ds.mask[i].tobytes())
        h.update(int(ds.labels[i]).to_bytes(1, "little"))
        keys[i] = int.from_bytes(h.digest(), "little")
    return keys


def canonical_order(batch: Dataset) -> Dataset:
    keys = _row_keys(batch)
    return batch.subset(np.argsort(keys, kind="stable"))


def train_step(batch: Dataset, state: ModelState, rng: np.random.Generator, step: int | None = None):
    """One gradient step on the network and mixture plus one stick update.

    The batch is first put into canonical (content-hash) order so the result
    does not depend on the order samples arrive in. Mutates ``state`` and
    returns ``(state, parts)``.
    """
    cfg = state.config
    batch = canonical_order(batch)
    state.zero_grad()
    tape = ad.Tape()
    loss, parts, zs = loss_tape(tape, batch, state, rng)
    for name in ("task", "dp", "align", "loss"):
        if not np.isfinite(parts[name]):
            raise TrainingDiverged(name, step)
    tape.backward(loss)
    state.optimizer.lr = cfg.learning_rate
    state.optimizer.step(state.params)
    if cfg.weights == "dp" and cfg.gamma_step > 0:
        observed = batch.mask.T.reshape(-1)
        if observed.any():
            z_obs = np.concatenate([z.value for z in zs], axis=0)[observed]
            try:
                phi = responsibilities(z_obs, state.mixture)
            except DegenerateInputError:
                raise TrainingDiverged("responsibilities", step) from None
            state.sticks = update_gamma(phi, state.mixture, batch_size=z_obs.shape[0], step=cfg.gamma_step)
    for name, p in state.params.items():
        if not np.all(np.isfinite(p.value)):
            raise TrainingDiverged(f"parameter {name}", step)
    return state, parts


def predict_proba(ds: Dataset, state: ModelState, rng=None) -> np.ndarray:
    """Scores for every sample; imputation noise comes from a fixed eval stream."""
    rng = np.random.default_rng(rng if rng is not None else [state.config.seed, EVAL_STREAM])
    tape = ad.Tape()
    zs = embed_batch(tape, ds, state, rng)
    return _predict_tape(tape, zs, state).value


def init_state(train: Dataset, config: TrainConfig) -> ModelState:
    n_obs = int(train.mask.sum())
    return ModelState(config, train.dims, n_total=max(n_obs, 1))


def fit(train: Dataset, valid: Dataset, config: TrainConfig, progress=None):
    """Train with shuffled minibatches, validation-AUROC model selection and early stopping.

    Returns ``(state, history)``; ``history`` holds one dict per epoch.
    """
    if len(train) == 0 or len(valid) == 0:
        raise ValueError("train and valid splits must be nonempty")
    state = init_state(train, config)
    history = []
    if config.epochs == 0:
        return state, history
    gumbel = np.random.default_rng([config.seed, GUMBEL_STREAM])
    best_auc, best_snap, since = -np.inf, None, 0
    n = len(train)
    step = 0
    for epoch in range(1, config.epochs + 1):
        perm = np.random.default_rng([config.seed, SHUFFLE_STREAM, epoch]).permutation(n)
        sums = {"task": 0.0, "dp": 0.0, "align": 0.0, "kl_sticks": 0.0, "loss": 0.0}
        n_batches = 0
        for lo in range(0, n, config.batch_size):
            batch = train.subset(perm[lo:lo + config.batch_size])
            _, parts = train_step(batch, state, gumbel, step)
            step += 1
            n_batches += 1
            for k in sums:
                sums[k] += parts[k]
        val_auc = auroc(predict_proba(valid, state), valid.labels)
        row = {"epoch": epoch, **{k: v / n_batches for k, v in sums.items()}, "valid_auroc": val_auc}
        history.append(row)
        if progress is not None:
            progress(row)
        if val_auc > best_auc:
            best_auc, best_snap, since = val_auc, state.snapshot(), 0
        else:
            since += 1
            if since >= max(config.early_stop_patience, 1):
                break
    state.restore(best_snap)
    state.best_valid_auroc = best_auc
    return state, history


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_FORMAT = "dpmm-checkpoint/1"


def _tensor_entry(a) -> dict:
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "values": a.reshape(-1).tolist()}


def _tensor_value(entry) -> np.ndarray:
    return np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])


def save_checkpoint(state: ModelState, path) -> None:
    """Write a flat JSON checkpoint: config echo, dims and named row-major tensors.

    Floats are written with shortest round-trip repr, so loading is bit-exact.
    """
    tensors = {name: _tensor_entry(p.value) for name, p in state.params.items()}
    tensors["sticks.gamma1"] = _tensor_entry(state.sticks.gamma1)
    tensors["sticks.gamma2"] = _tensor_entry(state.sticks.gamma2)
    for name in state.params:
        if name in state.optimizer.m:
            tensors[f"adam.m.{name}"] = _tensor_entry(state.optimizer.m[name])
            tensors[f"adam.v.{name}"] = _tensor_entry(state.optimizer.v[name])
    doc = {
        "format": CHECKPOINT_FORMAT,
        "config": state.config.to_dict(),
        "dims": list(state.dims),
        "n_total": state.n_total,
        "adam_t": state.optimizer.t,
        "tensors": tensors,
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(path) -> ModelState:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise SchemaMismatch(f"{path}: not a {CHECKPOINT_FORMAT} file")
    config = TrainConfig(**doc["config"])
    state = ModelState(config, doc["dims"], doc["n_total"])
    tensors = doc["tensors"]
    for name, p in state.params.items():
        p.value = _tensor_value(tensors[name])
        p.zero_grad()
    state.sticks = StickState(_tensor_value(tensors["sticks.gamma1"]), _tensor_value(tensors["sticks.gamma2"]),
                              config.eta, state.M, config.K)
    state.optimizer.t = doc["adam_t"]
    for name in state.params:
        if f"adam.m.{name}" in tensors:
            state.optimizer.m[name] = _tensor_value(tensors[f"adam.m.{name}"])
            state.optimizer.v[name] = _tensor_value(tensors[f"adam.v.{name}"])
    return state
