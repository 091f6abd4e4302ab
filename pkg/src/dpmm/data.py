"""Synthetic clustered multimodal data, MAR masking, splits and JSONL storage."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

DATA_STREAM = 1
MASK_STREAM = 2
SPLIT_STREAM = 3


class DatasetParseError(ValueError):
    pass


@dataclass
class MultimodalSample:
    features: list  # per modality: 1-D array or None when missing
    mask: list
    label: int

    def __post_init__(self):
        if not any(self.mask):
            raise ValueError("a sample needs at least one observed modality")
        if len(self.features) != len(self.mask):
            raise ValueError("features and mask disagree on the number of modalities")


@dataclass
class Dataset:
    """Column-oriented storage; missing modalities hold zero rows."""

    features: list  # M arrays of shape (n, dims[m])
    mask: np.ndarray  # (n, M) bool
    labels: np.ndarray  # (n,) int
    clusters: np.ndarray | None = None  # generating cluster, when known

    def __post_init__(self):
        self.features = [np.asarray(x, dtype=np.float64) for x in self.features]
        self.mask = np.asarray(self.mask, dtype=bool).reshape(-1, len(self.features)) if self.features \
            else np.zeros((len(np.atleast_1d(self.labels)), 0), dtype=bool)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        n = self.labels.size
        if self.mask.shape[0] != n or any(x.shape[0] != n for x in self.features):
            raise ValueError("inconsistent sample counts")

    def __len__(self):
        return self.labels.size

    @property
    def M(self) -> int:
        return len(self.features)

    @property
    def dims(self) -> tuple:
        return tuple(x.shape[1] for x in self.features)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.intp)
        clusters = None if self.clusters is None else self.clusters[idx]
        return Dataset([x[idx] for x in self.features], self.mask[idx], self.labels[idx], clusters)

    def sample(self, i: int) -> MultimodalSample:
        feats = [x[i].copy() if self.mask[i, m] else None for m, x in enumerate(self.features)]
        return MultimodalSample(feats, self.mask[i].tolist(), int(self.labels[i]))

    def equals(self, other: "Dataset") -> bool:
        return (
            self.dims == other.dims
            and np.array_equal(self.mask, other.mask)
            and np.array_equal(self.labels, other.labels)
            and all(np.array_equal(a, b) for a, b in zip(self.features, other.features))
        )


@dataclass
class SynthConfig:
    M: int = 2
    clusters: int = 3
    dims: tuple = (20, 30)
    separation: float = 4.0
    noise: float = 1.0
    label_noise: float = 0.05
    n: int = 2000
    missing_ratio: tuple = (0.0, 0.0)
    fractions: tuple = (0.7, 0.1, 0.2)
    seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(v) for v in self.dims)
        self.missing_ratio = tuple(float(v) for v in self.missing_ratio)
        self.fractions = tuple(float(v) for v in self.fractions)
        self.validate()

    def validate(self):
        if self.M < 1:
            raise ValueError("M: need at least one modality")
        if self.clusters < 2:
            raise ValueError("clusters: need at least 2 clusters")
        if len(self.dims) != self.M or min(self.dims) < 1:
            raise ValueError("dims: need one positive input dimension per modality")
        if len(self.missing_ratio) != self.M or not all(0.0 <= p < 1.0 for p in self.missing_ratio):
            raise ValueError("missing_ratio: need one ratio in [0, 1) per modality")
        if not 0.0 <= self.label_noise <= 0.5:
            raise ValueError("label_noise: must lie in [0, 0.5]")
        if self.noise < 0 or self.separation < 0:
            raise ValueError("noise and separation must be nonnegative")
        if self.n < 1:
            raise ValueError("n: need at least one sample")
        _check_fractions(self.fractions)

    @classmethod
    def field_names(cls) -> list:
        return [f.name for f in fields(cls)]

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _loadings(rng: np.random.Generator, dim: int, C: int) -> np.ndarray:
    """(dim, C) loading matrix with orthonormal columns when dim >= C."""
    A = rng.standard_normal((dim, C))
    if dim >= C:
        q, r = np.linalg.qr(A)
        return q * np.sign(np.diag(r))
    return A / np.linalg.norm(A, axis=0, keepdims=True)


def generative_params(cfg: SynthConfig):
    """Seeded loadings, cluster means and per-cluster label probabilities."""
    rng = np.random.default_rng([cfg.seed, DATA_STREAM])
    C = cfg.clusters
    # orthonormal loadings put every pair of cluster means at distance `separation`
    means = [cfg.separation / math.sqrt(2.0) * _loadings(rng, dim, C).T for dim in cfg.dims]
    w = rng.permutation(np.linspace(-1.0, 1.0, C))
    p_label = 1.0 / (1.0 + np.exp(-cfg.separation * w))
    return means, p_label


def generate(cfg: SynthConfig, mask: bool = True) -> Dataset:
    """Draw ``cfg.n`` samples; each uses its own RNG stream keyed by index.

    Cluster c is uniform; modality m is ``means[m][c] + noise * N(0, I)``;
    the label is Bernoulli(p_label[c]) flipped with probability
    ``label_noise``. With ``mask`` the configured MAR ratios are applied.
    """
    cfg.validate()
    means, p_label = generative_params(cfg)
    n = cfg.n
    feats = [np.empty((n, dim)) for dim in cfg.dims]
    labels = np.empty(n, dtype=np.int64)
    clusters = np.empty(n, dtype=np.int64)
    for i in range(n):
        rng = np.random.default_rng([cfg.seed, DATA_STREAM, i])
        c = int(rng.integers(cfg.clusters))
        clusters[i] = c
        for m, dim in enumerate(cfg.dims):
            feats[m][i] = means[m][c] + cfg.noise * rng.standard_normal(dim)
        y = int(rng.random() < p_label[c])
        if rng.random() < cfg.label_noise:
            y = 1 - y
        labels[i] = y
    ds = Dataset(feats, np.ones((n, cfg.M), dtype=bool), labels, clusters)
    if mask:
        for m, p in enumerate(cfg.missing_ratio):
            if p > 0:
                ds, _ = apply_mar_mask(ds, m, p, [cfg.seed, MASK_STREAM, m])
    return ds


def apply_mar_mask(ds: Dataset, m: int, p: float, seed) -> tuple:
    """Mark ``floor(p * n)`` uniformly chosen samples as missing modality ``m``.

    Selection ignores features and labels. A chosen sample whose other
    modalities are all missing is left untouched and counted. Returns
    ``(dataset, n_skipped)``.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError("missing ratio must lie in [0, 1)")
    if not 0 <= m < ds.M:
        raise ValueError(f"modality {m} out of range")
    n = len(ds)
    k = int(math.floor(p * n))
    if k == 0:
        return ds, 0
    rng = np.random.default_rng(seed)
    chosen = rng.permutation(n)[:k]
    others = np.delete(ds.mask, m, axis=1).any(axis=1)
    keep = others[chosen]
    rows = chosen[keep]
    mask = ds.mask.copy()
    mask[rows, m] = False
    feats = [x.copy() for x in ds.features]
    feats[m][rows] = 0.0
    return Dataset(feats, mask, ds.labels.copy(), ds.clusters), int((~keep).sum())


def _check_fractions(fractions):
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or np.any(fr < 0) or fr[0] <= 0 or abs(fr.sum() - 1.0) > 1e-9:
        raise ValueError("fractions: need three nonnegative fractions summing to 1 with a nonempty train split")
    return fr


def split(ds: Dataset, fractions=(0.7, 0.1, 0.2), seed=0) -> tuple:
    """Seeded disjoint train / valid / test partition."""
    fr = _check_fractions(fractions)
    n = len(ds)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(math.floor(fr[0] * n + 1e-9))
    n_valid = int(math.floor(fr[1] * n + 1e-9))
    if fr[2] == 0:
        n_valid = n - n_train
    return _split_perm(ds, perm, n_train, n_valid)


def _split_perm(ds, perm, n_train, n_valid):
    parts = (perm[:n_train], perm[n_train:n_train + n_valid], perm[n_train + n_valid:])
    return tuple(ds.subset(np.sort(idx)) for idx in parts)


def split_counts(ds: Dataset, counts, seed=0) -> tuple:
    """Seeded disjoint partition with exact (train, valid, test) sizes."""
    counts = [int(c) for c in counts]
    if len(counts) != 3 or min(counts) < 0 or sum(counts) != len(ds):
        raise ValueError("counts: need three nonnegative sizes summing to the dataset size")
    perm = np.random.default_rng(seed).permutation(len(ds))
    return _split_perm(ds, perm, counts[0], counts[1])


def make_benchmark(cfg: SynthConfig) -> tuple:
    """Generate, mask and split according to ``cfg``."""
    return split(generate(cfg), cfg.fractions, [cfg.seed, SPLIT_STREAM])


# ---------------------------------------------------------------- storage


def save(ds: Dataset, path) -> None:
    """Write one JSON object per sample: ``{features, label, mask}``."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i in range(len(ds)):
            rec = {
                "features": [x[i].tolist() if ds.mask[i, m] else None for m, x in enumerate(ds.features)],
                "label": int(ds.labels[i]),
                "mask": [bool(v) for v in ds.mask[i]],
            }
            fh.write(json.dumps(rec, separators=(",", ":")))
            fh.write("\n")


def load(path, dims=None) -> Dataset:
    """Read a dataset written by :func:`save`.

    ``dims`` fixes per-modality input sizes; otherwise they are inferred from
    the first observed value of each modality.
    """
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                feats, label, mask = rec["features"], int(rec["label"]), [bool(v) for v in rec["mask"]]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetParseError(f"{path}:{lineno}: malformed record ({exc})") from None
            if len(feats) != len(mask) or label not in (0, 1):
                raise DatasetParseError(f"{path}:{lineno}: features/mask length mismatch or bad label")
            for f, ok in zip(feats, mask):
                if ok != (f is not None):
                    raise DatasetParseError(f"{path}:{lineno}: mask disagrees with null features")
            if not any(mask):
                raise DatasetParseError(f"{path}:{lineno}: sample has no observed modality")
            records.append((feats, label, mask))
    if not records:
        M = len(dims) if dims is not None else 0
        return Dataset([np.zeros((0, d)) for d in (dims or ())], np.zeros((0, M), bool), np.zeros(0, np.int64))
    M = len(records[0][2])
    if dims is None:
        dims = []
        for m in range(M):
            first = next((r[0][m] for r in records if r[0][m] is not None), [])
            dims.append(len(first))
    n = len(records)
    feats = [np.zeros((n, d)) for d in dims]
    mask = np.zeros((n, M), dtype=bool)
    labels = np.zeros(n, dtype=np.int64)
    for i, (f, label, mk) in enumerate(records):
        if len(mk) != M:
            raise DatasetParseError(f"{path}: record {i + 1} has {len(mk)} modalities, expected {M}")
        for m in range(M):
            if mk[m]:
                if len(f[m]) != dims[m]:
                    raise DatasetParseError(f"{path}: record {i + 1} modality {m} has length {len(f[m])}, expected {dims[m]}")
                feats[m][i] = f[m]
        mask[i] = mk
        labels[i] = label
    return Dataset(feats, mask, labels)
