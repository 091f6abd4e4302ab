"""Single benchmark cells shared by the ablation command and end-to-end checks."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import SynthConfig, make_benchmark
from .metrics import evaluate
from .model import TrainConfig, fit, predict_proba
from .sticks import sample_prior_weights

BOOTSTRAP_STREAM = 20
PRIOR_SIM_STREAM = 30


def anchored_missing(M: int, ratio: float) -> tuple:
    """Missing ratios for a grid value: the first modality stays fully observed."""
    return (0.0,) + (float(ratio),) * (M - 1)


@dataclass
class CellResult:
    test_auroc: float
    metrics: dict
    history: list


def run_cell(synth: SynthConfig, train: TrainConfig, missing_ratio: float | None = None,
             bootstrap: int = 1000) -> CellResult:
    """Generate the benchmark, fit on train/valid and score the test split."""
    if missing_ratio is not None:
        synth = replace(synth, missing_ratio=anchored_missing(synth.M, missing_ratio))
    tr, va, te = make_benchmark(synth)
    state, history = fit(tr, va, train)
    scores = predict_proba(te, state)
    metrics = evaluate(scores, te.labels, B=bootstrap, seed=[train.seed, BOOTSTRAP_STREAM],
                       threshold=train.f1_threshold)
    return CellResult(metrics["auroc"], metrics, history)


def prior_curves(eta_list, MK: int, draws: int, seed: int = 0) -> list:
    """Monte-Carlo mean and standard error of each truncated prior weight.

    Rows are ``(eta, r, mean, se, expected)`` with 1-based ``r``; ``expected``
    is the untruncated geometric law for ``r < MK`` and the leftover mass
    at the last position.
    """
    if draws < 1000:
        raise ValueError("draws: need at least 1000 prior draws")
    if MK < 1:
        raise ValueError("MK: need at least one component")
    rows = []
    for j, eta in enumerate(eta_list):
        eta = float(eta)
        if not eta > 0:
            raise ValueError("eta_list: concentrations must be positive")
        w = sample_prior_weights(eta, 1, MK, rng_seed=[seed, PRIOR_SIM_STREAM, j], size=draws)
        mean = w.mean(axis=0)
        se = w.std(axis=0, ddof=1) / np.sqrt(draws)
        q = eta / (1.0 + eta)
        for r in range(1, MK + 1):
            expected = q ** (r - 1) / (1.0 + eta) if r < MK else q ** (MK - 1)
            rows.append((eta, r, float(mean[r - 1]), float(se[r - 1]), float(expected)))
    return rows
