"""Reconstruction-quality metrics and NN-vs-HS comparison sweeps.

Per-parameter mean squared errors are reported in raw MHz^2, one value per
parameter (their scales differ by three orders of magnitude, so aggregating
them would be meaningless).  Curve-level agreement uses the reduced
chi-squared and the mean absolute error between reference curves and curves
re-simulated from the estimated parameters, pooled over every (tau, N) point
of every sample.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import hs as hs_module
from .dataset import Dataset, GridSpec, assemble_feature_vector, synthesize_sample
from .mlp import MlpRegressor, predict_params
from .physics import NsdParams

MIN_PULSE_COUNTS_FOR_HS = 3


class DegenerateWeightError(ValueError):
    """A zero error bar would give an infinite chi-squared weight."""


def param_mse(estimates, truths) -> tuple[np.ndarray, np.ndarray]:
    """Mean and population std of squared per-parameter errors (MHz units).

    estimates and truths are (n, 3) arrays or lists of NsdParams.
    """
    est = _as_param_array(estimates)
    tru = _as_param_array(truths)
    if est.shape != tru.shape or est.ndim != 2 or len(est) == 0:
        raise ValueError("estimates and truths must be equal-length and non-empty")
    sq = (est - tru) ** 2
    return sq.mean(axis=0), sq.std(axis=0)


def _as_param_array(items) -> np.ndarray:
    if isinstance(items, np.ndarray):
        return np.asarray(items, dtype=float)
    rows = []
    for it in items:
        if isinstance(it, NsdParams):
            rows.append([it.s0, it.amplitude, it.sigma])
        else:
            rows.append(list(it))
    return np.asarray(rows, dtype=float)


def reduced_chi_squared(reference, errors, simulated) -> float:
    """(1/nu) * sum (C_ref - C_sim)^2 / err^2 over all matched points."""
    ref = np.asarray(reference, dtype=float).ravel()
    err = np.broadcast_to(np.asarray(errors, dtype=float), ref.shape).ravel()
    sim = np.asarray(simulated, dtype=float).ravel()
    if ref.shape != sim.shape:
        raise ValueError("reference and simulated grids differ")
    if np.any(err <= 0):
        raise DegenerateWeightError("all error bars must be > 0")
    return float(np.mean(((ref - sim) / err) ** 2))


def mae_curve(reference, simulated) -> float:
    """(1/nu) * sum |C_ref - C_sim| over all matched points."""
    ref = np.asarray(reference, dtype=float).ravel()
    sim = np.asarray(simulated, dtype=float).ravel()
    if ref.shape != sim.shape:
        raise ValueError("reference and simulated grids differ")
    return float(np.mean(np.abs(ref - sim)))


@dataclass
class ReconstructionReport:
    method: str
    n_bar: int
    mse: np.ndarray
    mse_std: np.ndarray
    chi_nu_sq: float
    mae: float
    nu: int
    per_sample: list[dict] = field(default_factory=list)


def simulate_reference_matrix(params: NsdParams, grid: GridSpec) -> np.ndarray:
    """Noiseless curves for all grid (N, tau), stacked (n_N, n_tau)."""
    sample = synthesize_sample(params, grid)
    return np.vstack([c.values for c in sample.curves])


def _curve_matrix(sample) -> np.ndarray:
    return np.vstack([c.values for c in sample.curves])


def evaluate_method(dataset: Dataset, n_bar: int, method: str,
                    model: MlpRegressor | None = None,
                    split: str = "test") -> ReconstructionReport:
    """One report row: reconstruct each split sample, re-simulate, score.

    Curve metrics compare against the sample's stored (noisy) curves over the
    full pulse-count set of the grid, with error bars equal to the injected
    noise std.
    """
    grid, ranges = dataset.grid, dataset.ranges
    if method == "NN":
        if model is None:
            raise ValueError("NN evaluation needs a trained model")
    elif method == "HS":
        if len(grid.n_values_up_to(n_bar)) < MIN_PULSE_COUNTS_FOR_HS:
            raise ValueError(f"HS needs >= 3 pulse counts, n_bar={n_bar} too small")
    else:
        raise ValueError(f"unknown method {method!r}")
    if dataset.noise_std <= 0:
        raise DegenerateWeightError("dataset noise_std must be > 0 for chi^2 weights")

    estimates, truths, per_sample = [], [], []
    chi_accum, mae_accum, nu = 0.0, 0.0, 0
    for idx in dataset.split_indices(split):
        sample = dataset.samples[idx]
        if method == "NN":
            vec = assemble_feature_vector(sample, n_bar)
            est = predict_params(model, vec, omega_c=ranges.omega_c)
        else:
            est, _, _ = hs_module.reconstruct(sample, grid, n_bar, ranges)
        estimates.append(est)
        truths.append(sample.label)

        ref = _curve_matrix(sample)
        sim = simulate_reference_matrix(est, grid)
        sq = float(np.sum(((ref - sim) / dataset.noise_std) ** 2))
        ab = float(np.sum(np.abs(ref - sim)))
        chi_accum += sq
        mae_accum += ab
        nu += ref.size
        per_sample.append({"index": idx,
                           "estimate": [est.s0, est.amplitude, est.sigma],
                           "truth": [sample.label.s0, sample.label.amplitude,
                                     sample.label.sigma]})

    mse, mse_std = param_mse(estimates, truths)
    return ReconstructionReport(method=method, n_bar=n_bar, mse=mse,
                                mse_std=mse_std, chi_nu_sq=chi_accum / nu,
                                mae=mae_accum / nu, nu=nu, per_sample=per_sample)


def compare_methods_sweep(dataset: Dataset, models: dict[int, MlpRegressor],
                          n_bars: list[int], split: str = "test",
                          log=None) -> list[ReconstructionReport]:
    """Reports for NN and HS across pulse-count caps.

    NN rows require a trained model for that cap (missing caps are skipped,
    not fabricated); HS rows exist only where at least three pulse counts
    are available.
    """
    reports = []
    for n_bar in n_bars:
        if n_bar in models:
            reports.append(evaluate_method(dataset, n_bar, "NN",
                                           model=models[n_bar], split=split))
        elif log is not None:
            log(f"no model for n_bar={n_bar}; NN row absent")
        if len(dataset.grid.n_values_up_to(n_bar)) >= MIN_PULSE_COUNTS_FOR_HS:
            reports.append(evaluate_method(dataset, n_bar, "HS", split=split))
        elif log is not None:
            log(f"HS not applicable for n_bar={n_bar}")
    return reports


REPORT_COLUMNS = ["method", "n_bar", "mse_s0", "mse_s0_std", "mse_A", "mse_A_std",
                  "mse_sigma", "mse_sigma_std", "chi_nu_sq", "mae", "nu"]


def write_report_csv(reports: list[ReconstructionReport], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for r in reports:
            writer.writerow([r.method, r.n_bar,
                             repr(float(r.mse[0])), repr(float(r.mse_std[0])),
                             repr(float(r.mse[1])), repr(float(r.mse_std[1])),
                             repr(float(r.mse[2])), repr(float(r.mse_std[2])),
                             repr(r.chi_nu_sq), repr(r.mae), r.nu])


def file_sha256(path) -> str:
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()


def write_provenance(path, record: dict) -> None:
    Path(path).write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
