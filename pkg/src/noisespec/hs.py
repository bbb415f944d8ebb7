"""Harmonics-spectroscopy baseline for NSD reconstruction.

At each inter-pulse time tau the coherence decays (asymptotically in N)
exponentially in the total time T = N*tau, with a rate set by the NSD sampled
at the odd filter harmonics k*pi/tau.  The baseline fits those decay rates,
then inverts them through the harmonic comb weights 4/(pi^2 k^2) by a joint
weighted nonlinear least-squares fit of the Gaussian NSD model.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .dataset import GridSpec, ParamRanges, Sample
from .physics import TWO_PI, NsdParams

LOG_FIT_FLOOR = 0.05          # coherence below the noise scale is log-garbage
MAX_HARMONIC = 11             # comb truncation; k <= 11 keeps the model <0.5% off
LARGE_RESIDUAL_THRESHOLD = 10.0


class InsufficientDataError(ValueError):
    """Fewer than three usable (N, C) points at a tau."""


class FitFailureError(RuntimeError):
    """Levenberg-Marquardt did not converge; carries the best-so-far result."""

    def __init__(self, message, params: NsdParams, report: "FitReport"):
        super().__init__(message)
        self.params = params
        self.report = report


@dataclass(frozen=True)
class DecayFit:
    tau: float
    gamma: float
    gamma_err: float
    points_used: int


@dataclass(frozen=True)
class SpectrumPoint:
    omega: float
    s_value: float
    harmonic_index: int
    tau: float


@dataclass(frozen=True)
class FitReport:
    chi2: float
    reduced_chi2: float
    dof: int
    n_iterations: int
    converged: bool

    @property
    def large_residual(self) -> bool:
        return self.reduced_chi2 > LARGE_RESIDUAL_THRESHOLD


def fit_decay_rate(n_pulses, tau: float, values, floor: float = LOG_FIT_FLOOR) -> DecayFit:
    """Decay rate of C = exp(-Gamma * N * tau) from points at one tau.

    Linear regression of ln C on T = N*tau over points with C > floor.
    Returns the rate and the standard error of the fitted slope (zero for an
    exact exponential).
    """
    n_pulses = np.asarray(n_pulses, dtype=float)
    values = np.asarray(values, dtype=float)
    if n_pulses.shape != values.shape:
        raise ValueError("n_pulses and values must have equal length")
    usable = values > floor
    n_used = int(usable.sum())
    if n_used < 3:
        raise InsufficientDataError(
            f"only {n_used} usable points (C > {floor}) at tau={tau}")
    t = n_pulses[usable] * tau
    y = np.log(values[usable])
    design = np.vstack([np.ones_like(t), t]).T
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    gamma = -float(coef[1])
    resid = y - design @ coef
    ss_res = float(resid @ resid)
    s_xx = float(np.sum((t - t.mean()) ** 2))
    err = float(np.sqrt(ss_res / (n_used - 2) / s_xx))
    return DecayFit(tau=float(tau), gamma=gamma, gamma_err=err, points_used=n_used)


def harmonic_weight(k: int) -> float:
    """Comb weight of the k-th (odd) filter harmonic."""
    return 4.0 / (np.pi ** 2 * k ** 2)


def decay_rate_model(taus, s0: float, amplitude: float, sigma: float,
                     omega_c: float, k_max: int = MAX_HARMONIC) -> np.ndarray:
    """Gamma(tau) = sum over odd harmonics of weight_k * S(k*pi/tau).

    The flat offset is summed over all harmonics in closed form
    (sum over odd k of 4/(pi^2 k^2) = 1/2); only the Gaussian peak, which is
    negligible beyond the aligned harmonics, is truncated at k_max.  A plain
    truncation would drop ~3% of the offset contribution.
    """
    taus = np.asarray(taus, dtype=float)
    width = TWO_PI * sigma
    out = np.full_like(taus, TWO_PI * s0 * 0.5)
    for k in range(1, k_max + 1, 2):
        omega = k * np.pi / taus
        gauss = TWO_PI * amplitude * np.exp(
            -((omega - omega_c) ** 2) / (2.0 * width * width))
        out += harmonic_weight(k) * gauss
    return out


def assign_harmonics(grid: GridSpec, omega_c: float) -> dict[tuple[float, float], int]:
    """Window -> aligned odd harmonic (the odd k with k*pi/tau_mid nearest omega_c)."""
    mapping = {}
    for window in grid.tau_windows:
        mid = 0.5 * (window[0] + window[1])
        k = max(1, round(omega_c * mid / np.pi))
        if k % 2 == 0:
            low, high = k - 1, k + 1
            k = low if abs(low * np.pi / mid - omega_c) <= abs(high * np.pi / mid - omega_c) else high
        mapping[window] = k
    return mapping


def reconstruct_spectrum_points(fits: list[DecayFit],
                                harmonic_by_window: dict[tuple[float, float], int],
                                background: NsdParams | None = None,
                                k_max: int = MAX_HARMONIC) -> list[SpectrumPoint]:
    """Pointwise spectrum estimate at omega = k*pi/tau for each decay fit.

    s_value = (pi^2 k*^2 / 4) * (Gamma - Gamma_bg), where Gamma_bg collects
    the modelled contribution of every harmonic other than k* (zero when no
    background estimate is supplied).
    """
    points = []
    for fit in fits:
        k_star = None
        for window, k in harmonic_by_window.items():
            if window[0] <= fit.tau <= window[1]:
                k_star = k
                break
        if k_star is None:
            continue
        gamma_bg = 0.0
        if background is not None:
            total = decay_rate_model([fit.tau], background.s0, background.amplitude,
                                     background.sigma, background.omega_c, k_max)[0]
            own = harmonic_weight(k_star) * float(
                TWO_PI * background.s0 + TWO_PI * background.amplitude * np.exp(
                    -((k_star * np.pi / fit.tau - background.omega_c) ** 2)
                    / (2.0 * (TWO_PI * background.sigma) ** 2)))
            gamma_bg = total - own
        s_value = (fit.gamma - gamma_bg) / harmonic_weight(k_star)
        points.append(SpectrumPoint(omega=float(k_star * np.pi / fit.tau),
                                    s_value=float(s_value),
                                    harmonic_index=k_star, tau=float(fit.tau)))
    return points


def export_spectrum_csv(points: list[SpectrumPoint], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["omega_rad_per_us", "s_value", "harmonic_index", "tau_us"])
        for p in points:
            writer.writerow([repr(p.omega), repr(p.s_value), p.harmonic_index,
                             repr(p.tau)])


def _bounds(ranges: ParamRanges) -> tuple[np.ndarray, np.ndarray]:
    """Sampling ranges expanded by +-50%."""
    return 0.5 * ranges.lower(), 1.5 * ranges.upper()


def _initial_guess(fits: list[DecayFit], harmonic_by_window, omega_c: float,
                   lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    gammas = np.array([f.gamma for f in fits])
    # flat background: Gamma = S0/2, S0 angular, so s0 [MHz] = 2*Gamma/(2*pi)
    s0 = 2.0 * max(float(gammas.min()), 0.0) / TWO_PI
    points = reconstruct_spectrum_points(fits, harmonic_by_window)
    s_vals = np.array([max(p.s_value, 0.0) for p in points])
    omegas = np.array([p.omega for p in points])
    if len(s_vals) and s_vals.max() > 0:
        amp = s_vals.max() / TWO_PI - s0
        second = np.sum(s_vals * (omegas - omega_c) ** 2) / np.sum(s_vals)
        sigma = np.sqrt(max(second, 0.0)) / TWO_PI
    else:
        amp, sigma = 0.0, 0.0
    return np.clip(np.array([s0, amp, sigma]), lo, hi)


def _model_jacobian(taus: np.ndarray, p: np.ndarray, omega_c: float,
                    k_max: int) -> np.ndarray:
    """d Gamma / d (s0, amplitude, sigma), analytic."""
    width = TWO_PI * p[2]
    jac = np.zeros((len(taus), 3))
    jac[:, 0] = TWO_PI * 0.5  # exact flat-offset sum over all harmonics
    for k in range(1, k_max + 1, 2):
        omega = k * np.pi / taus
        w_k = harmonic_weight(k)
        gauss = np.exp(-((omega - omega_c) ** 2) / (2.0 * width * width))
        jac[:, 1] += w_k * TWO_PI * gauss
        jac[:, 2] += w_k * TWO_PI * p[1] * gauss * ((omega - omega_c) ** 2 / width ** 3) * TWO_PI
    return jac


def fit_nsd_model(fits: list[DecayFit], ranges: ParamRanges,
                  omega_c: float | None = None, k_max: int = MAX_HARMONIC,
                  max_iterations: int = 200,
                  grid: GridSpec | None = None) -> tuple[NsdParams, FitReport]:
    """Joint weighted Levenberg-Marquardt fit of the Gaussian NSD to decay rates.

    Weights are 1/gamma_err^2 (floored for conditioning); parameters live in
    a unit box mapped onto the sampling ranges expanded by +-50%.  Raises
    FitFailureError carrying the best-so-far estimate on non-convergence.
    """
    if omega_c is None:
        omega_c = ranges.omega_c
    if grid is None:
        grid = GridSpec()
    windows_hit = {w for f in fits for w in grid.tau_windows if w[0] <= f.tau <= w[1]}
    if len(fits) < 6 or len(windows_hit) < min(2, len(grid.tau_windows)):
        raise InsufficientDataError(
            f"need >= 6 decay fits spanning both windows, got {len(fits)} "
            f"covering {len(windows_hit)} window(s)")

    fits = sorted(fits, key=lambda f: f.tau)
    taus = np.array([f.tau for f in fits])
    gammas = np.array([f.gamma for f in fits])
    errs = np.array([f.gamma_err for f in fits])
    floor = max(1e-6 * max(float(np.abs(gammas).max()), 1e-30), 1e-30)
    weights = 1.0 / np.maximum(errs, floor) ** 2
    sqrt_w = np.sqrt(weights)

    lo, hi = _bounds(ranges)
    span = hi - lo
    harmonics = assign_harmonics(grid, omega_c)
    z = (np.asarray(_initial_guess(fits, harmonics, omega_c, lo, hi)) - lo) / span
    z = np.clip(z, 0.0, 1.0)

    def residuals(z_vec):
        p = lo + z_vec * span
        return (decay_rate_model(taus, p[0], p[1], p[2], omega_c, k_max) - gammas) * sqrt_w

    res = residuals(z)
    cost = float(res @ res)
    lam = 1e-3
    converged = False
    iteration = 0
    for iteration in range(1, max_iterations + 1):
        p = lo + z * span
        jac = _model_jacobian(taus, p, omega_c, k_max) * span[None, :] * sqrt_w[:, None]
        grad = jac.T @ res
        hess = jac.T @ jac
        damped = hess + lam * np.diag(np.diag(hess) + 1e-30)
        try:
            step = np.linalg.solve(damped, -grad)
        except np.linalg.LinAlgError:
            lam *= 10.0
            continue
        z_new = np.clip(z + step, 0.0, 1.0)
        res_new = residuals(z_new)
        cost_new = float(res_new @ res_new)
        if cost_new <= cost:
            moved = float(np.linalg.norm(z_new - z))
            improved = cost - cost_new
            z, res, cost = z_new, res_new, cost_new
            lam = max(lam * 0.3, 1e-14)
            if moved < 1e-12 or improved <= 1e-14 * max(cost, 1e-30):
                converged = True
                break
        else:
            lam *= 10.0
            if lam > 1e14:
                converged = True  # stuck at a (possibly bound-constrained) minimum
                break

    p_best = lo + z * span
    dof = max(len(fits) - 3, 1)
    report = FitReport(chi2=cost, reduced_chi2=cost / dof, dof=dof,
                       n_iterations=iteration, converged=converged)
    params = NsdParams(s0=float(p_best[0]), amplitude=float(p_best[1]),
                       sigma=float(p_best[2]), omega_c=omega_c)
    if not converged:
        raise FitFailureError(
            f"no convergence after {max_iterations} LM iterations", params, report)
    return params, report


def reconstruct(sample: Sample, grid: GridSpec, n_bar: int,
                ranges: ParamRanges) -> tuple[NsdParams, list[DecayFit], FitReport]:
    """Full HS pipeline for one sample using curves with N <= n_bar."""
    n_used = grid.n_values_up_to(n_bar)
    if len(n_used) < 3:
        raise InsufficientDataError(
            f"decay fits need >= 3 pulse counts, n_bar={n_bar} gives {len(n_used)}")
    curves = {c.n_pulses: c for c in sample.curves}
    taus = grid.tau_grid()
    fits = []
    for i, tau in enumerate(taus):
        values = np.array([curves[n].values[i] for n in n_used])
        try:
            fits.append(fit_decay_rate(np.array(n_used, dtype=float), tau, values))
        except InsufficientDataError:
            continue
    try:
        params, report = fit_nsd_model(fits, ranges, ranges.omega_c, grid=grid)
    except FitFailureError as exc:
        params, report = exc.params, exc.report
    return params, fits, report
