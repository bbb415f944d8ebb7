"""Harmonics-spectroscopy tests: decay fits, comb model, joint NSD fit."""

import numpy as np
import pytest

from noisespec.dataset import GridSpec, ParamRanges, synthesize_sample
from noisespec.hs import (DecayFit, InsufficientDataError, assign_harmonics,
                          decay_rate_model, export_spectrum_csv, fit_decay_rate,
                          fit_nsd_model, harmonic_weight, reconstruct,
                          reconstruct_spectrum_points)
from noisespec.physics import (TWO_PI, NsdParams, PulseSequence,
                               decoherence_exponent, default_omega_c)

OMEGA_C = default_omega_c()
GRID = GridSpec()
RANGES = ParamRanges()
N_LIST = np.array([1.0, 8.0, 16.0, 24.0, 32.0, 40.0, 48.0])


# ---------------------------------------------------------------------------
# decay-rate fits
# ---------------------------------------------------------------------------

def test_fit_decay_exact_exponential():
    # T = {3.5, 28, 56}: the last point sits below the default log floor
    # (e^-5.6 = 0.004), so the exact-recovery case disables the floor
    tau = 3.5
    ns = np.array([1.0, 8.0, 16.0])
    values = np.exp(-0.1 * ns * tau)
    fit = fit_decay_rate(ns, tau, values, floor=0.0)
    assert fit.gamma == pytest.approx(0.1, abs=1e-12)
    assert fit.gamma_err == pytest.approx(0.0, abs=1e-10)
    assert fit.points_used == 3


def test_fit_decay_exact_exponential_default_floor():
    tau = 3.5
    ns = np.array([1.0, 8.0, 16.0])
    values = np.exp(-0.05 * ns * tau)  # all three points above the floor
    fit = fit_decay_rate(ns, tau, values)
    assert fit.gamma == pytest.approx(0.05, abs=1e-12)
    assert fit.points_used == 3


def test_fit_decay_constant_coherence():
    fit = fit_decay_rate(N_LIST, 4.0, np.ones(len(N_LIST)))
    assert fit.gamma == pytest.approx(0.0, abs=1e-14)


def test_fit_decay_matches_large_n_secant():
    # noiseless curve at the aligned 3rd harmonic, amplitude small enough
    # that every pulse count stays above the log floor
    tau_star = 3 * np.pi / OMEGA_C
    params = NsdParams(s0=5e-4, amplitude=0.03, sigma=5e-3)
    chis = np.array([decoherence_exponent(params, PulseSequence(int(n), tau_star))
                     for n in N_LIST])
    fit = fit_decay_rate(N_LIST, tau_star, np.exp(-chis))
    assert fit.points_used == len(N_LIST)
    secant = (chis[-1] - chis[1]) / ((48 - 8) * tau_star)
    assert fit.gamma == pytest.approx(secant, rel=0.10)


def test_fit_decay_floor_guards_log():
    ns = np.array([1.0, 8.0, 16.0, 24.0])
    values = np.array([0.9, 0.5, 0.2, 0.01])  # last point below floor
    fit = fit_decay_rate(ns, 3.5, values)
    assert fit.points_used == 3


def test_fit_decay_insufficient_points():
    ns = np.array([1.0, 8.0, 16.0])
    with pytest.raises(InsufficientDataError):
        fit_decay_rate(ns, 3.5, np.array([0.9, 0.04, 0.01]))


# ---------------------------------------------------------------------------
# harmonic weights and spectrum points
# ---------------------------------------------------------------------------

def test_harmonic_weights_sum_to_half():
    total = sum(harmonic_weight(k) for k in range(1, 20001, 2))
    assert total == pytest.approx(0.5, rel=1e-4)


def test_assign_harmonics_default_windows():
    assert assign_harmonics(GRID, OMEGA_C) == {(3.3, 3.66): 3, (5.5, 6.1): 5}


def test_spectrum_point_at_aligned_tau():
    tau = 3.4754
    fits = [DecayFit(tau=tau, gamma=0.01, gamma_err=1e-3, points_used=7)]
    points = reconstruct_spectrum_points(fits, {(3.3, 3.66): 3})
    assert len(points) == 1
    assert points[0].harmonic_index == 3
    assert points[0].omega == pytest.approx(3 * np.pi / tau, rel=1e-12)
    assert points[0].omega == pytest.approx(OMEGA_C, rel=1e-4)
    assert points[0].s_value == pytest.approx(0.01 / harmonic_weight(3), rel=1e-12)


def test_spectrum_points_zero_rates():
    fits = [DecayFit(tau=t, gamma=0.0, gamma_err=1e-3, points_used=7)
            for t in (3.3, 3.5, 5.6)]
    points = reconstruct_spectrum_points(fits, assign_harmonics(GRID, OMEGA_C))
    assert all(p.s_value == 0.0 for p in points)


def test_first_pass_flat_overestimate_factor():
    # flat NSD S=s (angular): Gamma = s/2, so the first-pass point reads
    # (pi^2 k^2 / 4) * s / 2 -- the documented comb-inversion bias
    s_ang = 0.01
    fits = [DecayFit(tau=3.48, gamma=s_ang / 2, gamma_err=1e-3, points_used=7)]
    points = reconstruct_spectrum_points(fits, {(3.3, 3.66): 3})
    expect = (np.pi ** 2 * 9 / 4.0) * (s_ang / 2)
    assert points[0].s_value == pytest.approx(expect, rel=1e-12)


def test_spectrum_points_background_corrected():
    # with the true NSD supplied as background, the corrected point recovers
    # S(k* pi / tau) exactly for model-generated rates
    truth = NsdParams(s0=2e-3, amplitude=0.5, sigma=5e-3, omega_c=OMEGA_C)
    tau = 3.5
    gamma = decay_rate_model(np.array([tau]), truth.s0, truth.amplitude,
                             truth.sigma, OMEGA_C)[0]
    fits = [DecayFit(tau=tau, gamma=float(gamma), gamma_err=1e-3, points_used=7)]
    points = reconstruct_spectrum_points(fits, {(3.3, 3.66): 3}, background=truth)
    omega_star = 3 * np.pi / tau
    width = TWO_PI * truth.sigma
    s_want = TWO_PI * truth.s0 + TWO_PI * truth.amplitude * np.exp(
        -((omega_star - OMEGA_C) ** 2) / (2 * width ** 2))
    assert points[0].s_value == pytest.approx(s_want, rel=1e-9)


def test_spectrum_csv_export(tmp_path):
    fits = [DecayFit(tau=3.48, gamma=0.02, gamma_err=1e-3, points_used=7)]
    points = reconstruct_spectrum_points(fits, {(3.3, 3.66): 3})
    path = tmp_path / "spectrum.csv"
    export_spectrum_csv(points, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "omega_rad_per_us,s_value,harmonic_index,tau_us"
    assert len(lines) == 2


# ---------------------------------------------------------------------------
# forward model
# ---------------------------------------------------------------------------

def test_decay_model_monotone_in_offset_and_amplitude():
    taus = GRID.tau_grid()
    base = decay_rate_model(taus, 2e-3, 0.5, 5e-3, OMEGA_C)
    up_s0 = decay_rate_model(taus, 2.5e-3, 0.5, 5e-3, OMEGA_C)
    up_amp = decay_rate_model(taus, 2e-3, 0.6, 5e-3, OMEGA_C)
    assert np.all(up_s0 > base)
    assert np.all(up_amp >= base)
    assert up_amp[np.argmax(base)] > base[np.argmax(base)]


def test_decay_model_truncation_immaterial():
    # the flat offset is summed in closed form, so k_max only clips the
    # Gaussian tails, which are dead beyond the aligned harmonics
    rng = np.random.default_rng(0)
    taus = GRID.tau_grid()
    for _ in range(20):
        s0 = rng.uniform(*RANGES.s0)
        amp = rng.uniform(*RANGES.amplitude)
        sigma = rng.uniform(*RANGES.sigma)
        g11 = decay_rate_model(taus, s0, amp, sigma, OMEGA_C, 11)
        g101 = decay_rate_model(taus, s0, amp, sigma, OMEGA_C, 101)
        assert np.max(np.abs(g11 - g101) / g101) < 0.005


def test_decay_model_flat_closed_form():
    taus = GRID.tau_grid()
    got = decay_rate_model(taus, 2e-3, 0.0, 5e-3, OMEGA_C)
    np.testing.assert_allclose(got, TWO_PI * 2e-3 / 2.0)


# ---------------------------------------------------------------------------
# joint NSD fit
# ---------------------------------------------------------------------------

def _fits_from_gammas(taus, gammas, err=1e-4):
    return [DecayFit(tau=float(t), gamma=float(g), gamma_err=err, points_used=7)
            for t, g in zip(taus, gammas)]


def test_fit_nsd_inverse_crime():
    taus = GRID.tau_grid()
    truth = (2e-3, 0.5, 5e-3)
    gammas = decay_rate_model(taus, *truth, OMEGA_C)
    params, report = fit_nsd_model(_fits_from_gammas(taus, gammas), RANGES, OMEGA_C)
    assert report.converged
    got = np.array([params.s0, params.amplitude, params.sigma])
    assert np.max(np.abs(got - truth) / np.array(truth)) < 1e-6


def test_fit_nsd_flat_input_not_biased_by_comb_factor():
    # Gamma = s/2 everywhere: the joint fit must recover s0 = s (MHz), not
    # the (pi^2 k^2 / 4)-inflated first-pass value
    s_mhz = 2e-3
    taus = GRID.tau_grid()
    gammas = np.full(len(taus), TWO_PI * s_mhz / 2.0)
    params, report = fit_nsd_model(_fits_from_gammas(taus, gammas), RANGES, OMEGA_C)
    assert params.s0 == pytest.approx(s_mhz, rel=0.05)
    assert params.amplitude == pytest.approx(0.5 * RANGES.amplitude[0], rel=1e-9)
    assert report.large_residual  # no Gaussian peak in the data


def test_fit_nsd_zero_rates_pins_amplitude_low():
    taus = GRID.tau_grid()
    params, report = fit_nsd_model(_fits_from_gammas(taus, np.zeros(len(taus))),
                                   RANGES, OMEGA_C)
    assert params.amplitude == pytest.approx(0.5 * RANGES.amplitude[0], rel=1e-9)
    assert params.s0 == pytest.approx(0.5 * RANGES.s0[0], rel=1e-9)
    assert report.large_residual


def test_fit_nsd_reorder_invariant():
    taus = GRID.tau_grid()
    gammas = decay_rate_model(taus, 1.5e-3, 0.4, 6e-3, OMEGA_C)
    gammas = gammas + 1e-4 * np.sin(7.0 * taus)  # mild model mismatch
    fits = _fits_from_gammas(taus, gammas)
    p1, _ = fit_nsd_model(fits, RANGES, OMEGA_C)
    rng = np.random.default_rng(1)
    shuffled = [fits[i] for i in rng.permutation(len(fits))]
    p2, _ = fit_nsd_model(shuffled, RANGES, OMEGA_C)
    assert p1 == p2


def test_fit_nsd_requires_both_windows():
    taus = GRID.tau_grid()[:19]  # window 1 only
    gammas = decay_rate_model(taus, 2e-3, 0.5, 5e-3, OMEGA_C)
    with pytest.raises(InsufficientDataError):
        fit_nsd_model(_fits_from_gammas(taus, gammas), RANGES, OMEGA_C)


def test_fit_nsd_weights_respected():
    # an off-model outlier with a huge error bar must not move the fit
    taus = GRID.tau_grid()
    truth = (2e-3, 0.5, 5e-3)
    gammas = decay_rate_model(taus, *truth, OMEGA_C)
    fits = _fits_from_gammas(taus, gammas, err=1e-5)
    fits[0] = DecayFit(tau=fits[0].tau, gamma=10.0, gamma_err=1e6, points_used=7)
    params, _ = fit_nsd_model(fits, RANGES, OMEGA_C)
    got = np.array([params.s0, params.amplitude, params.sigma])
    assert np.max(np.abs(got - truth) / np.array(truth)) < 1e-3


# ---------------------------------------------------------------------------
# end-to-end reconstruction
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def noiseless_sample():
    truth = NsdParams(s0=2e-3, amplitude=0.5, sigma=5e-3, omega_c=RANGES.omega_c)
    return truth, synthesize_sample(truth, GRID)


def test_reconstruct_noiseless_recovery(noiseless_sample):
    truth, sample = noiseless_sample
    params, fits, report = reconstruct(sample, GRID, 48, RANGES)
    assert len(fits) >= 6
    assert params.amplitude == pytest.approx(truth.amplitude, rel=0.15)
    assert params.sigma == pytest.approx(truth.sigma, rel=0.25)


def test_reconstruct_nbar16_runs_with_larger_errors(noiseless_sample):
    truth, sample = noiseless_sample
    params48, fits48, _ = reconstruct(sample, GRID, 48, RANGES)
    params16, fits16, _ = reconstruct(sample, GRID, 16, RANGES)
    assert len(fits16) >= 6
    med16 = np.median([f.gamma_err for f in fits16])
    med48 = np.median([f.gamma_err for f in fits48])
    assert med16 > med48


def test_reconstruct_rejects_too_few_pulse_counts(noiseless_sample):
    _, sample = noiseless_sample
    with pytest.raises(InsufficientDataError):
        reconstruct(sample, GRID, 8, RANGES)
