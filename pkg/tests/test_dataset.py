"""Dataset tests: sampling statistics, noise model, assembly, persistence."""

import math

import numpy as np
import pytest

from noisespec.dataset import (GridSpec, GridMismatchError,
                               MalformedHeaderError, ParamRanges, Sample,
                               TruncatedDataError, UnknownVersionError,
                               add_noise, assemble_feature_vector, build_dataset,
                               feature_matrix, load_dataset, sample_params,
                               save_dataset, split_sizes, synthesize_sample, _rng)
from noisespec.physics import (CoherenceCurve, NsdParams, PulseSequence,
                               decoherence_exponent)

SMALL_GRID = GridSpec(tau_windows=((3.3, 3.42), (5.5, 5.62)), delta_tau_ns=20,
                      n_values=(1, 8, 16))


# ---------------------------------------------------------------------------
# parameter sampling
# ---------------------------------------------------------------------------

def test_sample_params_degenerate_ranges():
    ranges = ParamRanges(s0=(1e-3, 1e-3), amplitude=(0.5, 0.5), sigma=(4e-3, 4e-3))
    rng = _rng(0, 0)
    for _ in range(5):
        p = sample_params(ranges, rng)
        assert (p.s0, p.amplitude, p.sigma) == (1e-3, 0.5, 4e-3)


def test_sample_params_uniform_statistics():
    ranges = ParamRanges()
    rng = _rng(42, 0)
    draws = np.array([[p.s0, p.amplitude, p.sigma]
                      for p in (sample_params(ranges, rng) for _ in range(100_000))])
    lo, hi = ranges.lower(), ranges.upper()
    assert np.all(draws.min(axis=0) >= lo)
    assert np.all(draws.max(axis=0) <= hi)
    mid = (lo + hi) / 2
    stderr = (hi - lo) / math.sqrt(12.0) / math.sqrt(len(draws))
    assert np.all(np.abs(draws.mean(axis=0) - mid) < 3 * stderr)


def test_sample_params_deterministic():
    ranges = ParamRanges()
    a = [sample_params(ranges, _rng(7, 0)) for _ in range(1)]
    first = [sample_params(ranges, _rng(7, 0)) for _ in range(10)]
    second = [sample_params(ranges, _rng(7, 0)) for _ in range(10)]
    assert first == second
    assert a[0] == first[0]


def test_param_ranges_rejects_inverted():
    with pytest.raises(ValueError):
        ParamRanges(s0=(2e-3, 1e-3))


# ---------------------------------------------------------------------------
# synthesis
# ---------------------------------------------------------------------------

def test_synthesize_zero_noise_gives_unit_coherence():
    params = NsdParams(s0=0.0, amplitude=0.0, sigma=5e-3)
    sample = synthesize_sample(params, SMALL_GRID)
    assert not sample.noisy
    for curve in sample.curves:
        np.testing.assert_allclose(curve.values, 1.0)


def test_synthesize_midpoint_minimum_matches_oracle():
    params = NsdParams(s0=2.2e-3, amplitude=0.5, sigma=5.5e-3)
    grid = GridSpec(tau_windows=((3.3, 3.66),), delta_tau_ns=20, n_values=(1, 8, 16))
    sample = synthesize_sample(params, grid)
    curve16 = [c for c in sample.curves if c.n_pulses == 16][0]
    i_min = int(np.argmin(curve16.values))
    seq = PulseSequence(16, float(curve16.tau_grid[i_min]))
    oracle = math.exp(-decoherence_exponent(params, seq, step_scale=0.1,
                                            check=False))
    assert curve16.values[i_min] == pytest.approx(oracle, rel=1e-6)


def test_synthesize_more_pulses_decay_more_at_harmonic():
    params = NsdParams(s0=2e-3, amplitude=0.5, sigma=5e-3)
    grid = GridSpec(tau_windows=((3.46, 3.5),), delta_tau_ns=20,
                    n_values=(1, 8, 48))
    sample = synthesize_sample(params, grid)
    by_n = {c.n_pulses: c.values for c in sample.curves}
    assert np.all(by_n[48] <= by_n[1] + 1e-12)


def test_synthesized_values_in_unit_interval():
    params = NsdParams(s0=4e-3, amplitude=0.7, sigma=9e-3)
    sample = synthesize_sample(params, SMALL_GRID)
    for curve in sample.curves:
        assert np.all(curve.values > 0.0)
        assert np.all(curve.values <= 1.0)


# ---------------------------------------------------------------------------
# noise
# ---------------------------------------------------------------------------

def _clean_sample():
    params = NsdParams(s0=2e-3, amplitude=0.5, sigma=5e-3)
    return synthesize_sample(params, SMALL_GRID)


def test_add_noise_zero_std_is_identity():
    clean = _clean_sample()
    noisy = add_noise(clean, 0.0, _rng(0, 2))
    assert not noisy.noisy
    for a, b in zip(clean.curves, noisy.curves):
        np.testing.assert_array_equal(a.values, b.values)


def test_add_noise_statistics():
    params = NsdParams(s0=2e-3, amplitude=0.5, sigma=5e-3)
    grid = GridSpec()  # full 50-tau grid, 7 pulse counts: 350 points per sample
    clean = synthesize_sample(params, grid)
    resid = []
    for i in range(40):  # >= 10^4 residuals
        noisy = add_noise(clean, 0.05, _rng(123, 2 + i))
        for a, b in zip(clean.curves, noisy.curves):
            resid.append(b.values - a.values)
    resid = np.concatenate(resid)
    assert len(resid) >= 10_000
    assert 0.049 <= resid.std() <= 0.051
    assert noisy.noisy

    # Kolmogorov-Smirnov against Normal(0, 0.05) at the 1% level
    z = np.sort(resid / 0.05)
    cdf = 0.5 * (1.0 + np.vectorize(math.erf)(z / math.sqrt(2.0)))
    emp_hi = np.arange(1, len(z) + 1) / len(z)
    emp_lo = np.arange(0, len(z)) / len(z)
    d_stat = max(np.max(np.abs(emp_hi - cdf)), np.max(np.abs(emp_lo - cdf)))
    assert d_stat < 1.628 / math.sqrt(len(z))


def test_add_noise_deterministic_per_stream():
    clean = _clean_sample()
    a = add_noise(clean, 0.05, _rng(9, 2))
    b = add_noise(clean, 0.05, _rng(9, 2))
    for ca, cb in zip(a.curves, b.curves):
        np.testing.assert_array_equal(ca.values, cb.values)


def test_add_noise_rejects_double_noise():
    noisy = add_noise(_clean_sample(), 0.05, _rng(0, 2))
    with pytest.raises(ValueError):
        add_noise(noisy, 0.05, _rng(0, 3))


# ---------------------------------------------------------------------------
# feature vectors
# ---------------------------------------------------------------------------

def test_feature_length_20ns_grid():
    grid = GridSpec()  # 19 + 31 tau points
    assert len(grid.tau_grid()) == 50
    assert grid.feature_length(16) == 150
    assert grid.feature_length(48) == 350


def test_feature_length_1ns_grid():
    grid = GridSpec(delta_tau_ns=1)
    assert len(grid.tau_grid()) == 962
    assert grid.feature_length(48) == 6734


def test_feature_vector_order_and_nbar_one():
    taus = SMALL_GRID.tau_grid()
    rng = np.random.default_rng(5)
    curves = [CoherenceCurve(n, taus, rng.random(len(taus)))
              for n in SMALL_GRID.n_values]
    sample = Sample(label=NsdParams(1e-3, 0.5, 5e-3), curves=curves, noisy=False)
    vec1 = assemble_feature_vector(sample, 1)
    np.testing.assert_array_equal(vec1, curves[0].values)
    vec16 = assemble_feature_vector(sample, 16)
    assert len(vec16) == 3 * len(taus)
    np.testing.assert_array_equal(vec16[len(taus):2 * len(taus)], curves[1].values)


def test_feature_vector_rejects_unknown_nbar():
    sample = Sample(label=NsdParams(1e-3, 0.5, 5e-3),
                    curves=[CoherenceCurve(1, SMALL_GRID.tau_grid(),
                                           np.ones(len(SMALL_GRID.tau_grid())))],
                    noisy=False)
    with pytest.raises(ValueError):
        assemble_feature_vector(sample, 5)


def test_grid_spec_validation():
    with pytest.raises(ValueError):
        GridSpec(n_values=(8, 16))        # must start at 1
    with pytest.raises(ValueError):
        GridSpec(n_values=(1, 8, 8))      # strictly increasing
    with pytest.raises(ValueError):
        GridSpec(tau_windows=((3.3, 3.66), (3.5, 3.9)))  # overlapping
    with pytest.raises(ValueError):
        GridSpec(tau_windows=((3.3, 3.65),), delta_tau_ns=20)  # not divisible


# ---------------------------------------------------------------------------
# dataset assembly and persistence
# ---------------------------------------------------------------------------

def _tiny_dataset(seed=11, count=10):
    return build_dataset(ParamRanges(), SMALL_GRID, count, seed, 0.05)


def test_split_ratio():
    assert split_sizes(10) == (6, 2, 2)
    assert split_sizes(10_000) == (6000, 2000, 2000)


def test_build_dataset_split_and_labels():
    ds = _tiny_dataset()
    assert tuple(len(s) for s in ds.split) == (6, 2, 2)
    all_idx = sorted(ds.split[0] + ds.split[1] + ds.split[2])
    assert all_idx == list(range(10))
    for sample in ds.samples:
        assert ds.ranges.contains(sample.label)
        assert sample.noisy


def test_build_dataset_split_override():
    ds = build_dataset(ParamRanges(), SMALL_GRID, 12, 1, 0.05, split=(8, 2, 2))
    assert tuple(len(s) for s in ds.split) == (8, 2, 2)
    with pytest.raises(ValueError):
        build_dataset(ParamRanges(), SMALL_GRID, 12, 1, 0.05, split=(8, 2, 1))


def test_build_dataset_rejects_small_count():
    with pytest.raises(ValueError):
        build_dataset(ParamRanges(), SMALL_GRID, 9, 0)


def test_dataset_roundtrip(tmp_path):
    ds = _tiny_dataset()
    path = tmp_path / "data.txt"
    save_dataset(ds, path)
    loaded = load_dataset(path)
    assert loaded.seed == ds.seed
    assert loaded.grid == ds.grid
    assert loaded.split == ds.split
    assert len(loaded.samples) == len(ds.samples)
    for a, b in zip(ds.samples, loaded.samples):
        assert a.label == b.label
        for ca, cb in zip(a.curves, b.curves):
            np.testing.assert_array_equal(ca.values, cb.values)
    # saving the loaded dataset reproduces the file byte for byte
    path2 = tmp_path / "data2.txt"
    save_dataset(loaded, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_build_dataset_bit_reproducible(tmp_path):
    p1, p2 = tmp_path / "a.txt", tmp_path / "b.txt"
    save_dataset(_tiny_dataset(seed=21), p1)
    save_dataset(_tiny_dataset(seed=21), p2)
    assert p1.read_bytes() == p2.read_bytes()
    save_dataset(_tiny_dataset(seed=22), tmp_path / "c.txt")
    assert p1.read_bytes() != (tmp_path / "c.txt").read_bytes()


def test_load_rejects_unknown_version(tmp_path):
    ds = _tiny_dataset()
    path = tmp_path / "data.txt"
    save_dataset(ds, path)
    text = path.read_text().replace("noisespec-dataset-1", "noisespec-dataset-9", 1)
    path.write_text(text)
    with pytest.raises(UnknownVersionError):
        load_dataset(path)


def test_load_rejects_malformed_header(tmp_path):
    ds = _tiny_dataset()
    path = tmp_path / "data.txt"
    save_dataset(ds, path)
    lines = path.read_text().splitlines()
    lines[1] = "sed = 11"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(MalformedHeaderError):
        load_dataset(path)


def test_load_rejects_grid_mismatch(tmp_path):
    ds = _tiny_dataset()
    path = tmp_path / "data.txt"
    save_dataset(ds, path)
    lines = path.read_text().splitlines()
    lines[-1] = lines[-1] + " 0.5"  # extra column
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(GridMismatchError):
        load_dataset(path)

    lines[-1] = " ".join(lines[-1].split()[:-2])  # missing column
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(GridMismatchError):
        load_dataset(path)


def test_load_rejects_truncated_rows(tmp_path):
    ds = _tiny_dataset()
    path = tmp_path / "data.txt"
    save_dataset(ds, path)
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:-2]) + "\n")
    with pytest.raises(TruncatedDataError):
        load_dataset(path)


def test_feature_matrix_shapes():
    ds = _tiny_dataset()
    x, y = feature_matrix(ds, 16, "train")
    assert x.shape == (6, SMALL_GRID.feature_length(16))
    assert y.shape == (6, 3)
    x_all, _ = feature_matrix(ds, 8)
    assert x_all.shape == (10, SMALL_GRID.feature_length(8))
    with pytest.raises(ValueError):
        ds.split_indices("tst")
