"""Synthetic coherence-curve datasets: sampling, noise, assembly, persistence.

A sample is one set of NSD parameters plus its coherence curves over the tau
grids for every pulse count in the grid spec.  All randomness flows from a
single seed through named PCG64 streams so generation is bit-reproducible
and per-sample noise streams are independent of generation order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .physics import (CoherenceCurve, NsdParams, decoherence_exponents,
                      default_omega_c)

FORMAT_VERSION = "noisespec-dataset-1"
GENERATOR_ID = "pcg64"

# stream tags fanned out from the dataset seed
_PARAMS_STREAM = 0
_SHUFFLE_STREAM = 1
_NOISE_STREAM_BASE = 2


class DatasetFormatError(ValueError):
    """Base class for malformed dataset files."""


class UnknownVersionError(DatasetFormatError):
    pass


class MalformedHeaderError(DatasetFormatError):
    pass


class GridMismatchError(DatasetFormatError):
    pass


class TruncatedDataError(DatasetFormatError):
    pass


@dataclass(frozen=True)
class ParamRanges:
    """Uniform sampling intervals for (s0, amplitude, sigma), MHz; omega_c fixed."""

    s0: tuple[float, float] = (4e-4, 4e-3)
    amplitude: tuple[float, float] = (0.3, 0.7)
    sigma: tuple[float, float] = (2e-3, 9e-3)
    omega_c: float = field(default_factory=default_omega_c)

    def __post_init__(self):
        # degenerate [c, c] ranges are tolerated (they pin a parameter)
        for name in ("s0", "amplitude", "sigma"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range must have lower <= upper, got ({lo}, {hi})")

    def lower(self) -> np.ndarray:
        return np.array([self.s0[0], self.amplitude[0], self.sigma[0]])

    def upper(self) -> np.ndarray:
        return np.array([self.s0[1], self.amplitude[1], self.sigma[1]])

    def contains(self, params: NsdParams) -> bool:
        vec = np.array([params.s0, params.amplitude, params.sigma])
        return bool(np.all(vec >= self.lower()) and np.all(vec <= self.upper()))


@dataclass(frozen=True)
class GridSpec:
    """tau windows (us), sampling step (ns) and the ordered pulse counts."""

    tau_windows: tuple[tuple[float, float], ...] = ((3.3, 3.66), (5.5, 6.1))
    delta_tau_ns: int = 20
    n_values: tuple[int, ...] = (1, 8, 16, 24, 32, 40, 48)

    def __post_init__(self):
        if self.delta_tau_ns <= 0:
            raise ValueError("delta_tau_ns must be > 0")
        prev_end = -np.inf
        for start, end in self.tau_windows:
            if not start < end:
                raise ValueError(f"window ({start}, {end}) must be increasing")
            if start <= prev_end:
                raise ValueError("tau windows must be disjoint and increasing")
            prev_end = end
            span_ns = round((end - start) * 1000)
            if span_ns % self.delta_tau_ns != 0:
                raise ValueError(
                    f"window ({start}, {end}) not divisible by {self.delta_tau_ns} ns")
        ns = self.n_values
        if len(ns) == 0 or ns[0] != 1:
            raise ValueError("n_values must start at 1")
        if any(b <= a for a, b in zip(ns, ns[1:])):
            raise ValueError("n_values must be strictly increasing")

    def tau_grid(self) -> np.ndarray:
        """All tau values, window 1 then window 2, endpoints inclusive."""
        parts = []
        for start, end in self.tau_windows:
            start_ns = round(start * 1000)
            count = round((end - start) * 1000) // self.delta_tau_ns + 1
            parts.append((start_ns + self.delta_tau_ns * np.arange(count)) / 1000.0)
        return np.concatenate(parts)

    def n_values_up_to(self, n_bar: int) -> tuple[int, ...]:
        if n_bar not in self.n_values:
            raise ValueError(f"n_bar {n_bar} not in grid n_values {self.n_values}")
        return tuple(n for n in self.n_values if n <= n_bar)

    def feature_length(self, n_bar: int) -> int:
        return len(self.tau_grid()) * len(self.n_values_up_to(n_bar))


@dataclass
class Sample:
    """One labelled instance: NSD parameters plus curves for every N."""

    label: NsdParams
    curves: list[CoherenceCurve]
    noisy: bool


@dataclass
class Dataset:
    grid: GridSpec
    ranges: ParamRanges
    seed: int
    noise_std: float
    samples: list[Sample]
    split: tuple[list[int], list[int], list[int]]

    def split_indices(self, name: str) -> list[int]:
        try:
            return self.split[("train", "validation", "test").index(name)]
        except ValueError:
            raise ValueError(f"unknown split {name!r}") from None


def _rng(seed: int, tag: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, tag))))


def sample_params(ranges: ParamRanges, rng: np.random.Generator) -> NsdParams:
    """One uniform draw of (s0, amplitude, sigma); omega_c copied from ranges."""
    lo, hi = ranges.lower(), ranges.upper()
    draw = rng.uniform(lo, hi)
    return NsdParams(s0=draw[0], amplitude=draw[1], sigma=draw[2],
                     omega_c=ranges.omega_c)


def synthesize_sample(params: NsdParams, grid: GridSpec) -> Sample:
    """Noiseless coherence curves for every (tau, N) of the grid."""
    taus = grid.tau_grid()
    curves = [
        CoherenceCurve(n, taus, np.exp(-decoherence_exponents(params, n, taus)))
        for n in grid.n_values
    ]
    return Sample(label=params, curves=curves, noisy=False)


def add_noise(sample: Sample, noise_std: float, rng: np.random.Generator) -> Sample:
    """Independent Normal(0, noise_std) on every curve point; values unclamped."""
    if sample.noisy:
        raise ValueError("sample is already noisy")
    if noise_std == 0.0:
        return Sample(label=sample.label, curves=list(sample.curves), noisy=False)
    curves = [
        CoherenceCurve(c.n_pulses, c.tau_grid,
                       c.values + rng.normal(0.0, noise_std, size=len(c.values)))
        for c in sample.curves
    ]
    return Sample(label=sample.label, curves=curves, noisy=True)


def assemble_feature_vector(sample: Sample, n_bar: int) -> np.ndarray:
    """Concatenated curve values for all N <= n_bar, N ascending.

    Within each N the order is all taus of window 1 then window 2.
    """
    chosen = [c for c in sample.curves if c.n_pulses <= n_bar]
    if not any(c.n_pulses == n_bar for c in sample.curves):
        raise ValueError(f"n_bar {n_bar} has no curve in this sample")
    chosen.sort(key=lambda c: c.n_pulses)
    return np.concatenate([c.values for c in chosen])


def split_sizes(count: int) -> tuple[int, int, int]:
    """6:2:2 split, remainder to the test set."""
    n_train = int(count * 0.6)
    n_val = int(count * 0.2)
    return n_train, n_val, count - n_train - n_val


def build_dataset(ranges: ParamRanges, grid: GridSpec, count: int, seed: int,
                  noise_std: float = 0.05,
                  split: tuple[int, int, int] | None = None,
                  progress=None) -> Dataset:
    """Sample labels, synthesize curves, add noise, assign the split.

    split overrides the default 6:2:2 sizes (it must sum to count).  progress,
    if given, is called with (done, total) after each sample.
    """
    if count < 10:
        raise ValueError("count must be >= 10")
    if split is None:
        split = split_sizes(count)
    if sum(split) != count or any(s < 0 for s in split):
        raise ValueError(f"split {split} does not partition count {count}")

    params_rng = _rng(seed, _PARAMS_STREAM)
    labels = [sample_params(ranges, params_rng) for _ in range(count)]

    samples = []
    for i, label in enumerate(labels):
        clean = synthesize_sample(label, grid)
        noisy = add_noise(clean, noise_std, _rng(seed, _NOISE_STREAM_BASE + i))
        samples.append(noisy)
        if progress is not None:
            progress(i + 1, count)

    order = _rng(seed, _SHUFFLE_STREAM).permutation(count)
    n_train, n_val, _ = split
    idx = (sorted(order[:n_train].tolist()),
           sorted(order[n_train:n_train + n_val].tolist()),
           sorted(order[n_train + n_val:].tolist()))
    return Dataset(grid=grid, ranges=ranges, seed=seed, noise_std=noise_std,
                   samples=samples, split=idx)


def feature_matrix(dataset: Dataset, n_bar: int,
                   split: str | None = None) -> tuple[np.ndarray, np.ndarray]:
    """(X, y) for a split ('train'/'validation'/'test') or the whole corpus.

    y columns are (s0, amplitude, sigma) in MHz.
    """
    if split is None:
        rows = range(len(dataset.samples))
    else:
        rows = dataset.split_indices(split)
    x = np.array([assemble_feature_vector(dataset.samples[i], n_bar) for i in rows])
    y = np.array([[dataset.samples[i].label.s0,
                   dataset.samples[i].label.amplitude,
                   dataset.samples[i].label.sigma] for i in rows])
    return x, y


# ---------------------------------------------------------------------------
# persistence: self-describing text container
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def save_dataset(dataset: Dataset, path) -> None:
    grid, ranges = dataset.grid, dataset.ranges
    windows = " ".join(f"{_fmt(a)} {_fmt(b)}" for a, b in grid.tau_windows)
    lines = [
        f"format = {FORMAT_VERSION}",
        f"seed = {dataset.seed}",
        f"generator = {GENERATOR_ID}",
        f"noise_std = {_fmt(dataset.noise_std)}",
        f"s0_range_mhz = {_fmt(ranges.s0[0])} {_fmt(ranges.s0[1])}",
        f"amplitude_range_mhz = {_fmt(ranges.amplitude[0])} {_fmt(ranges.amplitude[1])}",
        f"sigma_range_mhz = {_fmt(ranges.sigma[0])} {_fmt(ranges.sigma[1])}",
        f"omega_c_rad_per_us = {_fmt(ranges.omega_c)}",
        f"tau_windows_us = {windows}",
        f"delta_tau_ns = {grid.delta_tau_ns}",
        f"n_values = {' '.join(str(n) for n in grid.n_values)}",
        f"samples = {len(dataset.samples)}",
        f"split = {' '.join(str(len(s)) for s in dataset.split)}",
    ]
    n_bar_max = grid.n_values[-1]
    for sample in dataset.samples:
        label = sample.label
        vec = assemble_feature_vector(sample, n_bar_max)
        fields = [_fmt(label.s0), _fmt(label.amplitude), _fmt(label.sigma)]
        fields.extend(_fmt(v) for v in vec)
        lines.append(" ".join(fields))
    Path(path).write_text("\n".join(lines) + "\n")


def _parse_header(lines: list[str], keys: list[str]) -> dict[str, str]:
    header = {}
    for i, key in enumerate(keys):
        if i >= len(lines) or "=" not in lines[i]:
            raise MalformedHeaderError(f"missing header line for {key!r}")
        name, _, value = lines[i].partition("=")
        if name.strip() != key:
            raise MalformedHeaderError(
                f"expected header key {key!r}, found {name.strip()!r}")
        header[key] = value.strip()
    return header


_HEADER_KEYS = ["format", "seed", "generator", "noise_std", "s0_range_mhz",
                "amplitude_range_mhz", "sigma_range_mhz", "omega_c_rad_per_us",
                "tau_windows_us", "delta_tau_ns", "n_values", "samples", "split"]


def load_dataset(path) -> Dataset:
    lines = Path(path).read_text().splitlines()
    header = _parse_header(lines, _HEADER_KEYS)
    if header["format"] != FORMAT_VERSION:
        raise UnknownVersionError(f"unsupported format {header['format']!r}")
    if header["generator"] != GENERATOR_ID:
        raise MalformedHeaderError(f"unknown generator {header['generator']!r}")
    try:
        seed = int(header["seed"])
        noise_std = float(header["noise_std"])
        s0_range = tuple(float(v) for v in header["s0_range_mhz"].split())
        amp_range = tuple(float(v) for v in header["amplitude_range_mhz"].split())
        sigma_range = tuple(float(v) for v in header["sigma_range_mhz"].split())
        omega_c = float(header["omega_c_rad_per_us"])
        win_vals = [float(v) for v in header["tau_windows_us"].split()]
        delta_tau_ns = int(header["delta_tau_ns"])
        n_values = tuple(int(v) for v in header["n_values"].split())
        count = int(header["samples"])
        split_counts = [int(v) for v in header["split"].split()]
    except ValueError as exc:
        raise MalformedHeaderError(f"unparsable header value: {exc}") from None
    if len(win_vals) % 2 != 0 or len(split_counts) != 3:
        raise MalformedHeaderError("malformed tau_windows_us or split")
    windows = tuple(zip(win_vals[::2], win_vals[1::2]))

    ranges = ParamRanges(s0=s0_range, amplitude=amp_range, sigma=sigma_range,
                         omega_c=omega_c)
    grid = GridSpec(tau_windows=windows, delta_tau_ns=delta_tau_ns,
                    n_values=n_values)
    taus = grid.tau_grid()
    n_cols = 3 + len(taus) * len(n_values)

    rows = lines[len(_HEADER_KEYS):]
    rows = [r for r in rows if r.strip()]
    if len(rows) < count:
        raise TruncatedDataError(f"expected {count} records, found {len(rows)}")
    if len(rows) > count:
        raise GridMismatchError(f"expected {count} records, found {len(rows)}")

    samples = []
    n_tau = len(taus)
    for r, row in enumerate(rows):
        fields = row.split()
        if len(fields) != n_cols:
            raise GridMismatchError(
                f"record {r}: expected {n_cols} columns, found {len(fields)}")
        try:
            values = np.array([float(v) for v in fields])
        except ValueError:
            raise GridMismatchError(f"record {r}: non-numeric field") from None
        label = NsdParams(s0=values[0], amplitude=values[1], sigma=values[2],
                          omega_c=omega_c)
        curves = [
            CoherenceCurve(n, taus, values[3 + j * n_tau: 3 + (j + 1) * n_tau])
            for j, n in enumerate(n_values)
        ]
        samples.append(Sample(label=label, curves=curves, noisy=noise_std > 0))

    if sum(split_counts) != count:
        raise MalformedHeaderError(f"split {split_counts} does not sum to {count}")
    order = _rng(seed, _SHUFFLE_STREAM).permutation(count)
    n_train, n_val, _ = split_counts
    split = (sorted(order[:n_train].tolist()),
             sorted(order[n_train:n_train + n_val].tolist()),
             sorted(order[n_train + n_val:].tolist()))
    return Dataset(grid=grid, ranges=ranges, seed=seed, noise_std=noise_std,
                   samples=samples, split=split)
