"""Dephasing physics for a spin qubit under Carr-Purcell control.

Everything here is a pure function of its inputs.  Frequencies are angular
(rad/us) internally; NSD parameters quoted in MHz (ordinary frequency) are
converted on ingestion by a factor 2*pi.  The coherence of the qubit after a
CP train of N pi pulses with inter-pulse time tau decays as C = exp(-chi),
where chi is the overlap integral of the control filter function with the
noise spectral density.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * np.pi

# Larmor constants of the nuclear spin bath: gyromagnetic ratio in MHz/G and
# static field in G.  omega_c = 2*pi*gamma*B (rad/us).
GYROMAGNETIC_RATIO_MHZ_PER_G = 1.0705e-3
STATIC_FIELD_G = 403.2


def default_omega_c(gamma_mhz_per_g: float = GYROMAGNETIC_RATIO_MHZ_PER_G,
                    field_g: float = STATIC_FIELD_G) -> float:
    """Angular Larmor frequency of the bath spins, rad/us."""
    return TWO_PI * gamma_mhz_per_g * field_g


class QuadratureError(RuntimeError):
    """Step-halving disagreement above tolerance in the chi integral."""


@dataclass(frozen=True)
class NsdParams:
    """Gaussian noise-spectral-density parameters.

    s0, amplitude and sigma are ordinary frequencies in MHz; omega_c is
    angular (rad/us).  The spectral density is
    S(w) = 2*pi*s0 + 2*pi*amplitude * exp(-(w - omega_c)^2 / (2*(2*pi*sigma)^2)).
    """

    s0: float
    amplitude: float
    sigma: float
    omega_c: float = field(default_factory=default_omega_c)

    def __post_init__(self):
        if self.s0 < 0:
            raise ValueError(f"s0 must be >= 0, got {self.s0}")
        if self.amplitude < 0:
            raise ValueError(f"amplitude must be >= 0, got {self.amplitude}")
        if self.sigma <= 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if self.omega_c <= 0:
            raise ValueError(f"omega_c must be > 0, got {self.omega_c}")


@dataclass(frozen=True)
class PulseSequence:
    """CP train of n_pulses equidistant pi pulses, inter-pulse time tau (us)."""

    n_pulses: int
    tau: float

    def __post_init__(self):
        if int(self.n_pulses) != self.n_pulses or self.n_pulses < 1:
            raise ValueError(f"n_pulses must be a positive integer, got {self.n_pulses}")
        if self.tau <= 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")

    @property
    def total_time(self) -> float:
        return self.n_pulses * self.tau

    def switch_times(self) -> np.ndarray:
        """Sign-switch times of the modulation function: tau/2, 3tau/2, ..."""
        return (np.arange(self.n_pulses) + 0.5) * self.tau


@dataclass(frozen=True)
class CoherenceCurve:
    """C(tau, N) sampled on a tau grid for one pulse count N."""

    n_pulses: int
    tau_grid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        tau = np.asarray(self.tau_grid, dtype=float)
        val = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "tau_grid", tau)
        object.__setattr__(self, "values", val)
        if tau.ndim != 1 or val.shape != tau.shape:
            raise ValueError("tau_grid and values must be 1-D and equally long")
        if len(tau) > 1 and not np.all(np.diff(tau) > 0):
            raise ValueError("tau_grid must be strictly increasing")


def nsd_value(params: NsdParams, omega):
    """Spectral density S(omega) in rad/us for angular omega >= 0 (rad/us)."""
    omega = np.asarray(omega, dtype=float)
    width = TWO_PI * params.sigma
    gauss = np.exp(-((omega - params.omega_c) ** 2) / (2.0 * width * width))
    return TWO_PI * params.s0 + TWO_PI * params.amplitude * gauss


def modulation_function(seq: PulseSequence, t):
    """Control modulation y(t) in {+1, -1} for 0 <= t <= N*tau.

    +1 on [0, tau/2); the sign flips at each pulse time tau/2, 3tau/2, ...
    At a switch time the new sign applies.
    """
    t = np.asarray(t, dtype=float)
    if np.any(t < 0) or np.any(t > seq.total_time):
        raise ValueError("t outside [0, N*tau]")
    # number of switch times (k - 1/2)*tau that are <= t
    n_switched = np.floor(t / seq.tau + 0.5).astype(int)
    n_switched = np.minimum(n_switched, seq.n_pulses)
    return np.where(n_switched % 2 == 0, 1.0, -1.0)


def filter_function(seq: PulseSequence, omega):
    """CP filter function F(omega, tau, N), dimensionless, for omega > 0.

    The textbook closed form (8 sin^2(w tau N / 2) sec^2(w tau / 2)
    sin^4(w tau / 4) for even N, with sin^2 -> cos^2 for odd N) has removable
    singularities at w*tau = k*pi, k odd.  Shifting the oscillatory factor to
    the nearest odd multiple of pi gives the equivalent form

        F = 8 * (sin(N d / 2) / sin(d / 2))^2 * sin^4(w tau / 4),
        d = w*tau - k*pi  (k the nearest odd integer),

    which holds for both parities of N and is finite everywhere; at the
    resonance itself the ratio tends to N, so F = 2 N^2 there.
    """
    omega = np.asarray(omega, dtype=float)
    return _filter_from_u(seq.n_pulses, omega * seq.tau)


def _filter_from_u(n: int, u: np.ndarray) -> np.ndarray:
    """F as a function of u = omega*tau (see filter_function)."""
    k = 2.0 * np.round((u / np.pi - 1.0) / 2.0) + 1.0
    a = 0.5 * (u - k * np.pi)
    den = np.sin(a)
    near = np.abs(den) < 1e-9
    # second-order series of sin(n a)/sin(a) about a = 0
    series = n * (1.0 - (n * n - 1.0) * a * a / 6.0)
    ratio = np.where(near, series, np.sin(n * a) / np.where(near, 1.0, den))
    return 8.0 * ratio * ratio * np.sin(0.25 * u) ** 4


def _gauss_quadrature_grid(params: NsdParams, n_pulses: int, tau_max: float,
                           step_scale: float) -> np.ndarray:
    """Uniform omega grid resolving the NSD peak and the filter lobes.

    Target step min(2*pi*sigma, 2*pi/(N*tau))/20, scaled by step_scale for
    step-halving checks.  The domain covers the Gaussian support
    omega_c +- 10*(2*pi*sigma); outside it the peak is < exp(-50) and the flat
    offset is handled in closed form (see decoherence_exponent).
    """
    width = TWO_PI * params.sigma
    target = min(width, TWO_PI / (n_pulses * tau_max)) / 20.0 * step_scale
    lo = max(target, params.omega_c - 10.0 * width)
    hi = params.omega_c + 10.0 * width
    n_steps = int(np.ceil((hi - lo) / target))
    return np.linspace(lo, hi, n_steps + 1)


def _chi_gauss_batch(params: NsdParams, n_pulses: int, taus: np.ndarray,
                     step_scale: float = 1.0) -> np.ndarray:
    """Trapezoid of the Gaussian NSD component of chi for an array of taus."""
    taus = np.atleast_1d(np.asarray(taus, dtype=float))
    grid = _gauss_quadrature_grid(params, n_pulses, float(taus.max()), step_scale)
    width = TWO_PI * params.sigma
    s_gauss = TWO_PI * params.amplitude * np.exp(
        -((grid - params.omega_c) ** 2) / (2.0 * width * width))
    u = np.outer(taus, grid)
    integrand = _filter_from_u(n_pulses, u) * (s_gauss / (grid * grid))[None, :]
    return np.trapezoid(integrand, grid, axis=1) / np.pi


def decoherence_exponents(params: NsdParams, n_pulses: int, taus,
                          rel_tol: float = 1e-6, check: bool = True) -> np.ndarray:
    """chi(tau, N) for an array of tau values at a single pulse count.

    chi = (1/pi) * integral F(w) S(w) / w^2 dw over w > 0.  The flat offset
    contributes exactly S_flat * N * tau / 2 (Plancherel); the Gaussian peak
    is integrated by composite trapezoid.  With check=True a second pass at
    half the step must agree to rel_tol, else QuadratureError.
    """
    taus = np.atleast_1d(np.asarray(taus, dtype=float))
    flat = TWO_PI * params.s0 * n_pulses * taus / 2.0
    coarse = _chi_gauss_batch(params, n_pulses, taus, 1.0)
    if not check:
        return flat + coarse
    fine = _chi_gauss_batch(params, n_pulses, taus, 0.5)
    chi = flat + fine
    scale = np.maximum(np.abs(chi), 1e-12)
    bad = np.abs(fine - coarse) > rel_tol * scale
    if np.any(bad):
        i = int(np.argmax(np.abs(fine - coarse) / scale))
        raise QuadratureError(
            f"chi step-halving disagreement {abs(fine[i] - coarse[i]) / scale[i]:.3e} "
            f"> {rel_tol:.1e} at tau={taus[i]}, N={n_pulses}")
    if np.any(~np.isfinite(chi)):
        raise QuadratureError("non-finite chi")
    return chi


def decoherence_exponent(params: NsdParams, seq: PulseSequence,
                         rel_tol: float = 1e-6, check: bool = True,
                         step_scale: float = 1.0) -> float:
    """chi for a single sequence.  step_scale rescales the quadrature step
    (used by convergence tests); the halving check is relative to it."""
    flat = TWO_PI * params.s0 * seq.total_time / 2.0
    coarse = _chi_gauss_batch(params, seq.n_pulses, [seq.tau], step_scale)[0]
    if not check:
        return flat + coarse
    fine = _chi_gauss_batch(params, seq.n_pulses, [seq.tau], 0.5 * step_scale)[0]
    chi = flat + fine
    if abs(fine - coarse) > rel_tol * max(abs(chi), 1e-12):
        raise QuadratureError(
            f"chi step-halving disagreement at tau={seq.tau}, N={seq.n_pulses}")
    if not np.isfinite(chi):
        raise QuadratureError("non-finite chi")
    return chi


def coherence(params: NsdParams, seq: PulseSequence) -> float:
    """C(tau, N) = exp(-chi) in (0, 1]."""
    return float(np.exp(-decoherence_exponent(params, seq)))


def survival_probability(c):
    """Population of the initial state, P = (1 + C)/2, for C in [-1, 1]."""
    c = np.asarray(c, dtype=float)
    if np.any(c < -1.0) or np.any(c > 1.0):
        raise ValueError("coherence outside [-1, 1]")
    return (1.0 + c) / 2.0
