"""Energies, gradients, and curvatures of the measurement model.

The generative model is ``d = R f(s) + n`` with ``s = A xi`` a correlated
field written as an amplitude operator acting on white excitations, ``f`` a
pointwise nonlinearity, ``R`` a linear response, and Gaussian noise of
diagonal covariance ``N`` (optionally estimated jointly, parametrized as
``N = diag(exp(eta))`` with an inverse-gamma prior on the variances).

Two optimization surfaces are provided:

* the excitation energy ``0.5 r^T N^-1 r + 0.5 <xi, xi>`` with its gradient
  and Gauss-Newton curvature (used to locate the conditional optimum of xi
  at fixed spectrum), and
* the sample-averaged KL surface over the per-bin half log-power
  coefficients alpha — likelihood mean plus the spectral smoothness penalty
  ``(2 / sigma^2) alpha^T M alpha`` — with gradient and Gauss-Newton
  curvature, plus the matching noise-level update.

A legacy surface (linear response, signal-space optimization with
alternating log-power updates including the probed posterior-variance
correction) is included as a benchmark baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence, Union

import numpy as np

from .grids import (
    DataSpace,
    Field,
    GridSpace,
    HarmonicSpace,
    SpaceMismatchError,
    harmonic_transform,
    inner_product,
)
from .nonlinearity import LocalFunction
from .operators import (
    AmplitudeOperator,
    DenseBinMap,
    LinearMap,
    LogSpectrum,
    PowerBinning,
    amplitude_operator,
)
from .solvers import CGConfig, conjugate_gradient

__all__ = [
    "NumericError",
    "FixedNoise",
    "EstimatedNoise",
    "MeasurementSetup",
    "LinearizedResponse",
    "ExcitationCurvature",
    "PosteriorState",
    "hamiltonian_value",
    "hamiltonian_gradient_excitation",
    "excitation_curvature",
    "signal_field",
    "model_prediction",
    "residual_values",
    "information_source",
    "WienerCurvature",
    "wiener_curvature",
    "kl_estimate",
    "kl_gradient_amplitude",
    "kl_curvature_amplitude",
    "kl_gradient_noise",
    "noise_eta_stationary",
    "legacy_hamiltonian_value",
    "legacy_cf_gradient",
    "legacy_tau_gradient",
    "legacy_cf_residual",
    "legacy_cf_energy",
    "legacy_tau_curvature",
    "empirical_bin_power",
    "probed_bin_variance",
]


class NumericError(FloatingPointError):
    """A model evaluation produced a non-finite value."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


def _check_finite(values: np.ndarray, label: str) -> None:
    bad = ~np.isfinite(values)
    if bad.any():
        index = tuple(int(i) for i in np.argwhere(bad)[0])
        raise NumericError(f"non-finite {label} at pixel {index}", index=index)


@dataclass(frozen=True, eq=False)
class FixedNoise:
    """Known diagonal noise covariance (variance per datum)."""

    variance: np.ndarray

    def __post_init__(self):
        var = np.atleast_1d(np.asarray(self.variance, dtype=float))
        if np.any(var <= 0) or not np.all(np.isfinite(var)):
            raise ValueError("noise variances must be positive and finite")
        var.setflags(write=False)
        object.__setattr__(self, "variance", var)

    @property
    def estimated(self) -> bool:
        return False


@dataclass(frozen=True, eq=False)
class EstimatedNoise:
    """Self-calibrated noise: N = diag(exp(eta)), inverse-gamma prior (beta, q).

    ``eta`` may start as None; the inference loop initializes it from the
    data variance.  The prior/normalization energy per datum is
    ``0.5 eta + (beta - 1) eta + q exp(-eta)``, which is bounded below and
    has the closed-form stationary point
    ``exp(eta) = (<r^2>/2 + q) / (beta - 1/2)`` given mean squared residuals.
    """

    beta: float
    q: float
    eta: np.ndarray | None = None

    def __post_init__(self):
        if not self.beta > 0.5:
            raise ValueError("beta must exceed 1/2 for a bounded noise energy")
        if not self.q > 0:
            raise ValueError("q must be positive")
        if self.eta is not None:
            eta = np.atleast_1d(np.asarray(self.eta, dtype=float))
            if not np.all(np.isfinite(eta)):
                raise ValueError("eta must be finite")
            eta.setflags(write=False)
            object.__setattr__(self, "eta", eta)

    @property
    def estimated(self) -> bool:
        return True

    @property
    def variance(self) -> np.ndarray:
        if self.eta is None:
            raise ValueError("noise level not initialized yet")
        return np.exp(self.eta)

    def with_eta(self, eta: np.ndarray) -> "EstimatedNoise":
        return EstimatedNoise(self.beta, self.q, eta)


Noise = Union[FixedNoise, EstimatedNoise]


@dataclass(frozen=True, eq=False)
class MeasurementSetup:
    """Response + nonlinearity + noise model of one measurement."""

    response: LinearMap
    nonlinearity: LocalFunction
    noise: Noise

    def __post_init__(self):
        if not isinstance(self.response.target, DataSpace):
            raise SpaceMismatchError("response must map into a data space")
        if not isinstance(self.response.domain, GridSpace):
            raise SpaceMismatchError("response must act on a position grid")
        ndata = self.response.target.size
        if isinstance(self.noise, FixedNoise):
            if len(self.noise.variance) not in (1, ndata):
                raise SpaceMismatchError(
                    "noise entries do not match the data space size"
                )
        elif self.noise.eta is not None and len(self.noise.eta) != ndata:
            raise SpaceMismatchError("eta entries do not match the data space size")

    @property
    def grid(self) -> GridSpace:
        return self.response.domain

    @property
    def data_space(self) -> DataSpace:
        return self.response.target

    def noise_variance(self) -> np.ndarray:
        var = self.noise.variance
        if len(var) == 1:
            return np.full(self.data_space.size, var[0])
        return var

    def with_noise(self, noise: Noise) -> "MeasurementSetup":
        return MeasurementSetup(self.response, self.nonlinearity, noise)


# ---------------------------------------------------------------------------
# forward model pieces


def signal_field(xi: Field, spec: LogSpectrum) -> Field:
    """Position-space signal s = A xi (imaginary rounding discarded)."""
    A = amplitude_operator(spec)
    return A.apply(xi).real


def _forward(xi: Field, setup: MeasurementSetup, spec: LogSpectrum):
    """signal values, model prediction f(s), and pointwise slope f'(s)."""
    z = signal_field(xi, spec).values
    _check_finite(z, "signal value")
    y = setup.nonlinearity.eval(z)
    _check_finite(y, "model value")
    slope = setup.nonlinearity.deriv(z)
    return z, y, slope


def model_prediction(xi: Field, setup: MeasurementSetup, spec: LogSpectrum) -> Field:
    """Noise-free data R f(A xi)."""
    _, y, _ = _forward(xi, setup, spec)
    return setup.response.apply(Field(setup.grid, y))


def residual_values(
    xi: Field, setup: MeasurementSetup, spec: LogSpectrum, data: Field
) -> np.ndarray:
    return data.values - model_prediction(xi, setup, spec).values


def _noise_energy(noise: Noise) -> float:
    if not noise.estimated:
        return 0.0
    eta = noise.eta
    return float((noise.beta - 0.5) * np.sum(eta) + noise.q * np.sum(np.exp(-eta)))


def hamiltonian_value(
    xi: Field, setup: MeasurementSetup, spec: LogSpectrum, data: Field
) -> float:
    """0.5 r^T N^-1 r + 0.5 <xi, xi> (+ noise-level energy when estimated)."""
    r = residual_values(xi, setup, spec, data)
    var = setup.noise_variance()
    likelihood = 0.5 * float(np.sum(r * r / var))
    prior = 0.5 * float(np.real(inner_product(xi, xi)))
    return likelihood + prior + _noise_energy(setup.noise)


def hamiltonian_gradient_excitation(
    xi: Field, setup: MeasurementSetup, spec: LogSpectrum, data: Field
) -> Field:
    """xi - A^adj( f'(s) * R^adj N^-1 (d - R f(s)) )."""
    z, y, slope = _forward(xi, setup, spec)
    r = data.values - setup.response.apply(Field(setup.grid, y)).values
    weighted = Field(setup.data_space, r / setup.noise_variance())
    back = setup.response.adjoint_apply(weighted).values.real
    A = amplitude_operator(spec)
    pull = A.adjoint_apply(Field(setup.grid, slope * back))
    return xi - pull


class LinearizedResponse(LinearMap):
    """R* = R diag(f'(s)) A, the response linearized at an expansion point."""

    def __init__(self, point: Field, setup: MeasurementSetup, spec: LogSpectrum):
        z = signal_field(point, spec).values
        self.slope = setup.nonlinearity.deriv(z)
        self.amplitude = amplitude_operator(spec)
        self.response = setup.response
        self.grid = setup.grid
        self.domain = self.amplitude.domain
        self.target = setup.data_space

    def apply(self, x: Field) -> Field:
        pos = self.amplitude.apply(x)
        return self.response.apply(Field(self.grid, self.slope * pos.values))

    def adjoint_apply(self, y: Field) -> Field:
        back = self.response.adjoint_apply(y)
        return self.amplitude.adjoint_apply(
            Field(self.grid, self.slope * back.values)
        )


class ExcitationCurvature(LinearMap):
    """Gauss-Newton curvature R*^adj N^-1 R* + 1 on the excitation space."""

    def __init__(self, linearized: LinearizedResponse, variance: np.ndarray):
        self.linearized = linearized
        self.inverse_variance = 1.0 / variance
        self.domain = self.target = linearized.domain

    def apply(self, x: Field) -> Field:
        through = self.linearized.apply(x)
        weighted = Field(through.space, through.values * self.inverse_variance)
        return self.linearized.adjoint_apply(weighted) + x

    def adjoint_apply(self, y: Field) -> Field:
        return self.apply(y)


def excitation_curvature(
    point: Field, setup: MeasurementSetup, spec: LogSpectrum
) -> ExcitationCurvature:
    linearized = LinearizedResponse(point, setup, spec)
    return ExcitationCurvature(linearized, setup.noise_variance())


@dataclass(frozen=True, eq=False)
class PosteriorState:
    """Laplace approximation of the excitation posterior: G(xi - t, Xi).

    ``t`` is the conditional optimum of the excitation, ``spec`` the current
    spectrum point estimate, ``curvature`` the operator Xi^-1 evaluated at
    ``t`` (a Gram operator plus the identity, hence SPD), and ``noise_eta``
    the current log noise variances when those are being estimated.
    """

    t: Field
    spec: LogSpectrum
    curvature: LinearMap
    noise_eta: np.ndarray | None = None

    def __post_init__(self):
        if not isinstance(self.t.space, HarmonicSpace):
            raise SpaceMismatchError("excitation mean must live on harmonic space")
        if self.spec.binning.space != self.t.space:
            raise SpaceMismatchError("spectrum binning disagrees with t's space")
        if self.curvature.domain != self.t.space:
            raise SpaceMismatchError("curvature does not act on t's space")
        if self.noise_eta is not None:
            eta = np.atleast_1d(np.asarray(self.noise_eta, dtype=float))
            eta.setflags(write=False)
            object.__setattr__(self, "noise_eta", eta)

    @property
    def signal(self) -> Field:
        """Position-space reconstruction s = A t."""
        return signal_field(self.t, self.spec)


# ---------------------------------------------------------------------------
# linear (Wiener) pieces, shared by tests and the legacy loop


def information_source(setup: MeasurementSetup, data: Field) -> Field:
    """j = R^adj N^-1 d on the position grid."""
    weighted = Field(setup.data_space, data.values / setup.noise_variance())
    return setup.response.adjoint_apply(weighted).real


class WienerCurvature(LinearMap):
    """D^-1 = R^adj N^-1 R + S^-1 acting on position fields (complex-linear)."""

    def __init__(self, setup: MeasurementSetup, spec: LogSpectrum):
        self.setup = setup
        self.power_modes = spec.binning.distribute(spec.power)
        self.domain = self.target = setup.grid

    def apply(self, x: Field) -> Field:
        through = self.setup.response.apply(x)
        weighted = Field(through.space, through.values / self.setup.noise_variance())
        data_term = self.setup.response.adjoint_apply(weighted)
        # S^-1 x = F_adj diag(1/power) F x; the volume factors cancel
        prior_vals = np.fft.ifftn(np.fft.fftn(x.values) / self.power_modes)
        out = data_term.values + prior_vals
        if np.isrealobj(x.values):
            out = out.real
        return Field(self.domain, out)

    def adjoint_apply(self, y: Field) -> Field:
        return self.apply(y)


def wiener_curvature(setup: MeasurementSetup, spec: LogSpectrum) -> WienerCurvature:
    return WienerCurvature(setup, spec)


# ---------------------------------------------------------------------------
# sampled KL surface over the log-amplitude coefficients


def _sample_residuals(
    samples: Sequence[Field],
    setup: MeasurementSetup,
    spec: LogSpectrum,
    data: Field,
):
    """Per-sample (signal values, slope values, residual values)."""
    out = []
    for xi in samples:
        z, y, slope = _forward(xi, setup, spec)
        r = data.values - setup.response.apply(Field(setup.grid, y)).values
        out.append((z, slope, r))
    return out


def kl_estimate(
    samples: Sequence[Field],
    setup: MeasurementSetup,
    spec: LogSpectrum,
    data: Field,
    smoothness: DenseBinMap,
) -> float:
    """Sample-mean likelihood + spectral smoothness (+ noise energy).

    The entropy term and the excitation prior are constant for the spectrum
    and noise updates and are omitted, so legacy and current runs report the
    same functional.
    """
    if len(samples) == 0:
        raise ValueError("need at least one sample")
    var = setup.noise_variance()
    like = 0.0
    for _, _, r in _sample_residuals(samples, setup, spec, data):
        like += 0.5 * float(np.sum(r * r / var))
    like /= len(samples)
    alpha = spec.alpha
    smooth = 2.0 * float(alpha @ (smoothness.matrix @ alpha))
    return like + smooth + _noise_energy(setup.noise)


def kl_gradient_amplitude(
    samples: Sequence[Field],
    setup: MeasurementSetup,
    spec: LogSpectrum,
    data: Field,
    smoothness: DenseBinMap,
) -> np.ndarray:
    """d KL / d alpha_k (plain coefficient partials, one entry per bin)."""
    binning = spec.binning
    u = binning.space.weight
    var = setup.noise_variance()
    amps = spec.mode_amplitudes
    grad = np.zeros(binning.nbins)
    for xi, (z, slope, r) in zip(samples, _sample_residuals(samples, setup, spec, data)):
        weighted = Field(setup.data_space, r / var)
        back = setup.response.adjoint_apply(weighted).values.real
        w = harmonic_transform(Field(setup.grid, slope * back)).values
        s_tilde = amps * xi.values
        integrand = np.real(np.conj(w) * s_tilde)
        grad -= u * np.bincount(
            binning.bin_of_pixel.ravel(), integrand.ravel(), binning.nbins
        )
    grad /= len(samples)
    return grad + 4.0 * (smoothness.matrix @ spec.alpha)


def kl_curvature_amplitude(
    samples: Sequence[Field],
    setup: MeasurementSetup,
    spec: LogSpectrum,
    smoothness: DenseBinMap,
    regularization: float = 1e-8,
) -> DenseBinMap:
    """Gauss-Newton curvature of the sampled KL in alpha.

    Built densely: per sample the Jacobian column for bin k is the response
    of the model to perturbing alpha_k, assembled with one batched FFT over
    bins; the likelihood block is the mean of J^T N^-1 J.  A relative
    diagonal jitter keeps the matrix safely positive definite.
    """
    binning = spec.binning
    nbins = binning.nbins
    grid = setup.grid
    var = setup.noise_variance()
    amps = spec.mode_amplitudes
    bin_index = binning.bin_of_pixel
    axes = tuple(range(1, 1 + len(grid.shape)))
    npix = grid.size
    flat_bin = bin_index.ravel()
    pixel = np.arange(npix)
    gram = np.zeros((nbins, nbins))
    for xi in samples:
        _, _, slope = _forward(xi, setup, spec)
        s_tilde = amps * xi.values
        batch = np.zeros((nbins, npix), dtype=complex)
        batch[flat_bin, pixel] = s_tilde.ravel()
        batch = batch.reshape((nbins,) + tuple(grid.shape))
        columns_pos = np.fft.ifftn(batch, axes=axes).real / grid.weight
        jac = np.empty((setup.data_space.size, nbins))
        for k in range(nbins):
            pushed = setup.response.apply(
                Field(grid, slope * columns_pos[k])
            )
            jac[:, k] = pushed.values
        gram += jac.T @ (jac / var[:, None])
    gram /= len(samples)
    matrix = gram + 4.0 * smoothness.matrix
    jitter = regularization * max(np.max(np.diag(matrix)), 1e-300)
    matrix = matrix + jitter * np.eye(nbins)
    return DenseBinMap(binning.bin_space, matrix)


# ---------------------------------------------------------------------------
# noise-level self-calibration


def _mean_square_residuals(samples, setup, spec, data) -> np.ndarray:
    var_shape = setup.data_space.size
    acc = np.zeros(var_shape)
    for _, _, r in _sample_residuals(samples, setup, spec, data):
        acc += r * r
    return acc / len(samples)


def kl_gradient_noise(
    samples: Sequence[Field],
    setup: MeasurementSetup,
    spec: LogSpectrum,
    data: Field,
) -> np.ndarray:
    """d KL / d eta per datum: -(1/2) e^-eta <r^2> + 1/2 + (beta-1) - q e^-eta."""
    noise = setup.noise
    if not noise.estimated:
        raise ValueError("noise gradient requires an EstimatedNoise setup")
    msq = _mean_square_residuals(samples, setup, spec, data)
    inv = np.exp(-noise.eta)
    return -0.5 * inv * msq + 0.5 + (noise.beta - 1.0) - noise.q * inv


def noise_eta_stationary(
    samples: Sequence[Field],
    setup: MeasurementSetup,
    spec: LogSpectrum,
    data: Field,
) -> np.ndarray:
    """Closed-form root of the noise gradient: ln((<r^2>/2 + q)/(beta - 1/2))."""
    noise = setup.noise
    if not noise.estimated:
        raise ValueError("noise update requires an EstimatedNoise setup")
    msq = _mean_square_residuals(samples, setup, spec, data)
    return np.log((0.5 * msq + noise.q) / (noise.beta - 0.5))


# ---------------------------------------------------------------------------
# legacy signal-space surface (linear response benchmark)


def _require_identity(setup: MeasurementSetup) -> None:
    if setup.nonlinearity.label != "identity":
        raise ValueError("the legacy surface supports only the identity response")


def legacy_hamiltonian_value(
    m: Field,
    tau: np.ndarray,
    setup: MeasurementSetup,
    data: Field,
    binning: PowerBinning,
    smoothness: DenseBinMap,
) -> float:
    """0.5 r^T N^-1 r + 0.5 c^T tau + 0.5 <m, S^-1 m> + 0.5 tau^T K tau.

    ``c`` counts the harmonic modes per bin — the log-determinant of the
    diagonal prior covariance contributes tau once per mode.
    """
    _require_identity(setup)
    r = data.values - setup.response.apply(m).values
    var = setup.noise_variance()
    like = 0.5 * float(np.sum(r * r / var))
    h = harmonic_transform(m)
    u = binning.space.weight
    inv_power = binning.distribute(np.exp(-tau))
    prior = 0.5 * u * float(np.sum(np.abs(h.values) ** 2 * inv_power))
    volume = 0.5 * float(binning.counts @ tau)
    smooth = 0.5 * float(tau @ (smoothness.matrix @ tau))
    return like + prior + volume + smooth


def _empirical_bin_power(m: Field, binning: PowerBinning) -> np.ndarray:
    # u-weighted so that a field with spectrum P averages to P on any grid
    h = harmonic_transform(m)
    return binning.space.weight * binning.project(np.abs(h.values) ** 2)


def legacy_cf_gradient(
    bin_power: np.ndarray,
    tau: np.ndarray,
    binning: PowerBinning,
    smoothness: DenseBinMap,
) -> np.ndarray:
    """Gradient of :func:`legacy_cf_energy` in tau at fixed binned power."""
    c = binning.counts
    return -0.5 * c * np.asarray(bin_power) * np.exp(-tau) + 0.5 * c + (
        smoothness.matrix @ tau
    )


def legacy_tau_gradient(
    m: Field,
    tau: np.ndarray,
    binning: PowerBinning,
    smoothness: DenseBinMap,
) -> np.ndarray:
    """Gradient of the legacy surface in tau at fixed m (no correction).

    Vanishes (for switched-off smoothness) exactly at
    ``exp(tau) = empirical_bin_power(m)``.
    """
    return legacy_cf_gradient(_empirical_bin_power(m, binning), tau, binning, smoothness)


def legacy_cf_residual(
    m: Field,
    bin_variance: np.ndarray,
    tau: np.ndarray,
    binning: PowerBinning,
    smoothness: DenseBinMap,
) -> np.ndarray:
    """Stationarity residual including the posterior-variance correction.

    A root in tau satisfies
    ``exp(tau) = empirical_bin_power(m) + bin_variance`` when the smoothness
    penalty is switched off; ``bin_variance`` is the probed diagonal of the
    posterior covariance in the same normalization
    (:func:`probed_bin_variance`).
    """
    emp = _empirical_bin_power(m, binning) + np.asarray(bin_variance)
    return legacy_cf_gradient(emp, tau, binning, smoothness)


def legacy_cf_energy(
    bin_power: np.ndarray,
    tau: np.ndarray,
    binning: PowerBinning,
    smoothness: DenseBinMap,
) -> float:
    """tau-dependent part of the legacy surface at fixed binned power.

    ``bin_power`` is :func:`empirical_bin_power`, optionally already
    including the posterior-variance correction; :func:`legacy_cf_residual`
    is the exact gradient of this energy and :func:`legacy_tau_curvature`
    its Hessian.
    """
    return float(
        0.5 * np.sum(binning.counts * (bin_power * np.exp(-tau) + tau))
        + 0.5 * tau @ (smoothness.matrix @ tau)
    )


def legacy_tau_curvature(
    bin_power: np.ndarray,
    tau: np.ndarray,
    binning: PowerBinning,
    smoothness: DenseBinMap,
) -> DenseBinMap:
    diag = 0.5 * binning.counts * np.asarray(bin_power) * np.exp(-tau)
    matrix = np.diag(diag) + smoothness.matrix
    jitter = 1e-12 * max(np.max(np.diag(matrix)), 1e-300)
    return DenseBinMap(binning.bin_space, matrix + jitter * np.eye(binning.nbins))


def empirical_bin_power(m: Field, binning: PowerBinning) -> np.ndarray:
    """Bin-mean squared harmonic coefficients of a position field."""
    return _empirical_bin_power(m, binning)


def probed_bin_variance(
    inverse_covariance: LinearMap,
    binning: PowerBinning,
    rng: np.random.Generator,
    cg_config: CGConfig = CGConfig(rel_tol=1e-6, max_iter=2000),
    nprobes: int = 16,
) -> np.ndarray:
    """Bin-mean diagonal of F D F^adj estimated with Rademacher probes.

    ``inverse_covariance`` is the position-space map D^-1; each probe costs
    one conjugate-gradient solve against it.
    """
    space = binning.space
    grid = inverse_covariance.domain
    acc = np.zeros(space.shape)
    for _ in range(nprobes):
        probe = rng.integers(0, 2, space.shape) * 2.0 - 1.0
        pos = np.fft.ifftn(probe) / grid.weight
        solved = conjugate_gradient(
            inverse_covariance, Field(grid, pos), cg_config
        )
        back = np.fft.fftn(solved.values) * grid.weight
        acc += probe * back.real
    return binning.project(acc / nprobes)
