"""Linear operators, spectral binning, and the amplitude parametrization.

Every operator is a :class:`LinearMap` with an ``apply``/``adjoint_apply``
pair; adjointness is always meant with respect to the volume-weighted inner
products of the operator's domain and target.  Maps composed of FFTs and
diagonal multiplications are complex-linear; the measurement responses map
*real* position fields to real data vectors and are only tested on real (or
Hermitian-symmetric) inputs.

Spectral quantities are parametrized per |k|-bin by half log-power
coefficients ``alpha`` (:class:`LogSpectrum`): log-power ``tau = 2 alpha``,
power ``exp(tau)``, amplitude per harmonic pixel ``exp(alpha)`` broadcast
through the binning.
"""

from __future__ import annotations

import abc
import json
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .grids import (
    BinSpace,
    DataSpace,
    Field,
    GridSpace,
    HarmonicSpace,
    SpaceMismatchError,
    adjoint_transform,
    harmonic_transform,
)

__all__ = [
    "LinearMap",
    "IdentityMap",
    "DiagonalMap",
    "ZeroMap",
    "HarmonicTransformMap",
    "DenseBinMap",
    "PowerBinning",
    "ring_binning",
    "log_binning",
    "PowerProjection",
    "power_project",
    "power_distribute",
    "LogSpectrum",
    "AmplitudeOperator",
    "amplitude_operator",
    "log_curvature_matrix",
    "smoothness_curvature",
    "MaskResponse",
    "mask_response",
    "FourierSamplingResponse",
    "fourier_sampling_response",
    "dense_matrix",
]


class LinearMap(abc.ABC):
    """Linear operator between two spaces with an explicit adjoint."""

    domain = None
    target = None

    @abc.abstractmethod
    def apply(self, x: Field) -> Field:
        ...

    @abc.abstractmethod
    def adjoint_apply(self, y: Field) -> Field:
        ...

    def _check(self, x: Field, space) -> None:
        if x.space != space:
            raise SpaceMismatchError(
                f"{type(self).__name__}: field on {x.space} does not match {space}"
            )

    def __call__(self, x: Field) -> Field:
        return self.apply(x)

    @property
    def adjoint(self) -> "LinearMap":
        return AdjointView(self)

    def __matmul__(self, other: "LinearMap") -> "LinearMap":
        return ComposedMap(self, other)


class AdjointView(LinearMap):
    def __init__(self, base: LinearMap):
        self.base = base
        self.domain = base.target
        self.target = base.domain

    def apply(self, x: Field) -> Field:
        return self.base.adjoint_apply(x)

    def adjoint_apply(self, y: Field) -> Field:
        return self.base.apply(y)

    @property
    def adjoint(self) -> LinearMap:
        return self.base


class ComposedMap(LinearMap):
    """outer after inner."""

    def __init__(self, outer: LinearMap, inner: LinearMap):
        if inner.target != outer.domain:
            raise SpaceMismatchError("composition spaces do not chain")
        self.outer = outer
        self.inner = inner
        self.domain = inner.domain
        self.target = outer.target

    def apply(self, x: Field) -> Field:
        return self.outer.apply(self.inner.apply(x))

    def adjoint_apply(self, y: Field) -> Field:
        return self.inner.adjoint_apply(self.outer.adjoint_apply(y))


class IdentityMap(LinearMap):
    def __init__(self, space):
        self.domain = self.target = space

    def apply(self, x: Field) -> Field:
        self._check(x, self.domain)
        return x

    def adjoint_apply(self, y: Field) -> Field:
        self._check(y, self.domain)
        return y


class ZeroMap(LinearMap):
    def __init__(self, domain, target):
        self.domain = domain
        self.target = target

    def apply(self, x: Field) -> Field:
        self._check(x, self.domain)
        return Field(self.target, np.zeros(self.target.shape))

    def adjoint_apply(self, y: Field) -> Field:
        self._check(y, self.target)
        return Field(self.domain, np.zeros(self.domain.shape))


class DiagonalMap(LinearMap):
    """Pointwise multiplication by a fixed array on a single space."""

    def __init__(self, space, diag):
        self.domain = self.target = space
        self.diag = np.asarray(diag)
        if self.diag.shape != tuple(space.shape):
            raise SpaceMismatchError("diagonal does not fit the space")

    def apply(self, x: Field) -> Field:
        self._check(x, self.domain)
        return Field(self.target, self.diag * x.values)

    def adjoint_apply(self, y: Field) -> Field:
        self._check(y, self.target)
        return Field(self.domain, np.conj(self.diag) * y.values)


class HarmonicTransformMap(LinearMap):
    """The unitary harmonic transform as a LinearMap (adjoint = inverse)."""

    def __init__(self, grid: GridSpace):
        self.domain = grid
        self.target = grid.harmonic_partner

    def apply(self, x: Field) -> Field:
        self._check(x, self.domain)
        return harmonic_transform(x)

    def adjoint_apply(self, y: Field) -> Field:
        self._check(y, self.target)
        return adjoint_transform(y)


class DenseBinMap(LinearMap):
    """Dense real matrix acting on bin-space coefficient vectors."""

    def __init__(self, space: BinSpace, matrix):
        self.domain = self.target = space
        self.matrix = np.asarray(matrix, dtype=float)
        if self.matrix.shape != (space.size, space.size):
            raise SpaceMismatchError("matrix does not fit the bin space")

    def apply(self, x: Field) -> Field:
        self._check(x, self.domain)
        return Field(self.target, self.matrix @ x.values)

    def adjoint_apply(self, y: Field) -> Field:
        self._check(y, self.target)
        return Field(self.domain, self.matrix.T @ y.values)


# ---------------------------------------------------------------------------
# power binning


def _binsum(bin_index: np.ndarray, values: np.ndarray, nbins: int) -> np.ndarray:
    """Per-bin sum; complex-safe (np.bincount only takes real weights)."""
    idx = bin_index.ravel()
    vals = np.asarray(values).ravel()
    if np.iscomplexobj(vals):
        return np.bincount(idx, vals.real, nbins) + 1j * np.bincount(
            idx, vals.imag, nbins
        )
    return np.bincount(idx, vals, nbins)


@dataclass(frozen=True, eq=False)
class PowerBinning:
    """Partition of harmonic pixels into |k| bins.

    ``project`` is the per-bin mean (the rho-normalized bin sum, with
    ``rho_k = u * count_k`` the physical bin volume); ``distribute`` is the
    plain broadcast of bin values back to pixels, which is the adjoint of
    ``project`` with respect to the rho-weighted bin inner product.
    """

    space: HarmonicSpace
    bin_edges: np.ndarray

    def __post_init__(self):
        edges = np.asarray(self.bin_edges, dtype=float)
        if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0):
            raise ValueError("bin edges must be strictly increasing, length >= 2")
        edges.setflags(write=False)
        object.__setattr__(self, "bin_edges", edges)
        mags = self.space.mode_magnitudes
        if mags.min() < edges[0] or mags.max() >= edges[-1]:
            raise ValueError("bin edges do not cover all mode magnitudes")
        counts = self.counts
        if np.any(counts == 0):
            raise ValueError("every bin must contain at least one harmonic pixel")

    @cached_property
    def bin_of_pixel(self) -> np.ndarray:
        idx = np.searchsorted(self.bin_edges, self.space.mode_magnitudes, "right") - 1
        idx.setflags(write=False)
        return idx

    @property
    def nbins(self) -> int:
        return len(self.bin_edges) - 1

    @cached_property
    def bin_space(self) -> BinSpace:
        return BinSpace(self.nbins)

    @cached_property
    def counts(self) -> np.ndarray:
        c = np.bincount(self.bin_of_pixel.ravel(), minlength=self.nbins)
        c.setflags(write=False)
        return c

    @cached_property
    def rho(self) -> np.ndarray:
        """Physical volume per bin: harmonic pixel volume times pixel count."""
        r = self.counts * self.space.weight
        r.setflags(write=False)
        return r

    @cached_property
    def kappa_centers(self) -> np.ndarray:
        """Mean |k| of each bin (exact ring value for ring binning)."""
        k = _binsum(self.bin_of_pixel, self.space.mode_magnitudes, self.nbins)
        k = k / self.counts
        k.setflags(write=False)
        return k

    def project(self, values: np.ndarray) -> np.ndarray:
        return _binsum(self.bin_of_pixel, values, self.nbins) / self.counts

    def distribute(self, bin_values: np.ndarray) -> np.ndarray:
        return np.asarray(bin_values)[self.bin_of_pixel]

    def to_dict(self) -> dict:
        return {
            "shape": list(self.space.shape),
            "mode_spacing": list(self.space.mode_spacing),
            "bin_edges": self.bin_edges.tolist(),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "PowerBinning":
        space = HarmonicSpace(
            tuple(payload["shape"]), tuple(payload["mode_spacing"])
        )
        return cls(space, np.asarray(payload["bin_edges"], dtype=float))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "PowerBinning":
        return cls.from_dict(json.loads(text))


def ring_binning(space: HarmonicSpace) -> PowerBinning:
    """One bin per distinct mode magnitude (midpoint edges)."""
    mags = np.unique(np.round(space.mode_magnitudes, 10))
    if len(mags) == 1:
        edges = np.array([mags[0] - 0.5, mags[0] + 0.5])
    else:
        mids = 0.5 * (mags[1:] + mags[:-1])
        first = mags[0] - 0.5 * (mags[1] - mags[0])
        last = mags[-1] + 0.5 * (mags[-1] - mags[-2])
        edges = np.concatenate([[first], mids, [last]])
    return PowerBinning(space, edges)


def log_binning(space: HarmonicSpace, nbins: int = 64) -> PowerBinning:
    """Zero mode alone in the first bin, log-spaced edges above; empty bins
    are merged into their right neighbor so every bin is populated."""
    mags = space.mode_magnitudes
    positive = np.unique(mags[mags > 0])
    kmin, kmax = positive[0], positive[-1]
    if nbins < 2:
        raise ValueError("log binning needs at least two bins")
    upper = np.geomspace(0.75 * kmin, kmax, nbins)
    upper[-1] = kmax * (1 + 1e-9)
    edges = np.concatenate([[-0.25 * kmin], upper])
    # drop edges that would create empty bins
    keep = [edges[0]]
    for e in edges[1:]:
        lo = keep[-1]
        if np.any((mags >= lo) & (mags < e)):
            keep.append(e)
    keep[-1] = edges[-1]
    return PowerBinning(space, np.asarray(keep))


class PowerProjection(LinearMap):
    """Bin-mean projection as a LinearMap (Euclidean adjoint form)."""

    def __init__(self, binning: PowerBinning):
        self.binning = binning
        self.domain = binning.space
        self.target = binning.bin_space

    def apply(self, x: Field) -> Field:
        self._check(x, self.domain)
        return Field(self.target, self.binning.project(x.values))

    def adjoint_apply(self, y: Field) -> Field:
        self._check(y, self.target)
        return Field(
            self.domain, self.binning.distribute(y.values / self.binning.rho)
        )


def power_project(binning: PowerBinning, field: Field) -> Field:
    if field.space != binning.space:
        raise SpaceMismatchError("field does not live on the binning's space")
    return Field(binning.bin_space, binning.project(field.values))


def power_distribute(binning: PowerBinning, field: Field) -> Field:
    if field.space != binning.bin_space:
        raise SpaceMismatchError("field does not live on the binning's bin space")
    return Field(binning.space, binning.distribute(field.values))


# ---------------------------------------------------------------------------
# log-spectrum parametrization


@dataclass(frozen=True, eq=False)
class LogSpectrum:
    """Per-bin half log-power coefficients; alpha is the primary variable."""

    binning: PowerBinning
    alpha: np.ndarray

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=float)
        if alpha.shape != (self.binning.nbins,):
            raise SpaceMismatchError("alpha length does not match bin count")
        if not np.all(np.isfinite(alpha)):
            raise ValueError("alpha must be finite")
        alpha.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)

    @property
    def tau(self) -> np.ndarray:
        return 2.0 * self.alpha

    @property
    def power(self) -> np.ndarray:
        return np.exp(2.0 * self.alpha)

    @property
    def amplitude(self) -> np.ndarray:
        return np.exp(self.alpha)

    @cached_property
    def mode_amplitudes(self) -> np.ndarray:
        """exp(alpha) broadcast to every harmonic pixel."""
        amps = self.binning.distribute(np.exp(self.alpha))
        amps.setflags(write=False)
        return amps

    def with_alpha(self, alpha: np.ndarray) -> "LogSpectrum":
        return LogSpectrum(self.binning, alpha)

    @classmethod
    def flat_power(cls, binning: PowerBinning, power: float) -> "LogSpectrum":
        if power <= 0:
            raise ValueError("power must be positive")
        return cls(binning, np.full(binning.nbins, 0.5 * np.log(power)))

    @classmethod
    def from_power(cls, binning: PowerBinning, power_values) -> "LogSpectrum":
        p = np.asarray(power_values, dtype=float)
        if np.any(p <= 0):
            raise ValueError("power values must be positive")
        return cls(binning, 0.5 * np.log(p))

    @classmethod
    def from_power_function(cls, binning: PowerBinning, fn) -> "LogSpectrum":
        return cls.from_power(binning, fn(binning.kappa_centers))


class AmplitudeOperator(LinearMap):
    """Correlated-field map: position field = F_adj( exp(alpha) * xi ).

    Satisfies ``A A_adj = S`` with S the diagonal (in harmonic space)
    covariance carrying the binned power ``exp(2 alpha)``.
    """

    def __init__(self, spectrum: LogSpectrum):
        self.spectrum = spectrum
        self.domain = spectrum.binning.space
        self.target = self.domain.position_partner

    def apply(self, x: Field) -> Field:
        self._check(x, self.domain)
        return adjoint_transform(
            Field(self.domain, self.spectrum.mode_amplitudes * x.values)
        )

    def adjoint_apply(self, y: Field) -> Field:
        self._check(y, self.target)
        h = harmonic_transform(y)
        return Field(self.domain, self.spectrum.mode_amplitudes * h.values)


def amplitude_operator(spectrum: LogSpectrum) -> AmplitudeOperator:
    return AmplitudeOperator(spectrum)


# ---------------------------------------------------------------------------
# spectral smoothness


def log_curvature_matrix(binning: PowerBinning) -> np.ndarray:
    """Squared second-derivative quadrature on log |k| across bins.

    Returns the symmetric PSD matrix M with
    ``x^T M x = integral (d^2 x / d(ln k)^2)^2 d(ln k)`` evaluated with a
    non-uniform 3-point stencil and trapezoid cell weights.  Bins at k = 0
    carry no log coordinate and are left unconstrained, as are overall
    constants and power laws (linear in ln k), which the stencil
    annihilates exactly.
    """
    nbins = binning.nbins
    kappa = binning.kappa_centers
    idx = np.flatnonzero(kappa > 0)
    M = np.zeros((nbins, nbins))
    if len(idx) < 3:
        return M
    y = np.log(kappa[idx])
    h = np.diff(y)
    for j in range(1, len(idx) - 1):
        hl, hr = h[j - 1], h[j]
        row = np.zeros(nbins)
        row[idx[j - 1]] = 2.0 / (hl * (hl + hr))
        row[idx[j]] = -2.0 / (hl * hr)
        row[idx[j + 1]] = 2.0 / (hr * (hl + hr))
        M += 0.5 * (hl + hr) * np.outer(row, row)
    return M


def smoothness_curvature(binning: PowerBinning, sigma: float) -> DenseBinMap:
    """The smoothness prior curvature block ``M / sigma^2`` on bin space."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    return DenseBinMap(binning.bin_space, log_curvature_matrix(binning) / sigma**2)


# ---------------------------------------------------------------------------
# measurement responses


class MaskResponse(LinearMap):
    """Pick out the signal values of unmasked pixels, in row-major order."""

    def __init__(self, grid: GridSpace, keep: np.ndarray):
        keep = np.asarray(keep, dtype=bool)
        if keep.shape != tuple(grid.shape):
            raise SpaceMismatchError("mask does not fit the grid")
        if not keep.any():
            raise ValueError("mask keeps no pixels")
        self.keep = keep
        self.domain = grid
        self.target = DataSpace(int(keep.sum()))

    def apply(self, x: Field) -> Field:
        self._check(x, self.domain)
        return Field(self.target, x.values[self.keep])

    def adjoint_apply(self, y: Field) -> Field:
        self._check(y, self.target)
        out = np.zeros(self.domain.shape, dtype=y.values.dtype)
        out[self.keep] = y.values / self.domain.weight
        return Field(self.domain, out)


def mask_response(grid: GridSpace, keep) -> MaskResponse:
    return MaskResponse(grid, keep)


class FourierSamplingResponse(LinearMap):
    """Real/imaginary parts of selected Fourier modes of a real signal.

    Data entry ``2j`` is the real part and ``2j+1`` the imaginary part of
    mode ``mode_indices[j]`` (flat row-major harmonic index).  The map is
    real-linear from real position fields; adjointness holds on that domain.
    Indices may repeat: each occurrence is an independent measurement of the
    same mode (as in interferometric visibilities).
    """

    def __init__(self, grid: GridSpace, mode_indices):
        idx = np.asarray(mode_indices, dtype=np.int64).ravel()
        if idx.size == 0:
            raise ValueError("need at least one sampled mode")
        if idx.min() < 0 or idx.max() >= grid.size:
            raise ValueError("mode index out of range")
        self.mode_indices = idx
        self.domain = grid
        self.harmonic = grid.harmonic_partner
        self.target = DataSpace(2 * len(idx))

    def apply(self, x: Field) -> Field:
        self._check(x, self.domain)
        h = harmonic_transform(x.real if np.iscomplexobj(x.values) else x)
        picked = h.values.ravel()[self.mode_indices]
        out = np.empty(2 * len(picked))
        out[0::2] = picked.real
        out[1::2] = picked.imag
        return Field(self.target, out)

    def adjoint_apply(self, y: Field) -> Field:
        self._check(y, self.target)
        coeffs = y.values[0::2] + 1j * y.values[1::2]
        z = np.zeros(self.harmonic.size, dtype=complex)
        np.add.at(z, self.mode_indices, coeffs)
        pos = adjoint_transform(Field(self.harmonic, z.reshape(self.harmonic.shape)))
        return Field(self.domain, pos.values.real / self.harmonic.weight)


def fourier_sampling_response(grid: GridSpace, mode_indices) -> FourierSamplingResponse:
    return FourierSamplingResponse(grid, mode_indices)


# ---------------------------------------------------------------------------
# dense materialization (tests, small-problem oracles)


def dense_matrix(op: LinearMap) -> np.ndarray:
    """Materialize the value-space matrix of a map column by column.

    ``(op x).ravel() == dense_matrix(op) @ x.ravel()`` for fields in the
    operator's linear domain (complex basis on harmonic domains, real basis
    elsewhere — the latter is what real-linear responses support).
    """
    dom = op.domain
    n = dom.size
    use_complex = isinstance(dom, HarmonicSpace)
    cols = []
    for j in range(n):
        e = np.zeros(n, dtype=complex if use_complex else float)
        e[j] = 1.0
        out = op.apply(Field(dom, e.reshape(dom.shape)))
        cols.append(out.values.ravel())
    return np.stack(cols, axis=1)
