"""Discretized spaces, fields, and the volume-weighted harmonic transform.

A signal lives on a regular periodic grid (:class:`GridSpace`).  Its Fourier
coefficients live on the matching :class:`HarmonicSpace`.  Inner products and
transforms carry the pixel volumes so that every identity below holds for any
grid resolution and physical size:

* ``harmonic_transform`` is unitary: ``adjoint_transform`` is both its adjoint
  with respect to the weighted inner products and its exact inverse.
* A white excitation field ``xi`` drawn by :func:`draw_white_excitation` has
  ``E[xi_k conj(xi_l)] = V * delta_kl`` with ``V`` the total grid volume, i.e.
  unit covariance as an *operator* (identity kernel divided by the harmonic
  pixel volume).

Data (measurement) vectors live on an unstructured :class:`DataSpace` with
unit weight, and binned spectral coefficients on a :class:`BinSpace`.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Union

import numpy as np

__all__ = [
    "SpaceMismatchError",
    "GridSpace",
    "HarmonicSpace",
    "DataSpace",
    "BinSpace",
    "Space",
    "Field",
    "zeros",
    "full",
    "from_values",
    "harmonic_transform",
    "adjoint_transform",
    "inner_product",
    "norm",
    "draw_white_excitation",
]


class SpaceMismatchError(ValueError):
    """Raised when fields or operators disagree about the underlying space."""


def _as_int_tuple(shape) -> tuple[int, ...]:
    out = tuple(int(n) for n in np.atleast_1d(shape))
    if len(out) == 0 or any(n < 1 for n in out):
        raise ValueError(f"grid shape must be positive, got {shape!r}")
    return out


def _as_float_tuple(values, ndim: int) -> tuple[float, ...]:
    arr = np.atleast_1d(np.asarray(values, dtype=float))
    if arr.size == 1:
        arr = np.repeat(arr, ndim)
    if arr.size != ndim:
        raise ValueError(f"expected {ndim} per-axis values, got {arr.size}")
    if np.any(arr <= 0) or not np.all(np.isfinite(arr)):
        raise ValueError(f"per-axis sizes must be positive finite, got {values!r}")
    return tuple(float(x) for x in arr)


@dataclass(frozen=True)
class GridSpace:
    """Regular periodic grid in one or two dimensions.

    Parameters
    ----------
    shape : tuple of int
        Pixels per axis.
    pixel_size : tuple of float, optional
        Physical pixel edge lengths.  Defaults to ``1/n`` per axis so the
        total volume is one and harmonic mode magnitudes are integers.
    """

    shape: tuple[int, ...]
    pixel_size: tuple[float, ...] = ()

    def __post_init__(self):
        shape = _as_int_tuple(self.shape)
        if len(shape) not in (1, 2):
            raise ValueError("only one- and two-dimensional grids are supported")
        object.__setattr__(self, "shape", shape)
        if self.pixel_size == () or self.pixel_size is None:
            pixel_size = tuple(1.0 / n for n in shape)
        else:
            pixel_size = _as_float_tuple(self.pixel_size, len(shape))
        object.__setattr__(self, "pixel_size", pixel_size)

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def weight(self) -> float:
        """Volume of one pixel (the quadrature weight of the inner product)."""
        return float(np.prod(self.pixel_size))

    @property
    def total_volume(self) -> float:
        return self.weight * self.size

    @cached_property
    def harmonic_partner(self) -> "HarmonicSpace":
        dk = tuple(1.0 / (n * dx) for n, dx in zip(self.shape, self.pixel_size))
        partner = HarmonicSpace(self.shape, dk)
        partner.__dict__["position_partner"] = self  # exact round-trip
        return partner


@dataclass(frozen=True)
class HarmonicSpace:
    """Fourier-conjugate grid holding complex mode coefficients.

    ``mode_spacing`` per axis is ``1/(n*dx)``; the pixel weight is the product
    of the spacings, which equals one over the position-space total volume.
    """

    shape: tuple[int, ...]
    mode_spacing: tuple[float, ...]

    def __post_init__(self):
        shape = _as_int_tuple(self.shape)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(
            self, "mode_spacing", _as_float_tuple(self.mode_spacing, len(shape))
        )

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def weight(self) -> float:
        return float(np.prod(self.mode_spacing))

    @property
    def total_volume(self) -> float:
        """Volume of the position-space partner (= 1 / weight / size ... )."""
        return 1.0 / self.weight

    @cached_property
    def position_partner(self) -> GridSpace:
        dx = tuple(1.0 / (n * dk) for n, dk in zip(self.shape, self.mode_spacing))
        partner = GridSpace(self.shape, dx)
        partner.__dict__["harmonic_partner"] = self  # exact round-trip
        return partner

    @cached_property
    def mode_magnitudes(self) -> np.ndarray:
        """|k| per harmonic pixel, in standard FFT layout (read-only)."""
        axes = []
        for n, dk in zip(self.shape, self.mode_spacing):
            idx = np.fft.fftfreq(n, d=1.0 / n)  # signed integer mode numbers
            axes.append(idx * dk)
        if self.ndim == 1:
            mags = np.abs(axes[0])
        else:
            kx, ky = np.meshgrid(*axes, indexing="ij")
            mags = np.sqrt(kx**2 + ky**2)
        mags.setflags(write=False)
        return mags


@dataclass(frozen=True)
class DataSpace:
    """Unstructured space of measurement values; unit quadrature weight."""

    size: int

    def __post_init__(self):
        object.__setattr__(self, "size", int(self.size))
        if self.size < 1:
            raise ValueError("data space needs at least one entry")

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.size,)

    @property
    def weight(self) -> float:
        return 1.0


@dataclass(frozen=True)
class BinSpace:
    """Space of per-bin spectral coefficients; unit quadrature weight."""

    size: int

    def __post_init__(self):
        object.__setattr__(self, "size", int(self.size))
        if self.size < 1:
            raise ValueError("bin space needs at least one bin")

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.size,)

    @property
    def weight(self) -> float:
        return 1.0


Space = Union[GridSpace, HarmonicSpace, DataSpace, BinSpace]


@dataclass(frozen=True, eq=False)
class Field:
    """Immutable pairing of a space and an array of values on it.

    Construction freezes the stored array (``writeable=False``); pass a copy
    if the caller needs to keep mutating its buffer.  Arithmetic returns new
    fields and requires matching spaces.
    """

    space: Space
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.shape != tuple(self.space.shape):
            raise SpaceMismatchError(
                f"values of shape {values.shape} do not fit space shape "
                f"{tuple(self.space.shape)}"
            )
        if values.dtype not in (np.float64, np.complex128):
            values = values.astype(
                np.complex128 if np.iscomplexobj(values) else np.float64
            )
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def _check_same_space(self, other: "Field") -> None:
        if self.space != other.space:
            raise SpaceMismatchError(f"{self.space} != {other.space}")

    def __add__(self, other: "Field") -> "Field":
        self._check_same_space(other)
        return Field(self.space, self.values + other.values)

    def __sub__(self, other: "Field") -> "Field":
        self._check_same_space(other)
        return Field(self.space, self.values - other.values)

    def __neg__(self) -> "Field":
        return Field(self.space, -self.values)

    def __mul__(self, scalar) -> "Field":
        return Field(self.space, self.values * scalar)

    __rmul__ = __mul__

    @property
    def real(self) -> "Field":
        return Field(self.space, np.real(self.values))

    def astype_complex(self) -> "Field":
        return Field(self.space, self.values.astype(np.complex128))

    def copy_values(self) -> np.ndarray:
        return np.array(self.values)


def zeros(space: Space, dtype=np.float64) -> Field:
    return Field(space, np.zeros(space.shape, dtype=dtype))


def full(space: Space, value) -> Field:
    return Field(space, np.full(space.shape, value))


def from_values(space: Space, values) -> Field:
    return Field(space, np.asarray(values))


def harmonic_transform(field: Field) -> Field:
    """Unitary forward transform from a grid to its harmonic partner.

    Returns ``v * fftn(x)`` with ``v`` the position pixel volume, which makes
    the map unitary with respect to the volume-weighted inner products.
    """
    space = field.space
    if not isinstance(space, GridSpace):
        raise SpaceMismatchError("harmonic_transform expects a position field")
    out = np.fft.fftn(field.values) * space.weight
    return Field(space.harmonic_partner, out)


def adjoint_transform(field: Field) -> Field:
    """Adjoint (= inverse) of :func:`harmonic_transform`.

    The returned values are complex; physically real fields have vanishing
    imaginary part, which callers strip explicitly at model boundaries.
    """
    space = field.space
    if not isinstance(space, HarmonicSpace):
        raise SpaceMismatchError("adjoint_transform expects a harmonic field")
    position = space.position_partner
    out = np.fft.ifftn(field.values) / position.weight
    return Field(position, out)


def inner_product(a: Field, b: Field):
    """Volume-weighted inner product ``sum_i w * conj(a_i) * b_i``.

    Returns a float when both fields are real, complex otherwise.
    """
    if a.space != b.space:
        raise SpaceMismatchError(f"{a.space} != {b.space}")
    total = np.vdot(a.values, b.values) * a.space.weight
    if np.isrealobj(a.values) and np.isrealobj(b.values):
        return float(total.real)
    return complex(total)


def norm(a: Field) -> float:
    return float(np.sqrt(np.real(np.vdot(a.values, a.values)) * a.space.weight))


def draw_white_excitation(space: HarmonicSpace, rng: np.random.Generator) -> Field:
    """Draw a harmonic-space white field with unit covariance operator.

    Sampled by transforming position-space white noise of pixel variance
    ``1/v``, so the harmonic coefficients satisfy
    ``E[xi_k conj(xi_l)] = V * delta_kl`` (V the total volume) together with
    the reality symmetry ``xi_{-k} = conj(xi_k)``.
    """
    if not isinstance(space, HarmonicSpace):
        raise SpaceMismatchError("white excitations live on a harmonic space")
    position = space.position_partner
    noise = rng.standard_normal(position.shape) / np.sqrt(position.weight)
    return harmonic_transform(Field(position, noise))
