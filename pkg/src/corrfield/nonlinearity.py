"""Pointwise measurement nonlinearities with analytic derivatives.

A :class:`LocalFunction` acts independently on every signal pixel.  Builtin
labels:

``identity``
    f(x) = x.
``exponential``
    f(x) = exp(x), the positive-signal (log-normal) transform.
``deadzone_quadratic``
    f(x) = x - 1 for x < 0, 0 for 0 <= x < 1/2, x^2 - x + 1/4 for x >= 1/2;
    monotone non-decreasing with an upward jump at 0 and a flat stretch that
    erases information.  The formally infinite derivative at the jump is
    assigned the finite placeholder 1.
``tanh``
    f(x) = tanh(x), saturating on both sides.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .grids import Field

__all__ = [
    "LocalFunction",
    "apply",
    "derivative",
    "builtin",
    "builtin_labels",
    "piecewise_polynomial",
    "check_monotone",
]


@dataclass(frozen=True)
class LocalFunction:
    """Scalar function applied pixel-wise, with its first derivative."""

    label: str
    eval: Callable[[np.ndarray], np.ndarray]
    deriv: Callable[[np.ndarray], np.ndarray]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.eval(np.asarray(x))

    def slope(self, x: np.ndarray) -> np.ndarray:
        return self.deriv(np.asarray(x))


def apply(fn: LocalFunction, field: Field) -> Field:
    return Field(field.space, fn.eval(field.values))


def derivative(fn: LocalFunction, field: Field) -> Field:
    return Field(field.space, fn.deriv(field.values))


def _deadzone_eval(x):
    x = np.asarray(x, dtype=float)
    return np.select(
        [x < 0.0, x < 0.5], [x - 1.0, np.zeros_like(x)], x * x - x + 0.25
    )


def _deadzone_deriv(x):
    # slope 1 left of the kink and, as a finite placeholder, exactly at 0
    x = np.asarray(x, dtype=float)
    return np.select(
        [x <= 0.0, x < 0.5], [np.ones_like(x), np.zeros_like(x)], 2.0 * x - 1.0
    )


_BUILTINS = {
    "identity": LocalFunction(
        "identity", lambda x: np.asarray(x, dtype=float) + 0.0, lambda x: np.ones_like(x, dtype=float)
    ),
    "exponential": LocalFunction("exponential", np.exp, np.exp),
    "deadzone_quadratic": LocalFunction(
        "deadzone_quadratic", _deadzone_eval, _deadzone_deriv
    ),
    "tanh": LocalFunction("tanh", np.tanh, lambda x: 1.0 / np.cosh(x) ** 2),
}


def builtin_labels() -> tuple[str, ...]:
    return tuple(sorted(_BUILTINS))


def builtin(label: str) -> LocalFunction:
    try:
        return _BUILTINS[label]
    except KeyError:
        raise ValueError(
            f"unknown nonlinearity {label!r}; available: {', '.join(builtin_labels())}"
        ) from None


def check_monotone(fn: LocalFunction, lo: float, hi: float, npts: int = 1000) -> None:
    """Spot-check that fn.eval is non-decreasing on [lo, hi]."""
    xs = np.linspace(lo, hi, npts)
    ys = fn.eval(xs)
    if np.any(np.diff(ys) < -1e-12 * max(1.0, np.max(np.abs(ys)))):
        raise ValueError(f"nonlinearity {fn.label!r} is not monotone on [{lo}, {hi}]")


def piecewise_polynomial(
    breakpoints, coefficients, label: str = "piecewise"
) -> LocalFunction:
    """Monotone piecewise polynomial from config.

    ``breakpoints`` are the sorted interior knots; segment ``i`` covers
    ``[breakpoints[i-1], breakpoints[i])`` and gets ``coefficients[i]`` in
    highest-power-first order (numpy polyval convention), so there is one
    more coefficient row than breakpoints.
    """
    breaks = np.asarray(breakpoints, dtype=float)
    coeffs = [np.asarray(c, dtype=float) for c in coefficients]
    if breaks.ndim != 1 or np.any(np.diff(breaks) <= 0):
        raise ValueError("breakpoints must be strictly increasing")
    if len(coeffs) != len(breaks) + 1:
        raise ValueError("need exactly one coefficient row per segment")
    dcoeffs = [np.polyder(c) if len(c) > 1 else np.zeros(1) for c in coeffs]

    def _eval(x):
        x = np.asarray(x, dtype=float)
        seg = np.searchsorted(breaks, x, side="right")
        out = np.empty_like(x)
        for i, c in enumerate(coeffs):
            sel = seg == i
            if np.any(sel):
                out[sel] = np.polyval(c, x[sel])
        return out

    def _deriv(x):
        x = np.asarray(x, dtype=float)
        seg = np.searchsorted(breaks, x, side="right")
        out = np.empty_like(x)
        for i, c in enumerate(dcoeffs):
            sel = seg == i
            if np.any(sel):
                out[sel] = np.polyval(c, x[sel])
        return out

    fn = LocalFunction(label, _eval, _deriv)
    span = max(np.abs(breaks).max() if breaks.size else 1.0, 1.0)
    check_monotone(fn, -4 * span, 4 * span)
    return fn
