"""Matrix-free conjugate gradients and a damped Newton scheme.

Both solvers work on :class:`~corrfield.grids.Field` values and use the
volume-weighted inner products of the field's space, so tolerances mean the
same thing on every grid.  ``conjugate_gradient`` tracks the best iterate
seen, which makes its reported residual sequence non-increasing;
``relaxed_newton`` backtracks the step factor until the objective decreases
and raises :class:`LineSearchStall` (carrying the current iterate) when no
acceptable step exists.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grids import Field, inner_product, norm, zeros


def _real_inner(a: Field, b: Field) -> float:
    return float(np.real(inner_product(a, b)))

__all__ = [
    "CGConfig",
    "NewtonConfig",
    "ConvergenceError",
    "LineSearchStall",
    "conjugate_gradient",
    "relaxed_newton",
]


@dataclass(frozen=True)
class CGConfig:
    rel_tol: float = 1e-6
    max_iter: int = 2000

    def __post_init__(self):
        if not 0 < self.rel_tol < 1:
            raise ValueError("rel_tol must be in (0, 1)")
        if self.max_iter < 1:
            raise ValueError("max_iter must be positive")


@dataclass(frozen=True)
class NewtonConfig:
    max_steps: int = 20
    grad_tol: float = 1e-6
    step_damping: float = 1.0
    line_search_shrink: float = 0.5
    min_step_factor: float = 1e-8

    def __post_init__(self):
        if not 0 < self.step_damping <= 1:
            raise ValueError("step_damping must be in (0, 1]")
        if not 0 < self.line_search_shrink < 1:
            raise ValueError("line_search_shrink must be in (0, 1)")
        if self.max_steps < 0:
            raise ValueError("max_steps must be non-negative")


class ConvergenceError(RuntimeError):
    """Solver exhausted its iterations; carries the best partial iterate."""

    def __init__(self, message, residual=None, iterations=None, partial=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations
        self.partial = partial


class LineSearchStall(RuntimeError):
    """No backtracked step decreased the objective; carries the iterate."""

    def __init__(self, message, state=None, step=None):
        super().__init__(message)
        self.state = state
        self.step = step


def conjugate_gradient(op, source: Field, config: CGConfig = CGConfig(),
                       x0: Field | None = None, trace: list | None = None) -> Field:
    """Solve op(x) = source for self-adjoint positive definite op.

    Stops when the residual norm falls below ``rel_tol`` times the source
    norm.  Returns the iterate with the smallest residual seen; raises
    :class:`ConvergenceError` (with that iterate attached) on exhaustion.
    """
    b_norm = norm(source)
    if b_norm == 0.0:
        return x0 if x0 is not None else zeros(source.space, source.values.dtype)
    x = x0 if x0 is not None else zeros(source.space, source.values.dtype)
    r = source - op.apply(x) if x0 is not None else source
    rs = _real_inner(r, r)
    best_x, best_res = x, np.sqrt(abs(rs))
    threshold = config.rel_tol * b_norm
    p = r
    for iteration in range(config.max_iter):
        res_norm = np.sqrt(abs(rs))
        if res_norm < best_res:
            best_x, best_res = x, res_norm
        if trace is not None:
            trace.append({"iteration": iteration, "residual_norm": best_res})
        if best_res <= threshold:
            return best_x
        Ap = op.apply(p)
        pAp = _real_inner(p, Ap)
        if pAp <= 0:
            raise ConvergenceError(
                f"operator not positive definite along search direction (p^T A p = {pAp})",
                residual=best_res, iterations=iteration, partial=best_x,
            )
        step = rs / pAp
        x = x + step * p
        r = r - step * Ap
        rs_new = _real_inner(r, r)
        p = r + (rs_new / rs) * p
        rs = rs_new
    res_norm = np.sqrt(abs(rs))
    if res_norm < best_res:
        best_x, best_res = x, res_norm
    if best_res <= threshold:
        return best_x
    raise ConvergenceError(
        f"conjugate gradients did not reach rel_tol={config.rel_tol} "
        f"within {config.max_iter} iterations (residual {best_res:.3e})",
        residual=best_res, iterations=config.max_iter, partial=best_x,
    )


def relaxed_newton(value_fn, gradient_fn, curvature_fn, start: Field,
                   config: NewtonConfig = NewtonConfig(),
                   cg_config: CGConfig = CGConfig(rel_tol=1e-4),
                   trace: list | None = None) -> Field:
    """Minimize with damped Newton steps x <- x - lambda * curvature^{-1} grad.

    ``curvature_fn(x)`` must return a self-adjoint positive definite
    LinearMap; the Newton system is solved by conjugate gradients at
    ``cg_config`` accuracy (an exhausted solve falls back to its best
    partial iterate, which is still a descent direction).  The step factor
    starts at ``step_damping`` each iteration and shrinks geometrically
    until the objective decreases (Armijo condition).
    """
    x = start
    value = float(value_fn(x))
    for step_index in range(config.max_steps):
        grad = gradient_fn(x)
        grad_norm = norm(grad)
        record = {"step": step_index, "objective": value, "grad_norm": grad_norm}
        if grad_norm <= config.grad_tol:
            if trace is not None:
                record["step_factor"] = 0.0
                trace.append(record)
            return x
        curvature = curvature_fn(x)
        try:
            direction = conjugate_gradient(curvature, grad, cg_config)
        except ConvergenceError as err:
            if err.partial is None:
                raise
            direction = err.partial
            record["cg_exhausted"] = True
        descent = _real_inner(grad, direction)
        if descent <= 0:
            raise LineSearchStall(
                "curvature solve produced a non-descent direction",
                state=x, step=step_index,
            )
        lam = config.step_damping
        while True:
            candidate = x - lam * direction
            try:
                new_value = float(value_fn(candidate))
            except FloatingPointError:
                # an overflowing trial point is just a too-long step
                new_value = np.inf
            if np.isfinite(new_value) and new_value <= value - 1e-4 * lam * descent:
                x, value = candidate, new_value
                break
            lam *= config.line_search_shrink
            if lam < config.min_step_factor:
                raise LineSearchStall(
                    f"line search stalled at step {step_index} "
                    f"(objective {value:.6e}, gradient norm {grad_norm:.3e})",
                    state=x, step=step_index,
                )
        record["step_factor"] = lam
        if trace is not None:
            trace.append(record)
    return x
