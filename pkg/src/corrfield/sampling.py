"""Samples from the Laplace posterior approximation via mock observations.

The approximation around the conditional optimum ``t`` is ``G(xi - t, Xi)``
with ``Xi^-1 = R*^adj N^-1 R* + 1`` and ``R*`` the response linearized at
``t``.  One sample is produced by simulating a measurement of a prior draw
and correcting its reconstruction residual by the true mean:

    xi' ~ white excitation prior        n' ~ G(0, N)
    d'  = R* xi' + n'
    t'  = Xi R*^adj N^-1 d'             (one conjugate-gradient solve)
    xi* = (xi' - t') + t

The mock residual has covariance <(xi'-t')(xi'-t')^adj> = Xi exactly, so
xi* is distributed as G(xi* - t, Xi) up to the CG tolerance.  Each draw
owns an independently spawned RNG stream derived from the job seed, which
makes the set deterministic, its samples mutually independent, and the
loop safe to parallelize.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grids import Field, draw_white_excitation
from .model import (
    LinearizedResponse,
    MeasurementSetup,
    PosteriorState,
)
from .solvers import CGConfig, ConvergenceError, conjugate_gradient

__all__ = [
    "SamplingJob",
    "SampleSet",
    "linearized_response",
    "draw_posterior_sample",
    "draw_sample_set",
]


@dataclass(frozen=True, eq=False)
class SampleSet:
    """Excitation samples sharing one space, plus the CG solve count."""

    samples: tuple[Field, ...]
    cg_solve_count: int = 0

    def __post_init__(self):
        samples = tuple(self.samples)
        if len(samples) < 1:
            raise ValueError("a sample set holds at least one sample")
        space = samples[0].space
        if any(s.space != space for s in samples):
            raise ValueError("samples must share one space")
        object.__setattr__(self, "samples", samples)

    @property
    def count(self) -> int:
        return len(self.samples)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, index):
        return self.samples[index]

    def stacked_values(self) -> np.ndarray:
        """(count, *shape) array of the raw sample values, for persistence."""
        return np.stack([s.values for s in self.samples])


@dataclass(frozen=True, eq=False)
class SamplingJob:
    """Everything one batch of posterior draws depends on.

    ``setup`` must be the measurement the ``state`` curvature was built
    with — in particular it must carry the current noise estimate, since
    the same N defines both the mock noise draw and Xi^-1.
    """

    state: PosteriorState
    setup: MeasurementSetup
    count: int
    seed: int
    cg: CGConfig = CGConfig(rel_tol=1e-6, max_iter=2000)
    antithetic: bool = False

    def __post_init__(self):
        if int(self.count) != self.count or self.count < 1:
            raise ValueError("sample count must be a positive integer")
        object.__setattr__(self, "count", int(self.count))
        object.__setattr__(self, "seed", int(self.seed))


def linearized_response(
    state: PosteriorState, setup: MeasurementSetup
) -> LinearizedResponse:
    """R* = R diag(f'(A t)) A mapping excitations to data space."""
    return LinearizedResponse(state.t, setup, state.spec)


def _streams(seed: int, n: int) -> list:
    return np.random.SeedSequence(seed).spawn(n)


def _mock_residual(
    state: PosteriorState,
    rstar: LinearizedResponse,
    variance: np.ndarray,
    rng: np.random.Generator,
    cg: CGConfig,
) -> Field:
    """xi' - t' for one simulated observation; costs exactly one CG solve."""
    xi_prime = draw_white_excitation(state.t.space, rng)
    noise = rng.standard_normal(variance.shape) * np.sqrt(variance)
    d_prime = Field(rstar.target, rstar.apply(xi_prime).values + noise)
    j_prime = rstar.adjoint_apply(Field(rstar.target, d_prime.values / variance))
    try:
        t_prime = conjugate_gradient(state.curvature, j_prime, cg)
    except ConvergenceError as err:
        raise ConvergenceError(
            f"posterior sample solve failed: {err}",
            residual=err.residual, iterations=err.iterations, partial=err.partial,
        ) from err
    return xi_prime - t_prime


def draw_posterior_sample(job: SamplingJob) -> Field:
    """One xi* ~ G(xi - t, Xi); equals the first draw of the full set."""
    rstar = linearized_response(job.state, job.setup)
    variance = job.setup.noise_variance()
    rng = np.random.default_rng(_streams(job.seed, 1)[0])
    residual = _mock_residual(job.state, rstar, variance, rng, job.cg)
    return residual + job.state.t


def draw_sample_set(job: SamplingJob) -> SampleSet:
    """job.count independent samples, one spawned RNG stream per draw.

    With ``antithetic`` the mirrored partner -(xi' - t') + t of each draw
    is appended too; the pair shares one CG solve, halving the solve count
    while keeping every sample exactly posterior-distributed.
    """
    rstar = linearized_response(job.state, job.setup)
    variance = job.setup.noise_variance()
    ndraws = (job.count + 1) // 2 if job.antithetic else job.count
    samples: list[Field] = []
    solves = 0
    for stream in _streams(job.seed, ndraws):
        rng = np.random.default_rng(stream)
        residual = _mock_residual(job.state, rstar, variance, rng, job.cg)
        solves += 1
        samples.append(residual + job.state.t)
        if job.antithetic and len(samples) < job.count:
            samples.append(job.state.t - residual)
    return SampleSet(tuple(samples), solves)
