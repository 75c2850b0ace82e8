import numpy as np

from corrfield.grids import Field, GridSpace, HarmonicSpace, inner_product


def random_field(space, rng, complex_values=None):
    if complex_values is None:
        complex_values = isinstance(space, HarmonicSpace)
    vals = rng.standard_normal(space.shape)
    if complex_values:
        vals = vals + 1j * rng.standard_normal(space.shape)
    return Field(space, vals)


def dottest(op, rng, rtol=1e-10, real_only=False, trials=5):
    """<op x, y>_target == <x, op^T y>_domain for random x, y."""
    for _ in range(trials):
        x = random_field(op.domain, rng, complex_values=None if not real_only else False)
        y = random_field(op.target, rng, complex_values=None if not real_only else False)
        lhs = inner_product(op.apply(x), y)
        rhs = inner_product(x, op.adjoint_apply(y))
        scale = max(abs(lhs), abs(rhs), 1e-30)
        assert abs(lhs - rhs) <= rtol * scale, (
            f"{type(op).__name__}: <Ax,y>={lhs} vs <x,A'y>={rhs}"
        )


def hermitian_pairs(space: HarmonicSpace, rng):
    """A Hermitian-symmetric harmonic field (transform of a real field)."""
    from corrfield.grids import harmonic_transform

    grid = space.position_partner
    return harmonic_transform(Field(grid, rng.standard_normal(grid.shape)))
