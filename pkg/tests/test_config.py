"""TOML run-config parsing: defaults, builders, and field-naming errors."""

import numpy as np
import numpy.testing as npt
import pytest

from corrfield.arrayio import write_array
from corrfield.config import ConfigError, load_config, parse_config
from corrfield.grids import GridSpace
from corrfield.model import EstimatedNoise, FixedNoise
from corrfield.operators import FourierSamplingResponse, MaskResponse

MINIMAL = """
[grid]
shape = [32]
"""

FULL = """
[grid]
shape = [16, 16]

[binning]
kind = "log"
nbins = 12

[spectrum]
initial = 1.8e-2

[spectrum.truth]
amplitude = 0.02
offset = 1.0
exponent = -2.0

[nonlinearity]
label = "exponential"

[response]
kind = "fourier_sampling"
keep_fraction = 0.6

[noise]
variance = 1.5e-5
estimate = true
beta = 2.0000002
q = "auto"

[run]
seed = 11
iterations = 12
out = "runs/toy"

[solver]
sigma = 1.0
samples_start = 3
samples_max = 8
samples_double_every = 10
"""


class TestParsing:
    def test_minimal_config_gets_defaults(self):
        cfg = parse_config(MINIMAL)
        assert cfg.grid_shape == (32,)
        assert cfg.binning_kind == "ring"
        assert cfg.nonlinearity_label == "identity"
        assert cfg.response_kind == "identity"
        assert cfg.seed == 0
        assert cfg.iterations == 100
        assert cfg.initial_power == 1.0
        assert cfg.solver["samples_start"] == 3

    def test_full_config_round_trip(self):
        cfg = parse_config(FULL)
        assert cfg.grid_shape == (16, 16)
        assert cfg.binning_kind == "log" and cfg.binning_nbins == 12
        assert cfg.noise_estimate and cfg.noise_q == "auto"
        assert cfg.truth["exponent"] == -2.0
        assert cfg.out_dir == "runs/toy"

    def test_load_config_resolves_relative_to_file(self, tmp_path):
        (tmp_path / "run.toml").write_text(
            MINIMAL + '\n[run]\ndata = "sub/data.raw"\n'
        )
        cfg = load_config(tmp_path / "run.toml")
        assert cfg.resolved_data_path() == str(tmp_path / "sub" / "data.raw")


class TestValidationErrors:
    @pytest.mark.parametrize("text,field", [
        ("[grid]\nshape = [0]", "grid.shape"),
        ("[grid]\nshape = [8]\npixel_size = [1.0, 2.0]", "grid.pixel_size"),
        (MINIMAL + "[binning]\nkind = 'hex'", "binning.kind"),
        (MINIMAL + "[spectrum]\ninitial = -2.0", "spectrum.initial"),
        (MINIMAL + "[nonlinearity]\nlabel = 'cubic'", "nonlinearity.label"),
        (MINIMAL + "[response]\nkind = 'mask'", "response.keep_fraction"),
        (MINIMAL + "[response]\nkind = 'mask'\nkeep_fraction = 1.5",
         "response.keep_fraction"),
        (MINIMAL + "[response]\nkeep_fraction = 0.5", "response.keep_fraction"),
        (MINIMAL + "[noise]\nvariance = -1.0", "noise.variance"),
        (MINIMAL + "[noise]\nestimate = true\nbeta = 0.5", "noise.beta"),
        (MINIMAL + "[noise]\nq = 'later'", "noise.q"),
        (MINIMAL + "[run]\niterations = -1", "run.iterations"),
        (MINIMAL + "[solver]\nsigma = 0.0", "solver.sigma"),
        (MINIMAL + "[solver]\nwarp = 9", "solver.warp"),
        (MINIMAL + "[typo]\nx = 1", "config.typo"),
    ])
    def test_error_names_the_field(self, text, field):
        with pytest.raises(ConfigError) as err:
            parse_config(text)
        assert err.value.field == field
        assert field in str(err.value)

    def test_missing_grid_shape(self):
        with pytest.raises(ConfigError) as err:
            parse_config("[grid]\npixel_size = [0.1]")
        assert err.value.field == "grid.shape"

    def test_bool_not_accepted_as_number(self):
        with pytest.raises(ConfigError) as err:
            parse_config(MINIMAL + "[spectrum]\ninitial = true")
        assert err.value.field == "spectrum.initial"

    def test_broken_toml(self):
        with pytest.raises(ConfigError):
            parse_config("[grid\nshape=")

    def test_truth_required_only_when_used(self):
        cfg = parse_config(MINIMAL)
        grid = cfg.build_grid()
        binning = cfg.build_binning(grid)
        with pytest.raises(ConfigError) as err:
            cfg.build_truth(binning)
        assert err.value.field == "spectrum.truth"


class TestBuilders:
    def test_grid_and_binning(self):
        cfg = parse_config(FULL)
        grid = cfg.build_grid()
        assert isinstance(grid, GridSpace) and grid.shape == (16, 16)
        binning = cfg.build_binning(grid)
        assert binning.nbins <= 12  # empty log bins get merged

    def test_truth_power_law(self):
        cfg = parse_config(FULL)
        binning = cfg.build_binning(cfg.build_grid())
        truth = cfg.build_truth(binning)
        k = binning.kappa_centers
        npt.assert_allclose(truth.power, 0.02 / (k + 1.0) ** 2, rtol=1e-12)

    def test_truth_from_file(self, tmp_path):
        (tmp_path / "run.toml").write_text(
            MINIMAL + '[spectrum]\n[spectrum.truth]\nfile = "p.raw"\n'
        )
        cfg = load_config(tmp_path / "run.toml")
        binning = cfg.build_binning(cfg.build_grid())
        power = 1.0 / (np.arange(binning.nbins) + 1.0)
        write_array(tmp_path / "p.raw", power)
        npt.assert_allclose(cfg.build_truth(binning).power, power, rtol=1e-12)

    def test_fraction_responses_are_seed_deterministic(self):
        cfg = parse_config(FULL)
        grid = cfg.build_grid()
        r1 = cfg.build_response(grid, np.random.default_rng(cfg.seed))
        r2 = cfg.build_response(grid, np.random.default_rng(cfg.seed))
        assert isinstance(r1, FourierSamplingResponse)
        npt.assert_array_equal(r1.mode_indices, r2.mode_indices)
        assert 0 in r1.mode_indices  # include_zero defaults on

    def test_mask_from_file(self, tmp_path):
        (tmp_path / "run.toml").write_text(
            MINIMAL + '[response]\nkind = "mask"\nkeep_file = "m.raw"\n'
        )
        cfg = load_config(tmp_path / "run.toml")
        grid = cfg.build_grid()
        keep = np.zeros(32)
        keep[::3] = 1.0
        write_array(tmp_path / "m.raw", keep)
        resp = cfg.build_response(grid, np.random.default_rng(0))
        assert isinstance(resp, MaskResponse)
        assert resp.target.size == int(keep.sum())

    def test_noise_builders(self):
        cfg = parse_config(FULL)
        data = np.random.default_rng(3).normal(size=50)
        noise = cfg.build_noise(data)
        assert isinstance(noise, EstimatedNoise)
        npt.assert_allclose(noise.q, 2e-5 * data.var(), rtol=1e-12)

        fixed = parse_config(MINIMAL + "[noise]\nvariance = 5.0")
        noise = fixed.build_noise(data)
        assert isinstance(noise, FixedNoise)
        npt.assert_allclose(noise.variance, np.full(50, 5.0))

    def test_zero_variance_rejected_for_reconstruction(self):
        cfg = parse_config(MINIMAL + "[noise]\nvariance = 0.0")
        assert cfg.synthesis_noise_variance() == 0.0  # exact data is fine
        with pytest.raises(ConfigError) as err:
            cfg.build_noise(np.ones(4))
        assert err.value.field == "noise.variance"

    def test_inference_config_mapping(self):
        cfg = parse_config(FULL)
        icfg = cfg.build_inference_config()
        assert icfg.seed == 11
        assert icfg.outer_iterations == 12
        assert icfg.samples_start == 3 and icfg.samples_max == 8
        assert icfg.initial_spectrum == pytest.approx(1.8e-2)

    def test_overrides(self):
        cfg = parse_config(FULL).with_overrides(
            seed=5, iterations=3, samples=10, out="elsewhere"
        )
        assert cfg.seed == 5 and cfg.iterations == 3
        assert cfg.solver["samples_start"] == 10
        assert cfg.solver["samples_max"] == 10  # cap keeps up with the floor
        assert cfg.out_dir == "elsewhere"
        unchanged = parse_config(FULL).with_overrides()
        assert unchanged.seed == 11

    def test_piecewise_nonlinearity(self):
        text = MINIMAL + """
[nonlinearity]
label = "piecewise"
breakpoints = [0.0]
coefficients = [[1.0, 0.0], [2.0, 0.0]]
"""
        cfg = parse_config(text)
        f = cfg.build_nonlinearity()
        npt.assert_allclose(f.eval(np.array([-2.0, 3.0])), [-2.0, 6.0])
