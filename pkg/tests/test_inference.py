"""Outer-loop behavior: Wiener equivalence, KL descent, determinism, moments."""

import json

import numpy as np
import numpy.testing as npt
import pytest

from corrfield.grids import DataSpace, Field, GridSpace, draw_white_excitation, norm
from corrfield.inference import (
    InferenceConfig,
    RunHistory,
    posterior_moments,
    run_inference,
    run_legacy_inference,
)
from corrfield.model import (
    EstimatedNoise,
    FixedNoise,
    MeasurementSetup,
    empirical_bin_power,
    information_source,
    probed_bin_variance,
    signal_field,
    wiener_curvature,
)
from corrfield.nonlinearity import builtin
from corrfield.operators import (
    LogSpectrum,
    ZeroMap,
    fourier_sampling_response,
    mask_response,
    ring_binning,
)
from corrfield.sampling import SampleSet, SamplingJob, draw_sample_set
from corrfield.solvers import CGConfig, NewtonConfig, conjugate_gradient
from corrfield.grids import zeros


def naive_dft_matrix(n, pixel_volume):
    k = np.arange(n)[:, None]
    x = np.arange(n)[None, :]
    return pixel_volume * np.exp(-2j * np.pi * k * x / n)


def make_linear_instance(n=64, seed=0, noise_var=0.5, masked=True):
    rng = np.random.default_rng(seed)
    grid = GridSpace((n,))
    binning = ring_binning(grid.harmonic_partner)
    truth = LogSpectrum.from_power_function(binning, lambda k: 4.0 / (k + 1.0) ** 2)
    keep = np.ones(n, dtype=bool)
    if masked:
        keep[n // 3: n // 3 + n // 8] = False
    response = mask_response(grid, keep)
    setup = MeasurementSetup(
        response, builtin("identity"),
        FixedNoise(np.full(int(keep.sum()), noise_var)),
    )
    xi_true = draw_white_excitation(binning.space, rng)
    clean = response.apply(signal_field(xi_true, truth)).values
    noise = rng.standard_normal(clean.shape) * np.sqrt(noise_var)
    data = Field(response.target, clean + noise)
    return grid, binning, truth, setup, data


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            InferenceConfig(sigma=0.0)
        with pytest.raises(ValueError):
            InferenceConfig(initial_spectrum=-1.0)
        with pytest.raises(ValueError):
            InferenceConfig(samples_start=5, samples_max=3)

    def test_sample_schedule_doubles_and_caps(self):
        cfg = InferenceConfig(samples_start=3, samples_max=20, samples_double_every=10)
        counts = [cfg.sample_count(i) for i in (1, 10, 11, 20, 21, 31, 41)]
        assert counts == [3, 3, 6, 6, 12, 20, 20]


class TestRunHistory:
    def test_append_only_and_monotone(self):
        history = RunHistory()
        history.append({"iteration": 1, "kl": 1.0})
        history.append({"iteration": 2, "kl": 0.5})
        with pytest.raises(ValueError):
            history.append({"iteration": 2, "kl": 0.4})
        assert len(history) == 2
        npt.assert_array_equal(history.kl_values(), [1.0, 0.5])

    def test_jsonl_roundtrip(self, tmp_path):
        history = RunHistory()
        history.append({"iteration": 1, "kl": 1.5, "stalled": False})
        path = tmp_path / "history.jsonl"
        history.write_jsonl(path)
        lines = path.read_text().splitlines()
        assert [json.loads(line) for line in lines] == list(history.records)


class TestRunInference:
    def test_matches_dense_wiener_solution_with_known_spectrum(self):
        n = 32
        grid, binning, truth, setup, data = make_linear_instance(n=n, seed=3)
        cfg = InferenceConfig(
            outer_iterations=1,
            initial_spectrum=truth.power,
            update_amplitude=False,
            samples_start=1, samples_max=1,
            excitation_newton=NewtonConfig(max_steps=50, grad_tol=1e-10),
            newton_cg=CGConfig(rel_tol=1e-12, max_iter=5000),
        )
        state, history = run_inference(data, setup, cfg)

        v = grid.weight
        u = grid.harmonic_partner.weight
        W = naive_dft_matrix(n, v)
        keep = setup.response.keep
        R = np.eye(n)[keep]
        var = setup.noise_variance()
        p_modes = truth.binning.distribute(truth.power)
        B = (R.T @ (R / var[:, None]) + u * (W.conj().T @ (W / p_modes[:, None]))).real
        m_dense = np.linalg.solve(B, R.T @ (data.values / var))

        got = state.signal.values
        assert np.linalg.norm(got - m_dense) / np.linalg.norm(m_dense) < 1e-6
        assert len(history) == 1

    def test_zero_data_null_response_rests_at_prior(self):
        grid = GridSpace((16,))
        setup = MeasurementSetup(
            ZeroMap(grid, DataSpace(3)), builtin("identity"), FixedNoise(np.ones(3))
        )
        data = Field(DataSpace(3), np.zeros(3))
        cfg = InferenceConfig(outer_iterations=20, samples_start=1, samples_max=1)
        state, history = run_inference(data, setup, cfg)
        assert history.converged
        # plateau window of 5 fires at the sixth record
        assert len(history) == 6
        assert norm(state.t) <= 1e-12
        assert history[-1]["grad_norm_amplitude"] <= 1e-10
        # flat alpha lies in the smoothness kernel, so it never moves
        npt.assert_allclose(state.spec.alpha, state.spec.alpha[0])

    def test_median_kl_decreases_over_seeds(self):
        # start under-powered so the spectrum grows toward truth
        first, twentieth = [], []
        for seed in range(5):
            _, _, _, setup, data = make_linear_instance(n=64, seed=10 + seed)
            cfg = InferenceConfig(
                outer_iterations=20, seed=seed, initial_spectrum=1e-4,
                kl_change_window=50,
            )
            _, history = run_inference(data, setup, cfg)
            kl = history.kl_values()
            first.append(kl[0])
            twentieth.append(kl[19])
        assert np.median(twentieth) < np.median(first)

    def test_deterministic_given_seed(self):
        _, _, truth, setup, data = make_linear_instance(n=32, seed=6)
        cfg = InferenceConfig(outer_iterations=3, seed=11)
        state_a, history_a = run_inference(data, setup, cfg)
        state_b, history_b = run_inference(data, setup, cfg)
        npt.assert_array_equal(state_a.t.values, state_b.t.values)
        npt.assert_array_equal(state_a.spec.alpha, state_b.spec.alpha)
        for ra, rb in zip(history_a, history_b):
            for key in ra:
                if key != "wall_time":
                    assert ra[key] == rb[key], key

    def test_noise_estimation_updates_eta(self):
        # lognormal masked-Fourier toy; noise level sits at the sampled-update
        # misfit floor so the per-datum variance estimate can lock onto it
        grid = GridSpace((16, 16))
        binning = ring_binning(grid.harmonic_partner)
        truth = LogSpectrum.from_power_function(
            binning, lambda k: 0.02 / (k + 1.0) ** 2
        )
        rng = np.random.default_rng(1000)
        xi = draw_white_excitation(grid.harmonic_partner, rng)
        s = signal_field(xi, truth)
        keep = rng.permutation(grid.size)[: int(0.6 * grid.size)]
        keep = np.unique(np.concatenate([[0], keep]))
        response = fourier_sampling_response(grid, keep)
        clean = response.apply(Field(grid, np.exp(s.values))).values
        true_var = 1.5e-5
        data_vals = clean + rng.normal(0.0, np.sqrt(true_var), size=clean.shape)
        data = Field(response.target, data_vals)
        q = 2e-5 * float(np.var(data_vals))
        setup = MeasurementSetup(
            response, builtin("exponential"), EstimatedNoise(beta=2.0000002, q=q)
        )
        cfg = InferenceConfig(
            outer_iterations=20, initial_spectrum=0.1 / grid.size, seed=0,
            samples_start=3, samples_max=8, samples_double_every=10,
        )
        state, history = run_inference(data, setup, cfg)
        assert state.noise_eta is not None
        assert state.noise_eta.shape == (data.values.size,)
        recovered = np.exp(state.noise_eta).mean()
        assert true_var / 4 < recovered < true_var * 4


class TestRunLegacyInference:
    def test_rejects_nonlinear_and_estimated_noise(self):
        _, _, _, setup, data = make_linear_instance(n=16)
        bad_f = MeasurementSetup(setup.response, builtin("tanh"), setup.noise)
        with pytest.raises(ValueError):
            run_legacy_inference(data, bad_f, InferenceConfig(outer_iterations=1))
        bad_noise = setup.with_noise(EstimatedNoise(beta=2.0, q=1e-4))
        with pytest.raises(ValueError):
            run_legacy_inference(data, bad_noise, InferenceConfig(outer_iterations=1))

    def test_single_iteration_reaches_probed_root(self):
        _, binning, truth, setup, data = make_linear_instance(n=32, seed=4)
        cfg = InferenceConfig(
            outer_iterations=1, seed=7, sigma=1e8, initial_spectrum=1.0,
            legacy_probes=8,
        )
        state, history = run_legacy_inference(data, setup, cfg)

        # independent replay: Wiener solve and probe stream at the flat spectrum
        spec0 = LogSpectrum.flat_power(binning, 1.0)
        curv = wiener_curvature(setup, spec0)
        j = information_source(setup, data)
        m = conjugate_gradient(curv, j, cfg.cg, x0=zeros(setup.grid))
        probe_rng = np.random.default_rng(
            np.random.SeedSequence(cfg.seed, spawn_key=(1, 1))
        )
        correction = probed_bin_variance(curv, binning, probe_rng, cfg.cg, nprobes=8)
        root = np.log(empirical_bin_power(m, binning) + correction)
        npt.assert_allclose(state.spec.tau, root, atol=1e-6)

    def test_emits_one_record_per_iteration_with_shared_seeds(self):
        _, _, _, setup, data = make_linear_instance(n=16, seed=5)
        cfg = InferenceConfig(
            outer_iterations=25, seed=3, samples_start=1, samples_max=2,
            legacy_probes=2, kl_change_window=10**9,
        )
        _, legacy = run_legacy_inference(data, setup, cfg)
        _, current = run_inference(data, setup, cfg)
        assert len(legacy) == 25
        assert [r["iteration"] for r in legacy] == list(range(1, 26))
        for lr, cr in zip(legacy, current):
            assert lr["sample_seed"] == cr["sample_seed"]
            assert lr["sample_count"] == cr["sample_count"]


class TestPosteriorMoments:
    @staticmethod
    def _state(n=8, seed=0):
        grid = GridSpace((n,))
        binning = ring_binning(grid.harmonic_partner)
        spec = LogSpectrum.from_power_function(binning, lambda k: 2.0 / (k + 1.0))
        setup = MeasurementSetup(
            mask_response(grid, np.ones(n, dtype=bool)),
            builtin("identity"),
            FixedNoise(np.ones(n)),
        )
        rng = np.random.default_rng(seed)
        t = draw_white_excitation(binning.space, rng)
        from corrfield.model import PosteriorState, excitation_curvature

        state = PosteriorState(t, spec, excitation_curvature(t, setup, spec))
        return state, rng

    def test_single_sample_at_mean_has_zero_variance(self):
        state, _ = self._state()
        moments = posterior_moments(state, [state.t], builtin("exponential"))
        npt.assert_array_equal(moments["variance"], 0.0)
        npt.assert_array_equal(moments["relative_error"], 0.0)
        assert np.all(np.isfinite(moments["relative_error"]))

    def test_linear_mean_commutes(self):
        state, rng = self._state()
        samples = [
            state.t + draw_white_excitation(state.t.space, rng) for _ in range(3)
        ]
        moments = posterior_moments(state, samples, builtin("identity"))
        stacked = np.stack([s.values for s in samples])
        mean_xi = Field(state.t.space, stacked.mean(axis=0))
        npt.assert_allclose(
            moments["mean_nonlinear"],
            signal_field(mean_xi, state.spec).values,
            atol=1e-12,
        )

    def test_two_samples_hand_computed(self):
        state, rng = self._state(seed=2)
        samples = [
            state.t + draw_white_excitation(state.t.space, rng) for _ in range(2)
        ]
        moments = posterior_moments(state, samples, builtin("exponential"))
        sigs = np.stack([signal_field(s, state.spec).values for s in samples])
        center = signal_field(state.t, state.spec).values
        npt.assert_allclose(moments["mean_signal"], 0.5 * (sigs[0] + sigs[1]))
        npt.assert_allclose(
            moments["mean_nonlinear"], 0.5 * (np.exp(sigs[0]) + np.exp(sigs[1]))
        )
        npt.assert_allclose(
            moments["variance"],
            0.5 * ((sigs[0] - center) ** 2 + (sigs[1] - center) ** 2),
        )
        es = np.exp(sigs)
        npt.assert_allclose(
            moments["relative_error"], es.std(axis=0) / es.mean(axis=0)
        )

    def test_empty_samples_rejected(self):
        state, _ = self._state()
        with pytest.raises(ValueError):
            posterior_moments(state, [], builtin("identity"))
