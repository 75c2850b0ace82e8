"""TOML run configuration: parsing, strict validation, and object builders.

One config file describes an experiment end to end, so the same file drives
``synth``, ``reconstruct``, ``bench``, and ``moments``.  Sections::

    [grid]          shape = [1024]            # pixel_size optional
    [binning]       kind = "ring"             # or "log" with nbins
    [spectrum]      initial = 1.8e-2          # flat initial power (recon)
    [spectrum.truth]                          # synth/bench only
    amplitude = 4.0                           # power = amplitude*(k+offset)^exponent
    offset = 1.0
    exponent = -2.0
    # file = "true_power.raw"                 # ... or per-bin power from a file
    [nonlinearity]  label = "identity"        # builtin label or "piecewise"
    [response]      kind = "identity"         # "mask" | "fourier_sampling"
    [noise]         variance = 5.0            # generating / fixed variance
    # estimate = true, beta = ..., q = "auto" # self-calibrated reconstruction
    [run]           seed = 0, iterations = 100, out = "runs/x", data = "..."
    [solver]        sigma = 1.0, samples_start = 3, ...

Unknown keys are rejected; every validation error names the offending
``section.key`` so CLI users can find the typo.  Relative paths inside the
file resolve against the directory containing it.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - Python < 3.11
    import tomli as tomllib

from .arrayio import read_array
from .grids import GridSpace
from .inference import InferenceConfig
from .model import EstimatedNoise, FixedNoise
from .nonlinearity import LocalFunction, builtin, builtin_labels, piecewise_polynomial
from .operators import (
    LinearMap,
    LogSpectrum,
    PowerBinning,
    fourier_sampling_response,
    log_binning,
    mask_response,
    ring_binning,
)
from .solvers import CGConfig, NewtonConfig

__all__ = ["ConfigError", "RunConfig", "load_config", "parse_config"]


class ConfigError(ValueError):
    """Invalid run configuration; ``field`` names the offending key."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"[{field_name}] {message}")
        self.field = field_name


# ---------------------------------------------------------------------------
# table plumbing


def _check_keys(table: dict, section: str, allowed: set[str]) -> None:
    unknown = sorted(set(table) - allowed)
    if unknown:
        raise ConfigError(f"{section}.{unknown[0]}", "unknown key")


def _get(table: dict, section: str, key: str, kinds, default=None, required=False):
    if key not in table:
        if required:
            raise ConfigError(f"{section}.{key}", "missing required key")
        return default
    value = table[key]
    allowed = kinds if isinstance(kinds, tuple) else (kinds,)
    # bool subclasses int; accept it only where bool is explicitly allowed
    if isinstance(value, bool) and bool not in allowed or not isinstance(value, allowed):
        names = "/".join(k.__name__ for k in allowed)
        raise ConfigError(f"{section}.{key}", f"expected {names}, got {value!r}")
    return value


def _number(table, section, key, default=None, required=False, positive=False):
    value = _get(table, section, key, (int, float), default, required)
    if value is None:
        return None
    value = float(value)
    if positive and not value > 0:
        raise ConfigError(f"{section}.{key}", "must be positive")
    if not np.isfinite(value):
        raise ConfigError(f"{section}.{key}", "must be finite")
    return value


def _integer(table, section, key, default=None, required=False, minimum=None):
    value = _get(table, section, key, int, default, required)
    if value is None:
        return None
    if minimum is not None and value < minimum:
        raise ConfigError(f"{section}.{key}", f"must be >= {minimum}")
    return int(value)


# ---------------------------------------------------------------------------
# the validated configuration


@dataclass(frozen=True)
class RunConfig:
    """Validated run description; builders turn sections into model objects."""

    grid_shape: tuple
    grid_pixel_size: tuple | None
    binning_kind: str
    binning_nbins: int
    initial_power: float
    truth: dict | None
    nonlinearity_label: str
    nonlinearity_params: dict
    response_kind: str
    response_params: dict
    noise_variance: float | None
    noise_estimate: bool
    noise_beta: float
    noise_q: object
    seed: int
    iterations: int
    out_dir: str | None
    data_path: str | None
    solver: dict
    base_dir: str = "."

    def with_overrides(self, seed=None, iterations=None, samples=None, out=None):
        """Apply CLI flag overrides; None leaves the file value in place."""
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seed=int(seed))
        if iterations is not None:
            if iterations < 0:
                raise ConfigError("run.iterations", "must be >= 0")
            cfg = replace(cfg, iterations=int(iterations))
        if samples is not None:
            if samples < 1:
                raise ConfigError("solver.samples_start", "must be >= 1")
            solver = dict(cfg.solver)
            solver["samples_start"] = int(samples)
            solver["samples_max"] = max(int(samples), solver["samples_max"])
            cfg = replace(cfg, solver=solver)
        if out is not None:
            cfg = replace(cfg, out_dir=os.fspath(out))
        return cfg

    # -- path helpers ------------------------------------------------------

    def resolve(self, path: str) -> str:
        return os.path.normpath(os.path.join(self.base_dir, path))

    def output_dir(self) -> str:
        if self.out_dir is None:
            raise ConfigError("run.out", "missing required key (or pass --out)")
        return self.out_dir

    def resolved_data_path(self) -> str:
        if self.data_path is None:
            raise ConfigError("run.data", "missing required key")
        return self.resolve(self.data_path)

    # -- builders ----------------------------------------------------------

    def build_grid(self) -> GridSpace:
        try:
            return GridSpace(self.grid_shape, self.grid_pixel_size or ())
        except ValueError as err:
            raise ConfigError("grid.shape", str(err)) from None

    def build_binning(self, grid: GridSpace) -> PowerBinning:
        space = grid.harmonic_partner
        if self.binning_kind == "ring":
            return ring_binning(space)
        return log_binning(space, self.binning_nbins)

    def initial_spectrum(self, binning: PowerBinning) -> LogSpectrum:
        return LogSpectrum.flat_power(binning, self.initial_power)

    def build_truth(self, binning: PowerBinning) -> LogSpectrum:
        if self.truth is None:
            raise ConfigError("spectrum.truth", "missing required table")
        if "file" in self.truth:
            values = read_array(self.resolve(self.truth["file"]))
            if values.shape != (binning.nbins,):
                raise ConfigError(
                    "spectrum.truth.file",
                    f"holds {values.shape}, binning has {binning.nbins} bins",
                )
            return LogSpectrum.from_power(binning, values)
        a, o, e = (self.truth[k] for k in ("amplitude", "offset", "exponent"))
        return LogSpectrum.from_power_function(
            binning, lambda k: a * (k + o) ** e
        )

    def build_nonlinearity(self) -> LocalFunction:
        if self.nonlinearity_label == "piecewise":
            p = self.nonlinearity_params
            return piecewise_polynomial(p["breakpoints"], p["coefficients"])
        return builtin(self.nonlinearity_label)

    def build_response(self, grid: GridSpace, rng: np.random.Generator) -> LinearMap:
        kind, params = self.response_kind, self.response_params
        if kind == "identity":
            return mask_response(grid, np.ones(grid.shape, dtype=bool))
        if kind == "mask":
            if "keep_file" in params:
                keep = read_array(self.resolve(params["keep_file"]))
                if keep.shape != tuple(grid.shape):
                    raise ConfigError(
                        "response.keep_file", "mask shape does not match the grid"
                    )
                return mask_response(grid, keep != 0)
            keep = rng.random(grid.shape) < params["keep_fraction"]
            keep.flat[0] = True  # fraction draw must keep at least one pixel
            return mask_response(grid, keep)
        if "mode_file" in params:
            modes = read_array(self.resolve(params["mode_file"]))
            return fourier_sampling_response(grid, modes.astype(int))
        nkeep = max(1, int(round(params["keep_fraction"] * grid.size)))
        modes = rng.permutation(grid.size)[:nkeep]
        if params.get("include_zero", True):
            modes = np.unique(np.concatenate([[0], modes]))
        return fourier_sampling_response(grid, modes)

    def synthesis_noise_variance(self) -> float:
        if self.noise_variance is None:
            raise ConfigError("noise.variance", "missing required key")
        return self.noise_variance

    def build_noise(self, data_values: np.ndarray):
        """Noise model for reconstruction; ``q = "auto"`` scales to the data."""
        if self.noise_estimate:
            q = self.noise_q
            if q == "auto":
                q = 2e-5 * float(np.var(data_values))
            return EstimatedNoise(beta=self.noise_beta, q=float(q))
        variance = self.synthesis_noise_variance()
        if variance <= 0:
            raise ConfigError(
                "noise.variance", "must be positive for reconstruction"
            )
        return FixedNoise(np.full(int(data_values.size), variance))

    def build_inference_config(self, binning: PowerBinning | None = None):
        s = self.solver
        return InferenceConfig(
            sigma=s["sigma"],
            outer_iterations=max(1, self.iterations),
            initial_spectrum=self.initial_power,
            excitation_init_scale=s["excitation_init_scale"],
            seed=self.seed,
            binning=binning,
            excitation_newton=NewtonConfig(
                max_steps=s["excitation_steps"], grad_tol=s["grad_tol"]
            ),
            amplitude_newton=NewtonConfig(
                max_steps=s["amplitude_steps"], grad_tol=s["grad_tol"]
            ),
            cg=CGConfig(rel_tol=s["cg_tol"], max_iter=s["cg_max_iter"]),
            newton_cg=CGConfig(rel_tol=s["newton_cg_tol"], max_iter=s["cg_max_iter"]),
            samples_start=s["samples_start"],
            samples_max=s["samples_max"],
            samples_double_every=s["samples_double_every"],
            antithetic=s["antithetic"],
            update_amplitude=s["update_spectrum"],
            update_noise=s["update_noise"],
            legacy_probes=s["legacy_probes"],
            kl_change_tol=s["kl_change_tol"],
            kl_change_window=s["kl_change_window"],
        )


# ---------------------------------------------------------------------------
# parsing


def parse_config(text: str, base_dir: str = ".") -> RunConfig:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as err:
        raise ConfigError("toml", str(err)) from None
    _check_keys(
        doc, "config",
        {"grid", "binning", "spectrum", "nonlinearity", "response", "noise",
         "run", "solver"},
    )

    grid = doc.get("grid", {})
    _check_keys(grid, "grid", {"shape", "pixel_size"})
    shape = _get(grid, "grid", "shape", list, required=True)
    if not shape or not all(isinstance(n, int) and n > 0 for n in shape):
        raise ConfigError("grid.shape", "must be a list of positive integers")
    pixel_size = _get(grid, "grid", "pixel_size", list)
    if pixel_size is not None:
        if len(pixel_size) != len(shape) or not all(
            isinstance(x, (int, float)) and x > 0 for x in pixel_size
        ):
            raise ConfigError(
                "grid.pixel_size", "must list one positive length per axis"
            )
        pixel_size = tuple(float(x) for x in pixel_size)

    binning = doc.get("binning", {})
    _check_keys(binning, "binning", {"kind", "nbins"})
    binning_kind = _get(binning, "binning", "kind", str, default="ring")
    if binning_kind not in ("ring", "log"):
        raise ConfigError("binning.kind", "must be 'ring' or 'log'")
    nbins = _integer(binning, "binning", "nbins", default=64, minimum=2)

    spectrum = doc.get("spectrum", {})
    _check_keys(spectrum, "spectrum", {"initial", "truth"})
    initial = _number(spectrum, "spectrum", "initial", default=1.0, positive=True)
    truth = spectrum.get("truth")
    if truth is not None:
        if not isinstance(truth, dict):
            raise ConfigError("spectrum.truth", "must be a table")
        if "file" in truth:
            _check_keys(truth, "spectrum.truth", {"file"})
            _get(truth, "spectrum.truth", "file", str, required=True)
        else:
            _check_keys(truth, "spectrum.truth", {"amplitude", "offset", "exponent"})
            truth = {
                "amplitude": _number(
                    truth, "spectrum.truth", "amplitude", required=True, positive=True
                ),
                "offset": _number(
                    truth, "spectrum.truth", "offset", required=True, positive=True
                ),
                "exponent": _number(truth, "spectrum.truth", "exponent", required=True),
            }

    nonlin = doc.get("nonlinearity", {})
    _check_keys(nonlin, "nonlinearity", {"label", "breakpoints", "coefficients"})
    label = _get(nonlin, "nonlinearity", "label", str, default="identity")
    params: dict = {}
    if label == "piecewise":
        breakpoints = _get(nonlin, "nonlinearity", "breakpoints", list, required=True)
        coefficients = _get(
            nonlin, "nonlinearity", "coefficients", list, required=True
        )
        try:
            piecewise_polynomial(breakpoints, coefficients)
        except ValueError as err:
            raise ConfigError("nonlinearity.coefficients", str(err)) from None
        params = {"breakpoints": breakpoints, "coefficients": coefficients}
    elif label not in builtin_labels():
        raise ConfigError(
            "nonlinearity.label",
            f"unknown label {label!r}; available: "
            f"{', '.join(builtin_labels() + ('piecewise',))}",
        )

    response = doc.get("response", {})
    _check_keys(
        response, "response",
        {"kind", "keep_file", "keep_fraction", "mode_file", "include_zero"},
    )
    response_kind = _get(response, "response", "kind", str, default="identity")
    if response_kind not in ("identity", "mask", "fourier_sampling"):
        raise ConfigError(
            "response.kind", "must be 'identity', 'mask', or 'fourier_sampling'"
        )
    response_params: dict = {}
    if response_kind == "identity":
        stray = sorted(set(response) - {"kind"})
        if stray:
            raise ConfigError(
                f"response.{stray[0]}", "not a key of the identity response"
            )
    elif response_kind == "mask":
        if "keep_file" in response:
            response_params["keep_file"] = _get(
                response, "response", "keep_file", str
            )
        else:
            frac = _number(
                response, "response", "keep_fraction", required=True, positive=True
            )
            if frac > 1:
                raise ConfigError("response.keep_fraction", "must be <= 1")
            response_params["keep_fraction"] = frac
    elif response_kind == "fourier_sampling":
        if "mode_file" in response:
            response_params["mode_file"] = _get(
                response, "response", "mode_file", str
            )
        else:
            frac = _number(
                response, "response", "keep_fraction", required=True, positive=True
            )
            if frac > 1:
                raise ConfigError("response.keep_fraction", "must be <= 1")
            response_params["keep_fraction"] = frac
            response_params["include_zero"] = _get(
                response, "response", "include_zero", bool, default=True
            )

    noise = doc.get("noise", {})
    _check_keys(noise, "noise", {"variance", "estimate", "beta", "q"})
    variance = _number(noise, "noise", "variance")
    if variance is not None and variance < 0:
        raise ConfigError("noise.variance", "must be nonnegative")
    estimate = _get(noise, "noise", "estimate", bool, default=False)
    beta = _number(noise, "noise", "beta", default=2.0000002)
    if estimate and not beta > 1:
        raise ConfigError("noise.beta", "must be > 1")
    q = noise.get("q", "auto")
    if isinstance(q, str):
        if q != "auto":
            raise ConfigError("noise.q", "must be a positive number or 'auto'")
    else:
        q = _number(noise, "noise", "q", positive=True)

    run = doc.get("run", {})
    _check_keys(run, "run", {"seed", "iterations", "out", "data"})
    seed = _integer(run, "run", "seed", default=0)
    iterations = _integer(run, "run", "iterations", default=100, minimum=0)
    out_dir = _get(run, "run", "out", str)
    data_path = _get(run, "run", "data", str)

    solver_in = doc.get("solver", {})
    defaults = {
        "sigma": 1.0,
        "samples_start": 3,
        "samples_max": 20,
        "samples_double_every": 10,
        "antithetic": False,
        "update_spectrum": True,
        "update_noise": True,
        "excitation_steps": 20,
        "amplitude_steps": 5,
        "grad_tol": 1e-6,
        "cg_tol": 1e-6,
        "newton_cg_tol": 1e-4,
        "cg_max_iter": 2000,
        "legacy_probes": 16,
        "kl_change_tol": 1e-4,
        "kl_change_window": 5,
        "excitation_init_scale": 1e-3,
    }
    _check_keys(solver_in, "solver", set(defaults))
    solver = dict(defaults)
    for key, default in defaults.items():
        if isinstance(default, bool):
            solver[key] = _get(solver_in, "solver", key, bool, default)
        elif isinstance(default, int):
            solver[key] = _integer(solver_in, "solver", key, default, minimum=1)
        else:
            solver[key] = _number(
                solver_in, "solver", key, default, positive=True
            )

    return RunConfig(
        grid_shape=tuple(shape),
        grid_pixel_size=pixel_size,
        binning_kind=binning_kind,
        binning_nbins=nbins,
        initial_power=initial,
        truth=truth,
        nonlinearity_label=label,
        nonlinearity_params=params,
        response_kind=response_kind,
        response_params=response_params,
        noise_variance=variance,
        noise_estimate=estimate,
        noise_beta=beta,
        noise_q=q,
        seed=seed,
        iterations=iterations,
        out_dir=out_dir,
        data_path=data_path,
        solver=solver,
        base_dir=base_dir,
    )


def load_config(path) -> RunConfig:
    path = os.fspath(path)
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as err:
        raise ConfigError("config", f"cannot read {path}: {err}") from None
    return parse_config(text, base_dir=os.path.dirname(os.path.abspath(path)))
