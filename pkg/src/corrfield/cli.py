"""Command-line frontend: data synthesis, reconstruction, benchmark, moments.

Every command reads one TOML config (``--config``); ``--out``, ``--seed``,
``--iterations``, and ``--samples`` override the corresponding file values.
Arrays are exchanged in the repo raw+sidecar format, run metadata as JSON,
iteration histories as JSON lines, and figures as emitted gnuplot scripts
next to their TSV data.

Exit codes: 0 success, 2 configuration/validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from .arrayio import read_array, write_array
from .config import ConfigError, RunConfig, load_config
from .grids import Field, SpaceMismatchError, draw_white_excitation, harmonic_transform, zeros
from .inference import (
    RunHistory,
    _iteration_seed,
    initial_state,
    posterior_moments,
    run_inference,
    run_legacy_inference,
)
from .model import (
    MeasurementSetup,
    NumericError,
    PosteriorState,
    excitation_curvature,
    information_source,
    kl_estimate,
    signal_field,
    wiener_curvature,
)
from .operators import (
    FourierSamplingResponse,
    IdentityMap,
    LogSpectrum,
    MaskResponse,
    PowerBinning,
    smoothness_curvature,
)
from .sampling import SamplingJob, draw_sample_set
from .solvers import ConvergenceError, conjugate_gradient

__all__ = ["main", "cmd_synth", "cmd_reconstruct", "cmd_bench", "cmd_moments"]

log = logging.getLogger("corrfield")


# ---------------------------------------------------------------------------
# small file helpers


def _write_json(path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_tsv(path, columns: dict) -> None:
    names = list(columns)
    table = np.column_stack([np.asarray(columns[n], dtype=float) for n in names])
    with open(path, "w") as fh:
        fh.write("# " + "\t".join(names) + "\n")
        for row in table:
            fh.write("\t".join(f"{v:.10g}" for v in row) + "\n")


def _write_matrix_tsv(path, values: np.ndarray) -> None:
    with open(path, "w") as fh:
        for row in np.atleast_2d(values):
            fh.write("\t".join(f"{v:.10g}" for v in row) + "\n")


def _prepare_outdir(cfg: RunConfig) -> str:
    outdir = cfg.output_dir()
    os.makedirs(outdir, exist_ok=True)
    return outdir


def _instance(cfg: RunConfig):
    """Grid, binning, nonlinearity, and the response drawn from the run seed.

    The response is built from a fresh generator seeded with the run seed
    before anything else is drawn, so fraction-based responses come out
    identical across synth and reconstruct runs of the same config.
    """
    grid = cfg.build_grid()
    binning = cfg.build_binning(grid)
    f = cfg.build_nonlinearity()
    rng = np.random.default_rng(cfg.seed)
    response = cfg.build_response(grid, rng)
    return grid, binning, f, response, rng


def _response_artifacts(outdir: str, response) -> dict:
    files = {}
    if isinstance(response, FourierSamplingResponse):
        write_array(os.path.join(outdir, "modes.raw"), response.mode_indices)
        files["modes"] = "modes.raw"
    elif isinstance(response, MaskResponse) and not response.keep.all():
        write_array(os.path.join(outdir, "keep_pixels.raw"), response.keep)
        files["keep_pixels"] = "keep_pixels.raw"
    return files


# ---------------------------------------------------------------------------
# synth


def cmd_synth(cfg: RunConfig) -> int:
    grid, binning, f, response, rng = _instance(cfg)
    truth = cfg.build_truth(binning)
    variance = cfg.synthesis_noise_variance()
    outdir = _prepare_outdir(cfg)

    xi = draw_white_excitation(grid.harmonic_partner, rng)
    s = signal_field(xi, truth)
    clean = response.apply(Field(grid, f.eval(s.values))).values
    data = clean.copy()
    if variance > 0:
        data = data + rng.normal(0.0, np.sqrt(variance), size=clean.shape)

    files = {
        "signal": "signal.raw",
        "data": "data.raw",
        "truth_spectrum": "truth_spectrum.raw",
        "excitation": "excitation.raw",
        "binning": "binning.json",
    }
    write_array(os.path.join(outdir, files["signal"]), s.values)
    write_array(os.path.join(outdir, files["data"]), data)
    write_array(os.path.join(outdir, files["truth_spectrum"]), truth.power)
    write_array(os.path.join(outdir, files["excitation"]), xi.values)
    with open(os.path.join(outdir, files["binning"]), "w") as fh:
        fh.write(binning.to_json() + "\n")
    files.update(_response_artifacts(outdir, response))

    _write_json(os.path.join(outdir, "manifest.json"), {
        "command": "synth",
        "seed": cfg.seed,
        "grid": list(cfg.grid_shape),
        "nonlinearity": f.label,
        "response": cfg.response_kind,
        "noise_variance": variance,
        "n_data": int(data.size),
        "files": files,
    })
    log.info("drew %d data points on a %s grid", data.size, "x".join(map(str, cfg.grid_shape)))
    print(f"synth: wrote {data.size} data points to {outdir}")
    return 0


# ---------------------------------------------------------------------------
# reconstruct


def _load_truth_next_to_data(data_path: str, grid, binning):
    """Truth artifacts from a synth output directory, when present."""
    base = os.path.dirname(os.path.abspath(data_path))
    truth_signal = truth_power = None
    sig = os.path.join(base, "signal.raw")
    if os.path.exists(sig) and os.path.exists(sig + ".json"):
        values = read_array(sig)
        if values.shape == tuple(grid.shape):
            truth_signal = values
    pw = os.path.join(base, "truth_spectrum.raw")
    if os.path.exists(pw) and os.path.exists(pw + ".json"):
        values = read_array(pw)
        if values.shape == (binning.nbins,):
            truth_power = values
    return truth_signal, truth_power


_PLOT_1D = """\
# reconstruction overview; render with: gnuplot -p plot_reconstruction.gp
set style data lines
set key outside
set multiplot layout 2,1
set title "signal"
plot "plot_signal.tsv" using 1:($3-$4):($3+$4) with filledcurves \\
         fs transparent solid 0.25 lc rgb "gray" title "sample envelope", \\
     "plot_signal.tsv" using 1:2 lw 2 title "reconstruction s*", \\
     "plot_signal.tsv" using 1:3 title "posterior mean f(s)"{truth_signal}
set title "power spectrum"
set logscale xy
plot "plot_spectrum.tsv" using 1:2 lw 2 title "reconstructed"{truth_power}
unset multiplot
"""

_PLOT_2D = """\
# reconstruction maps; render with: gnuplot -p plot_reconstruction.gp
set view map
set size ratio -1
set multiplot layout 1,{panels}
set title "reconstruction s*"
splot "reconstruction_map.tsv" matrix with image notitle
{error_panel}unset multiplot
"""


def _emit_plots(outdir, grid, binning, state, moments, truth_signal, truth_power):
    kappa = binning.kappa_centers
    keep = kappa > 0  # the zero bin has no place on a log axis
    spectrum_cols = {"kappa": kappa[keep], "power": state.spec.power[keep]}
    if truth_power is not None:
        spectrum_cols["truth_power"] = np.asarray(truth_power)[keep]
    _write_tsv(os.path.join(outdir, "plot_spectrum.tsv"), spectrum_cols)

    if len(grid.shape) == 1:
        cols = {
            "pixel": np.arange(grid.shape[0]),
            "reconstruction": state.signal.values,
            "mean_nonlinear": moments["mean_nonlinear"],
            "std": np.sqrt(moments["variance"]),
        }
        if truth_signal is not None:
            cols["truth_signal"] = truth_signal
        _write_tsv(os.path.join(outdir, "plot_signal.tsv"), cols)
        script = _PLOT_1D.format(
            truth_signal=", \\\n     \"plot_signal.tsv\" using 1:5 title \"truth\""
            if truth_signal is not None else "",
            truth_power=", \\\n     \"plot_spectrum.tsv\" using 1:3 title \"truth\""
            if truth_power is not None else "",
        )
    else:
        _write_matrix_tsv(
            os.path.join(outdir, "reconstruction_map.tsv"), state.signal.values
        )
        error_panel = ""
        panels = 1
        if moments.get("relative_error") is not None:
            _write_matrix_tsv(
                os.path.join(outdir, "relative_error_map.tsv"),
                moments["relative_error"],
            )
            error_panel = (
                'set title "relative error E"\n'
                'splot "relative_error_map.tsv" matrix with image notitle\n'
            )
            panels = 2
        script = _PLOT_2D.format(panels=panels, error_panel=error_panel)
    with open(os.path.join(outdir, "plot_reconstruction.gp"), "w") as fh:
        fh.write(script)


def _final_samples(state, setup, icfg, history):
    """Fresh posterior draws at the final state, on an unused seed stream."""
    if state.noise_eta is not None:
        setup = setup.with_noise(setup.noise.with_eta(state.noise_eta))
    job = SamplingJob(
        state, setup,
        count=icfg.sample_count(max(1, len(history))),
        seed=_iteration_seed(icfg.seed, len(history) + 1),
        cg=icfg.cg, antithetic=icfg.antithetic,
    )
    return draw_sample_set(job), setup


def cmd_reconstruct(cfg: RunConfig) -> int:
    grid, binning, f, response, _ = _instance(cfg)
    data_path = cfg.resolved_data_path()
    try:
        data_values = read_array(data_path)
    except OSError as err:
        raise ConfigError("run.data", f"cannot read {data_path}: {err}") from None
    if data_values.shape != (response.target.size,):
        raise ConfigError(
            "run.data",
            f"data holds {data_values.shape}, response produces "
            f"({response.target.size},)",
        )
    data = Field(response.target, data_values.astype(float))
    setup = MeasurementSetup(response, f, cfg.build_noise(data_values))
    icfg = cfg.build_inference_config(binning)
    outdir = _prepare_outdir(cfg)

    if cfg.iterations == 0:
        state, _ = initial_state(data, setup, icfg)
        history = RunHistory()
    else:
        try:
            state, history = run_inference(data, setup, icfg)
        except (NumericError, FloatingPointError, ConvergenceError) as err:
            _write_json(os.path.join(outdir, "manifest.json"), {
                "command": "reconstruct",
                "status": "numerical_failure",
                "error": str(err),
                "seed": cfg.seed,
            })
            log.error("inference failed: %s", err)
            print(f"reconstruct: numerical failure: {err}", file=sys.stderr)
            return 3

    samples, setup = _final_samples(state, setup, icfg, history)
    moments = posterior_moments(state, samples, f)

    files = {
        "reconstruction": "reconstruction.raw",
        "excitation_mean": "excitation_mean.raw",
        "alpha": "alpha.raw",
        "power": "power.raw",
        "mean_signal": "mean_signal.raw",
        "mean_nonlinear": "mean_nonlinear.raw",
        "variance": "variance.raw",
        "samples": "samples.raw",
        "history": "history.jsonl",
        "binning": "binning.json",
    }
    write_array(os.path.join(outdir, files["reconstruction"]), state.signal.values)
    write_array(os.path.join(outdir, files["excitation_mean"]), state.t.values)
    write_array(os.path.join(outdir, files["alpha"]), state.spec.alpha)
    write_array(os.path.join(outdir, files["power"]), state.spec.power)
    write_array(os.path.join(outdir, files["mean_signal"]), moments["mean_signal"])
    write_array(
        os.path.join(outdir, files["mean_nonlinear"]), moments["mean_nonlinear"]
    )
    write_array(os.path.join(outdir, files["variance"]), moments["variance"])
    write_array(os.path.join(outdir, files["samples"]), samples.stacked_values())
    if moments["relative_error"] is not None:
        files["relative_error"] = "relative_error.raw"
        write_array(
            os.path.join(outdir, files["relative_error"]), moments["relative_error"]
        )
    if state.noise_eta is not None:
        files["noise_eta"] = "noise_eta.raw"
        write_array(os.path.join(outdir, files["noise_eta"]), state.noise_eta)
    history.write_jsonl(os.path.join(outdir, files["history"]))
    with open(os.path.join(outdir, files["binning"]), "w") as fh:
        fh.write(binning.to_json() + "\n")

    truth_signal, truth_power = _load_truth_next_to_data(data_path, grid, binning)
    _emit_plots(outdir, grid, binning, state, moments, truth_signal, truth_power)
    files["plot"] = "plot_reconstruction.gp"

    final_kl = history[-1]["kl"] if len(history) else None
    _write_json(os.path.join(outdir, "manifest.json"), {
        "command": "reconstruct",
        "status": "ok",
        "seed": cfg.seed,
        "iterations_run": len(history),
        "converged": bool(getattr(history, "converged", False)),
        "stalls": int(getattr(history, "stall_count", 0)),
        "final_kl": final_kl,
        "sample_count": samples.count,
        "noise_estimated": state.noise_eta is not None,
        "files": files,
    })
    log.info("finished after %d iterations (converged=%s)",
             len(history), getattr(history, "converged", False))
    print(
        f"reconstruct: {len(history)} iterations, "
        f"final KL {final_kl if final_kl is not None else 'n/a'}, wrote {outdir}"
    )
    return 0


# ---------------------------------------------------------------------------
# bench


def _reference_kl(setup, truth, binning, data, icfg):
    """KL at the Wiener solution for the true spectrum, on fresh samples."""
    curv = wiener_curvature(setup, truth)
    j = information_source(setup, data)
    m = conjugate_gradient(curv, j, icfg.cg, x0=zeros(setup.grid))
    coeffs = harmonic_transform(m)
    t = Field(coeffs.space, coeffs.values / truth.mode_amplitudes)
    state = PosteriorState(t, truth, excitation_curvature(t, setup, truth))
    job = SamplingJob(
        state, setup, count=icfg.samples_max,
        seed=_iteration_seed(icfg.seed, icfg.outer_iterations + 1), cg=icfg.cg,
    )
    samples = draw_sample_set(job)
    smooth = smoothness_curvature(binning, icfg.sigma)
    return kl_estimate(samples, setup, truth, data, smooth)


_PLOT_BENCH = """\
# KL convergence comparison; render with: gnuplot -p plot_bench.gp
set style data lines
set key outside
set xlabel "outer iteration"
set ylabel "KL estimate"
plot "bench_curves.tsv" using 1:2 lw 2 title "reformulated", \\
     "bench_curves.tsv" using 1:3 lw 2 title "legacy", \\
     {reference} lc rgb "black" dt 2 title "Wiener reference"
"""


def cmd_bench(cfg: RunConfig) -> int:
    if cfg.nonlinearity_label != "identity":
        raise ConfigError(
            "nonlinearity.label",
            "the convergence benchmark is defined for the linear (identity) case",
        )
    grid, binning, f, response, rng = _instance(cfg)
    truth = cfg.build_truth(binning)
    variance = cfg.synthesis_noise_variance()
    if variance <= 0:
        raise ConfigError("noise.variance", "must be positive for the benchmark")
    outdir = _prepare_outdir(cfg)

    xi = draw_white_excitation(grid.harmonic_partner, rng)
    s = signal_field(xi, truth)
    clean = response.apply(Field(grid, f.eval(s.values))).values
    data_values = clean + rng.normal(0.0, np.sqrt(variance), size=clean.shape)
    data = Field(response.target, data_values)
    setup = MeasurementSetup(response, f, cfg.build_noise(data_values))

    # fixed-length curves: suppress the plateau stop for comparability
    icfg = replace(cfg.build_inference_config(binning), kl_change_window=10**9)
    state_new, hist_new = run_inference(data, setup, icfg)
    state_old, hist_old = run_legacy_inference(data, setup, icfg)
    kl_ref = _reference_kl(setup, truth, binning, data, icfg)

    hist_new.write_jsonl(os.path.join(outdir, "history_reformulated.jsonl"))
    hist_old.write_jsonl(os.path.join(outdir, "history_legacy.jsonl"))
    n = min(len(hist_new), len(hist_old))
    _write_tsv(os.path.join(outdir, "bench_curves.tsv"), {
        "iteration": np.arange(1, n + 1),
        "kl_reformulated": hist_new.kl_values()[:n],
        "kl_legacy": hist_old.kl_values()[:n],
    })
    with open(os.path.join(outdir, "plot_bench.gp"), "w") as fh:
        fh.write(_PLOT_BENCH.format(reference=f"{kl_ref:.10g}"))

    report = {
        "command": "bench",
        "seed": cfg.seed,
        "iterations": n,
        "kl_reformulated_final": float(hist_new.kl_values()[-1]),
        "kl_legacy_final": float(hist_old.kl_values()[-1]),
        "kl_reference": float(kl_ref),
        "files": {
            "reformulated": "history_reformulated.jsonl",
            "legacy": "history_legacy.jsonl",
            "curves": "bench_curves.tsv",
            "plot": "plot_bench.gp",
        },
    }
    _write_json(os.path.join(outdir, "bench_report.json"), report)
    print(
        f"bench: {n} iterations, final KL reformulated "
        f"{report['kl_reformulated_final']:.6g} vs legacy "
        f"{report['kl_legacy_final']:.6g} (reference {kl_ref:.6g}); wrote {outdir}"
    )
    return 0


# ---------------------------------------------------------------------------
# moments


def cmd_moments(cfg: RunConfig) -> int:
    outdir = cfg.output_dir()
    f = cfg.build_nonlinearity()
    needed = ["excitation_mean.raw", "alpha.raw", "samples.raw", "binning.json"]
    for name in needed:
        if not os.path.exists(os.path.join(outdir, name)):
            raise ConfigError(
                "run.out", f"{outdir} is not a reconstruction output: missing {name}"
            )
    with open(os.path.join(outdir, "binning.json")) as fh:
        binning = PowerBinning.from_json(fh.read())
    space = binning.space
    t = Field(space, read_array(os.path.join(outdir, "excitation_mean.raw")))
    spec = LogSpectrum(binning, read_array(os.path.join(outdir, "alpha.raw")))
    stacked = read_array(os.path.join(outdir, "samples.raw"))
    if stacked.shape[1:] != space.shape:
        raise ConfigError("run.out", "stored samples do not match the stored grid")
    samples = [Field(space, row) for row in stacked]
    state = PosteriorState(t, spec, IdentityMap(space))

    moments = posterior_moments(state, samples, f)
    files = {}
    for key in ("mean_signal", "mean_nonlinear", "variance", "relative_error"):
        if moments[key] is None:
            continue
        files[key] = f"{key}.raw"
        write_array(os.path.join(outdir, files[key]), moments[key])
    _write_json(os.path.join(outdir, "moments.json"), {
        "command": "moments",
        "sample_count": len(samples),
        "nonlinearity": f.label,
        "files": files,
    })
    print(f"moments: {len(samples)} samples -> {', '.join(sorted(files))} in {outdir}")
    return 0


# ---------------------------------------------------------------------------
# entry point


_COMMANDS = {
    "synth": (cmd_synth, "draw a signal and synthetic data from the prior"),
    "reconstruct": (cmd_reconstruct, "infer signal + spectrum (+ noise) from data"),
    "bench": (cmd_bench, "compare reformulated vs legacy convergence (linear case)"),
    "moments": (cmd_moments, "recompute posterior moment maps from a run directory"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="corrfield",
        description="signal + power-spectrum reconstruction from nonlinear, "
                    "noisy measurements",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (fn, help_text) in _COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, metavar="PATH",
                       help="TOML run configuration")
        p.add_argument("--out", metavar="DIR", help="output directory override")
        p.add_argument("--seed", type=int, metavar="N", help="seed override")
        p.add_argument("--iterations", type=int, metavar="N",
                       help="outer iteration override")
        p.add_argument("--samples", type=int, metavar="N",
                       help="posterior sample count override")
        p.add_argument("--verbose", action="store_true",
                       help="log per-stage progress")
        p.set_defaults(func=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_config(args.config).with_overrides(
            seed=args.seed, iterations=args.iterations,
            samples=args.samples, out=args.out,
        )
        return args.func(cfg)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (NumericError, FloatingPointError, ConvergenceError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return 3
    except (SpaceMismatchError, ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
