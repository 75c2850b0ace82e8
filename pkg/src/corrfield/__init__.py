"""Reconstruction of autocorrelated signals with unknown power spectra.

The package infers a signal together with its power spectrum (and optionally
the noise level) from nonlinear, noisy measurements.  The signal is
parametrized as an amplitude-weighted white excitation field; inference
alternates Newton minimization of the excitation posterior, Gaussian
posterior sampling, sampled-KL minimization of the log-spectrum, and a
closed-form noise update.  A legacy signal-space critical-filter loop is
included for convergence benchmarking.
"""

from .grids import (
    BinSpace,
    DataSpace,
    Field,
    GridSpace,
    HarmonicSpace,
    SpaceMismatchError,
    adjoint_transform,
    draw_white_excitation,
    from_values,
    full,
    harmonic_transform,
    inner_product,
    norm,
    zeros,
)
from .operators import (
    AmplitudeOperator,
    DenseBinMap,
    DiagonalMap,
    FourierSamplingResponse,
    HarmonicTransformMap,
    IdentityMap,
    LinearMap,
    LogSpectrum,
    MaskResponse,
    PowerBinning,
    PowerProjection,
    ZeroMap,
    amplitude_operator,
    dense_matrix,
    fourier_sampling_response,
    log_binning,
    log_curvature_matrix,
    mask_response,
    power_distribute,
    power_project,
    ring_binning,
    smoothness_curvature,
)
from .nonlinearity import (
    LocalFunction,
    builtin,
    builtin_labels,
    check_monotone,
    piecewise_polynomial,
)
from .solvers import (
    CGConfig,
    ConvergenceError,
    LineSearchStall,
    NewtonConfig,
    conjugate_gradient,
    relaxed_newton,
)
from .model import (
    EstimatedNoise,
    ExcitationCurvature,
    FixedNoise,
    LinearizedResponse,
    MeasurementSetup,
    NumericError,
    PosteriorState,
    WienerCurvature,
    empirical_bin_power,
    excitation_curvature,
    hamiltonian_gradient_excitation,
    hamiltonian_value,
    information_source,
    kl_curvature_amplitude,
    kl_estimate,
    kl_gradient_amplitude,
    kl_gradient_noise,
    legacy_cf_energy,
    legacy_cf_gradient,
    legacy_cf_residual,
    legacy_hamiltonian_value,
    legacy_tau_curvature,
    legacy_tau_gradient,
    model_prediction,
    noise_eta_stationary,
    probed_bin_variance,
    residual_values,
    signal_field,
    wiener_curvature,
)
from .sampling import (
    SampleSet,
    SamplingJob,
    draw_posterior_sample,
    draw_sample_set,
    linearized_response,
)
from .inference import (
    InferenceConfig,
    RunHistory,
    initial_state,
    posterior_moments,
    run_inference,
    run_legacy_inference,
)
from .arrayio import read_array, sidecar_path, write_array
from .config import ConfigError, RunConfig, load_config, parse_config

__version__ = "0.1.0"
