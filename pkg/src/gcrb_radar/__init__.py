"""Generalized and mismatched Cramer-Rao bounds for target localization in
distributed radar networks with GMSK signals of opportunity."""

from .geometry import (
    C_LIGHT,
    GeometryError,
    IntermediateParams,
    JacobianBlocks,
    StationLayout,
    TargetState,
    intermediate_params,
    jacobian,
)
from .waveform import GmskParams, GmskWaveform, draw_bits, make_waveforms
from .signal_model import (
    ModelError,
    NoiseCorrelation,
    ReflectionCorrelation,
    Scenario,
    build_covariance,
    build_steering,
    scenario_noise,
    scenario_reflection,
    synthesize_observation,
)
from .fim_crb import (
    FimIntermediate,
    FimResult,
    MismatchPair,
    ecrbob,
    fim_intermediate_closed_form,
    fim_intermediate_trace_oracle,
    fim_mismatched,
    fim_theta,
    validate_chain_rule_expansion,
)

__version__ = "0.1.0"
