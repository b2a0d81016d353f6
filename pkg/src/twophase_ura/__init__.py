"""Simulation and replica analysis for two-phase unsourced random access in massive MIMO."""

from .amp import AmpConfig, AmpState, NumericalFailure, amp_init, amp_iteration, map_threshold, run_decoder
from .replica import (
    FreeEntropyCurve,
    ReplicaConfig,
    eta_denoiser,
    eval_free_entropy,
    mmse_from_d,
    predict_pe,
    scan_extremes,
)
from .system_model import IndexMatrix, SystemConfig, spectral_efficiency

__all__ = [
    "AmpConfig",
    "AmpState",
    "FreeEntropyCurve",
    "IndexMatrix",
    "NumericalFailure",
    "ReplicaConfig",
    "SystemConfig",
    "amp_init",
    "amp_iteration",
    "eta_denoiser",
    "eval_free_entropy",
    "map_threshold",
    "mmse_from_d",
    "predict_pe",
    "run_decoder",
    "scan_extremes",
    "spectral_efficiency",
]
