"""Multi-tier collaborative inference: confidence-based offloading, attention
pruning between tiers, weighted ensembling and patience-based early exit,
over a simulated compute/communication latency model."""

from .decision import (
    CalibrationParams,
    EarlyExitParams,
    EarlyExitState,
    EnsembleSpec,
    OffloadParams,
    calibrate_temperature,
    confidence,
    decide_offload,
    early_exit_step,
    ensemble,
    layer_diff,
    norm_confidence,
    offload_probability,
    profile_weights,
    softmax,
)
from .orchestrator import InferenceOutcome, Task, TierChain, run_task, run_workload

__version__ = "0.1.0"
