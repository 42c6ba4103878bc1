"""Sound event detection and localization toolkit.

Learnable multichannel sinc filterbank, dense temporal proposal maps,
proposal-to-detection inference and event/segment evaluation.
"""
from seldkit._backend import BACKEND
from seldkit.errors import (
    ConstraintError,
    DomainError,
    MetadataError,
    SceneSpecError,
    SeldError,
    ShapeError,
    TrainingError,
    UndefinedResultError,
    ValidationError,
    WavFormatError,
)
from seldkit.filterbank import (
    FilterBank,
    FitConfig,
    MaxCorrFilter,
    SincParams,
    apply_filterbank,
    fit_filters,
    kernel_gradients,
    maxcorr_kernel,
    sinc_kernel,
)
from seldkit.inference import Detection, InferenceConfig, max_event_clip, run_pipeline, temporal_nms
from seldkit.metrics import evaluate_events, match_events, segment_eval
from seldkit.proposals import (
    ProposalGrid,
    build_grid,
    ground_truth_overlap_map,
    motion_smoothness_map,
    tiou,
    tiou_bs,
)
from seldkit.waveform import (
    FramewiseLabels,
    MultichannelWaveform,
    SceneSpec,
    SoundEvent,
    read_metadata,
    read_wav,
    synth_scene,
    write_metadata,
    write_wav,
)

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "ConstraintError",
    "Detection",
    "DomainError",
    "FilterBank",
    "FitConfig",
    "FramewiseLabels",
    "InferenceConfig",
    "MaxCorrFilter",
    "MetadataError",
    "MultichannelWaveform",
    "ProposalGrid",
    "SceneSpec",
    "SceneSpecError",
    "SeldError",
    "ShapeError",
    "SincParams",
    "SoundEvent",
    "TrainingError",
    "UndefinedResultError",
    "ValidationError",
    "WavFormatError",
    "apply_filterbank",
    "build_grid",
    "evaluate_events",
    "fit_filters",
    "ground_truth_overlap_map",
    "kernel_gradients",
    "match_events",
    "max_event_clip",
    "maxcorr_kernel",
    "motion_smoothness_map",
    "read_metadata",
    "read_wav",
    "run_pipeline",
    "segment_eval",
    "sinc_kernel",
    "synth_scene",
    "temporal_nms",
    "tiou",
    "tiou_bs",
    "write_metadata",
    "write_wav",
]
