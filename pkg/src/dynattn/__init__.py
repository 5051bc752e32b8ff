"""Backdoor detection for text-to-image diffusion models from the dynamics of
cross-attention maps: token-independent evolve-rate analysis (DAA-I) and a
graph-coupled state-evolution analysis (DAA-S), plus calibration, evaluation
and synthetic-data tooling."""

from .errors import (
    BadMagic,
    ConfigOutOfRange,
    DegenerateData,
    DynattnError,
    IndexOutOfRange,
    InvalidAxisValue,
    InvalidFieldValue,
    InvalidParams,
    LengthMismatch,
    NonFiniteState,
    NonFiniteValue,
    ShapeMismatch,
    SingleClassDataset,
    SolverStalled,
    TrajectoryFormatError,
    TruncatedPayload,
    UnsupportedVersion,
)
from .evaluation import (
    METHOD_I,
    METHOD_S,
    METHODS,
    AblationRow,
    EvalReport,
    ScoredSample,
    SweepResult,
    auc,
    calibrate_threshold,
    evaluate,
    f1_score,
    roc_points,
    run_ablation,
    score_manifest,
    sweep_params,
)
from .independent import (
    TOKEN_ALL,
    TOKEN_BOS,
    TOKEN_CHOICES,
    TOKEN_EOS,
    DaaIConfig,
    classify_i,
    daa_i_score,
    evolve_rate,
    evolve_rates,
    relative_series,
)
from .presets import PRESET_PAPER_SD14, PRESETS, Preset, get_preset
from .rer import (
    PcaProjection,
    RerSeries,
    average_series,
    evolve_rate_map,
    export_rer_heatmaps,
    load_heatmap_grid,
    mean_step_length,
    pca_project,
    rer_eos,
    rer_series,
)
from .synth import SynthParams, gen_dataset, gen_trajectory
from .system import (
    DaaSConfig,
    SolverStats,
    StabilityParams,
    StateTrace,
    classify_s,
    daa_s_score,
    edge_weights,
    integrate_states,
    laplacian,
    lyapunov_derivative,
    lyapunov_profile,
    score_trajectory_s,
)
from .trajectory import (
    LABEL_BACKDOOR,
    LABEL_BENIGN,
    LABELS,
    METRIC_FROBENIUS,
    METRIC_ONE_NORM,
    ROLE_BOS,
    ROLE_EOS,
    ROLE_PROMPT,
    SPLIT_TEST,
    SPLIT_TRAIN,
    DatasetManifest,
    ManifestEntry,
    Trajectory,
    default_roles,
    load_manifest,
    load_trajectory,
    map_distance,
    register_metric,
    save_manifest,
    save_trajectory,
)

__version__ = "0.1.0"
