"""attntrace: cross-attention trajectory capture for text-to-image diffusion pipelines."""

from .capture import AttentionTap, CaptureSession
from .config import AGG_FIRST, AGG_MEAN, AGG_POLICIES, MAP_DIMS, ExtractionConfig
from .errors import (
    AttntraceError,
    InvalidConfig,
    ModelLoadError,
    NoMatchingLayers,
    PromptFileError,
    TokenizationOverflow,
)
from .extract import (
    batch_extract,
    extract,
    extract_prompts,
    extract_trajectory,
    load_pipeline,
    read_labeled_prompts,
    read_prompt_lines,
    resolve_pipeline_factory,
    tokenize_prompt,
)
from .writer import (
    ROLE_BOS,
    ROLE_EOS,
    ROLE_PROMPT,
    ManifestRow,
    encode_trajectory,
    write_manifest,
    write_trajectory,
)

__all__ = [
    "AGG_FIRST",
    "AGG_MEAN",
    "AGG_POLICIES",
    "AttentionTap",
    "AttntraceError",
    "CaptureSession",
    "ExtractionConfig",
    "InvalidConfig",
    "MAP_DIMS",
    "ManifestRow",
    "ModelLoadError",
    "NoMatchingLayers",
    "PromptFileError",
    "ROLE_BOS",
    "ROLE_EOS",
    "ROLE_PROMPT",
    "TokenizationOverflow",
    "batch_extract",
    "encode_trajectory",
    "extract",
    "extract_prompts",
    "extract_trajectory",
    "load_pipeline",
    "read_labeled_prompts",
    "read_prompt_lines",
    "resolve_pipeline_factory",
    "tokenize_prompt",
    "write_manifest",
    "write_trajectory",
]
