"""Extraction run configuration."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

from .errors import InvalidConfig

MAP_DIMS = (8, 16, 32)

AGG_MEAN = "mean"
AGG_FIRST = "first"
AGG_POLICIES = (AGG_MEAN, AGG_FIRST)


@dataclass(frozen=True)
class ExtractionConfig:
    """One extraction run.

    model_id names a checkpoint for the default loader; callers that build a
    pipeline themselves can leave it empty. steps is the denoising step count
    T; the emitted trajectory has T+1 frames. aggregation picks how matching
    cross-attention layers combine: "mean" averages all of them, "first" keeps
    the first one encountered (heads are always averaged within a layer).
    """

    model_id: str = ""
    prompt_file: str = ""
    out_dir: str = "."
    steps: int = 50
    guidance_scale: float = 7.5
    seed: int = 0
    map_dim: int = 16
    aggregation: str = AGG_MEAN
    device: str = "cpu"

    def __post_init__(self):
        if not isinstance(self.steps, int) or isinstance(self.steps, bool) or self.steps < 1:
            raise InvalidConfig(f"steps must be an integer >= 1, got {self.steps!r}")
        if self.map_dim not in MAP_DIMS:
            raise InvalidConfig(f"map_dim must be one of {MAP_DIMS}, got {self.map_dim!r}")
        if not isinstance(self.guidance_scale, (int, float)) or isinstance(self.guidance_scale, bool):
            raise InvalidConfig(f"guidance_scale must be a number, got {self.guidance_scale!r}")
        if not math.isfinite(self.guidance_scale) or self.guidance_scale < 0:
            raise InvalidConfig(f"guidance_scale must be finite and >= 0, got {self.guidance_scale}")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or not 0 <= self.seed < 2**63:
            raise InvalidConfig(f"seed must be an integer in [0, 2**63), got {self.seed!r}")
        if self.aggregation not in AGG_POLICIES:
            raise InvalidConfig(f"aggregation must be one of {AGG_POLICIES}, got {self.aggregation!r}")

    @property
    def uses_guidance(self) -> bool:
        """Classifier-free guidance doubles the batch only when the scale exceeds 1."""
        return self.guidance_scale > 1.0

    def out_path(self, stem: str) -> Path:
        return Path(self.out_dir) / f"{stem}.daat"

    def sample_id(self, stem: str) -> str:
        """File stem plus the aggregation policy, so the id records how maps were pooled."""
        return f"{stem}#agg={self.aggregation}"
