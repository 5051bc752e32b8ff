"""Named default configurations."""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigOutOfRange
from .independent import DaaIConfig
from .system import DaaSConfig

PRESET_PAPER_SD14 = "paper-sd14"


@dataclass(frozen=True)
class Preset:
    name: str
    daa_i: DaaIConfig
    daa_s: DaaSConfig


PRESETS = {
    # t=3, s=2, alpha=-0.0011 / t=1, s=5, alpha=-0.0053, c=1, gamma=(-1,...,-10)
    PRESET_PAPER_SD14: Preset(name=PRESET_PAPER_SD14, daa_i=DaaIConfig(), daa_s=DaaSConfig()),
}


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigOutOfRange(f"unknown preset {name!r}; available: {sorted(PRESETS)}") from None
