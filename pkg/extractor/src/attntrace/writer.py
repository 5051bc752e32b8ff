"""DAAT file and JSONL manifest writers.

Implements the trajectory wire contract directly so the detector package is a
consumer of these files, not a dependency of this one. Layout: ASCII magic
"DAAT"; five little-endian u32 fields (version=1, n_frames, n_tokens, map_dim,
1-based eos_index); one role byte per token (0=BOS, 1=PROMPT, 2=EOS); u32
length-prefixed UTF-8 sample id and prompt; float32 little-endian payload,
frame-major then token then row-major map.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidConfig

MAGIC = b"DAAT"
FORMAT_VERSION = 1

ROLE_BOS = 0
ROLE_PROMPT = 1
ROLE_EOS = 2

LABELS = ("benign", "backdoor")
SPLITS = ("train", "test")


def encode_trajectory(maps: np.ndarray, roles, sample_id: str, prompt: str) -> bytes:
    """Serialize one trajectory; EOS must be the last token (the detector requires it)."""
    maps = np.ascontiguousarray(maps, dtype=np.float32)
    roles = np.asarray(roles, dtype=np.uint8)
    if maps.ndim != 4 or maps.shape[2] != maps.shape[3]:
        raise InvalidConfig(f"maps must be (frames, tokens, D, D), got {maps.shape}")
    n_frames, n_tokens, map_dim, _ = maps.shape
    if roles.shape != (n_tokens,):
        raise InvalidConfig(f"roles shape {roles.shape} does not match {n_tokens} tokens")
    if n_tokens < 2 or roles[-1] != ROLE_EOS or np.count_nonzero(roles == ROLE_EOS) != 1:
        raise InvalidConfig("need >= 2 tokens with exactly one EOS role, at the last position")
    if not np.isfinite(maps).all() or (maps < 0).any():
        raise InvalidConfig("attention values must be finite and non-negative")
    sid = sample_id.encode("utf-8")
    ptext = prompt.encode("utf-8")
    return b"".join(
        [
            MAGIC,
            struct.pack("<5I", FORMAT_VERSION, n_frames, n_tokens, map_dim, n_tokens),
            roles.tobytes(),
            struct.pack("<I", len(sid)),
            sid,
            struct.pack("<I", len(ptext)),
            ptext,
            maps.astype("<f4").tobytes(),
        ]
    )


def write_trajectory(maps: np.ndarray, roles, sample_id: str, prompt: str, path) -> Path:
    path = Path(path)
    path.write_bytes(encode_trajectory(maps, roles, sample_id, prompt))
    return path


@dataclass(frozen=True)
class ManifestRow:
    path: str
    label: str
    scenario: str = ""
    split: str = "test"

    def __post_init__(self):
        if self.label not in LABELS:
            raise InvalidConfig(f"label {self.label!r} not in {LABELS}")
        if self.split not in SPLITS:
            raise InvalidConfig(f"split {self.split!r} not in {SPLITS}")


def write_manifest(rows, path) -> Path:
    path = Path(path)
    lines = [
        json.dumps({"path": r.path, "label": r.label, "scenario": r.scenario, "split": r.split})
        for r in rows
    ]
    path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    return path
