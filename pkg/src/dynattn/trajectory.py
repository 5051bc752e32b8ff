"""Attention-trajectory data model: DAAT binary format, manifests, map distances.

On-disk DAAT layout, little-endian:

    magic "DAAT" | version u32 | n_frames u32 | n_tokens u32 | map_dim u32 |
    eos_index u32 | roles: n_tokens bytes (0=BOS, 1=PROMPT, 2=EOS) |
    sample_id_len u32 | sample_id utf-8 | prompt_len u32 | prompt utf-8 |
    payload: n_frames * n_tokens * map_dim * map_dim float32

Payload order is frame-major, then token, then row-major map.  Values are
stored as 32-bit floats; in memory maps are float64 (64-bit arithmetic is
used everywhere downstream).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .errors import (
    BadMagic,
    IndexOutOfRange,
    InvalidAxisValue,
    InvalidFieldValue,
    NonFiniteValue,
    ShapeMismatch,
    TruncatedPayload,
    UnsupportedVersion,
)

MAGIC = b"DAAT"
FORMAT_VERSION = 1

ROLE_BOS = 0
ROLE_PROMPT = 1
ROLE_EOS = 2

LABEL_BENIGN = "benign"
LABEL_BACKDOOR = "backdoor"
LABELS = (LABEL_BENIGN, LABEL_BACKDOOR)

SPLIT_TRAIN = "train"
SPLIT_TEST = "test"
SPLITS = (SPLIT_TRAIN, SPLIT_TEST)


# ---------------------------------------------------------------------------
# map distance

METRIC_FROBENIUS = "frobenius"
METRIC_ONE_NORM = "one_norm"


def _frobenius(a: np.ndarray, b: np.ndarray) -> float:
    d = a - b
    return float(np.sqrt(np.sum(d * d)))


def _one_norm(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.sum(np.abs(a - b)))


_METRICS: dict[str, Callable[[np.ndarray, np.ndarray], float]] = {
    METRIC_FROBENIUS: _frobenius,
    METRIC_ONE_NORM: _one_norm,
}


def register_metric(name: str, fn: Callable[[np.ndarray, np.ndarray], float]) -> None:
    """Register a symmetric map-distance callable (e.g. an SSIM-based one)."""
    _METRICS[name] = fn


def resolve_metric(metric) -> Callable[[np.ndarray, np.ndarray], float]:
    if callable(metric):
        return metric
    try:
        return _METRICS[metric]
    except KeyError:
        known = ", ".join(sorted(_METRICS))
        raise InvalidAxisValue(f"unknown metric {metric!r}; known: {known}") from None


def map_distance(a, b, metric=METRIC_FROBENIUS) -> float:
    """Distance between two attention maps.

    frobenius: sqrt of the sum of squared entrywise differences.
    one_norm: sum of absolute entrywise differences.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"map shapes differ: {a.shape} vs {b.shape}")
    return resolve_metric(metric)(a, b)


# ---------------------------------------------------------------------------
# trajectory


def default_roles(n_tokens: int) -> np.ndarray:
    """BOS, prompt tokens, EOS last."""
    roles = np.full(n_tokens, ROLE_PROMPT, dtype=np.uint8)
    roles[0] = ROLE_BOS
    roles[-1] = ROLE_EOS
    return roles


@dataclass(frozen=True)
class Trajectory:
    """Full (T+1, L, D, D) attention record for one sample.

    maps[t, i] is token position i+1's D x D map at denoising step t.
    eos_index is the 1-based EOS position and always equals L (EOS last).
    """

    maps: np.ndarray
    roles: np.ndarray
    eos_index: int
    sample_id: str = ""
    prompt: str = ""

    def __post_init__(self):
        maps = np.asarray(self.maps, dtype=np.float64)
        roles = np.asarray(self.roles, dtype=np.uint8)
        if maps.ndim != 4:
            raise ShapeMismatch(f"maps must be 4-D (frames, tokens, D, D), got {maps.shape}")
        n_frames, n_tokens, d0, d1 = maps.shape
        if d0 != d1 or d0 < 1:
            raise ShapeMismatch(f"maps must be square with D >= 1, got {d0}x{d1}")
        if n_tokens < 2:
            raise ShapeMismatch(f"need at least 2 tokens (one non-EOS plus EOS), got {n_tokens}")
        if n_frames < 2:
            raise ShapeMismatch(f"need at least 2 frames, got {n_frames}")
        if roles.shape != (n_tokens,):
            raise ShapeMismatch(f"roles shape {roles.shape} does not match {n_tokens} tokens")
        bad = np.flatnonzero(roles > ROLE_EOS)
        if bad.size:
            raise InvalidFieldValue(f"role byte {int(roles[bad[0]])} at token position {int(bad[0]) + 1}")
        eos_positions = np.flatnonzero(roles == ROLE_EOS)
        if eos_positions.size != 1 or int(eos_positions[0]) != n_tokens - 1:
            raise InvalidFieldValue("exactly one EOS role required, at the last position")
        if self.eos_index != n_tokens:
            raise InvalidFieldValue(f"eos_index={self.eos_index} must equal n_tokens={n_tokens}")
        if not np.isfinite(maps).all():
            flat = np.flatnonzero(~np.isfinite(maps.reshape(-1)))[0]
            raise NonFiniteValue(f"non-finite attention value at flat map index {int(flat)}")
        if (maps < 0).any():
            flat = np.flatnonzero(maps.reshape(-1) < 0)[0]
            raise InvalidFieldValue(f"negative attention value at flat map index {int(flat)}")
        maps.setflags(write=False)
        roles.setflags(write=False)
        object.__setattr__(self, "maps", maps)
        object.__setattr__(self, "roles", roles)

    @property
    def n_frames(self) -> int:
        return self.maps.shape[0]

    @property
    def n_tokens(self) -> int:
        return self.maps.shape[1]

    @property
    def map_dim(self) -> int:
        return self.maps.shape[2]

    @property
    def n_steps(self) -> int:
        """T: number of evolution differences (frames minus one)."""
        return self.maps.shape[0] - 1

    def frame(self, step: int) -> np.ndarray:
        """(L, D, D) view of all token maps at one step."""
        if not 0 <= step <= self.n_steps:
            raise IndexOutOfRange(f"step {step} outside [0, {self.n_steps}]")
        return self.maps[step]

    def token_maps(self, token: int) -> np.ndarray:
        """(T+1, D, D) view of one token's maps; token is a 1-based position."""
        if not 1 <= token <= self.n_tokens:
            raise IndexOutOfRange(f"token position {token} outside [1, {self.n_tokens}]")
        return self.maps[:, token - 1]


# ---------------------------------------------------------------------------
# DAAT serialization


class _Cursor:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedPayload(
                f"file ends inside {what}: need {n} bytes at offset {self.pos}, "
                f"have {len(self.data) - self.pos}"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def save_trajectory(traj: Trajectory, path=None) -> bytes:
    """Serialize to DAAT bytes (float32 payload); optionally also write to path.

    Deterministic: the same trajectory always yields identical bytes.
    """
    sid = traj.sample_id.encode("utf-8")
    prompt = traj.prompt.encode("utf-8")
    parts = [
        MAGIC,
        struct.pack(
            "<5I", FORMAT_VERSION, traj.n_frames, traj.n_tokens, traj.map_dim, traj.eos_index
        ),
        traj.roles.tobytes(),
        struct.pack("<I", len(sid)),
        sid,
        struct.pack("<I", len(prompt)),
        prompt,
        traj.maps.astype("<f4").tobytes(),
    ]
    blob = b"".join(parts)
    if path is not None:
        Path(path).write_bytes(blob)
    return blob


def _payload_size_error(remaining, expected, map_bytes, n_frames, n_tokens, payload_start, total):
    if remaining > expected:
        raise ShapeMismatch(
            f"{remaining - expected} trailing bytes after payload "
            f"(expected end at offset {payload_start + expected})"
        )
    if remaining % 4 != 0 or (expected - remaining) % map_bytes != 0:
        raise TruncatedPayload(
            f"payload ends mid-map at offset {total}: got {remaining} of {expected} bytes"
        )
    n_maps = remaining // map_bytes
    frames, leftover = divmod(n_maps, n_tokens)
    raise ShapeMismatch(
        f"payload holds {n_maps} maps ({frames} full frames, then {leftover}), "
        f"header declares {n_frames} frames x {n_tokens} tokens"
    )


def load_trajectory(src) -> Trajectory:
    """Parse DAAT bytes (or a file path) into a validated Trajectory."""
    if isinstance(src, (str, Path)):
        data = Path(src).read_bytes()
    else:
        data = bytes(src)

    cur = _Cursor(data)
    magic = cur.take(4, "magic")
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r} at offset 0, expected {MAGIC!r}")
    version = cur.u32("version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"version {version} at offset 4, supported: {FORMAT_VERSION}")
    n_frames = cur.u32("n_frames")
    n_tokens = cur.u32("n_tokens")
    map_dim = cur.u32("map_dim")
    eos_index = cur.u32("eos_index")
    if n_frames < 2:
        raise InvalidFieldValue(f"n_frames={n_frames} at offset 8, need at least 2")
    if n_tokens < 2:
        raise InvalidFieldValue(f"n_tokens={n_tokens} at offset 12, need at least 2")
    if map_dim < 1:
        raise InvalidFieldValue(f"map_dim={map_dim} at offset 16, need at least 1")
    if eos_index != n_tokens:
        raise InvalidFieldValue(
            f"eos_index={eos_index} at offset 20, must equal n_tokens={n_tokens}"
        )

    roles_off = cur.pos
    roles = np.frombuffer(cur.take(n_tokens, "roles"), dtype=np.uint8)
    bad = np.flatnonzero(roles > ROLE_EOS)
    if bad.size:
        raise InvalidFieldValue(
            f"role byte {int(roles[bad[0]])} at offset {roles_off + int(bad[0])} "
            f"(token position {int(bad[0]) + 1})"
        )

    sid_len = cur.u32("sample_id_len")
    try:
        sample_id = cur.take(sid_len, "sample_id").decode("utf-8")
    except UnicodeDecodeError as exc:
        raise InvalidFieldValue(f"sample_id is not valid UTF-8: {exc}") from None
    prompt_len = cur.u32("prompt_len")
    try:
        prompt = cur.take(prompt_len, "prompt").decode("utf-8")
    except UnicodeDecodeError as exc:
        raise InvalidFieldValue(f"prompt is not valid UTF-8: {exc}") from None

    payload_start = cur.pos
    n_values = n_frames * n_tokens * map_dim * map_dim
    expected = n_values * 4
    remaining = len(data) - payload_start
    if remaining != expected:
        _payload_size_error(
            remaining, expected, map_dim * map_dim * 4, n_frames, n_tokens, payload_start, len(data)
        )

    raw = np.frombuffer(data, dtype="<f4", offset=payload_start, count=n_values)
    finite = np.isfinite(raw)
    if not finite.all():
        idx = int(np.flatnonzero(~finite)[0])
        raise NonFiniteValue(
            f"non-finite payload value at offset {payload_start + idx * 4} "
            f"({_locate(idx, n_tokens, map_dim)})"
        )
    if (raw < 0).any():
        idx = int(np.flatnonzero(raw < 0)[0])
        raise InvalidFieldValue(
            f"negative payload value at offset {payload_start + idx * 4} "
            f"({_locate(idx, n_tokens, map_dim)})"
        )

    maps = raw.astype(np.float64).reshape(n_frames, n_tokens, map_dim, map_dim)
    return Trajectory(
        maps=maps, roles=roles.copy(), eos_index=eos_index, sample_id=sample_id, prompt=prompt
    )


def _locate(flat_idx: int, n_tokens: int, map_dim: int) -> str:
    per_map = map_dim * map_dim
    per_frame = n_tokens * per_map
    frame, rest = divmod(flat_idx, per_frame)
    token, rest = divmod(rest, per_map)
    row, col = divmod(rest, map_dim)
    return f"frame {frame}, token {token + 1}, row {row}, col {col}"


# ---------------------------------------------------------------------------
# dataset manifest


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: str
    scenario: str = ""
    split: str = SPLIT_TEST

    def __post_init__(self):
        if self.label not in LABELS:
            raise InvalidFieldValue(f"label {self.label!r} not in {LABELS}")
        if self.split not in SPLITS:
            raise InvalidFieldValue(f"split {self.split!r} not in {SPLITS}")


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    root: Path | None = None

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def subset(self, split: str | None = None, label: str | None = None) -> "DatasetManifest":
        out = self.entries
        if split is not None:
            out = tuple(e for e in out if e.split == split)
        if label is not None:
            out = tuple(e for e in out if e.label == label)
        return DatasetManifest(entries=out, root=self.root)

    def load(self, entry: ManifestEntry) -> Trajectory:
        return load_trajectory(self.resolve(entry))


_MANIFEST_FIELDS = ("path", "label", "scenario", "split")


def save_manifest(manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    lines = []
    for e in manifest.entries:
        rec = {"path": e.path, "label": e.label, "scenario": e.scenario, "split": e.split}
        lines.append(json.dumps(rec))
    path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    return path


def load_manifest(path, check_paths: bool = True) -> DatasetManifest:
    """Parse a JSONL manifest; paths resolve relative to the manifest's directory."""
    path = Path(path)
    root = path.parent
    entries = []
    for ln, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise InvalidFieldValue(f"{path}:{ln}: not valid JSON: {exc}") from None
        if not isinstance(rec, dict) or "path" not in rec or "label" not in rec:
            raise InvalidFieldValue(f"{path}:{ln}: record needs at least path and label fields")
        unknown = set(rec) - set(_MANIFEST_FIELDS)
        if unknown:
            raise InvalidFieldValue(f"{path}:{ln}: unknown fields {sorted(unknown)}")
        try:
            entry = ManifestEntry(
                path=rec["path"],
                label=rec["label"],
                scenario=rec.get("scenario", ""),
                split=rec.get("split", SPLIT_TEST),
            )
        except InvalidFieldValue as exc:
            raise InvalidFieldValue(f"{path}:{ln}: {exc}") from None
        entries.append(entry)
    manifest = DatasetManifest(entries=tuple(entries), root=root)
    if check_paths:
        for e in manifest.entries:
            p = manifest.resolve(e)
            if not p.is_file():
                raise InvalidFieldValue(f"manifest entry {e.path!r}: no readable file at {p}")
    return manifest
