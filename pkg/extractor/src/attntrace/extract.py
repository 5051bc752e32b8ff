"""Denoising loop instrumentation: prompts in, DAAT trajectories out.

Frame k holds the cross-attention the UNet computes on latent state x_k, so a
run with T scheduler steps yields T+1 frames: the T stepping forwards cover
x_0..x_{T-1} and one extra capture-only forward at the final timestep covers
x_T. That is one UNet forward more than plain generation.
"""

from __future__ import annotations

import csv
import importlib
from pathlib import Path

import numpy as np
import torch

from .capture import CaptureSession
from .config import ExtractionConfig
from .errors import InvalidConfig, ModelLoadError, PromptFileError, TokenizationOverflow
from .writer import ROLE_BOS, ROLE_EOS, ROLE_PROMPT, ManifestRow, write_manifest, write_trajectory

MANIFEST_NAME = "manifest.jsonl"

_PROMPT_COLUMNS = ("prompt", "label", "scenario", "split")


# ---------------------------------------------------------------------------
# pipeline access


def _components(pipe):
    missing = [n for n in ("tokenizer", "text_encoder", "unet", "scheduler") if not hasattr(pipe, n)]
    if missing:
        raise ModelLoadError(f"pipeline lacks components: {', '.join(missing)}")
    return pipe.tokenizer, pipe.text_encoder, pipe.unet, pipe.scheduler


def load_pipeline(model_id: str, device: str = "cpu"):
    """Load a checkpoint through diffusers; callers with their own pipeline skip this."""
    try:
        from diffusers import DiffusionPipeline
    except ImportError as exc:
        raise ModelLoadError(
            "loading by model id needs the diffusers package; pass a pipeline object instead"
        ) from exc
    try:
        pipe = DiffusionPipeline.from_pretrained(model_id)
    except Exception as exc:
        raise ModelLoadError(f"could not load {model_id!r}: {exc}") from exc
    return pipe.to(device)


def resolve_pipeline_factory(spec: str):
    """Build a pipeline from a 'module:callable' path (no-argument factory)."""
    module_name, sep, attr = spec.partition(":")
    if not sep or not module_name or not attr:
        raise ModelLoadError(f"pipeline factory must look like module:callable, got {spec!r}")
    try:
        factory = getattr(importlib.import_module(module_name), attr)
    except (ImportError, AttributeError) as exc:
        raise ModelLoadError(f"could not resolve pipeline factory {spec!r}: {exc}") from exc
    return factory()


# ---------------------------------------------------------------------------
# tokenization


def _input_ids(tokenizer, text: str) -> list[int]:
    enc = tokenizer(text)
    ids = getattr(enc, "input_ids", None)
    if ids is None:
        ids = enc["input_ids"]
    if len(ids) and isinstance(ids[0], (list, tuple)):
        ids = ids[0]
    return [int(i) for i in ids]


def tokenize_prompt(tokenizer, prompt: str) -> list[int]:
    ids = _input_ids(tokenizer, prompt)
    limit = getattr(tokenizer, "model_max_length", None)
    if limit is not None and len(ids) > limit:
        raise TokenizationOverflow(
            f"prompt tokenizes to {len(ids)} positions, context length is {limit}: {prompt!r}"
        )
    if len(ids) < 2:
        raise ModelLoadError(f"tokenizer produced {len(ids)} ids; need at least BOS and EOS")
    return ids


def roles_for(tokenizer, ids: list[int]) -> np.ndarray:
    eos = getattr(tokenizer, "eos_token_id", None)
    if eos is not None and ids[-1] != eos:
        raise ModelLoadError("tokenizer does not terminate prompts with its EOS token")
    roles = np.full(len(ids), ROLE_PROMPT, dtype=np.uint8)
    bos = getattr(tokenizer, "bos_token_id", None)
    if bos is None or ids[0] == bos:
        roles[0] = ROLE_BOS
    roles[-1] = ROLE_EOS
    return roles


def _uncond_ids(tokenizer, length: int) -> list[int]:
    """Empty-prompt ids padded to the conditional length so both branches batch."""
    ids = _input_ids(tokenizer, "")
    pad = getattr(tokenizer, "pad_token_id", None)
    if pad is None:
        pad = getattr(tokenizer, "eos_token_id", 0)
    if len(ids) > length:
        return ids[:length]
    return ids + [int(pad)] * (length - len(ids))


def _encode(text_encoder, ids: list[int], device: str) -> torch.Tensor:
    tens = torch.tensor([ids], dtype=torch.long, device=device)
    with torch.no_grad():
        out = text_encoder(tens)
    emb = getattr(out, "last_hidden_state", None)
    if emb is None:
        emb = out[0] if isinstance(out, (tuple, list)) else out
    return emb


# ---------------------------------------------------------------------------
# denoising loop


def _latent_shape(unet) -> tuple[int, int, int, int]:
    cfg = getattr(unet, "config", None)
    channels = getattr(cfg, "in_channels", None)
    size = getattr(cfg, "sample_size", None)
    if channels is None or size is None:
        raise ModelLoadError("unet.config must expose in_channels and sample_size")
    return (1, int(channels), int(size), int(size))


def _forward(unet, scheduler, latents, t, embeddings, session, config):
    model_in = torch.cat([latents, latents]) if config.uses_guidance else latents
    if hasattr(scheduler, "scale_model_input"):
        model_in = scheduler.scale_model_input(model_in, t)
    session.begin()
    with torch.no_grad():
        out = unet(model_in, t, encoder_hidden_states=embeddings)
    pred = getattr(out, "sample", out)
    frame = session.collect()
    if config.uses_guidance:
        uncond, cond = pred.chunk(2)
        pred = uncond + config.guidance_scale * (cond - uncond)
    return pred, frame


def extract_trajectory(pipe, prompt: str, config: ExtractionConfig, seed: int | None = None):
    """Run one prompt; returns (maps float32 (T+1, L, D, D), roles uint8 (L,))."""
    tokenizer, text_encoder, unet, scheduler = _components(pipe)
    for module in (text_encoder, unet):
        if hasattr(module, "eval"):
            module.eval()
    ids = tokenize_prompt(tokenizer, prompt)
    roles = roles_for(tokenizer, ids)
    embeddings = _encode(text_encoder, ids, config.device)
    if config.uses_guidance:
        uncond = _encode(text_encoder, _uncond_ids(tokenizer, len(ids)), config.device)
        embeddings = torch.cat([uncond, embeddings])

    session = CaptureSession(
        unet, config.map_dim, config.aggregation, cond_index=1 if config.uses_guidance else 0
    )
    try:
        scheduler.set_timesteps(config.steps)
        timesteps = list(scheduler.timesteps)
        if len(timesteps) != config.steps:
            raise ModelLoadError(
                f"scheduler produced {len(timesteps)} timesteps for {config.steps} steps"
            )
        generator = torch.Generator(device=config.device)
        generator.manual_seed(config.seed if seed is None else seed)
        latents = torch.randn(
            _latent_shape(unet), generator=generator, device=config.device, dtype=torch.float32
        )
        latents = latents * float(getattr(scheduler, "init_noise_sigma", 1.0))

        frames = []
        for t in timesteps:
            pred, frame = _forward(unet, scheduler, latents, t, embeddings, session, config)
            frames.append(frame)
            stepped = scheduler.step(pred, t, latents)
            latents = getattr(stepped, "prev_sample", stepped)
        _, frame = _forward(unet, scheduler, latents, timesteps[-1], embeddings, session, config)
        frames.append(frame)
    finally:
        session.remove()

    maps = torch.stack(frames).numpy().astype(np.float32, copy=False)
    return maps, roles


def extract_prompts(pipe, prompts, config: ExtractionConfig, stems=None) -> list[Path]:
    """Extract a list of prompts; per-prompt seeds are config.seed + index."""
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if stems is None:
        stems = [f"prompt-{i:04d}" for i in range(len(prompts))]
    paths = []
    for i, (prompt, stem) in enumerate(zip(prompts, stems)):
        maps, roles = extract_trajectory(pipe, prompt, config, seed=config.seed + i)
        paths.append(
            write_trajectory(maps, roles, config.sample_id(stem), prompt, out_dir / f"{stem}.daat")
        )
    return paths


def read_prompt_lines(path) -> list[str]:
    path = Path(path)
    if not path.is_file():
        raise PromptFileError(f"no prompt file at {path}")
    prompts = [line.strip() for line in path.read_text(encoding="utf-8").splitlines()]
    prompts = [p for p in prompts if p]
    if not prompts:
        raise PromptFileError(f"{path} holds no prompts")
    return prompts


def extract(pipe, config: ExtractionConfig) -> list[Path]:
    """Plain mode: one prompt per line in config.prompt_file, one DAAT file each."""
    return extract_prompts(pipe, read_prompt_lines(config.prompt_file), config)


# ---------------------------------------------------------------------------
# labeled batches


def read_labeled_prompts(path) -> list[dict]:
    """Parse the TSV prompt table: header prompt/label/scenario[/split]."""
    path = Path(path)
    if not path.is_file():
        raise PromptFileError(f"no prompt file at {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh, dialect="excel-tab")
        fields = reader.fieldnames
        if fields is None:
            raise PromptFileError(f"{path} is empty; expected a TSV header line")
        unknown = set(fields) - set(_PROMPT_COLUMNS)
        required = {"prompt", "label", "scenario"} - set(fields)
        if unknown or required:
            raise PromptFileError(
                f"{path}: header must name prompt, label, scenario and optionally split; "
                f"got {fields}"
            )
        rows = list(reader)
    if not rows:
        raise PromptFileError(f"{path} holds no prompt rows")
    return rows


def batch_extract(pipe, config: ExtractionConfig):
    """Labeled mode: emit one DAAT per row plus a manifest next to them.

    Prompt-specific failures (bad label or split, missing text, tokenizer
    overflow) are isolated per row; pipeline-level errors such as
    NoMatchingLayers abort the batch since every row would fail the same way.
    Returns (manifest_path, written_rows, failures) where failures pair the
    1-based data row number with the reason string.
    """
    rows = read_labeled_prompts(config.prompt_file)
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    failures = []
    for i, row in enumerate(rows):
        stem = f"sample-{i:04d}"
        try:
            prompt = row.get("prompt") or ""
            if not prompt:
                raise PromptFileError("row has no prompt text")
            entry = ManifestRow(
                path=f"{stem}.daat",
                label=row.get("label") or "",
                scenario=row.get("scenario") or "",
                split=row.get("split") or "test",
            )
            maps, roles = extract_trajectory(pipe, prompt, config, seed=config.seed + i)
            write_trajectory(maps, roles, config.sample_id(stem), prompt, out_dir / entry.path)
        except (PromptFileError, InvalidConfig, TokenizationOverflow) as exc:
            failures.append((i + 1, f"{type(exc).__name__}: {exc}"))
            continue
        written.append(entry)
    manifest_path = write_manifest(written, out_dir / MANIFEST_NAME)
    return manifest_path, written, failures
