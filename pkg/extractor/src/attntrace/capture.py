"""Attention-processor instrumentation.

Works against any UNet whose cross-attention modules follow the common
processor protocol: the module exposes `is_cross_attention`, `heads`,
`to_q`/`to_k`/`to_v`/`to_out` projections, and calls
`self.processor(self, hidden_states, encoder_hidden_states, attention_mask)`
during forward. The tap replaces the processor, computes standard multi-head
attention itself, and records the post-softmax probabilities it used, so the
captured maps are exactly what produced the module's output.
"""

from __future__ import annotations

import math

import torch

from .config import AGG_FIRST
from .errors import NoMatchingLayers


def _project_out(attn, hidden: torch.Tensor) -> torch.Tensor:
    out = attn.to_out
    if isinstance(out, (torch.nn.ModuleList, torch.nn.Sequential)):
        for layer in out:
            hidden = layer(hidden)
        return hidden
    return out(hidden)


class AttentionTap:
    """Drop-in attention processor recording cross-attention probabilities."""

    def __init__(self, session: "CaptureSession", name: str):
        self.session = session
        self.name = name

    def __call__(self, attn, hidden_states, encoder_hidden_states=None, attention_mask=None, **kwargs):
        ctx = hidden_states if encoder_hidden_states is None else encoder_hidden_states
        q = attn.to_q(hidden_states)
        k = attn.to_k(ctx)
        v = attn.to_v(ctx)
        batch, q_len, channels = q.shape
        heads = attn.heads
        head_dim = channels // heads
        q = q.view(batch, q_len, heads, head_dim).transpose(1, 2)
        k = k.view(batch, -1, heads, head_dim).transpose(1, 2)
        v = v.view(batch, -1, heads, head_dim).transpose(1, 2)
        scale = getattr(attn, "scale", None) or head_dim**-0.5
        scores = q @ k.transpose(-1, -2) * scale
        if attention_mask is not None:
            scores = scores + attention_mask
        probs = scores.softmax(dim=-1)
        if encoder_hidden_states is not None:
            self.session.record(self.name, probs)
        out = (probs @ v).transpose(1, 2).reshape(batch, q_len, channels)
        return _project_out(attn, out)


def _is_cross_attention(module) -> bool:
    return (
        getattr(module, "is_cross_attention", False)
        and hasattr(module, "to_q")
        and hasattr(module, "to_k")
        and hasattr(module, "to_v")
        and hasattr(module, "heads")
    )


class CaptureSession:
    """Instruments every cross-attention module in a UNet for one extraction.

    Per UNet forward: call begin() first, run the forward, then collect() to
    get one aggregated (L, map_dim, map_dim) frame. Layers whose query length
    is not a square multiple of map_dim are ignored; if none qualify,
    collect() raises NoMatchingLayers. remove() restores the original
    processors.
    """

    def __init__(self, unet, map_dim: int, aggregation: str, cond_index: int = 0):
        self.map_dim = map_dim
        self.aggregation = aggregation
        self.cond_index = cond_index
        self.recording = False
        self._current: list[tuple[str, torch.Tensor]] = []
        self._originals: list[tuple[object, object]] = []
        for name, module in unet.named_modules():
            if not _is_cross_attention(module):
                continue
            self._originals.append((module, getattr(module, "processor", None)))
            tap = AttentionTap(self, name)
            if hasattr(module, "set_processor"):
                module.set_processor(tap)
            else:
                module.processor = tap
        if not self._originals:
            raise NoMatchingLayers("the UNet exposes no cross-attention modules to instrument")

    def record(self, name: str, probs: torch.Tensor):
        if not self.recording:
            return
        # Keep only the configured batch element (the conditional branch under
        # guidance); heads stay separate until collect().
        self._current.append((name, probs[self.cond_index].detach().to("cpu", torch.float32)))

    def begin(self):
        self._current = []
        self.recording = True

    def collect(self) -> torch.Tensor:
        self.recording = False
        recorded, self._current = self._current, []
        maps = []
        seen = []
        for name, probs in recorded:
            per_query = probs.mean(dim=0)
            q_len = per_query.shape[0]
            seen.append(q_len)
            side = math.isqrt(q_len)
            if side * side != q_len or side % self.map_dim != 0:
                continue
            block = side // self.map_dim
            tokens = per_query.transpose(0, 1).reshape(-1, side, side)
            if block > 1:
                tokens = tokens.reshape(-1, self.map_dim, block, self.map_dim, block).mean(dim=(2, 4))
            maps.append(tokens)
            if self.aggregation == AGG_FIRST:
                break
        if not maps:
            raise NoMatchingLayers(
                f"no cross-attention layer resolves to {self.map_dim}x{self.map_dim}; "
                f"query lengths seen this forward: {sorted(set(seen))}"
            )
        return torch.stack(maps).mean(dim=0)

    def remove(self):
        for module, original in self._originals:
            if hasattr(module, "set_processor") and original is not None:
                module.set_processor(original)
            else:
                module.processor = original
