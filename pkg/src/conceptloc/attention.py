"""Cross-attention with map capture, and identifier-token map aggregation."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

from .errors import ArgumentError, ConfigurationError

DEFAULT_MAP_SIZE = 256


@dataclass(frozen=True)
class AttentionLayerConfig:
    layer_id: str
    downsample_factor: int
    head_count: int
    key_dim: int

    def __post_init__(self):
        if self.head_count <= 0 or self.key_dim <= 0:
            raise ConfigurationError(
                f"layer {self.layer_id}: head_count and key_dim must be positive"
            )
        if self.downsample_factor <= 0:
            raise ConfigurationError(f"layer {self.layer_id}: downsample factor must be positive")

    def grid(self, latent_hw: tuple[int, int]) -> tuple[int, int]:
        h, w = latent_hw
        f = self.downsample_factor
        if h % f or w % f:
            raise ConfigurationError(
                f"layer {self.layer_id}: factor {f} does not divide latent grid {h}x{w}"
            )
        return h // f, w // f


@dataclass
class AttentionRecord:
    """Softmax weights of one cross-attention call.

    ``map`` has shape ``[..., heads, query_positions, tokens]``; the leading
    dimensions are the batch when the layer ran on a batch.
    """

    layer: AttentionLayerConfig
    map: torch.Tensor
    grid: tuple[int, int]
    timestep: int | None = None

    @property
    def token_count(self) -> int:
        return self.map.shape[-1]


@dataclass
class AggregatedTokenMap:
    values: torch.Tensor
    token_index: int
    source_layer_count: int

    @property
    def shape(self):
        return tuple(self.values.shape)


def _as_tensor(x, dtype=None):
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype or torch.float64)


def cross_attention(query_features, key_source, w_q, w_k, w_v, heads: int = 1, layer_id="anonymous"):
    """Scaled dot-product attention of spatial queries over text tokens.

    Weights follow the ``nn.Linear`` convention (``[out, in]``), so
    ``Q = x @ w_q.T``.  The per-head key width ``d`` is ``w_k.shape[0] // heads``.

    Returns ``(output, weights)`` where ``output`` has shape
    ``[..., positions, heads * d_v]`` and ``weights`` has shape
    ``[..., heads, positions, tokens]`` (the pre-V softmax).
    """
    x = _as_tensor(query_features)
    ctx = _as_tensor(key_source, x.dtype)
    w_q, w_k, w_v = (_as_tensor(w, x.dtype) for w in (w_q, w_k, w_v))

    if w_q.shape[1] != x.shape[-1]:
        raise ConfigurationError(
            f"layer {layer_id}: W_Q expects width {w_q.shape[1]}, queries have {x.shape[-1]}"
        )
    if w_k.shape[1] != ctx.shape[-1] or w_v.shape[1] != ctx.shape[-1]:
        raise ConfigurationError(
            f"layer {layer_id}: W_K/W_V expect width {w_k.shape[1]}/{w_v.shape[1]}, "
            f"context has {ctx.shape[-1]}"
        )
    if w_q.shape[0] != w_k.shape[0]:
        raise ConfigurationError(f"layer {layer_id}: W_Q and W_K output widths differ")
    if w_k.shape[0] % heads or w_v.shape[0] % heads:
        raise ConfigurationError(f"layer {layer_id}: projection width not divisible by {heads} heads")

    d = w_k.shape[0] // heads
    q = x @ w_q.T
    k = ctx @ w_k.T
    v = ctx @ w_v.T

    def split(t):
        return t.reshape(*t.shape[:-1], heads, -1).transpose(-3, -2)

    q, k, v = split(q), split(k), split(v)
    logits = q @ k.transpose(-1, -2) / math.sqrt(d)
    weights = logits.softmax(dim=-1)
    out = weights @ v
    out = out.transpose(-3, -2)
    out = out.reshape(*out.shape[:-2], -1)
    return out, weights


class CrossAttention(nn.Module):
    """Cross-attention layer whose projections are labeled W_Q, W_K, W_V."""

    def __init__(self, layer_id: str, query_dim: int, context_dim: int, key_dim: int,
                 heads: int, downsample_factor: int):
        super().__init__()
        self.config = AttentionLayerConfig(layer_id, downsample_factor, heads, key_dim)
        inner = key_dim * heads
        self.to_q = nn.Linear(query_dim, inner, bias=False)
        self.to_k = nn.Linear(context_dim, inner, bias=False)
        self.to_v = nn.Linear(context_dim, inner, bias=False)
        self.to_out = nn.Linear(inner, query_dim)
        self._captures: list["AttentionCapture"] = []

    def projection_kinds(self):
        return {"W_Q": self.to_q.weight, "W_K": self.to_k.weight, "W_V": self.to_v.weight}

    def forward(self, x, context, grid=None, timestep=None):
        out, weights = cross_attention(
            x, context, self.to_q.weight, self.to_k.weight, self.to_v.weight,
            heads=self.config.head_count, layer_id=self.config.layer_id,
        )
        for capture in self._captures:
            capture._record(self.config, weights, grid, timestep)
        return self.to_out(out)


class AttentionCapture:
    """Buffer of AttentionRecords appended by every forward pass.

    Owned by one loop at a time.  Use as a context manager or call
    :meth:`remove` to detach from the layers.
    """

    def __init__(self, layers: Sequence[CrossAttention], detach: bool = False):
        self.layers = list(layers)
        self.detach = detach
        self.records: list[AttentionRecord] = []
        for layer in self.layers:
            layer._captures.append(self)

    def _record(self, config, weights, grid, timestep):
        w = weights.detach() if self.detach else weights
        self.records.append(AttentionRecord(config, w, tuple(grid), timestep))

    def clear(self):
        self.records.clear()

    def remove(self):
        for layer in self.layers:
            if self in layer._captures:
                layer._captures.remove(self)
        self.layers = []

    def __len__(self):
        return len(self.records)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.remove()


def register_capture(denoiser, layer_filter: Iterable[int], detach: bool = False) -> AttentionCapture:
    """Attach a capture buffer to every cross-attention layer whose factor is in ``layer_filter``."""
    if not hasattr(denoiser, "cross_attention_layers"):
        raise ConfigurationError("denoiser does not enumerate its cross-attention layers")
    wanted = set(int(f) for f in layer_filter)
    layers = [l for l in denoiser.cross_attention_layers() if l.config.downsample_factor in wanted]
    if not layers:
        available = sorted({l.config.downsample_factor for l in denoiser.cross_attention_layers()})
        raise ConfigurationError(
            f"no cross-attention layers at factors {sorted(wanted)}; available: {available}"
        )
    return AttentionCapture(layers, detach=detach)


def extract_token_map(record: AttentionRecord, token_index: int) -> torch.Tensor:
    """Head-averaged attention of one token, reshaped to the layer's grid."""
    if not 0 <= token_index < record.token_count:
        raise ArgumentError(
            f"token index {token_index} out of range for {record.token_count} tokens"
        )
    column = record.map[..., token_index].mean(dim=-2)
    h, w = record.grid
    return column.reshape(*column.shape[:-1], h, w)


def aggregate_maps(per_layer_maps, size=DEFAULT_MAP_SIZE, token_index: int = -1) -> AggregatedTokenMap:
    """Bilinearly upscale each ``[..., h, w]`` map to ``size`` and average them."""
    maps = [_as_tensor(m) for m in per_layer_maps]
    if not maps:
        raise ArgumentError("aggregate_maps needs at least one map")
    if isinstance(size, int):
        size = (size, size)
    size = tuple(size)
    upscaled = [_upscale(m, size) for m in maps]
    values = torch.stack(upscaled).mean(dim=0)
    return AggregatedTokenMap(values, token_index, len(maps))


def _upscale(m: torch.Tensor, size):
    if tuple(m.shape[-2:]) == size:
        return m
    lead = m.shape[:-2]
    flat = m.reshape(-1, 1, *m.shape[-2:])
    out = F.interpolate(flat, size=size, mode="bilinear", align_corners=False)
    return out.reshape(*lead, *size)


def identifier_map(records: Sequence[AttentionRecord], token_index: int,
                   size=DEFAULT_MAP_SIZE) -> AggregatedTokenMap:
    return aggregate_maps([extract_token_map(r, token_index) for r in records], size, token_index)


def attention_saturation(agg: AggregatedTokenMap) -> float:
    """max(Attn_V): how close the map can get to a binary target of 1."""
    return float(agg.values.detach().max())


@dataclass
class RunningMapMean:
    """Running mean of aggregated maps over denoising steps."""

    total: torch.Tensor | None = None
    count: int = 0
    timesteps: list = field(default_factory=list)

    def update(self, values: torch.Tensor, timestep=None):
        values = values.detach().double()
        self.total = values.clone() if self.total is None else self.total + values
        self.count += 1
        if timestep is not None:
            self.timesteps.append(int(timestep))

    @property
    def mean(self) -> torch.Tensor:
        if not self.count:
            raise ArgumentError("no maps accumulated")
        return self.total / self.count


def save_probe(path, values, layer_ids, token_index, timesteps, extra=None):
    """Write an 8-bit grayscale PNG (round(255*v)) and a JSON sidecar next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.asarray(values.detach().cpu() if isinstance(values, torch.Tensor) else values, dtype=np.float64)
    pixels = np.rint(255.0 * np.clip(arr, 0.0, 1.0)).astype(np.uint8)
    Image.fromarray(pixels).save(path)
    ts = [int(t) for t in timesteps]
    sidecar = {
        "layer_ids": list(layer_ids),
        "token_index": int(token_index),
        "timestep_range": [min(ts), max(ts)] if ts else [],
        "timestep_count": len(ts),
    }
    if extra:
        sidecar.update(extra)
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return path
