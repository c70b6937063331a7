"""Noise schedule, toy conditional denoiser, trainable-set selection and checkpoints.

The toy backbone works directly on a 32x32 RGB grid (identity encode and
decode) and places one cross-attention layer at each of the downsampling
factors 2, 4 and 8.  Anything that satisfies :class:`BackboneAdapter`'s
capability probe can stand in for it.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import CrossAttention
from .conditioning import MAX_TOKENS, TOY_VOCAB_SIZE, toy_vocabulary
from .errors import (ArgumentError, CapabilityError, ConfigurationError,
                     DegenerateLayerError)

PROJECTION_KINDS = ("W_Q", "W_K", "W_V")
TEXT_KIND = "text_encoder"
OTHER_KIND = "other"


# --------------------------------------------------------------------------
# forward process

class NoiseSchedule:
    """Per-step variances and cumulative products, indexed by t in [1, T]."""

    def __init__(self, betas):
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size == 0:
            raise ConfigurationError("betas must be a nonempty 1-D sequence")
        if (betas < 0).any() or (betas >= 1).any():
            raise ConfigurationError("betas must lie in [0, 1)")
        self.betas = betas
        self.alphas = 1.0 - betas
        self.alpha_bars = np.cumprod(self.alphas)
        if (np.diff(self.alpha_bars) >= 0).any():
            raise ConfigurationError("cumulative alpha products must strictly decrease")

    @classmethod
    def linear(cls, T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02):
        """Linear variances; endpoints are scaled by 1000/T so short chains still reach noise."""
        if T <= 0:
            raise ConfigurationError("T must be positive")
        scale = 1000.0 / T
        return cls(np.linspace(beta_start * scale, min(beta_end * scale, 0.999), T))

    @property
    def T(self) -> int:
        return self.betas.size

    def alpha_bar(self, t):
        """ᾱ_t with ᾱ_0 = 1; ``t`` may be an int or an integer array/tensor."""
        t_arr = np.asarray(t.cpu() if isinstance(t, torch.Tensor) else t)
        if (t_arr < 0).any() or (t_arr > self.T).any():
            raise ArgumentError(f"timestep outside [0, {self.T}]")
        padded = np.concatenate([[1.0], self.alpha_bars])
        return padded[t_arr]

    def to_dict(self):
        return {"betas": self.betas.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["betas"])


def add_noise(z0, t, eps, schedule: NoiseSchedule):
    """z_t = sqrt(ᾱ_t)·z0 + sqrt(1-ᾱ_t)·ε; ``t`` scalar or one per batch element."""
    z0 = torch.as_tensor(z0)
    eps = torch.as_tensor(eps, dtype=z0.dtype)
    if z0.shape != eps.shape:
        raise ArgumentError(f"latent {tuple(z0.shape)} and noise {tuple(eps.shape)} differ")
    t_arr = np.asarray(t.cpu() if isinstance(t, torch.Tensor) else t)
    if (t_arr < 1).any() or (t_arr > schedule.T).any():
        raise ArgumentError(f"timestep {t_arr.tolist()} outside [1, {schedule.T}]")
    ab = torch.as_tensor(schedule.alpha_bar(t_arr), dtype=z0.dtype)
    if ab.ndim == 1:
        ab = ab.reshape(-1, *([1] * (z0.ndim - 1)))
    return ab.sqrt() * z0 + (1 - ab).sqrt() * eps


@dataclass(frozen=True)
class LatentSpec:
    height: int
    width: int
    channels: int
    encoder_factor: int = 1

    def __post_init__(self):
        if min(self.height, self.width, self.channels, self.encoder_factor) <= 0:
            raise ConfigurationError("latent dimensions must be positive")

    @classmethod
    def from_pixels(cls, H, W, channels, encoder_factor):
        if H % encoder_factor or W % encoder_factor:
            raise ConfigurationError(f"factor {encoder_factor} does not divide {H}x{W}")
        return cls(H // encoder_factor, W // encoder_factor, channels, encoder_factor)

    @property
    def pixel_size(self):
        return self.height * self.encoder_factor, self.width * self.encoder_factor


# --------------------------------------------------------------------------
# toy network

@dataclass
class ToyConfig:
    image_size: int = 32
    channels: int = 3
    base_channels: int = 32
    text_dim: int = 32
    key_dim: int = 16
    heads: int = 2
    time_dim: int = 64
    vocab_size: int = TOY_VOCAB_SIZE
    max_tokens: int = MAX_TOKENS
    num_timesteps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    init_seed: int = 0

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        d.pop("kind", None)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown backbone keys: {sorted(unknown)}")
        return cls(**d)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([args.sin(), args.cos()], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, cin, cout, time_dim):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.time = nn.Linear(time_dim, cout)
        self.norm2 = nn.GroupNorm(8, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class AttnBlock(nn.Module):
    """Normalize, flatten to positions, cross-attend, add back."""

    def __init__(self, layer_id, channels, text_dim, key_dim, heads, factor):
        super().__init__()
        self.norm = nn.GroupNorm(8, channels)
        self.attn = CrossAttention(layer_id, channels, text_dim, key_dim, heads, factor)

    def forward(self, x, context, timestep=None):
        b, c, h, w = x.shape
        seq = self.norm(x).flatten(2).transpose(1, 2)
        out = self.attn(seq, context, grid=(h, w), timestep=timestep)
        return x + out.transpose(1, 2).reshape(b, c, h, w)


class ToyTextEncoder(nn.Module):
    """Embedding table plus one self-attention/MLP mixing block."""

    def __init__(self, vocab_size, dim, max_tokens, heads=2):
        super().__init__()
        self.token_embedding = nn.Embedding(vocab_size, dim)
        self.position = nn.Parameter(torch.randn(max_tokens, dim) * 0.02)
        self.norm1 = nn.LayerNorm(dim)
        self.mix = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))
        self.out_norm = nn.LayerNorm(dim)

    def forward(self, token_ids):
        x = self.token_embedding(token_ids) + self.position[: token_ids.shape[-1]]
        h = self.norm1(x)
        x = x + self.mix(h, h, h, need_weights=False)[0]
        x = x + self.mlp(self.norm2(x))
        return self.out_norm(x)


class ToyDenoiser(nn.Module):
    def __init__(self, cfg: ToyConfig):
        super().__init__()
        c, tdim = cfg.base_channels, cfg.time_dim
        self.time_dim = tdim
        self.time_mlp = nn.Sequential(nn.Linear(tdim, tdim), nn.SiLU(), nn.Linear(tdim, tdim))
        self.stem = nn.Conv2d(cfg.channels, c, 3, padding=1)
        self.enc32 = ResBlock(c, c, tdim)
        self.down16 = nn.Conv2d(c, c, 3, stride=2, padding=1)
        self.enc16 = ResBlock(c, c, tdim)
        self.attn16 = AttnBlock("down_f2", c, cfg.text_dim, cfg.key_dim, cfg.heads, 2)
        self.down8 = nn.Conv2d(c, 2 * c, 3, stride=2, padding=1)
        self.enc8 = ResBlock(2 * c, 2 * c, tdim)
        self.attn8 = AttnBlock("down_f4", 2 * c, cfg.text_dim, cfg.key_dim, cfg.heads, 4)
        self.down4 = nn.Conv2d(2 * c, 2 * c, 3, stride=2, padding=1)
        self.mid = ResBlock(2 * c, 2 * c, tdim)
        self.attn4 = AttnBlock("mid_f8", 2 * c, cfg.text_dim, cfg.key_dim, cfg.heads, 8)
        self.dec8 = ResBlock(4 * c, 2 * c, tdim)
        self.dec16 = ResBlock(3 * c, c, tdim)
        self.dec32 = ResBlock(2 * c, c, tdim)
        self.out_norm = nn.GroupNorm(8, c)
        self.out = nn.Conv2d(c, cfg.channels, 3, padding=1)

    def cross_attention_layers(self):
        return [self.attn16.attn, self.attn8.attn, self.attn4.attn]

    def forward(self, z, t, context):
        temb = self.time_mlp(timestep_embedding(t, self.time_dim).to(z.dtype))
        ts = int(t[0]) if t.numel() and bool((t == t[0]).all()) else None
        h32 = self.enc32(self.stem(z), temb)
        h16 = self.attn16(self.enc16(self.down16(h32), temb), context, ts)
        h8 = self.attn8(self.enc8(self.down8(h16), temb), context, ts)
        h4 = self.attn4(self.mid(self.down4(h8), temb), context, ts)
        u8 = self.dec8(torch.cat([F.interpolate(h4, scale_factor=2.0, mode="nearest"), h8], 1), temb)
        u16 = self.dec16(torch.cat([F.interpolate(u8, scale_factor=2.0, mode="nearest"), h16], 1), temb)
        u32 = self.dec32(torch.cat([F.interpolate(u16, scale_factor=2.0, mode="nearest"), h32], 1), temb)
        return self.out(F.silu(self.out_norm(u32)))


class ToyBackbone(nn.Module):
    """Text encoder + denoiser + schedule; satisfies every adapter capability."""

    def __init__(self, cfg: ToyConfig | None = None):
        super().__init__()
        self.cfg = cfg or ToyConfig()
        self.vocab = toy_vocabulary()
        if len(self.vocab) != self.cfg.vocab_size:
            raise ConfigurationError(
                f"toy vocabulary has {len(self.vocab)} entries, config says {self.cfg.vocab_size}"
            )
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.cfg.init_seed)
            self.text_encoder = ToyTextEncoder(self.cfg.vocab_size, self.cfg.text_dim, self.cfg.max_tokens)
            self.denoiser = ToyDenoiser(self.cfg)
        self.schedule = NoiseSchedule.linear(self.cfg.num_timesteps, self.cfg.beta_start, self.cfg.beta_end)
        self.latent_spec = LatentSpec(self.cfg.image_size, self.cfg.image_size, self.cfg.channels, 1)

    # adapter surface
    def encode(self, images):
        return images

    def decode(self, latents):
        return latents

    def embed_text(self, token_ids):
        return self.text_encoder(token_ids)

    @property
    def token_embedding(self) -> nn.Embedding:
        return self.text_encoder.token_embedding

    def cross_attention_layers(self):
        return self.denoiser.cross_attention_layers()

    def predict_noise(self, z_t, t, text_embeddings):
        spec = self.latent_spec
        if tuple(z_t.shape[1:]) != (spec.channels, spec.height, spec.width):
            raise ConfigurationError(
                f"latent shape {tuple(z_t.shape[1:])} does not match "
                f"{(spec.channels, spec.height, spec.width)}"
            )
        if text_embeddings.shape[-1] != self.cfg.text_dim or text_embeddings.shape[0] != z_t.shape[0]:
            raise ConfigurationError(
                f"conditioning {tuple(text_embeddings.shape)} incompatible with batch "
                f"{z_t.shape[0]} and width {self.cfg.text_dim}"
            )
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
        if t.numel() == 1:
            t = t.expand(z_t.shape[0])
        return self.denoiser(z_t, t, text_embeddings)

    def forward(self, z_t, t, token_ids):
        return self.predict_noise(z_t, t, self.embed_text(token_ids))

    def parameter_groups(self):
        """Yield ``(kind, layer_id, name, parameter)`` for every parameter."""
        projections = {}
        for layer in self.cross_attention_layers():
            for kind, p in layer.projection_kinds().items():
                projections[id(p)] = (kind, layer.config.layer_id)
        text_ids = {id(p) for p in self.text_encoder.parameters()}
        for name, p in self.named_parameters():
            if id(p) in projections:
                kind, layer_id = projections[id(p)]
                yield kind, layer_id, name, p
            elif id(p) in text_ids:
                yield TEXT_KIND, "text_encoder", name, p
            else:
                yield OTHER_KIND, name.rsplit(".", 1)[0], name, p


def build_backbone(spec=None) -> ToyBackbone:
    """Construct from a config mapping (``kind: toy`` is the only bundled kind)."""
    spec = dict(spec or {})
    kind = spec.get("kind", "toy")
    if kind != "toy":
        raise CapabilityError(f"backbone kind {kind!r} is not bundled; pass an adapter object instead")
    return ToyBackbone(ToyConfig.from_dict(spec))


@torch.no_grad()
def ddpm_sample(backbone, token_ids: torch.Tensor, generator: torch.Generator,
                on_step: Callable | None = None) -> torch.Tensor:
    """Ancestral DDPM sampling; returns decoded images clipped to [-1, 1].

    ``token_ids`` is ``[n, tokens]``; ``on_step(t)`` runs after each
    denoiser call, while any capture still holds that step's records.
    """
    report = check_capabilities(backbone)
    report.require("sampling_to_image")
    sched = backbone.schedule
    spec = backbone.latent_spec
    n = token_ids.shape[0]
    context = backbone.embed_text(token_ids)
    x = torch.randn(n, spec.channels, spec.height, spec.width, generator=generator)
    for t in range(sched.T, 0, -1):
        eps = backbone.predict_noise(x, torch.full((n,), t, dtype=torch.long), context)
        if on_step is not None:
            on_step(t)
        beta = float(sched.betas[t - 1])
        alpha = float(sched.alphas[t - 1])
        ab = float(sched.alpha_bars[t - 1])
        mean = (x - beta / math.sqrt(1 - ab) * eps) / math.sqrt(alpha)
        if t > 1:
            ab_prev = float(sched.alpha_bars[t - 2])
            var = beta * (1 - ab_prev) / (1 - ab)
            x = mean + math.sqrt(var) * torch.randn(x.shape, generator=generator)
        else:
            x = mean
    return backbone.decode(x).clamp(-1, 1)


# --------------------------------------------------------------------------
# trainable-set selection and weight change

SELECTOR_KINDS = {
    "KV": {"W_K", "W_V"},
    "QV": {"W_Q", "W_V"},
    "QKV": {"W_Q", "W_K", "W_V"},
}


@dataclass(frozen=True)
class ParameterSetSelector:
    set_id: str = "KV"
    include_text_encoder: bool = True

    def __post_init__(self):
        sid = str(self.set_id).upper()
        if sid not in SELECTOR_KINDS and sid != "ALL":
            raise ConfigurationError(f"unknown parameter set {self.set_id!r}; use KV, QV, QKV or ALL")
        object.__setattr__(self, "set_id", sid)

    def selects(self, kind: str) -> bool:
        if kind == TEXT_KIND:
            return self.include_text_encoder
        if self.set_id == "ALL":
            return True
        return kind in SELECTOR_KINDS[self.set_id]


def select_trainable(model, selector: ParameterSetSelector):
    """Set ``requires_grad`` so exactly the selected kinds train."""
    if not isinstance(selector, ParameterSetSelector):
        selector = ParameterSetSelector(selector)
    for kind, _, _, p in model.parameter_groups():
        p.requires_grad_(selector.selects(kind))


def trainable_parameters(model):
    return [p for _, _, _, p in model.parameter_groups() if p.requires_grad]


def snapshot(model, kinds=PROJECTION_KINDS) -> dict:
    """Copies of the projection weights keyed by ``"kind/layer_id"``."""
    return {f"{kind}/{layer}": p.detach().clone().double()
            for kind, layer, _, p in model.parameter_groups() if kind in kinds}


@dataclass
class WeightChangeReport:
    deltas: dict = field(default_factory=dict)  # kind -> {layer_id: Δ}
    step: int | None = None

    def mean(self, kind: str) -> float:
        vals = list(self.deltas.get(kind, {}).values())
        return float(np.mean(vals)) if vals else float("nan")

    def to_dict(self):
        return {"step": self.step, "deltas": self.deltas,
                "mean": {k: self.mean(k) for k in self.deltas}}

    def rows(self):
        for kind in sorted(self.deltas):
            for layer, d in sorted(self.deltas[kind].items()):
                yield {"step": self.step, "kind": kind, "layer": layer, "delta": d}


def _split_key(key):
    if isinstance(key, tuple):
        return key
    kind, _, layer = str(key).partition("/")
    return kind, layer


def weight_change_rate(before: dict, after: dict, step=None) -> WeightChangeReport:
    """Per-layer ``||θ' - θ|| / ||θ||`` (Frobenius), grouped by matrix kind."""
    if set(before) != set(after):
        missing = sorted(map(str, set(before) ^ set(after)))
        raise ArgumentError(f"snapshots cover different parameters: {missing}")
    report = WeightChangeReport(step=step)
    for key in sorted(before, key=str):
        b = torch.as_tensor(np.asarray(before[key]) if not isinstance(before[key], torch.Tensor) else before[key]).double()
        a = torch.as_tensor(np.asarray(after[key]) if not isinstance(after[key], torch.Tensor) else after[key]).double()
        if a.shape != b.shape:
            raise ArgumentError(f"{key}: shape {tuple(b.shape)} vs {tuple(a.shape)}")
        norm = torch.linalg.vector_norm(b)
        if norm == 0:
            raise DegenerateLayerError(key)
        kind, layer = _split_key(key)
        report.deltas.setdefault(kind, {})[layer] = float(torch.linalg.vector_norm(a - b) / norm)
    return report


# --------------------------------------------------------------------------
# adapter contract

CAPABILITIES = {
    "latent_encode": ("encode",),
    "latent_decode": ("decode",),
    "noise_prediction": ("predict_noise", "schedule", "latent_spec"),
    "text_embedding": ("embed_text", "token_embedding"),
    "layer_enumeration": ("cross_attention_layers", "parameter_groups"),
}


@dataclass
class CapabilityReport:
    capabilities: dict
    features: dict
    reasons: dict

    def require(self, feature: str):
        if not self.features.get(feature, False):
            raise CapabilityError(f"{feature} unavailable: {self.reasons.get(feature, 'unknown')}")

    def to_dict(self):
        return asdict(self)


class BackboneAdapter:
    """Base class for external latent-diffusion backbones.

    Subclasses provide whichever of ``encode``, ``decode``, ``predict_noise``
    (with ``schedule`` and ``latent_spec``), ``embed_text`` (with
    ``token_embedding`` and ``vocab``), ``cross_attention_layers`` and
    ``parameter_groups`` they can.  Cross-attention layers must be
    :class:`~conceptloc.attention.CrossAttention` instances or expose the
    same ``config``/``_captures`` surface.  Missing members simply show up
    as unavailable in :func:`check_capabilities`.
    """


def check_capabilities(backbone) -> CapabilityReport:
    caps = {}
    for cap, attrs in CAPABILITIES.items():
        caps[cap] = all(getattr(backbone, a, None) is not None for a in attrs)
    features, reasons = {}, {}

    def feature(name, needs):
        missing = [c for c in needs if not caps[c]]
        features[name] = not missing
        if missing:
            reasons[name] = "missing " + ", ".join(missing)

    feature("capture", ["layer_enumeration"])
    feature("selector", ["layer_enumeration"])
    feature("guidance", ["layer_enumeration", "noise_prediction", "text_embedding"])
    feature("training", ["latent_encode", "noise_prediction", "text_embedding"])
    feature("sampling_to_image", ["noise_prediction", "text_embedding", "latent_decode"])
    return CapabilityReport(caps, features, reasons)


# --------------------------------------------------------------------------
# checkpoints

def save_checkpoint(directory, model: ToyBackbone, step: int, extra_state: dict | None = None):
    """Write ``model.pt``, ``snapshot.npz`` (projections by kind/layer) and ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), directory / "model.pt")
    snap = {k: v.numpy() for k, v in snapshot(model).items()}
    np.savez(directory / "snapshot.npz", **snap)
    manifest = {
        "step": step,
        "backbone": {"kind": "toy", **asdict(model.cfg)},
        "schedule": model.schedule.to_dict(),
        "latent_spec": asdict(model.latent_spec),
        "snapshot_keys": sorted(snap),
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    if extra_state is not None:
        torch.save(extra_state, directory / "trainer_state.pt")
    return directory


def load_checkpoint(directory) -> tuple[ToyBackbone, dict]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise ConfigurationError(f"{directory} is not a checkpoint (no manifest.json)")
    manifest = json.loads(manifest_path.read_text())
    model = build_backbone(manifest["backbone"])
    model.load_state_dict(torch.load(directory / "model.pt", weights_only=True))
    return model, manifest


def load_snapshot(directory) -> dict:
    with np.load(Path(directory) / "snapshot.npz") as data:
        return {k: data[k] for k in data.files}
