"""Loss terms of the fine-tuning objective.

All functions accept torch tensors (gradients flow) or array-likes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .attention import AggregatedTokenMap
from .errors import ArgumentError, TrainingStepError

DEFAULT_LAMBDA = 1.0
DEFAULT_DELTA = 1.0
GUIDANCE_MODES = ("hard", "soft", "none")


def _tensor(x, like=None):
    if isinstance(x, AggregatedTokenMap):
        x = x.values
    if isinstance(x, SegMask):
        x = x.values
    if isinstance(x, torch.Tensor):
        if like is not None and isinstance(like, torch.Tensor):
            return x.to(dtype=like.dtype)
        return x
    dtype = like.dtype if isinstance(like, torch.Tensor) else torch.float64
    return torch.as_tensor(np.asarray(x), dtype=dtype)


class SegMask:
    """Segmentation map of one concept, values in [0, 1], not all zero."""

    def __init__(self, values, concept_id=None):
        v = _tensor(values)
        if v.ndim < 2:
            raise ArgumentError("SegMask needs at least two dimensions")
        if not torch.isfinite(v).all() or (v < 0).any() or (v > 1).any():
            raise ArgumentError(f"mask {concept_id!r} has values outside [0, 1]")
        if not (v > 0).any():
            raise ArgumentError(f"mask {concept_id!r} is empty (no value > 0)")
        self.values = v
        self.concept_id = concept_id

    @property
    def shape(self):
        return tuple(self.values.shape)

    def __repr__(self):
        return f"SegMask(concept_id={self.concept_id!r}, shape={self.shape})"


@dataclass
class LossBreakdown:
    l_denoise: float
    l_prior: float
    l_attn: float
    lam: float
    delta: float
    total: float
    tensor: torch.Tensor | None = field(default=None, repr=False, compare=False)

    def as_log(self, step: int, t: int) -> dict:
        return {
            "step": step, "t": t,
            "l_denoise": self.l_denoise, "l_prior": self.l_prior,
            "l_attn": self.l_attn, "total": self.total,
        }


def _mse(pred, target, name):
    pred = _tensor(pred)
    target = _tensor(target, pred)
    if pred.shape != target.shape:
        raise ArgumentError(f"{name}: shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    return ((pred - target) ** 2).mean()


def denoise_loss(predicted_noise, true_noise):
    """Mean squared error between predicted and sampled noise."""
    return _mse(predicted_noise, true_noise, "denoise_loss")


def prior_loss(predicted_noise_on_prior, true_noise):
    """Same contract as :func:`denoise_loss`; a ``None`` prior batch yields 0."""
    if predicted_noise_on_prior is None:
        return torch.zeros((), dtype=torch.float64)
    return _mse(predicted_noise_on_prior, true_noise, "prior_loss")


def inverse_mask(seg):
    """1 where the mask is exactly zero, 0 where it is positive."""
    v = _tensor(seg)
    return (v == 0).to(v.dtype)


def _pair(attn, seg, name):
    a = _tensor(attn)
    s = _tensor(seg, a)
    if a.shape != s.shape:
        raise ArgumentError(f"{name}: attention {tuple(a.shape)} vs mask {tuple(s.shape)}")
    return a, s


def hard_guidance_loss(attn, seg):
    a, s = _pair(attn, seg, "hard_guidance_loss")
    return ((s - a) ** 2).mean()


def soft_guidance_loss(attn, seg, inv=None):
    """Squared error counted only where the mask is zero, still averaged over every pixel.

    ``inv`` overrides the inverse mask, e.g. one built from a binary-mode resize.
    """
    a, s = _pair(attn, seg, "soft_guidance_loss")
    b = inverse_mask(s) if inv is None else _tensor(inv, a)
    if b.shape != a.shape:
        raise ArgumentError("soft_guidance_loss: inverse mask shape mismatch")
    return (((s - a) ** 2) * b).mean()


def guidance_loss(attn, seg, mode: str, inv=None):
    if mode == "hard":
        return hard_guidance_loss(attn, seg)
    if mode == "soft":
        return soft_guidance_loss(attn, seg, inv)
    raise ArgumentError(f"unknown guidance mode {mode!r}")


def multi_concept_attn_loss(pairs: Sequence, mode: str):
    """Arithmetic mean of the per-identifier guidance losses.

    Each pair is ``(attn, seg)`` or ``(attn, seg, inverse_mask)``.
    """
    if not pairs:
        raise ArgumentError("multi_concept_attn_loss needs at least one (attn, seg) pair")
    losses = [guidance_loss(p[0], p[1], mode, p[2] if len(p) > 2 else None) for p in pairs]
    return torch.stack([l.to(losses[0].dtype) for l in losses]).mean()


def total_loss(l_denoise, l_prior, l_attn, lam=DEFAULT_LAMBDA, delta=DEFAULT_DELTA) -> LossBreakdown:
    """Weighted objective ``l_denoise + lam * l_prior + delta * l_attn``.

    Components may be tensors; the differentiable sum is kept on
    ``LossBreakdown.tensor``.  A zero weight drops its term entirely, so a
    disabled component never contributes even if it is non-finite.
    """
    parts = {"l_denoise": l_denoise, "l_prior": l_prior, "l_attn": l_attn}
    values = {}
    for name, comp in parts.items():
        val = float(comp.detach()) if isinstance(comp, torch.Tensor) else float(comp)
        weight = {"l_denoise": 1.0, "l_prior": lam, "l_attn": delta}[name]
        if weight != 0 and not math.isfinite(val):
            raise TrainingStepError(f"non-finite {name}: {val}", component=name)
        values[name] = val

    total = l_denoise
    if lam != 0:
        total = total + lam * l_prior
    if delta != 0:
        total = total + delta * l_attn
    if isinstance(total, torch.Tensor):
        tensor, total_val = total, float(total.detach())
    else:
        tensor, total_val = None, float(total)
    return LossBreakdown(values["l_denoise"], values["l_prior"], values["l_attn"],
                         float(lam), float(delta), total_val, tensor)
