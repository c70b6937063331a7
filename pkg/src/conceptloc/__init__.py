"""Cross-attention guided fine-tuning for multi-concept subject-driven diffusion."""

from .attention import (AggregatedTokenMap, AttentionLayerConfig, AttentionRecord, aggregate_maps,
                        cross_attention, extract_token_map, register_capture)
from .backbone import (NoiseSchedule, ParameterSetSelector, ToyBackbone, add_noise,
                       check_capabilities, select_trainable, weight_change_rate)
from .guidance import (LossBreakdown, SegMask, denoise_loss, hard_guidance_loss, inverse_mask,
                       multi_concept_attn_loss, prior_loss, soft_guidance_loss, total_loss)

__version__ = "0.1.0"
