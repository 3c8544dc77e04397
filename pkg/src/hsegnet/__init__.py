"""Hierarchical SegNet with channel/context attention and gating, on a from-scratch autodiff engine."""

from .attention import (
    AttentionMaps,
    AttentionParams,
    ChannelAttentionParams,
    ContextAttentionParams,
    GateParams,
    attention_gate,
    cca,
    channel_attention,
    context_attention,
    multimodal_attention_block,
)
from .model import ModelConfig, StageConfig, build_model, model_forward, predict_mask, segmentation_loss, stage_forward
from .tensor import Tensor, backward

__version__ = "0.1.0"
