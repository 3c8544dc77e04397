"""Channel attention, context attention, their CCA product, and the attention gate.

All mechanisms are bias free.  The 3x3 spatial kernels are single-channel,
so a ``[C, H, W]`` input is first reduced to ``[1, H, W]``: by channel mean
(default) or by a learned 1x1 convolution (``reduction="learned_1x1"``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .tensor import Tensor

REDUCTIONS = ("mean", "learned_1x1")


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, dtype=dtype)


@dataclass
class ChannelAttentionParams:
    w_c: Tensor  # [C, C]

    def __post_init__(self):
        if self.w_c.ndim != 2 or self.w_c.shape[0] != self.w_c.shape[1]:
            raise DimensionError(f"W_C must be square, got {self.w_c.shape}")

    @property
    def channels(self) -> int:
        return self.w_c.shape[0]


@dataclass
class ContextAttentionParams:
    w_x: Tensor  # [1, 3, 3]
    reduction: str = "mean"
    w_reduce: Tensor | None = None  # [1, C, 1, 1] when reduction == "learned_1x1"

    def __post_init__(self):
        _check_kernel(self.w_x, "W_X")
        _check_reduction(self.reduction, self.w_reduce)


@dataclass
class GateParams:
    w_g: Tensor  # [1, 3, 3]
    w_a: Tensor  # [1, 3, 3]
    reduction: str = "mean"
    w_g_reduce: Tensor | None = None
    w_a_reduce: Tensor | None = None

    def __post_init__(self):
        _check_kernel(self.w_g, "W_g")
        _check_kernel(self.w_a, "W_a")
        _check_reduction(self.reduction, self.w_g_reduce)
        _check_reduction(self.reduction, self.w_a_reduce)


def _check_kernel(w: Tensor, name: str) -> None:
    if w.shape != (1, 3, 3):
        raise DimensionError(f"{name} must have shape (1, 3, 3), got {w.shape}")


def _check_reduction(reduction: str, w_reduce: Tensor | None) -> None:
    if reduction not in REDUCTIONS:
        raise ValueError(f"unknown reduction {reduction!r}")
    if reduction == "learned_1x1" and (w_reduce is None or w_reduce.ndim != 4 or w_reduce.shape[0] != 1):
        raise DimensionError("learned_1x1 reduction needs a [1, C, 1, 1] kernel")


@dataclass
class AttentionParams:
    """Every learnable weight of one multimodal attention block."""

    channel: ChannelAttentionParams
    context: ContextAttentionParams
    gate: GateParams

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator, reduction: str = "mean", dtype=np.float64):
        w_c = _uniform(rng, (channels, channels), channels, dtype)
        w_x = _uniform(rng, (1, 3, 3), 9, dtype)
        w_g = _uniform(rng, (1, 3, 3), 9, dtype)
        w_a = _uniform(rng, (1, 3, 3), 9, dtype)
        extra = {}
        if reduction == "learned_1x1":
            extra = {k: _uniform(rng, (1, channels, 1, 1), channels, dtype) for k in ("x", "g", "a")}
        return cls(
            ChannelAttentionParams(w_c),
            ContextAttentionParams(w_x, reduction, extra.get("x")),
            GateParams(w_g, w_a, reduction, extra.get("g"), extra.get("a")),
        )

    def named_tensors(self) -> dict[str, Tensor]:
        out = {"w_c": self.channel.w_c, "w_x": self.context.w_x, "w_g": self.gate.w_g, "w_a": self.gate.w_a}
        if self.context.reduction == "learned_1x1":
            out["w_x_reduce"] = self.context.w_reduce
            out["w_g_reduce"] = self.gate.w_g_reduce
            out["w_a_reduce"] = self.gate.w_a_reduce
        return out

    @classmethod
    def from_named(cls, named: dict[str, Tensor], reduction: str = "mean"):
        return cls(
            ChannelAttentionParams(named["w_c"]),
            ContextAttentionParams(named["w_x"], reduction, named.get("w_x_reduce")),
            GateParams(named["w_g"], named["w_a"], reduction, named.get("w_g_reduce"), named.get("w_a_reduce")),
        )


@dataclass
class AttentionMaps:
    m_c: Tensor  # [C]
    m_x: Tensor  # [1, H, W]
    g: Tensor  # [1, H, W]
    x_cca: Tensor  # [C, H, W]
    x_gated: Tensor  # [C, H, W]
    extra: dict = field(default_factory=dict)


def _spatial_correlate(x: Tensor, kernel: Tensor, reduction: str, w_reduce: Tensor | None) -> Tensor:
    """Reduce ``[C, H, W]`` to one channel, then apply a bias-free same-padded 3x3 kernel."""
    reduced = T.channel_mean(x) if reduction == "mean" else T.conv2d(x, w_reduce, padding=0)
    return T.conv2d(reduced, T.reshape(kernel, (1, 1, 3, 3)))


def channel_attention(x: Tensor, params: ChannelAttentionParams) -> Tensor:
    """``sigmoid(W_C @ avgpool(X))`` -> ``[C]``."""
    if x.ndim != 3 or x.shape[0] != params.channels:
        raise DimensionError(f"W_C is {params.w_c.shape} but X has shape {x.shape}")
    return T.sigmoid(T.matvec(params.w_c, T.global_avg_pool(x)))


def context_attention(x: Tensor, params: ContextAttentionParams) -> Tensor:
    """Single-channel spatial map ``[1, H, W]``."""
    if x.ndim != 3:
        raise DimensionError(f"context attention expects [C,H,W], got {x.shape}")
    return T.sigmoid(_spatial_correlate(x, params.w_x, params.reduction, params.w_reduce))


def cca(x: Tensor, m_c: Tensor, m_x: Tensor) -> Tensor:
    """``X_CCA[j, p] = M_C[j] * M_X[p] * X[j, p]``."""
    if x.ndim != 3 or m_c.shape != (x.shape[0],) or m_x.shape != (1,) + x.shape[1:]:
        raise DimensionError(f"cca shapes X={x.shape} M_C={m_c.shape} M_X={m_x.shape}")
    # (m_c[j] * m_x[p]) * x[j, p], the same association as the flat-index law
    return T.mul(T.channel_spatial_outer(m_c, m_x), x)


def attention_gate(x: Tensor, x_cca: Tensor, params: GateParams) -> tuple[Tensor, Tensor]:
    """Return the gate ``G`` ``[1, H, W]`` and ``G * X`` broadcast over channels."""
    if x.shape != x_cca.shape:
        raise DimensionError(f"X {x.shape} and X_CCA {x_cca.shape} differ")
    pre = T.add(
        _spatial_correlate(x, params.w_g, params.reduction, params.w_g_reduce),
        _spatial_correlate(x_cca, params.w_a, params.reduction, params.w_a_reduce),
    )
    g = T.sigmoid(pre)
    return g, T.mul(x, g)


def multimodal_attention_block(x: Tensor, params: AttentionParams) -> tuple[Tensor, AttentionMaps]:
    m_c = channel_attention(x, params.channel)
    m_x = context_attention(x, params.context)
    x_cca = cca(x, m_c, m_x)
    g, x_gated = attention_gate(x, x_cca, params.gate)
    return x_gated, AttentionMaps(m_c=m_c, m_x=m_x, g=g, x_cca=x_cca, x_gated=x_gated)


def channel_only_block(x: Tensor, params: ChannelAttentionParams) -> tuple[Tensor, Tensor]:
    """Channel reweighting ``M_C * X`` alone; the "+channel attention" ablation rung."""
    m_c = channel_attention(x, params)
    return T.mul(x, m_c), m_c
