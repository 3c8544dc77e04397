"""Hierarchical SegNet: a chain of encoder-decoder stages with attention at the bottleneck.

Each stage runs ``depth`` encoder levels (two 3x3 conv+ReLU, then a 2x2 max
pool whose argmax indices are kept), an attention block on the deepest
pooled map, and ``depth`` decoder levels (max-unpool with the stored indices,
then two 3x3 conv+ReLU).  Stage ``s > 0`` sees the raw image concatenated
with the previous stage's output.  A 1x1 head and a channel softmax finish.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Any

import numpy as np

from . import tensor as T
from .attention import REDUCTIONS, AttentionParams, ChannelAttentionParams, channel_only_block, multimodal_attention_block
from .errors import ConfigError, DataError, DimensionError
from .tensor import Tensor

ATTENTION_KINDS = ("none", "channel_only", "multimodal")
CHAINING_MODES = ("features", "probabilities")
PLACEMENTS = ("bottleneck", "decoder")
DTYPES = {"float64": np.float64, "float32": np.float32}


@dataclass(frozen=True)
class StageConfig:
    depth: int = 2
    widths: tuple[int, ...] = (16, 32)
    attention: str = "multimodal"

    def validate(self) -> None:
        if self.depth < 1:
            raise ConfigError("stage depth must be >= 1")
        if len(self.widths) != self.depth:
            raise ConfigError(f"widths {self.widths} must have one entry per level (depth={self.depth})")
        if any(w < 1 for w in self.widths):
            raise ConfigError("all widths must be >= 1")
        if self.attention not in ATTENTION_KINDS:
            raise ConfigError(f"attention must be one of {ATTENTION_KINDS}, got {self.attention!r}")


@dataclass(frozen=True)
class ModelConfig:
    stages: tuple[StageConfig, ...] = (StageConfig(), StageConfig())
    num_classes: int = 2
    input_channels: int = 1
    chaining: str = "features"
    input_size: tuple[int, int] = (64, 64)
    context_reduction: str = "mean"
    attention_placement: str = "bottleneck"
    dtype: str = "float64"

    @property
    def max_depth(self) -> int:
        return max(s.depth for s in self.stages)

    def validate(self) -> None:
        if not self.stages:
            raise ConfigError("a model needs at least one stage")
        for st in self.stages:
            st.validate()
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.input_channels < 1:
            raise ConfigError("input_channels must be >= 1")
        if self.chaining not in CHAINING_MODES:
            raise ConfigError(f"chaining must be one of {CHAINING_MODES}")
        if self.context_reduction not in REDUCTIONS:
            raise ConfigError(f"context_reduction must be one of {REDUCTIONS}")
        if self.attention_placement not in PLACEMENTS:
            raise ConfigError(f"attention_placement must be one of {PLACEMENTS}")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {tuple(DTYPES)}")
        if len(self.input_size) != 2:
            raise ConfigError(f"input_size must be (H, W), got {self.input_size}")
        m = 2**self.max_depth
        h, w = self.input_size
        if h <= 0 or w <= 0 or h % m or w % m:
            raise ConfigError(f"input size {h}x{w} is not divisible by 2^{self.max_depth}")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["stages"] = [dict(s, widths=list(s["widths"])) for s in d["stages"]]
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ModelConfig:
        d = dict(d)
        d["stages"] = tuple(StageConfig(s["depth"], tuple(s["widths"]), s["attention"]) for s in d["stages"])
        d["input_size"] = tuple(d["input_size"])
        return cls(**d)


def ablation_ladder(base: ModelConfig | None = None) -> dict[str, ModelConfig]:
    """The four comparison variants, differing only in stage count and attention kind."""
    base = base or ModelConfig()
    proto = base.stages[0]
    n = max(len(base.stages), 2)

    def with_(count: int, kind: str) -> ModelConfig:
        return replace(base, stages=tuple(replace(proto, attention=kind) for _ in range(count)))

    return {
        "SegNet": with_(1, "none"),
        "Hierarchical SegNet": with_(n, "none"),
        "Hierarchical SegNet + channel attention": with_(n, "channel_only"),
        "Hierarchical SegNet + multimodal attention": with_(n, "multimodal"),
    }


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return sorted(self.params.items())

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def attention(self, prefix: str) -> AttentionParams:
        named = {k[len(prefix) + 1 :]: v for k, v in self.params.items() if k.startswith(prefix + "/")}
        return AttentionParams.from_named(named, self.config.context_reduction)

    @property
    def dtype(self):
        return DTYPES[self.config.dtype]


# ---------------------------------------------------------------------------
# construction


def stage_input_channels(config: ModelConfig, s: int) -> int:
    if s == 0:
        return config.input_channels
    prev = config.num_classes if config.chaining == "probabilities" else config.stages[s - 1].widths[0]
    return config.input_channels + prev


def layer_specs(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Every convolution kernel as (name prefix, kernel shape), in build order."""
    specs: list[tuple[str, tuple[int, ...]]] = []
    for s, st in enumerate(config.stages):
        c_in = stage_input_channels(config, s)
        for lvl, w in enumerate(st.widths):
            specs.append((f"stage{s}/enc{lvl}/conv0", (w, c_in, 3, 3)))
            specs.append((f"stage{s}/enc{lvl}/conv1", (w, w, 3, 3)))
            c_in = w
        for lvl in reversed(range(st.depth)):
            w = st.widths[lvl]
            w_out = st.widths[lvl - 1] if lvl > 0 else st.widths[0]
            specs.append((f"stage{s}/dec{lvl}/conv0", (w, w, 3, 3)))
            specs.append((f"stage{s}/dec{lvl}/conv1", (w_out, w, 3, 3)))
        if config.chaining == "probabilities" and s < len(config.stages) - 1:
            specs.append((f"stage{s}/head", (config.num_classes, st.widths[0], 1, 1)))
    specs.append(("head", (config.num_classes, config.stages[-1].widths[0], 1, 1)))
    return specs


def attention_sites(config: ModelConfig) -> list[tuple[str, int, str]]:
    """(name prefix, channel count, kind) for every attention block."""
    sites = []
    for s, st in enumerate(config.stages):
        if st.attention == "none":
            continue
        if config.attention_placement == "bottleneck":
            sites.append((f"stage{s}/attn", st.widths[-1], st.attention))
        else:
            for lvl in reversed(range(st.depth)):
                sites.append((f"stage{s}/dec{lvl}/attn", st.widths[lvl], st.attention))
    return sites


def build_model(config: ModelConfig, seed: int) -> Model:
    config.validate()
    rng = np.random.default_rng(seed)
    dtype = DTYPES[config.dtype]
    params: dict[str, Tensor] = {}
    for name, shape in layer_specs(config):
        fan_in = shape[1] * shape[2] * shape[3]
        if name.endswith("head"):
            # small logits keep the untrained model close to uniform
            bound = 0.1 / np.sqrt(fan_in)
        else:
            bound = np.sqrt(6.0 / fan_in)
        params[f"{name}/kernel"] = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, dtype=dtype)
        params[f"{name}/bias"] = Tensor(np.zeros(shape[0]), requires_grad=True, dtype=dtype)
    for prefix, channels, kind in attention_sites(config):
        if kind == "multimodal":
            att = AttentionParams.init(channels, rng, config.context_reduction, dtype)
            for k, v in att.named_tensors().items():
                params[f"{prefix}/{k}"] = v
        else:
            bound = 1.0 / np.sqrt(channels)
            params[f"{prefix}/w_c"] = Tensor(
                rng.uniform(-bound, bound, size=(channels, channels)), requires_grad=True, dtype=dtype
            )
    return Model(config, params)


# ---------------------------------------------------------------------------
# forward


def _conv_relu(model: Model, name: str, x: Tensor) -> Tensor:
    return T.relu(T.conv2d(x, model.params[f"{name}/kernel"], model.params[f"{name}/bias"]))


def _apply_attention(model: Model, prefix: str, kind: str, x: Tensor, maps: dict | None) -> Tensor:
    if kind == "none":
        return x
    if kind == "channel_only":
        out, m_c = channel_only_block(x, ChannelAttentionParams(model.params[f"{prefix}/w_c"]))
        if maps is not None:
            maps[prefix] = {"m_c": m_c}
        return out
    out, am = multimodal_attention_block(x, model.attention(prefix))
    if maps is not None:
        maps[prefix] = am
    return out


def stage_forward(model: Model, stage_index: int, x: Tensor, maps: dict | None = None, trace: list | None = None) -> Tensor:
    """Run one encoder-decoder stage; returns ``[widths[0], H, W]`` features.

    ``maps`` collects attention maps keyed by block prefix; ``trace`` collects
    (label, shape) pairs for every intermediate.
    """
    cfg = model.config
    st = cfg.stages[stage_index]
    m = 2**st.depth
    if x.ndim != 3 or x.shape[1] % m or x.shape[2] % m:
        raise DimensionError(f"stage {stage_index} input {x.shape} not divisible by 2^{st.depth}")
    pre = f"stage{stage_index}"
    on_decoder = cfg.attention_placement == "decoder"

    def note(label, t):
        if trace is not None:
            trace.append((label, t.shape))

    note("input", x)
    indices = []
    for lvl in range(st.depth):
        x = _conv_relu(model, f"{pre}/enc{lvl}/conv0", x)
        x = _conv_relu(model, f"{pre}/enc{lvl}/conv1", x)
        x, idx = T.maxpool2x2_with_indices(x)
        indices.append(idx)
        note(f"enc{lvl}", x)
    if not on_decoder:
        x = _apply_attention(model, f"{pre}/attn", st.attention, x, maps)
        note("bottleneck", x)
    for lvl in reversed(range(st.depth)):
        x = T.maxunpool2x2(x, indices[lvl])
        if on_decoder:
            x = _apply_attention(model, f"{pre}/dec{lvl}/attn", st.attention, x, maps)
        x = _conv_relu(model, f"{pre}/dec{lvl}/conv0", x)
        x = _conv_relu(model, f"{pre}/dec{lvl}/conv1", x)
        note(f"dec{lvl}", x)
    return x


def _head(model: Model, name: str, x: Tensor) -> Tensor:
    logits = T.conv2d(x, model.params[f"{name}/kernel"], model.params[f"{name}/bias"], padding=0)
    return T.softmax_over_channels(logits)


def model_forward(model: Model, image, maps: dict | None = None) -> Tensor:
    """``[C_in, H, W]`` image in [0, 1] -> ``[num_classes, H, W]`` per-pixel probabilities."""
    cfg = model.config
    img = image if isinstance(image, Tensor) else Tensor(image, dtype=model.dtype)
    if img.ndim == 2:
        img = T.reshape(img, (1,) + img.shape)
    if img.dtype != model.dtype:
        img = Tensor(img.data, dtype=model.dtype)
    if img.shape[0] != cfg.input_channels:
        raise DimensionError(f"model expects {cfg.input_channels} input channels, got {img.shape[0]}")
    m = 2**cfg.max_depth
    if img.shape[1] % m or img.shape[2] % m:
        raise DimensionError(f"image {img.shape[1:]} not divisible by 2^{cfg.max_depth}")
    x = img
    last = len(cfg.stages) - 1
    for s in range(len(cfg.stages)):
        feats = stage_forward(model, s, x, maps)
        if s == last:
            return _head(model, "head", feats)
        nxt = _head(model, f"stage{s}/head", feats) if cfg.chaining == "probabilities" else feats
        x = T.concat_channels([img, nxt])
    raise AssertionError("unreachable")


def predict_mask(probs) -> np.ndarray:
    """Per-pixel argmax as uint8; exact ties go to the lowest class (background)."""
    p = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    return np.argmax(p, axis=0).astype(np.uint8)


def _check_truth(truth: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    t = np.asarray(truth)
    if t.shape != shape:
        raise DimensionError(f"truth {t.shape} does not match prediction {shape}")
    if not np.all((t == 0) | (t == 1)):
        raise DataError("truth mask must contain only 0 and 1")
    return t.astype(np.int64)


def segmentation_loss(probs: Tensor, truth, dice_weight: float = 0.0, eps: float = 1e-12) -> Tensor:
    """Mean per-pixel cross entropy, plus ``dice_weight`` times a soft-Dice loss on the foreground."""
    c, h, w = probs.shape
    t = _check_truth(truth, (h, w))
    onehot = np.zeros((c, h, w), dtype=probs.dtype)
    np.put_along_axis(onehot, t[None], 1.0, axis=0)
    ce = T.mul(T.sum(T.mul(T.log(probs, eps), onehot)), -1.0 / (h * w))
    if dice_weight <= 0:
        return ce
    fg = T.slice_channels(probs, 1, 2)
    tf = t[None].astype(probs.dtype)
    inter = T.sum(T.mul(fg, tf))
    denom = T.add(T.sum(fg), float(tf.sum()) + 1.0)
    soft_dice = T.div(T.add(T.mul(inter, 2.0), 1.0), denom)
    return T.add(ce, T.mul(T.sub(1.0, soft_dice), dice_weight))
