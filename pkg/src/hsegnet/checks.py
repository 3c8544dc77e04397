"""Gradient-check suites behind ``hsegnet gradcheck --scope {ops,attention,model}``."""

from __future__ import annotations

import contextlib
import time
from typing import Callable, Iterator

import numpy as np

from . import tensor as T
from .attention import AttentionParams, multimodal_attention_block
from .gradcheck import GradcheckReport, gradcheck
from .model import ModelConfig, StageConfig, build_model, model_forward, segmentation_loss
from .tensor import Tensor

Case = tuple[str, Callable[[], Tensor], dict[str, Tensor]]


def _t(a) -> Tensor:
    return Tensor(a, requires_grad=True)


def _weighted(out: Tensor, r: np.ndarray) -> Tensor:
    # random weights so constant-sum outputs (softmax) still carry gradient
    return T.sum(T.mul(out, r))


def _away_from_zero(rng, shape, lo=0.1):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(lo, 1.0, size=shape)


def op_cases(seed: int = 0) -> Iterator[Case]:
    rng = np.random.default_rng(seed)

    def case(name, fn, **inputs):
        probe = fn(**inputs)
        r = rng.standard_normal(probe.shape)
        return name, (lambda: _weighted(fn(**inputs), r)), inputs

    yield case("conv2d", lambda x, k, b: T.conv2d(x, k, b), x=_t(rng.standard_normal((2, 5, 5))), k=_t(rng.standard_normal((3, 2, 3, 3))), b=_t(rng.standard_normal(3)))
    yield case("conv2d_valid", lambda x, k: T.conv2d(x, k, padding=0), x=_t(rng.standard_normal((2, 5, 6))), k=_t(rng.standard_normal((2, 2, 3, 3))))
    yield case("sigmoid", lambda x: T.sigmoid(x), x=_t(rng.standard_normal((3, 4, 4))))
    yield case("relu", lambda x: T.relu(x), x=_t(_away_from_zero(rng, (3, 4, 4))))
    yield case("softmax_over_channels", lambda x: T.softmax_over_channels(x), x=_t(rng.standard_normal((3, 4, 4))))
    yield case("global_avg_pool", lambda x: T.global_avg_pool(x), x=_t(rng.standard_normal((3, 4, 5))))
    yield case("channel_mean", lambda x: T.channel_mean(x), x=_t(rng.standard_normal((3, 4, 5))))
    yield case("mul[C]", lambda a, m: T.mul(a, m), a=_t(rng.standard_normal((3, 4, 4))), m=_t(rng.standard_normal(3)))
    yield case("mul[1,H,W]", lambda a, m: T.mul(a, m), a=_t(rng.standard_normal((3, 4, 4))), m=_t(rng.standard_normal((1, 4, 4))))
    yield case("channel_spatial_outer", lambda m, s: T.channel_spatial_outer(m, s), m=_t(rng.standard_normal(3)), s=_t(rng.standard_normal((1, 4, 4))))
    yield case("add", lambda a, b: T.add(a, b), a=_t(rng.standard_normal((2, 3, 3))), b=_t(rng.standard_normal((2, 3, 3))))
    yield case("sub", lambda a, b: T.sub(a, b), a=_t(rng.standard_normal((2, 3, 3))), b=_t(rng.standard_normal(2)))
    yield case("div", lambda a, b: T.div(a, b), a=_t(rng.standard_normal((2, 3, 3))), b=_t(rng.uniform(0.5, 2.0, (2, 3, 3))))
    yield case("matvec", lambda w, v: T.matvec(w, v), w=_t(rng.standard_normal((4, 4))), v=_t(rng.standard_normal(4)))
    yield case("maxpool2x2", lambda x: T.maxpool2x2_with_indices(x)[0], x=_t(rng.permutation(32).reshape(2, 4, 4) * 0.1))
    _, idx = T.maxpool2x2_with_indices(Tensor(rng.standard_normal((2, 4, 4))))
    yield case("maxunpool2x2", lambda y: T.maxunpool2x2(y, idx), y=_t(rng.standard_normal((2, 2, 2))))
    yield case("log", lambda x: T.log(x, 1e-12), x=_t(rng.uniform(0.5, 2.0, (2, 3, 3))))
    yield case("concat_channels", lambda a, b: T.concat_channels([a, b]), a=_t(rng.standard_normal((1, 3, 3))), b=_t(rng.standard_normal((2, 3, 3))))
    truth = (rng.random((4, 4)) > 0.5).astype(np.int64)
    logits = _t(rng.standard_normal((2, 4, 4)))
    yield (
        "segmentation_loss",
        lambda: segmentation_loss(T.softmax_over_channels(logits), truth, dice_weight=0.5),
        {"logits": logits},
    )


def attention_cases(seed: int = 0, shape=(4, 6, 6)) -> Iterator[Case]:
    for reduction in ("mean", "learned_1x1"):
        rng = np.random.default_rng(seed)
        x = _t(rng.standard_normal(shape))
        params = AttentionParams.init(shape[0], rng, reduction)
        r = rng.standard_normal(shape)
        named = {"X": x, **params.named_tensors()}
        yield (
            f"attention_block[{reduction}]",
            lambda x=x, params=params, r=r: _weighted(multimodal_attention_block(x, params)[0], r),
            named,
        )


def model_cases(seed: int = 0) -> Iterator[Case]:
    configs = {
        "model[1-stage, multimodal]": ModelConfig(stages=(StageConfig(1, (3,), "multimodal"),), input_size=(8, 8)),
        "model[2-stage, depth 2]": ModelConfig(stages=(StageConfig(2, (2, 3), "multimodal"),) * 2, input_size=(8, 8)),
    }
    for i, (name, cfg) in enumerate(configs.items()):
        model = build_model(cfg, seed + i)
        rng = np.random.default_rng(seed + 100 + i)
        # zero biases put unpooled zeros exactly on the ReLU kink; check at a generic point
        for pname, t in model.named_parameters():
            if pname.endswith("/bias"):
                t.data[...] = rng.uniform(-0.1, 0.1, t.shape)
        image = rng.random((1, 8, 8))
        truth = (rng.random((8, 8)) > 0.5).astype(np.int64)
        yield name, (lambda model=model, image=image, truth=truth: segmentation_loss(model_forward(model, image), truth)), dict(model.named_parameters())


SCOPES = {"ops": op_cases, "attention": attention_cases, "model": model_cases}


def run_scope(scope: str, seed: int = 0, h: float = 1e-5, tol: float = 1e-4) -> list[tuple[str, GradcheckReport, float]]:
    out = []
    for name, f, inputs in SCOPES[scope](seed):
        t0 = time.perf_counter()
        rep = gradcheck(f, inputs, h=h, tol=tol)
        out.append((name, rep, time.perf_counter() - t0))
    return out


@contextlib.contextmanager
def inject_sigmoid_fault(scale: float = 1.5):
    """Temporarily replace sigmoid with one whose backward rule is wrong by ``scale``."""
    original = T.sigmoid

    def faulty(x: Tensor) -> Tensor:
        out = original(x)
        s = out.data

        def bw(g):
            return (scale * g * s * (1.0 - s),)

        return T._make(s, (x,), bw, "sigmoid[faulty]")

    T.sigmoid = faulty
    try:
        yield
    finally:
        T.sigmoid = original
