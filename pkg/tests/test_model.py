import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hsegnet import tensor as T
from hsegnet.checks import model_cases
from hsegnet.errors import ConfigError, DataError, DimensionError
from hsegnet.gradcheck import gradcheck
from hsegnet.model import (
    ModelConfig,
    StageConfig,
    ablation_ladder,
    build_model,
    model_forward,
    predict_mask,
    segmentation_loss,
    stage_forward,
)
from hsegnet.tensor import Tensor


def small(stages=2, depth=1, widths=(3,), attention="multimodal", **kw):
    kw.setdefault("input_size", (8, 8))
    return ModelConfig(stages=(StageConfig(depth, widths, attention),) * stages, **kw)


def count_params(c_in, widths, attention, num_classes=None):
    """Hand count for one stage: 3x3 conv = out*in*9 + out."""
    conv = lambda o, i: o * i * 9 + o  # noqa: E731
    n, prev = 0, c_in
    for w in widths:
        n += conv(w, prev) + conv(w, w)
        prev = w
    for lvl in reversed(range(len(widths))):
        w = widths[lvl]
        n += conv(w, w) + conv(widths[lvl - 1] if lvl else widths[0], w)
    c = widths[-1]
    n += {"none": 0, "channel_only": c * c, "multimodal": c * c + 27}[attention]
    return n


def test_default_parameter_count():
    model = build_model(ModelConfig(), 0)
    n = sum(t.data.size for t in model.parameters())
    # stage 0 sees the image, stage 1 sees image + 16 feature channels, head is a 1x1 conv 16 -> 2
    expected = count_params(1, (16, 32), "multimodal") + count_params(17, (16, 32), "multimodal") + 2 * 16 + 2
    assert n == expected == 74200


@pytest.mark.parametrize("kind", ["none", "channel_only", "multimodal"])
def test_parameter_count_by_attention(kind):
    cfg = ModelConfig(stages=(StageConfig(2, (4, 6), kind),), input_size=(8, 8))
    n = sum(t.data.size for t in build_model(cfg, 0).parameters())
    assert n == count_params(1, (4, 6), kind) + 2 * 4 + 2


def test_build_is_deterministic():
    a, b, c = build_model(small(), 5), build_model(small(), 5), build_model(small(), 6)
    for (na, ta), (nb, tb), (_, tc) in zip(a.named_parameters(), b.named_parameters(), c.named_parameters()):
        assert na == nb
        np.testing.assert_array_equal(ta.data, tb.data)
    assert any(not np.array_equal(ta.data, tc.data) for (_, ta), (_, tc) in zip(a.named_parameters(), c.named_parameters()) if ta.data.any())


def test_parameter_names():
    names = [n for n, _ in build_model(small(), 0).named_parameters()]
    assert names == sorted(names)
    assert "stage0/attn/w_c" in names and "stage1/attn/w_g" in names
    assert "head/kernel" in names and "stage0/enc0/conv0/bias" in names


def test_depth_one_trace():
    cfg = ModelConfig(stages=(StageConfig(1, (3,), "multimodal"),), input_size=(4, 4))
    trace = []
    out = stage_forward(build_model(cfg, 0), 0, Tensor(np.ones((1, 4, 4))), trace=trace)
    assert trace == [("input", (1, 4, 4)), ("enc0", (3, 2, 2)), ("bottleneck", (3, 2, 2)), ("dec0", (3, 4, 4))]
    assert out.shape == (3, 4, 4)


def test_depth_two_trace():
    cfg = ModelConfig(stages=(StageConfig(2, (4, 6), "none"),), input_size=(8, 8))
    trace = []
    stage_forward(build_model(cfg, 0), 0, Tensor(np.ones((1, 8, 8))), trace=trace)
    assert [s for _, s in trace] == [(1, 8, 8), (4, 4, 4), (6, 2, 2), (6, 2, 2), (4, 4, 4), (4, 8, 8)]


def test_two_stage_composition():
    cfg = small()
    model = build_model(cfg, 1)
    img = np.random.default_rng(1).random((1, 8, 8))
    x = Tensor(img)
    f0 = stage_forward(model, 0, x)
    f1 = stage_forward(model, 1, T.concat_channels([x, f0]))
    logits = T.conv2d(f1, model.params["head/kernel"], model.params["head/bias"], padding=0)
    np.testing.assert_array_equal(model_forward(model, img).data, T.softmax_over_channels(logits).data)


def test_probability_chaining_adds_intermediate_head():
    cfg = small(chaining="probabilities")
    model = build_model(cfg, 0)
    assert "stage0/head/kernel" in model.params
    assert model.params["stage1/enc0/conv0/kernel"].shape == (3, 1 + 2, 3, 3)
    assert model_forward(model, np.zeros((1, 8, 8))).shape == (2, 8, 8)


def test_zero_attention_halves_bottleneck():
    model = build_model(small(stages=1), 0)
    for name, t in model.params.items():
        if "/attn/" in name:
            t.data[...] = 0.0
    maps = {}
    model_forward(model, np.random.default_rng(2).random((1, 8, 8)), maps)
    am = maps["stage0/attn"]
    assert np.all(am.g.data == 0.5)
    np.testing.assert_array_equal(am.x_gated.data, 2 * am.x_cca.data)


def test_decoder_placement():
    cfg = ModelConfig(stages=(StageConfig(2, (3, 4), "multimodal"),), input_size=(8, 8), attention_placement="decoder")
    model = build_model(cfg, 0)
    maps = {}
    model_forward(model, np.ones((1, 8, 8)), maps)
    assert set(maps) == {"stage0/dec0/attn", "stage0/dec1/attn"}
    assert maps["stage0/dec1/attn"].m_c.shape == (4,)


def test_float32_model():
    model = build_model(small(dtype="float32"), 0)
    p = model_forward(model, np.ones((1, 8, 8)))
    assert p.dtype == np.float32
    np.testing.assert_allclose(p.data.sum(axis=0), 1.0, atol=1e-6)


def test_input_validation():
    model = build_model(small(), 0)
    with pytest.raises(DimensionError):
        model_forward(model, np.ones((1, 7, 8)))
    with pytest.raises(DimensionError):
        model_forward(model, np.ones((2, 8, 8)))
    with pytest.raises(ConfigError):
        build_model(small(input_size=(6, 6), depth=2, widths=(2, 2)), 0)
    with pytest.raises(ConfigError):
        build_model(ModelConfig(stages=(StageConfig(2, (3,)),)), 0)


def test_ablation_ladder_differs_only_in_stages_and_attention():
    ladder = ablation_ladder(small())
    assert list(ladder) == [
        "SegNet",
        "Hierarchical SegNet",
        "Hierarchical SegNet + channel attention",
        "Hierarchical SegNet + multimodal attention",
    ]
    kinds = [(len(c.stages), c.stages[0].attention) for c in ladder.values()]
    assert kinds == [(1, "none"), (2, "none"), (2, "channel_only"), (2, "multimodal")]
    for c in ladder.values():
        assert (c.input_size, c.num_classes, c.chaining) == ((8, 8), 2, "features")


def test_config_dict_round_trip():
    cfg = small(chaining="probabilities", context_reduction="learned_1x1")
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_predict_mask_ties_go_to_background():
    probs = np.array([[[0.5, 0.4]], [[0.5, 0.6]]])
    np.testing.assert_array_equal(predict_mask(probs), [[0, 1]])
    assert predict_mask(probs).dtype == np.uint8


def test_loss_of_uniform_prediction_is_ln2():
    probs = Tensor(np.full((2, 4, 4), 0.5))
    truth = np.random.default_rng(0).integers(0, 2, (4, 4))
    assert segmentation_loss(probs, truth).item() == pytest.approx(math.log(2), abs=1e-15)


def test_loss_of_perfect_prediction_is_zero():
    truth = np.random.default_rng(1).integers(0, 2, (4, 4))
    probs = np.stack([1 - truth, truth]).astype(float)
    assert segmentation_loss(Tensor(probs), truth).item() == 0.0
    assert segmentation_loss(Tensor(probs), truth, dice_weight=1.0).item() == pytest.approx(0.0, abs=1e-15)


def test_loss_rejects_non_binary_truth():
    with pytest.raises(DataError):
        segmentation_loss(Tensor(np.full((2, 2, 2), 0.5)), np.array([[0, 2], [1, 0]]))


def test_loss_is_finite_at_zero_probability():
    probs = Tensor(np.stack([np.ones((2, 2)), np.zeros((2, 2))]))
    assert math.isfinite(segmentation_loss(probs, np.ones((2, 2), dtype=int)).item())


def test_one_stage_gradients():
    name, f, inputs = next(model_cases(0))
    rep = gradcheck(f, inputs, tol=1e-4)
    assert rep.passed, rep.table()


@settings(max_examples=15, deadline=None)
@given(
    stages=st.integers(1, 2),
    depth=st.integers(1, 2),
    width=st.integers(1, 4),
    kind=st.sampled_from(["none", "channel_only", "multimodal"]),
    chaining=st.sampled_from(["features", "probabilities"]),
    scale=st.integers(1, 2),
    seed=st.integers(0, 1000),
)
def test_forward_contract(stages, depth, width, kind, chaining, scale, seed):
    size = (2**depth * scale, 2**depth * (scale + 1))
    cfg = ModelConfig(stages=(StageConfig(depth, (width,) * depth, kind),) * stages, chaining=chaining, input_size=size)
    p = model_forward(build_model(cfg, seed), np.random.default_rng(seed).random((1, *size))).data
    assert p.shape == (2, *size)
    assert np.max(np.abs(p.sum(axis=0) - 1.0)) <= 1e-12
