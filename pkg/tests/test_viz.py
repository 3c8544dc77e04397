import numpy as np
import pytest

from hsegnet.errors import DimensionError
from hsegnet.viz import OVERLAP, PRED_ONLY, SEPARATOR, TRUTH_ONLY, attention_map_image, compose_panels, figure_panel, svg_line_chart, tint_regions


def test_tint_colours():
    img = np.zeros((1, 2))
    out = tint_regions(img, np.array([[1, 1]]), np.array([[1, 0]]), alpha=1.0)
    assert tuple(out[0, 0]) == OVERLAP and tuple(out[0, 1]) == PRED_ONLY
    out = tint_regions(img, np.array([[0, 0]]), np.array([[1, 0]]), alpha=1.0)
    assert tuple(out[0, 0]) == TRUTH_ONLY and tuple(out[0, 1]) == (0, 0, 0)


def test_panel_width():
    img = np.random.default_rng(0).random((6, 5))
    m = np.zeros((6, 5), np.uint8)
    panel = figure_panel(img, m, [m, m, m, m])
    assert panel.shape == (6, 6 * 5 + 5 * SEPARATOR, 3)
    # separators are white
    assert np.all(panel[:, 5 : 5 + SEPARATOR] == 255)


def test_panel_errors():
    with pytest.raises(DimensionError):
        compose_panels([np.zeros((2, 2, 3), np.uint8), np.zeros((2, 3, 3), np.uint8)])
    with pytest.raises(ValueError):
        figure_panel(np.zeros((2, 2)), np.zeros((2, 2)), [])
    with pytest.raises(DimensionError):
        tint_regions(np.zeros((2, 2)), np.zeros((2, 3)), np.zeros((2, 2)))


def test_attention_images():
    assert attention_map_image(np.full((1, 2, 2), 0.5), (4, 4)).shape == (4, 4)
    strip = attention_map_image(np.array([0.0, 1.0]))
    assert strip.shape == (8, 16) and strip[0, 0] == 0 and strip[0, -1] == 255


def test_svg():
    svg = svg_line_chart({"train": [(0, 0.2), (1, 0.5)], "val <x>": [(0, 0.1)]}, "Dice", "dice")
    assert svg.startswith("<svg") and svg.count("<polyline") == 2 and "val &lt;x&gt;" in svg
