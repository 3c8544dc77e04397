"""Overlay panels, attention-map images and SVG training curves."""

from __future__ import annotations

from html import escape
from typing import Sequence

import numpy as np

from .data import resize_nearest
from .errors import DimensionError

OVERLAP = (40, 200, 40)
PRED_ONLY = (220, 40, 40)
TRUTH_ONLY = (40, 90, 230)
SEPARATOR = 2


def gray_to_rgb(image: np.ndarray) -> np.ndarray:
    a = np.asarray(image, dtype=np.float64)
    if a.ndim == 3:
        a = a[0]
    g = np.clip(np.round(a * 255.0), 0, 255).astype(np.uint8)
    return np.repeat(g[..., None], 3, axis=-1)


def tint_regions(image: np.ndarray, pred: np.ndarray, truth: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend overlap / prediction-only / truth-only colours over the grayscale image."""
    rgb = gray_to_rgb(image)
    p, t = np.asarray(pred).astype(bool), np.asarray(truth).astype(bool)
    if p.shape != rgb.shape[:2] or t.shape != rgb.shape[:2]:
        raise DimensionError(f"masks {p.shape}/{t.shape} do not match image {rgb.shape[:2]}")
    out = rgb.astype(np.float64)
    for region, colour in ((p & t, OVERLAP), (p & ~t, PRED_ONLY), (~p & t, TRUTH_ONLY)):
        out[region] = (1 - alpha) * out[region] + alpha * np.asarray(colour, dtype=np.float64)
    return np.round(out).astype(np.uint8)


def compose_panels(panels: Sequence[np.ndarray], separator: int = SEPARATOR) -> np.ndarray:
    """Lay RGB panels left to right with white separators."""
    shapes = {p.shape for p in panels}
    if len(shapes) != 1:
        raise DimensionError(f"panels differ in shape: {sorted(shapes)}")
    h, w, _ = panels[0].shape
    n = len(panels)
    canvas = np.full((h, n * w + (n - 1) * separator, 3), 255, dtype=np.uint8)
    for i, p in enumerate(panels):
        x = i * (w + separator)
        canvas[:, x : x + w] = p
    return canvas


def figure_panel(image: np.ndarray, truth: np.ndarray, predictions: Sequence[np.ndarray]) -> np.ndarray:
    """Image | truth | one tinted panel per prediction."""
    if not predictions:
        raise ValueError("need at least one prediction")
    panels = [gray_to_rgb(image), tint_regions(image, truth, truth)]
    panels += [tint_regions(image, p, truth) for p in predictions]
    return compose_panels(panels)


def attention_map_image(values: np.ndarray, size: tuple[int, int] | None = None) -> np.ndarray:
    """(0, 1) map -> 8-bit grayscale; 1-D channel maps render as a horizontal strip."""
    a = np.asarray(values, dtype=np.float64)
    if a.ndim == 3:
        a = a[0]
    if a.ndim == 1:
        a = np.repeat(a[None, :], 8, axis=0)
        a = np.repeat(a, 8, axis=1)
    elif size is not None:
        a = resize_nearest(a, size)
    return np.clip(np.round(a * 255.0), 0, 255).astype(np.uint8)


def svg_line_chart(series: dict[str, Sequence[tuple[float, float]]], title: str, ylabel: str, width: int = 480, height: int = 300) -> str:
    palette = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")
    ml, mr, mt, mb = 50, 130, 30, 40
    pw, ph = width - ml - mr, height - mt - mb
    xs = [x for pts in series.values() for x, _ in pts] or [0.0, 1.0]
    ys = [y for pts in series.values() for _, y in pts] or [0.0, 1.0]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(0.0, min(ys)), max(1.0, max(ys))
    x1 = x1 if x1 > x0 else x0 + 1

    def sx(x):
        return ml + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return mt + ph - (y - y0) / (y1 - y0) * ph

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-family="sans-serif" font-size="14">{escape(title)}</text>',
        f'<line x1="{ml}" y1="{mt + ph}" x2="{ml + pw}" y2="{mt + ph}" stroke="black"/>',
        f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + ph}" stroke="black"/>',
        f'<text x="{ml + pw / 2:.1f}" y="{height - 8}" text-anchor="middle" font-family="sans-serif" font-size="12">epoch</text>',
        f'<text x="14" y="{mt + ph / 2:.1f}" transform="rotate(-90 14 {mt + ph / 2:.1f})" text-anchor="middle" font-family="sans-serif" font-size="12">{escape(ylabel)}</text>',
    ]
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = y0 + frac * (y1 - y0)
        parts.append(f'<text x="{ml - 6}" y="{sy(y) + 4:.1f}" text-anchor="end" font-family="sans-serif" font-size="10">{y:.2f}</text>')
    for i, (name, pts) in enumerate(series.items()):
        colour = palette[i % len(palette)]
        if pts:
            path = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in pts)
            parts.append(f'<polyline fill="none" stroke="{colour}" stroke-width="2" points="{path}"/>')
        ly = mt + 14 + 16 * i
        parts.append(f'<line x1="{ml + pw + 10}" y1="{ly}" x2="{ml + pw + 28}" y2="{ly}" stroke="{colour}" stroke-width="2"/>')
        parts.append(f'<text x="{ml + pw + 32}" y="{ly + 4}" font-family="sans-serif" font-size="11">{escape(name)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
