"""Dataset scanning, raster IO, augmentation and the synthetic ellipse generator.

Images are 8-bit grayscale PNGs scaled to [0, 1]; masks are PNGs binarized
at 128.  Photometric augmentations never touch masks.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
IMAGE_DIRS = ("images", "CXR_png", "imgs")
MASK_DIRS = ("masks", "mask")
TAGS = ("orig", "contrast", "blur", "flip", "flip_contrast", "flip_blur")
MISSING = None


# ---------------------------------------------------------------------------
# raster IO


def read_png(path, mode: str = "L") -> np.ndarray:
    """8-bit pixels; grayscale by default, ``mode="RGB"`` for colour panels."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert(mode), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def write_png(path, arr: np.ndarray) -> None:
    a = np.asarray(arr)
    if a.dtype != np.uint8:
        raise ValueError("write_png expects uint8 data")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(a).save(path, format="PNG")


def to_uint8(image: np.ndarray) -> np.ndarray:
    """[0, 1] floats (``[1, H, W]`` or ``[H, W]``) to 8-bit."""
    a = np.asarray(image, dtype=np.float64)
    if a.ndim == 3:
        a = a[0]
    return np.clip(np.round(a * 255.0), 0, 255).astype(np.uint8)


def mask_to_uint8(mask: np.ndarray) -> np.ndarray:
    return (np.asarray(mask, dtype=np.uint8) * 255).astype(np.uint8)


def read_mask(path) -> np.ndarray:
    return (read_png(path) >= 128).astype(np.uint8)


# ---------------------------------------------------------------------------
# samples and manifests


@dataclass
class SamplePair:
    image: np.ndarray  # [1, H, W] float64 in [0, 1]
    mask: np.ndarray  # [H, W] uint8 in {0, 1}
    source_id: str
    augmentation_tag: str = "orig"

    def __post_init__(self):
        if self.image.ndim == 2:
            self.image = self.image[None]
        if self.image.shape[1:] != self.mask.shape:
            raise DataError(f"{self.source_id}: image {self.image.shape[1:]} vs mask {self.mask.shape}")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise DataError(f"{self.source_id}: mask is not binary")

    def __eq__(self, other):
        return (
            isinstance(other, SamplePair)
            and self.source_id == other.source_id
            and self.augmentation_tag == other.augmentation_tag
            and np.array_equal(self.image, other.image)
            and np.array_equal(self.mask, other.mask)
        )


@dataclass
class ManifestEntry:
    image: str
    mask: str | None
    label: str = "unknown"
    split: str | None = None
    tag: str = "orig"

    @property
    def source_id(self) -> str:
        return Path(self.image).stem


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    root: Path = Path(".")

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.image in seen:
                raise DataError(f"duplicate image path {e.image}")
            seen.add(e.image)

    @property
    def usable(self) -> list[ManifestEntry]:
        return [e for e in self.entries if e.mask is not MISSING]

    @property
    def missing(self) -> list[ManifestEntry]:
        return [e for e in self.entries if e.mask is MISSING]

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.usable if e.split == name]

    def summary(self) -> dict[str, int]:
        labels = [e.label for e in self.entries]
        return {
            "total": len(self.entries),
            "usable": len(self.usable),
            "missing": len(self.missing),
            "normal": labels.count("normal"),
            "abnormal": labels.count("abnormal"),
            "unknown": labels.count("unknown"),
            "train": len(self.split("train")),
            "val": len(self.split("val")),
        }

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def load(self, entry: ManifestEntry) -> SamplePair:
        if entry.mask is MISSING:
            raise DataError(f"{entry.image} has no mask")
        image = read_png(self.resolve(entry.image)).astype(np.float64) / 255.0
        mask = read_mask(self.resolve(entry.mask))
        return SamplePair(image, mask, entry.source_id, entry.tag)

    def load_split(self, name: str) -> list[SamplePair]:
        return [self.load(e) for e in self.split(name)]

    def to_jsonl(self) -> str:
        keys = ("image", "mask", "label", "split", "tag")
        lines = [json.dumps({k: getattr(e, k) for k in keys}, sort_keys=True) for e in self.entries]
        return "".join(line + "\n" for line in lines)

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_jsonl())
        return path

    @classmethod
    def read(cls, path) -> DatasetManifest:
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.jsonl"
        if not path.is_file():
            raise DataError(f"manifest not found: {path}")
        entries = []
        for n, line in enumerate(path.read_text().splitlines(), 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                entries.append(ManifestEntry(d["image"], d["mask"], d.get("label", "unknown"), d.get("split"), d.get("tag", "orig")))
            except (ValueError, KeyError) as exc:
                raise DataError(f"{path}:{n}: bad manifest line") from exc
        return cls(entries, path.parent)


def label_from_stem(stem: str) -> str:
    """Trailing ``_0`` marks a normal study, ``_1`` an abnormal one."""
    if stem.endswith("_0"):
        return "normal"
    if stem.endswith("_1"):
        return "abnormal"
    return "unknown"


def _mask_stem(stem: str) -> str:
    return stem[: -len("_mask")] if stem.endswith("_mask") else stem


def _images_in(d: Path) -> list[Path]:
    return sorted(p for p in d.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def scan_dataset(root) -> DatasetManifest:
    """Pair images with masks by filename stem.

    Looks for an image directory (``images``/``CXR_png``) and a ``masks``
    directory under ``root``; otherwise treats ``root`` as a flat directory
    where masks carry a ``_mask`` suffix.  Unpaired images are kept with a
    MISSING mask so they can be audited, and are never used for training.
    """
    root = Path(root)
    if not root.is_dir() or not os.access(root, os.R_OK | os.X_OK):
        raise DataError(f"dataset directory not readable: {root}")
    img_dir = next((root / d for d in IMAGE_DIRS if (root / d).is_dir()), None)
    mask_dir = next((root / d for d in MASK_DIRS if (root / d).is_dir()), None)
    if img_dir is not None and mask_dir is not None:
        images = _images_in(img_dir)
        masks = {_mask_stem(p.stem): p for p in _images_in(mask_dir)}
    else:
        files = _images_in(root)
        images = [p for p in files if not p.stem.endswith("_mask")]
        masks = {_mask_stem(p.stem): p for p in files if p.stem.endswith("_mask")}
    entries = []
    for p in images:
        m = masks.get(p.stem)
        entries.append(
            ManifestEntry(
                image=str(p.relative_to(root)),
                mask=str(m.relative_to(root)) if m is not None else MISSING,
                label=label_from_stem(p.stem),
            )
        )
    manifest = DatasetManifest(entries, root)
    if not manifest.usable:
        raise DataError(f"no image/mask pairs found under {root}")
    return manifest


def assign_split(manifest: DatasetManifest, train_fraction: float, seed: int) -> DatasetManifest:
    """Seeded train/val split over usable entries, by source id, before any augmentation."""
    if not 0.0 < train_fraction <= 1.0:
        raise ConfigError("train fraction must be in (0, 1]")
    ids = sorted({e.source_id for e in manifest.usable})
    order = np.random.default_rng(seed).permutation(len(ids))
    n_train = int(round(train_fraction * len(ids)))
    train_ids = {ids[i] for i in order[:n_train]}
    entries = [
        replace(e, split=None if e.mask is MISSING else ("train" if e.source_id in train_ids else "val"))
        for e in manifest.entries
    ]
    return DatasetManifest(entries, manifest.root)


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentParams:
    contrast_alpha: float = 1.5
    contrast_beta: float = 0.0
    blur_sigma: float = 1.0
    blur_kernel: int = 5

    def validate(self) -> None:
        if self.contrast_alpha <= 0:
            raise ConfigError("contrast_alpha must be > 0")
        if self.blur_kernel < 3 or self.blur_kernel % 2 == 0:
            raise ConfigError("blur_kernel must be odd and >= 3")
        if self.blur_sigma <= 0:
            raise ConfigError("blur_sigma must be > 0")


def contrast_adjust(image: np.ndarray, alpha: float, beta: float = 0.0) -> np.ndarray:
    """Linear gain about mid-gray, clamped to [0, 1]."""
    if alpha <= 0:
        raise ConfigError("contrast alpha must be > 0")
    return np.clip(alpha * (image - 0.5) + 0.5 + beta, 0.0, 1.0)


def gaussian_kernel1d(sigma: float, size: int) -> np.ndarray:
    if size < 3 or size % 2 == 0:
        raise ConfigError(f"gaussian kernel size must be odd and >= 3, got {size}")
    r = size // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    w = np.exp(-(x**2) / (2.0 * sigma**2))
    return w / w.sum()


def _blur_axis(a: np.ndarray, w: np.ndarray, axis: int) -> np.ndarray:
    r = len(w) // 2
    pad = [(0, 0)] * a.ndim
    pad[axis] = (r, r)
    ap = np.pad(a, pad, mode="edge")
    n = a.shape[axis]
    out = a.copy()
    for i, wi in enumerate(w):
        shifted = np.take(ap, np.arange(i, i + n), axis=axis)
        # accumulate differences so a constant signal stays bit-identical
        out += wi * (shifted - a)
    return out


def gaussian_blur(image: np.ndarray, params: AugmentParams | None = None) -> np.ndarray:
    """Separable Gaussian blur with replicate-edge padding over the last two axes."""
    params = params or AugmentParams()
    w = gaussian_kernel1d(params.blur_sigma, params.blur_kernel)
    a = np.asarray(image, dtype=np.float64)
    return _blur_axis(_blur_axis(a, w, a.ndim - 2), w, a.ndim - 1)


def hflip(pair: SamplePair) -> SamplePair:
    return SamplePair(pair.image[..., ::-1].copy(), pair.mask[:, ::-1].copy(), pair.source_id, pair.augmentation_tag)


def augment_sixfold(pair: SamplePair, params: AugmentParams | None = None) -> list[SamplePair]:
    """orig, contrast, blur, then the same three applied to the mirrored pair."""
    params = params or AugmentParams()
    params.validate()

    out = []
    for base, p in (("orig", pair), ("flip", hflip(pair))):
        pre = "" if base == "orig" else "flip_"
        out.append(replace(p, augmentation_tag=base))
        out.append(SamplePair(contrast_adjust(p.image, params.contrast_alpha, params.contrast_beta), p.mask, p.source_id, pre + "contrast"))
        out.append(SamplePair(gaussian_blur(p.image, params), p.mask, p.source_id, pre + "blur"))
    return out


# ---------------------------------------------------------------------------
# resizing


def _nn_index(n_out: int, n_in: int) -> np.ndarray:
    i = np.arange(n_out)
    return np.minimum(((2 * i + 1) * n_in) // (2 * n_out), n_in - 1)


def resize_nearest(a: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    h, w = size
    return a[np.ix_(_nn_index(h, a.shape[0]), _nn_index(w, a.shape[1]))]


def _bilinear_axis(a: np.ndarray, n_out: int, axis: int) -> np.ndarray:
    n_in = a.shape[axis]
    if n_out == n_in:
        return a
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    shape = [1] * a.ndim
    shape[axis] = n_out
    frac = frac.reshape(shape)
    return np.take(a, i0, axis=axis) * (1 - frac) + np.take(a, i1, axis=axis) * frac


def resize_bilinear(a: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    return _bilinear_axis(_bilinear_axis(a, size[0], 0), size[1], 1)


def normalize_intensity(image: np.ndarray) -> np.ndarray:
    a = np.asarray(image)
    if a.ndim == 3:
        a = a[0]
    if np.issubdtype(a.dtype, np.integer):
        return a.astype(np.float64) / float(np.iinfo(a.dtype).max)
    return np.clip(a.astype(np.float64), 0.0, 1.0)


def resize_and_normalize(image, mask, target: tuple[int, int], source_id: str = "", divisor: int = 1, tag: str = "orig") -> SamplePair:
    """Bilinear image resize, nearest-neighbour mask resize, intensities into [0, 1]."""
    h, w = target
    if h <= 0 or w <= 0 or h % divisor or w % divisor:
        raise ConfigError(f"target {h}x{w} must be positive and divisible by {divisor}")
    img = resize_bilinear(normalize_intensity(image), (h, w))
    m = np.asarray(mask)
    m = (m > 0).astype(np.uint8) if m.dtype != np.uint8 or m.max(initial=0) > 1 else m
    return SamplePair(np.clip(img, 0.0, 1.0)[None], resize_nearest(m, (h, w)).astype(np.uint8), source_id, tag)


# ---------------------------------------------------------------------------
# synthetic data


def _smooth_noise(rng: np.random.Generator, h: int, w: int, scale: int) -> np.ndarray:
    coarse = rng.standard_normal((max(2, h // scale), max(2, w // scale)))
    return resize_bilinear(coarse, (h, w))


def synth_sample(rng: np.random.Generator, h: int, w: int, abnormal: bool) -> tuple[np.ndarray, np.ndarray]:
    """One chest-like image: two dark filled ellipses over a textured body."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    while True:
        mask = np.zeros((h, w), dtype=bool)
        for side in (-1, 1):
            cx = w * (0.5 + side * rng.uniform(0.17, 0.24))
            cy = h * rng.uniform(0.45, 0.55)
            ax = w * rng.uniform(0.10, 0.17)
            ay = h * rng.uniform(0.22, 0.34)
            th = rng.uniform(-0.25, 0.25)
            dx, dy = xx - cx, yy - cy
            u = dx * math.cos(th) + dy * math.sin(th)
            v = -dx * math.sin(th) + dy * math.cos(th)
            mask |= (u / ax) ** 2 + (v / ay) ** 2 <= 1.0
        frac = mask.mean()
        if 0.05 <= frac <= 0.6:
            break
    body = rng.uniform(0.55, 0.75) + 0.06 * _smooth_noise(rng, h, w, 8)
    lung = rng.uniform(0.18, 0.32) + 0.04 * _smooth_noise(rng, h, w, 4)
    img = np.where(mask, lung, body)
    if abnormal:
        ys, xs = np.nonzero(mask)
        k = rng.integers(len(ys))
        r = rng.uniform(0.03, 0.06) * min(h, w)
        blob = np.exp(-((xx - xs[k]) ** 2 + (yy - ys[k]) ** 2) / (2 * r**2))
        img = img + 0.15 * blob
    img = img + 0.03 * rng.standard_normal((h, w))
    return np.clip(img, 0.0, 1.0), mask.astype(np.uint8)


def generate_synthetic_dataset(out_dir, n: int, h: int = 64, w: int = 64, seed: int = 0, train_fraction: float = 0.8) -> DatasetManifest:
    """Write ``n`` image/mask PNG pairs plus ``manifest.jsonl``; deterministic per seed."""
    out = Path(out_dir)
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(n):
        abnormal = bool(i % 2)
        img, mask = synth_sample(rng, h, w, abnormal)
        stem = f"synth_{i:04d}_{int(abnormal)}"
        write_png(out / "images" / f"{stem}.png", to_uint8(img))
        write_png(out / "masks" / f"{stem}.png", mask_to_uint8(mask))
        entries.append(ManifestEntry(f"images/{stem}.png", f"masks/{stem}.png", label_from_stem(stem)))
    manifest = assign_split(DatasetManifest(entries, out), train_fraction, seed)
    manifest.write(out / "manifest.jsonl")
    return manifest


def iter_samples(manifest: DatasetManifest, entries: Iterable[ManifestEntry]) -> Iterable[SamplePair]:
    for e in entries:
        yield manifest.load(e)
