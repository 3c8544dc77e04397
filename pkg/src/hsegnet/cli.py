"""Command line: prepare, synth, augment, train, eval, infer, overlay, gradcheck, ablation, plot.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical failure.
Training-style commands accept ``--config FILE`` plus any config key as a
flag of the same dotted name, e.g. ``--train.epochs 5 --optim.name adam``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import is_checkpoint, load_checkpoint
from .checks import SCOPES, inject_sigmoid_fault, run_scope
from .config import KEYS, RunConfig, dump_config, load_config
from .data import (
    AugmentParams,
    DatasetManifest,
    ManifestEntry,
    assign_split,
    augment_sixfold,
    generate_synthetic_dataset,
    mask_to_uint8,
    read_mask,
    read_png,
    resize_and_normalize,
    scan_dataset,
    to_uint8,
    write_png,
)
from .errors import ConfigError, DataError, HSegNetError, NumericalError
from .metrics import METRIC_NAMES, BatchReport, evaluate_batch, format_table
from .model import Model, ablation_ladder, model_forward, predict_mask
from .tensor import write_tensor
from .train import evaluate, load_splits, predictor, train_model
from .viz import attention_map_image, figure_panel, svg_line_chart

logger = logging.getLogger("hsegnet")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


def _parse_size(s: str) -> tuple[int, int]:
    parts = [int(p) for p in s.lower().replace("x", ",").split(",") if p]
    if len(parts) == 1:
        parts = parts * 2
    if len(parts) != 2:
        raise ConfigError(f"bad size {s!r}; use H or HxW")
    return parts[0], parts[1]


# ---------------------------------------------------------------------------
# commands (library-callable)


def cmd_prepare(root, out, split: float = 0.8, seed: int | None = None, size="64", divisor: int = 4) -> DatasetManifest:
    """Scan, resize every usable pair into ``out``, assign a seeded split, audit missing masks."""
    if seed is None:
        raise ConfigError("--seed is required")
    src = scan_dataset(root)
    out = Path(out)
    target = _parse_size(size) if isinstance(size, str) else tuple(size)
    entries = []
    for e in src.entries:
        if e.mask is None:
            entries.append(ManifestEntry(str(src.resolve(e.image).resolve()), None, e.label))
            continue
        pair = resize_and_normalize(
            read_png(src.resolve(e.image)), read_mask(src.resolve(e.mask)), target, e.source_id, divisor
        )
        img_rel, mask_rel = f"images/{e.source_id}.png", f"masks/{e.source_id}.png"
        write_png(out / img_rel, to_uint8(pair.image))
        write_png(out / mask_rel, mask_to_uint8(pair.mask))
        entries.append(ManifestEntry(img_rel, mask_rel, e.label))
    manifest = assign_split(DatasetManifest(entries, out), split, seed)
    manifest.write(out / "manifest.jsonl")
    s = manifest.summary()
    print(f"scanned {s['total']} images: {s['usable']} usable, {s['missing']} MISSING mask")
    print(f"labels: {s['normal']} normal, {s['abnormal']} abnormal, {s['unknown']} unknown")
    print(f"split: {s['train']} train / {s['val']} val")
    for e in manifest.missing:
        print(f"MISSING mask: {e.image}")
    return manifest


def cmd_synth(out, n: int = 80, size="64", seed: int | None = None, split: float = 0.8) -> DatasetManifest:
    if seed is None:
        raise ConfigError("--seed is required")
    h, w = _parse_size(size) if isinstance(size, str) else size
    manifest = generate_synthetic_dataset(out, n, h, w, seed, split)
    s = manifest.summary()
    print(f"wrote {s['total']} synthetic pairs to {out} ({s['train']} train / {s['val']} val)")
    return manifest


def cmd_augment(manifest_path, out=None, params: AugmentParams | None = None) -> DatasetManifest:
    """Sixfold-augment the train split into ``out``; validation entries pass through untouched."""
    src = DatasetManifest.read(manifest_path)
    if any(e.tag != "orig" for e in src.entries):
        raise DataError("manifest is already augmented")
    params = params or AugmentParams()
    params.validate()
    out = Path(out) if out is not None else src.root / "augmented"

    def rel(p: str) -> str:
        return os.path.relpath(src.resolve(p).resolve(), out.resolve())

    entries = []
    for e in src.entries:
        if e.split != "train" or e.mask is None:
            entries.append(replace(e, image=rel(e.image), mask=rel(e.mask) if e.mask else None))
            continue
        for v in augment_sixfold(src.load(e), params):
            stem = f"{e.source_id}__{v.augmentation_tag}"
            img_rel, mask_rel = f"images/{stem}.png", f"masks/{stem}.png"
            write_png(out / img_rel, to_uint8(v.image))
            write_png(out / mask_rel, mask_to_uint8(v.mask))
            entries.append(ManifestEntry(img_rel, mask_rel, e.label, "train", v.augmentation_tag))
    manifest = DatasetManifest(entries, out)
    manifest.write(out / "manifest.jsonl")
    s = manifest.summary()
    print(f"augmented: {s['train']} train samples, {s['val']} val samples untouched")
    return manifest


def _run_config(rc: RunConfig, manifest=None, out=None) -> RunConfig:
    if manifest is not None:
        rc = replace(rc, paths=replace(rc.paths, data=str(manifest)))
    if out is not None:
        rc = replace(rc, paths=replace(rc.paths, out=str(out)))
    rc.validate()
    if not rc.paths.data:
        raise ConfigError("paths.data (or --manifest) is required")
    return rc


def cmd_train(rc: RunConfig, manifest=None, out=None):
    rc = _run_config(rc, manifest, out)
    data = DatasetManifest.read(rc.paths.data)
    train, val = load_splits(data)
    out = Path(rc.paths.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(rc))
    with open(out / "train_log.jsonl", "w") as fh:
        result = train_model(rc, train, val, out, fh)
    print(f"trained {len(result.log) - 1} epochs; best val dice {result.best_val_dice:.4f} at epoch {result.best_epoch}")
    print(f"checkpoints: {result.best_path} {result.last_path}")
    return result


def write_report(report: BatchReport, out, stem: str = "eval") -> tuple[Path, Path]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    jp, tp = out / f"{stem}.json", out / f"{stem}.txt"
    jp.write_text(report.to_json())
    tp.write_text(report.to_text() + "\n")
    return jp, tp


def cmd_eval(
    checkpoint,
    manifest,
    split: str = "val",
    out=None,
    include_degenerate: bool = False,
    accuracy_over_positives: bool = False,
    predict: Callable[[np.ndarray], np.ndarray] | None = None,
) -> BatchReport:
    """Evaluate a checkpoint on one manifest split.

    ``predict`` replaces the checkpoint's model when given (test hook for
    oracle predictors).
    """
    data = DatasetManifest.read(manifest)
    samples = data.load_split(split)
    if not samples:
        raise DataError(f"split {split!r} is empty")
    if predict is None:
        model, _ = load_checkpoint(checkpoint)
        predict = predictor(model)
    report = evaluate_batch(predict, samples, include_degenerate, accuracy_over_positives)
    if out is not None:
        write_report(report, out)
    print(report.to_text())
    return report


def infer_image(model: Model, image_path) -> tuple[np.ndarray, T.Tensor]:
    raw = read_png(image_path)
    h, w = model.config.input_size
    dummy = np.zeros(raw.shape, dtype=np.uint8)
    pair = resize_and_normalize(raw, dummy, (h, w), Path(image_path).stem)
    with T.no_grad():
        probs = model_forward(model, pair.image)
    return predict_mask(probs), probs


def cmd_infer(checkpoint, image, out) -> dict[str, Path]:
    model, _ = load_checkpoint(checkpoint)
    mask, probs = infer_image(model, image)
    out = Path(out)
    stem = Path(image).stem
    paths = {"mask": out / f"{stem}_mask.png", "prob": out / f"{stem}_prob.png", "prob_tensor": out / f"{stem}_prob.bin"}
    write_png(paths["mask"], mask_to_uint8(mask))
    write_png(paths["prob"], to_uint8(probs.data[1]))
    with open(paths["prob_tensor"], "wb") as fh:
        write_tensor(fh, probs.data)
    print(f"mask -> {paths['mask']}")
    return paths


def _attention_images(model: Model, image: np.ndarray) -> dict[str, np.ndarray]:
    maps: dict = {}
    with T.no_grad():
        model_forward(model, image, maps)
    size = image.shape[-2:]
    out = {}
    for prefix, m in maps.items():
        key = prefix.replace("/", "_")
        if isinstance(m, dict):
            out[f"{key}_m_c"] = attention_map_image(m["m_c"].data)
            continue
        out[f"{key}_m_c"] = attention_map_image(m.m_c.data)
        out[f"{key}_m_x"] = attention_map_image(m.m_x.data, size)
        out[f"{key}_g"] = attention_map_image(m.g.data, size)
    return out


def cmd_overlay(image, truth, predictions: Sequence, out) -> dict[str, Path]:
    """Image | truth | one panel per prediction (mask PNG or checkpoint)."""
    if not predictions:
        raise ConfigError("at least one prediction is required")
    img = read_png(image).astype(np.float64) / 255.0
    gt = read_mask(truth)
    if img.shape != gt.shape:
        raise DataError(f"image {img.shape} and truth {gt.shape} differ")
    out = Path(out)
    written = {}
    masks = []
    for i, p in enumerate(predictions):
        if is_checkpoint(p):
            model, _ = load_checkpoint(p)
            if model.config.input_size != img.shape:
                raise DataError(f"checkpoint {p} expects {model.config.input_size}, image is {img.shape}")
            masks.append(predictor(model)(img[None]))
            for name, arr in _attention_images(model, img[None]).items():
                path = out.with_name(f"{out.stem}_pred{i}_{name}.png")
                write_png(path, arr)
                written[f"pred{i}/{name}"] = path
        else:
            m = read_mask(p)
            if m.shape != gt.shape:
                raise DataError(f"prediction {p} {m.shape} does not match truth {gt.shape}")
            masks.append(m)
    panel = figure_panel(img, gt, masks)
    write_png(out, panel)
    written["panel"] = out
    print(f"panel ({panel.shape[1]}x{panel.shape[0]}) -> {out}")
    return written


def cmd_gradcheck(scope: str = "attention", seed: int = 0, h: float = 1e-5, tol: float = 1e-4, inject_fault: bool = False) -> bool:
    scopes = list(SCOPES) if scope == "all" else [scope]
    ok = True
    for sc in scopes:
        if inject_fault:
            with inject_sigmoid_fault():
                results = run_scope(sc, seed, h, tol)
        else:
            results = run_scope(sc, seed, h, tol)
        print(f"{'check':<34} {'max rel err':>12} {'time':>8}  status   [scope={sc}, h={h:g}, tol={tol:g}]")
        for name, rep, dt in results:
            status = "pass" if rep.passed else "FAIL"
            ok &= rep.passed
            print(f"{name:<34} {rep.max_rel_error:>12.3e} {dt:>7.2f}s  {status}")
            if not rep.passed:
                for e in rep.entries:
                    if e.max_rel_error >= tol:
                        print(f"    {e.name}: {e.max_rel_error:.3e}")
    print("gradcheck", "passed" if ok else "FAILED")
    return ok


LADDER_FIELDS = ("model.stages", "model.attention")


def config_diff(configs: dict[str, RunConfig]) -> dict[str, dict[str, str]]:
    flats = {k: rc.to_flat() for k, rc in configs.items()}
    keys = sorted({k for f in flats.values() for k in f})
    return {k: {name: f.get(k) for name, f in flats.items()} for k in keys if len({f.get(k) for f in flats.values()}) > 1}


def cmd_ablation(rc: RunConfig, manifest=None, out=None) -> dict:
    """Train the four ladder variants with one seed and one data order; tabulate val metrics."""
    rc = _run_config(rc, manifest, out)
    data = DatasetManifest.read(rc.paths.data)
    train, val = load_splits(data)
    if not val:
        raise DataError("ablation needs a validation split")
    out = Path(rc.paths.out)
    variants = {name: replace(rc, model=mc) for name, mc in ablation_ladder(rc.model).items()}
    diff = config_diff(variants)
    audit_ok = set(diff) <= set(LADDER_FIELDS)
    rows, digests, per = {}, {}, {}
    for i, (name, vrc) in enumerate(variants.items()):
        vout = out / f"variant{i}"
        vout.mkdir(parents=True, exist_ok=True)
        with open(vout / "train_log.jsonl", "w") as fh:
            res = train_model(vrc, train, val, vout, fh)
        best, _ = load_checkpoint(res.best_path)
        rep = evaluate(best, val)
        rows[name] = rep.micro
        digests[name] = res.data_order_digest
        per[name] = {"checkpoint": str(res.best_path), "best_epoch": res.best_epoch, "epochs_run": len(res.log) - 1}
        print(f"[{i + 1}/4] {name}: val dice {rep.micro.dice:.4f}")
    seed_ok = len(set(digests.values())) == 1
    ordering = {m: sorted(rows, key=lambda n: -getattr(rows[n], m)) for m in METRIC_NAMES}
    doc = {
        "metrics": list(METRIC_NAMES),
        "rows": {n: r.as_dict() for n, r in rows.items()},
        "variants": per,
        "config_diff": diff,
        "config_diff_audit": {"allowed": list(LADDER_FIELDS), "passed": audit_ok},
        "seed_audit": {"seed": rc.train.seed, "data_order_digests": digests, "passed": seed_ok},
        "ordering": ordering,
    }
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=True) + "\n")
    text = format_table(rows, "variant")
    text += f"\n\nconfig-diff audit: {'PASS' if audit_ok else 'FAIL'} (differing keys: {', '.join(diff) or 'none'})"
    text += f"\nseed audit: {'PASS' if seed_ok else 'FAIL'} (data order sha256 {next(iter(digests.values()))[:16]}...)\n"
    (out / "ablation.txt").write_text(text)
    print(text)
    if not (audit_ok and seed_ok):
        raise ConfigError("ablation audit failed")
    return doc


def cmd_plot(log, out) -> list[Path]:
    recs = [json.loads(line) for line in Path(log).read_text().splitlines() if line.strip()]
    recs = [r for r in recs if "epoch" in r]
    if not recs:
        raise DataError(f"no epoch records in {log}")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for metric, title in (("dice", "Dice similarity"), ("iou", "Jaccard index (IoU)")):
        series = {
            f"train {metric}": [(r["epoch"], r[f"train_{metric}"]) for r in recs if f"train_{metric}" in r],
            f"val {metric}": [(r["epoch"], r[f"val_{metric}"]) for r in recs if f"val_{metric}" in r],
        }
        p = out / f"{metric}.svg"
        p.write_text(svg_line_chart(series, title, metric))
        paths.append(p)
    print("wrote", " ".join(str(p) for p in paths))
    return paths


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _config_overrides(extra: list[str]) -> dict[str, str]:
    out: dict[str, str] = {}
    it = iter(extra)
    for tok in it:
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
        else:
            val = next(it, None)
            if val is None:
                raise ConfigError(f"missing value for {tok}")
        if key not in KEYS:
            raise ConfigError(f"unknown option {tok}")
        out[key] = val
    return out


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hsegnet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("prepare", help="scan a dataset directory, resize, split")
    s.add_argument("--root", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--split", type=float, default=0.8)
    s.add_argument("--seed", type=int)
    s.add_argument("--size", default="64")
    s.add_argument("--divisor", type=int, default=4)

    s = sub.add_parser("synth", help="generate the synthetic ellipse dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=80)
    s.add_argument("--size", default="64")
    s.add_argument("--seed", type=int)
    s.add_argument("--split", type=float, default=0.8)

    s = sub.add_parser("augment", help="sixfold-augment the train split")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out")
    s.add_argument("--contrast-alpha", type=float, default=1.5)
    s.add_argument("--contrast-beta", type=float, default=0.0)
    s.add_argument("--blur-sigma", type=float, default=1.0)
    s.add_argument("--blur-kernel", type=int, default=5)

    for name, help_ in (("train", "train a model"), ("ablation", "train the four-variant comparison")):
        s = sub.add_parser(name, help=help_, epilog="any config key may be given as --<key> VALUE")
        s.add_argument("--config")
        s.add_argument("--manifest")
        s.add_argument("--out")

    s = sub.add_parser("eval", help="evaluate a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--split", default="val")
    s.add_argument("--out")
    s.add_argument("--include-degenerate", action="store_true")
    s.add_argument("--accuracy-over-positives", action="store_true", help="report accuracy as total pixels / (tp + fn) instead of (tp + tn) / total")

    s = sub.add_parser("infer", help="segment one image")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("overlay", help="render an image | truth | predictions panel")
    s.add_argument("--image", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--pred", action="append", required=True, help="mask PNG or checkpoint; repeatable")
    s.add_argument("--out", required=True)

    s = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    s.add_argument("--scope", choices=[*SCOPES, "all"], default="attention")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--h", type=float, default=1e-5)
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)

    s = sub.add_parser("plot", help="SVG Dice/IoU curves from a training log")
    s.add_argument("--log", required=True)
    s.add_argument("--out", required=True)
    return p


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if extra and args.command not in ("train", "ablation"):
        parser.error(f"unrecognized arguments: {' '.join(extra)}")
    c = args.command
    if c == "prepare":
        cmd_prepare(args.root, args.out, args.split, args.seed, args.size, args.divisor)
    elif c == "synth":
        cmd_synth(args.out, args.n, args.size, args.seed, args.split)
    elif c == "augment":
        params = AugmentParams(args.contrast_alpha, args.contrast_beta, args.blur_sigma, args.blur_kernel)
        cmd_augment(args.manifest, args.out, params)
    elif c in ("train", "ablation"):
        rc = load_config(args.config, _config_overrides(extra))
        (cmd_train if c == "train" else cmd_ablation)(rc, args.manifest, args.out)
    elif c == "eval":
        cmd_eval(args.checkpoint, args.manifest, args.split, args.out, args.include_degenerate, args.accuracy_over_positives)
    elif c == "infer":
        cmd_infer(args.checkpoint, args.image, args.out)
    elif c == "overlay":
        cmd_overlay(args.image, args.truth, args.pred, args.out)
    elif c == "gradcheck":
        if not cmd_gradcheck(args.scope, args.seed, args.h, args.tol, args.inject_fault):
            return EXIT_NUMERIC
    elif c == "plot":
        cmd_plot(args.log, args.out)
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    try:
        return run(argv)
    except SystemExit as exc:
        # argparse exits directly on usage errors and --help
        if exc.code is None:
            return EXIT_OK
        return exc.code if isinstance(exc.code, int) else EXIT_CONFIG
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, HSegNetError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
