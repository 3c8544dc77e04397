"""Seeded minibatch training with per-sample tapes and best/last checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .config import RunConfig
from .data import DatasetManifest, SamplePair
from .errors import DataError, NumericalError
from .metrics import BatchReport, ConfusionCounts, confusion, evaluate_batch, metric_suite
from .model import Model, build_model, model_forward, predict_mask, segmentation_loss
from .optim import make_optimizer

logger = logging.getLogger(__name__)


def predictor(model: Model) -> Callable[[np.ndarray], np.ndarray]:
    def predict(image: np.ndarray) -> np.ndarray:
        with T.no_grad():
            return predict_mask(model_forward(model, image))

    return predict


def evaluate(model: Model, samples: Sequence[SamplePair], include_degenerate: bool = False) -> BatchReport:
    return evaluate_batch(predictor(model), samples, include_degenerate=include_degenerate)


@dataclass
class TrainResult:
    model: Model
    log: list[dict]
    best_path: Path | None
    last_path: Path | None
    best_val_dice: float
    best_epoch: int
    data_order_digest: str
    stopped_early: bool = False
    extras: dict = field(default_factory=dict)


def _epoch_orders(seed: int, n: int, epochs: int):
    rng = np.random.default_rng([seed, 1])
    for _ in range(epochs):
        yield rng.permutation(n)


def train_model(
    rc: RunConfig,
    train_samples: Sequence[SamplePair],
    val_samples: Sequence[SamplePair],
    out_dir=None,
    log_fh=None,
) -> TrainResult:
    """Train ``rc.model`` from scratch; writes ``best.ckpt``/``last.ckpt`` under ``out_dir``."""
    rc.validate()
    if not train_samples:
        raise DataError("training split is empty")
    seed = rc.train.seed
    model = build_model(rc.model, seed)
    cfg_t, cfg_o = rc.train, rc.optim
    opt = make_optimizer(cfg_o.name, cfg_o.lr, cfg_o.momentum, cfg_o.beta1, cfg_o.beta2, cfg_o.eps)
    out = Path(out_dir) if out_dir is not None else None
    best_path = out / "best.ckpt" if out is not None else None
    last_path = out / "last.ckpt" if out is not None else None
    digest = hashlib.sha256()
    log: list[dict] = []
    best_dice, best_epoch, stopped = -math.inf, -1, False

    def emit(rec: dict) -> None:
        log.append(rec)
        if log_fh is not None:
            log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
            log_fh.flush()

    emit({"header": {"config": rc.to_flat(), "n_train": len(train_samples), "n_val": len(val_samples)}})
    named = model.named_parameters()
    bs = cfg_t.batch_size
    for epoch, order in enumerate(_epoch_orders(seed, len(train_samples), cfg_t.epochs)):
        t0 = time.perf_counter()
        digest.update(order.astype("<i8").tobytes())
        loss_sum, counts = 0.0, ConfusionCounts(0, 0, 0, 0)
        for start in range(0, len(order), bs):
            batch = order[start : start + bs]
            model.zero_grad()
            for i in batch:
                s = train_samples[i]
                probs = model_forward(model, s.image)
                loss = segmentation_loss(probs, s.mask, cfg_t.dice_weight)
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericalError(f"loss is {value} at epoch {epoch}; aborting")
                loss_sum += value
                counts = counts + confusion(predict_mask(probs), s.mask)
                T.backward(T.mul(loss, 1.0 / len(batch)))
            opt.step(named)
        train_rep = metric_suite(counts)
        rec = {
            "epoch": epoch,
            "train_loss": loss_sum / len(order),
            "train_dice": train_rep.dice,
            "train_iou": train_rep.iou,
        }
        last_epoch = epoch == cfg_t.epochs - 1
        if val_samples and ((epoch + 1) % cfg_t.eval_every == 0 or last_epoch):
            val = evaluate(model, val_samples)
            rec["val_dice"], rec["val_iou"] = val.micro.dice, val.micro.iou
            if val.micro.dice > best_dice:
                best_dice, best_epoch = val.micro.dice, epoch
                if best_path is not None:
                    save_checkpoint(model, best_path, {"epoch": epoch, "val_dice": val.micro.dice, "val_iou": val.micro.iou})
            if cfg_t.target_dice > 0 and val.micro.dice >= cfg_t.target_dice:
                stopped = True
        rec["wall_time"] = time.perf_counter() - t0
        emit(rec)
        logger.info("epoch %d loss %.4f val dice %s", epoch, rec["train_loss"], rec.get("val_dice"))
        if stopped:
            break
    if last_path is not None:
        save_checkpoint(model, last_path, {"epoch": log[-1]["epoch"]})
    if not val_samples and best_path is not None:
        save_checkpoint(model, best_path, {"epoch": log[-1]["epoch"]})
    return TrainResult(
        model=model,
        log=log,
        best_path=best_path,
        last_path=last_path,
        best_val_dice=best_dice,
        best_epoch=best_epoch,
        data_order_digest=digest.hexdigest(),
        stopped_early=stopped,
    )


def load_splits(manifest: DatasetManifest) -> tuple[list[SamplePair], list[SamplePair]]:
    train = manifest.load_split("train")
    val = manifest.load_split("val")
    if not train:
        raise DataError("manifest has no training entries")
    return train, val

