"""``HSGN1`` checkpoints.

Layout: the magic bytes, a little-endian uint32 header length, the header as
canonical JSON (model config, sorted parameter names, optional metadata), then
each parameter in sorted-name order in the tensor serialization format.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

from .errors import CorruptionError
from .model import DTYPES, Model, ModelConfig, build_model
from .tensor import Tensor, read_tensor, write_tensor

MAGIC = b"HSGN1"


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()


def checkpoint_bytes(model: Model, meta: dict | None = None) -> bytes:
    named = model.named_parameters()
    header = {"model": model.config.to_dict(), "params": [n for n, _ in named], "meta": meta or {}}
    head = canonical_json(header)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(head)))
    buf.write(head)
    for _, t in named:
        write_tensor(buf, t.data)
    return buf.getvalue()


def save_checkpoint(model: Model, path, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(model, meta))
    return path


def is_checkpoint(path) -> bool:
    try:
        with open(path, "rb") as fh:
            return fh.read(len(MAGIC)) == MAGIC
    except OSError:
        return False


def loads_checkpoint(blob: bytes) -> tuple[Model, dict]:
    if not blob.startswith(MAGIC):
        raise CorruptionError("not an HSGN1 checkpoint")
    fh = io.BytesIO(blob)
    fh.seek(len(MAGIC))
    raw = fh.read(4)
    if len(raw) != 4:
        raise CorruptionError("truncated checkpoint header")
    (n,) = struct.unpack("<I", raw)
    try:
        header = json.loads(fh.read(n))
        config = ModelConfig.from_dict(header["model"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptionError("unreadable checkpoint header") from exc
    dtype = DTYPES[config.dtype]
    params = {}
    for name in header["params"]:
        params[name] = Tensor(read_tensor(fh), requires_grad=True, dtype=dtype)
    if fh.read(1):
        raise CorruptionError("trailing bytes after checkpoint payload")
    model = Model(config, params)
    expected = {k: v.shape for k, v in build_model(config, 0).params.items()}
    got = {k: v.shape for k, v in params.items()}
    if expected != got:
        raise CorruptionError("checkpoint parameters do not match its config")
    return model, header.get("meta", {})


def load_checkpoint(path) -> tuple[Model, dict]:
    return loads_checkpoint(Path(path).read_bytes())
