"""Central-difference gradient verification against the tape."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import NumericalError
from .tensor import Tensor, backward, no_grad


@dataclass
class GradcheckEntry:
    name: str
    size: int
    max_rel_error: float
    max_abs_error: float


@dataclass
class GradcheckReport:
    tol: float
    h: float
    entries: list[GradcheckEntry] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return all(e.max_rel_error < self.tol for e in self.entries)

    def table(self) -> str:
        lines = [f"{'parameter':<32} {'size':>6} {'max rel err':>12}  status"]
        for e in self.entries:
            status = "ok" if e.max_rel_error < self.tol else "FAIL"
            lines.append(f"{e.name:<32} {e.size:>6} {e.max_rel_error:>12.3e}  {status}")
        return "\n".join(lines)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)`` elementwise.

    ``floor`` keeps entries whose true gradient is ~0 from dividing roundoff
    noise by roundoff noise.
    """
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numeric_grad(f: Callable[[], Tensor], t: Tensor, h: float) -> np.ndarray:
    flat = t.data.reshape(-1)
    out = np.zeros(flat.size, dtype=np.float64)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(t.shape)


def gradcheck(
    f: Callable[[], Tensor],
    inputs: Mapping[str, Tensor] | Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-6,
    floor: float = 1e-6,
) -> GradcheckReport:
    """Compare tape gradients of the scalar ``f()`` w.r.t. ``inputs`` with central differences.

    ``f`` closes over the input tensors and is re-evaluated after each
    in-place perturbation, so it must read them afresh on every call.
    """
    named = dict(inputs) if isinstance(inputs, Mapping) else {f"input{i}": t for i, t in enumerate(inputs)}
    for t in named.values():
        if t.data.dtype != np.float64:
            raise NumericalError("gradcheck requires 64-bit inputs")
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None

    with no_grad():
        a, b = f().item(), f().item()
    if a != b:
        raise NumericalError(f"function is not deterministic: {a!r} != {b!r}")

    loss = f()
    backward(loss)
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for k, t in named.items()}

    report = GradcheckReport(tol=tol, h=h)
    for name, t in named.items():
        num = numeric_grad(f, t, h)
        rel = relative_error(analytic[name], num, floor)
        report.entries.append(
            GradcheckEntry(
                name=name,
                size=t.data.size,
                max_rel_error=float(rel.max()),
                max_abs_error=float(np.abs(analytic[name] - num).max()),
            )
        )
        t.grad = None
    return report
