"""Central finite-difference checks against tape gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Optional

import numpy as np

from . import ops
from .tensor import GradTape, Tensor


@dataclass
class ProbeResult:
    name: str
    index: tuple
    analytic: float
    numeric: float
    floor: float = 1e-6

    @property
    def rel_err(self) -> float:
        return relative_error(self.analytic, self.numeric, self.floor)


def relative_error(a: float, n: float, floor: float = 1e-6) -> float:
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps near-zero gradients from blowing up."""
    return abs(a - n) / max(abs(a), abs(n), floor)


def scalarize(fn: Callable[[], Tensor], seed: int = 0) -> Callable[[], Tensor]:
    """Turn a tensor-valued function into a scalar one via a fixed random projection."""
    weights: dict = {}

    def wrapped() -> Tensor:
        out = fn()
        if out.size == 1:
            return ops.reshape(out, ())
        if "w" not in weights:
            weights["w"] = np.random.default_rng(seed).standard_normal(out.shape).astype(out.dtype)
        return ops.sum(ops.mul(out, Tensor(weights["w"])))

    return wrapped


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor] | Iterable[Tensor],
    probes: Optional[int] = 3,
    eps: float = 1e-6,
    seed: int = 0,
    noise_ulps: float = 1e4,
) -> list[ProbeResult]:
    """Compare tape gradients of ``loss_fn()`` with central differences.

    ``probes`` random coordinates are checked per tensor (every coordinate when
    ``probes`` is None). ``loss_fn`` must be deterministic and return a scalar.

    Central differences cannot resolve gradients below the round-off level of
    the loss, about ``|L| * machine_eps / eps``. The relative-error floor of
    every probe is raised to ``noise_ulps`` times that level (never below 1e-6),
    so exactly-zero gradients are not failed on rounding noise alone.
    """
    if not isinstance(params, dict):
        params = {f"t{i}": t for i, t in enumerate(params)}
    for t in params.values():
        t.requires_grad = True
        t.grad = None
    with GradTape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    floor = max(1e-6, noise_ulps * float(np.finfo(loss.dtype).eps) * abs(float(loss.data)) / eps)

    rng = np.random.default_rng(seed)
    results = []
    for name, t in params.items():
        grad = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        if probes is None or probes >= flat.size:
            picks = range(flat.size)
        else:
            picks = rng.choice(flat.size, size=probes, replace=False)
        for k in picks:
            k = int(k)
            orig = flat[k]
            flat[k] = orig + eps
            up = float(loss_fn().data)
            flat[k] = orig - eps
            down = float(loss_fn().data)
            flat[k] = orig
            idx = np.unravel_index(k, t.shape)
            results.append(ProbeResult(name, tuple(int(i) for i in idx),
                                       float(grad.reshape(-1)[k]), (up - down) / (2 * eps), floor))
    return results


def max_rel_err(results: list[ProbeResult]) -> float:
    return max((r.rel_err for r in results), default=0.0)
