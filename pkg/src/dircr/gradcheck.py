"""Central finite-difference checks of autograd gradients.

Compares directional derivatives: for unit directions ``v`` over all checked
tensors, ``<grad f, v>`` against ``(f(x + h v) - f(x - h v)) / 2h``.

Each direction is the normalised sum of the analytic gradient direction and a
random unit vector. A purely random direction over many parameters has a
directional derivative of order ``|grad f| / sqrt(n)``, which float32 roundoff
in ``f`` swamps at ``h = 1e-3``; the gradient component keeps the signal near
``|grad f|`` while the random component still probes every coordinate.

ReLU networks are only piecewise smooth, and a step of ``1e-3`` routinely
crosses a kink somewhere in a conv stack. The perturbed evaluations therefore
reuse the ReLU activation pattern recorded at the base point, so the finite
difference measures the smooth piece that autograd differentiates.
"""

from __future__ import annotations

from typing import Callable, Sequence

import torch
import torch.nn.functional as F
from torch.overrides import TorchFunctionMode

_RELUS = {torch.relu, F.relu, torch.Tensor.relu}


class FrozenRelu(TorchFunctionMode):
    """Records ReLU masks in call order, or replays previously recorded ones."""

    def __init__(self, masks: list[torch.Tensor] | None = None):
        super().__init__()
        self.replay = masks is not None
        self.masks = masks if masks is not None else []
        self.calls = 0

    def __torch_function__(self, func, types, args=(), kwargs=None):
        kwargs = kwargs or {}
        if func not in _RELUS:
            return func(*args, **kwargs)
        x = args[0]
        if self.replay:
            mask = self.masks[self.calls]
        else:
            mask = x > 0
            self.masks.append(mask)
        self.calls += 1
        return x * mask.to(x.dtype)


def directional_check(
    fn: Callable[[], torch.Tensor],
    tensors: Sequence[torch.Tensor],
    step: float = 1e-3,
    n_dirs: int = 3,
    seed: int = 0,
    tilt: bool = True,
) -> float:
    """Largest relative error over ``n_dirs`` random directions.

    ``fn`` must return a scalar and read ``tensors`` (leaf tensors or
    parameters) in place; they are perturbed and restored.
    """
    gen = torch.Generator().manual_seed(seed)
    tensors = list(tensors)
    worst = 0.0
    for _ in range(n_dirs):
        for t in tensors:
            t.grad = None
        with FrozenRelu() as rec:
            out = fn()
        grads = [
            torch.zeros_like(t) if g is None else g
            for g, t in zip(torch.autograd.grad(out, tensors, allow_unused=True), tensors)
        ]
        rand = _unit([torch.randn(t.shape, generator=gen, dtype=torch.float64) for t in tensors])
        if tilt:
            grad_dir = _unit([g.double() for g in grads])
            rand = _unit([r + q for r, q in zip(rand, grad_dir)])
        dirs = [d.to(t.dtype) for d, t in zip(rand, tensors)]
        analytic = sum(
            float((g.double() * d.double()).sum()) for g, d in zip(grads, dirs)
        )

        with torch.no_grad():
            for t, d in zip(tensors, dirs):
                t.add_(step * d)
            with FrozenRelu(rec.masks):
                f_plus = float(fn())
            for t, d in zip(tensors, dirs):
                t.sub_(2 * step * d)
            with FrozenRelu(rec.masks):
                f_minus = float(fn())
            for t, d in zip(tensors, dirs):
                t.add_(step * d)
        numeric = (f_plus - f_minus) / (2 * step)
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)
        worst = max(worst, rel)
    return worst


def _unit(parts: list[torch.Tensor]) -> list[torch.Tensor]:
    norm = torch.sqrt(sum((p**2).sum() for p in parts))
    if float(norm) == 0.0:
        return parts
    return [p / norm for p in parts]


def weighted_sum(out: torch.Tensor, seed: int = 1) -> torch.Tensor:
    """Reduce an output to a scalar with fixed random weights."""
    gen = torch.Generator().manual_seed(seed)
    w = torch.randn(out.shape, generator=gen, dtype=out.dtype)
    return (out * w).sum()
