"""Central finite-difference checks for scalar losses over sampled parameter entries."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np
import torch


@dataclass
class GradCheckResult:
    n_checked: int
    max_rel_error: float
    worst: tuple[str, int, float, float]  # (param name, flat index, analytic, numeric)


def relative_error(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def fd_check(loss_fn: Callable[[], torch.Tensor], named_params: Iterable[tuple[str, torch.nn.Parameter]],
             fraction: float = 0.01, h: float = 1e-4, rng: np.random.Generator | None = None,
             min_per_param: int = 1) -> GradCheckResult:
    """Compare autograd against (L(x+h) - L(x-h)) / 2h on a random subset of entries.

    ``loss_fn`` must be deterministic (no dropout, fixed inputs).  Use float64
    parameters; at h=1e-4 float32 round-off alone exceeds a 1e-3 tolerance.
    """
    rng = rng or np.random.default_rng(0)
    params = [(n, p) for n, p in named_params if p.requires_grad]
    for _, p in params:
        p.grad = None
    loss_fn().backward()
    analytic = {n: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
                for n, p in params}
    worst, max_err, count = ("", -1, 0.0, 0.0), 0.0, 0
    with torch.no_grad():
        for name, p in params:
            flat = p.view(-1)
            k = max(min_per_param, int(round(fraction * flat.numel())))
            for j in rng.choice(flat.numel(), min(k, flat.numel()), replace=False):
                j = int(j)
                orig = flat[j].item()
                flat[j] = orig + h
                up = loss_fn().item()
                flat[j] = orig - h
                down = loss_fn().item()
                flat[j] = orig
                num = (up - down) / (2 * h)
                ana = analytic[name].view(-1)[j].item()
                err = relative_error(ana, num)
                count += 1
                if err >= max_err:
                    max_err, worst = err, (name, j, ana, num)
    return GradCheckResult(count, max_err, worst)
