from __future__ import annotations

from typing import Callable, Dict, Optional, Sequence

import numpy as np

from .autograd import Tensor, backward, no_grad


def numeric_grad(
    fn: Callable[[], Tensor],
    target: Tensor,
    h: float = 1e-5,
    coords: Optional[Sequence[int]] = None,
) -> Dict[int, float]:
    """Central differences of a scalar ``fn()`` w.r.t. flat coordinates of ``target``."""
    flat = target.data.reshape(-1)
    if coords is None:
        coords = range(flat.size)
    out: Dict[int, float] = {}
    with no_grad():
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            up = fn().item()
            flat[i] = orig - h
            down = fn().item()
            flat[i] = orig
            out[int(i)] = (up - down) / (2 * h)
    return out


def max_relative_error(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    floor: float = 1e-6,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``inputs`` must be leaves with ``requires_grad=True``. When ``max_coords`` is
    set, that many coordinates are sampled per input.
    """
    for t in inputs:
        t.grad = None
    backward(fn())
    worst = 0.0
    for t in inputs:
        analytic = (t.grad if t.grad is not None else np.zeros_like(t.data)).reshape(-1)
        size = t.data.size
        if max_coords is not None and size > max_coords:
            gen = rng or np.random.default_rng(0)
            coords = gen.choice(size, size=max_coords, replace=False)
        else:
            coords = range(size)
        for i, num in numeric_grad(fn, t, h=h, coords=coords).items():
            a = analytic[i]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    return worst
