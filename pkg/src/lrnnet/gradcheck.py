"""Central finite-difference checks for tape gradients."""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward


def numeric_grad(f: Callable[[], float], arr: np.ndarray, index, step: float) -> float:
    """(f(x+h) - f(x-h)) / 2h for one entry of ``arr``, restoring it afterwards."""
    old = arr[index]
    arr[index] = old + step
    fp = f()
    arr[index] = old - step
    fm = f()
    arr[index] = old
    return (fp - fm) / (2.0 * step)


def grad_check(op_closure: Callable[..., Tensor], inputs: Sequence[Tensor], step: float = 1e-5,
               max_entries: Optional[int] = None, seed: int = 0, params: Sequence[Tensor] = ()) -> float:
    """Max relative error between tape gradients and central differences.

    The scalar probed is ``sum(op_closure(*inputs) * R)`` with a fixed random
    projection ``R``, which catches transposition mistakes a plain sum would
    miss. ``params`` lists extra tensors captured by the closure that should
    also be checked. ``max_entries`` caps how many coordinates per tensor are
    probed (sampled without replacement).

    Error per coordinate is ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    rng = np.random.default_rng(seed)
    wrt = list(inputs) + list(params)
    for t in wrt:
        t.requires_grad = True
    with Tape() as tape:
        out = op_closure(*inputs)
    proj = rng.standard_normal(out.shape)
    analytic = backward(tape, proj, output=out)

    def objective() -> float:
        return float(np.sum(op_closure(*inputs).data * proj))

    worst = 0.0
    for t in wrt:
        a_full = analytic.get(t)
        if a_full is None:
            a_full = np.zeros(t.shape)
        flat = np.arange(t.data.size)
        if max_entries is not None and flat.size > max_entries:
            flat = rng.choice(flat, size=max_entries, replace=False)
        for k in flat:
            idx = np.unravel_index(k, t.shape)
            num = numeric_grad(objective, t.data, idx, step)
            ana = float(a_full[idx])
            err = abs(ana - num) / max(1e-8, abs(ana) + abs(num))
            worst = max(worst, err)
    return worst


def away_from_kinks(rng: np.random.Generator, shape, step: float, scale: float = 1.0) -> np.ndarray:
    """Standard-normal sample with every entry redrawn until it is >= 10*step from zero."""
    x = rng.standard_normal(shape) * scale
    bad = np.abs(x) < 10 * step
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum())) * scale
        bad = np.abs(x) < 10 * step
    return x
