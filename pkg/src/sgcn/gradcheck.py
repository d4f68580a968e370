"""Central finite-difference checks for the autodiff engine."""

from typing import Callable, Iterable, List, Optional, Sequence

import numpy as np

from .tensor import ReluPattern, Tape, Tensor, use_relu_pattern


def relative_error(analytic, numeric, floor: float = 1e-6) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def analytic_grads(loss_fn: Callable[[], Tensor], params: Sequence[Tensor]) -> List[np.ndarray]:
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


def numeric_grad(loss_fn: Callable[[], Tensor], p: Tensor, index, h: float = 1e-5) -> float:
    """Central difference of the scalar loss along one coordinate of ``p``."""
    old = p.data[index]
    p.data[index] = old + h
    up = loss_fn().item()
    p.data[index] = old - h
    down = loss_fn().item()
    p.data[index] = old
    return (up - down) / (2 * h)


def check_gradients(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
                    max_coords: Optional[int] = None, rng=None, freeze_relu: bool = False) -> float:
    """Largest relative error between tape gradients and central differences.

    ``loss_fn`` must be deterministic (no state updates between calls).  With
    ``max_coords`` only that many coordinates per parameter are probed.

    ``freeze_relu`` replays the activation masks of the analytic pass during
    the probes.  Deep nets with batch-statistic normalisation keep many relu
    inputs near zero, and a step of ``h`` would otherwise cross some of them;
    the derivative at the base point is unchanged by freezing.
    """
    rng = np.random.default_rng(rng)
    if freeze_relu:
        pattern = ReluPattern()
        with use_relu_pattern(pattern):
            grads = analytic_grads(loss_fn, params)

        def probe():
            pattern.rewind()
            with use_relu_pattern(pattern):
                return loss_fn()

        return _probe_all(probe, params, grads, h, max_coords, rng)
    grads = analytic_grads(loss_fn, params)
    return _probe_all(loss_fn, params, grads, h, max_coords, rng)


def _probe_all(loss_fn, params, grads, h, max_coords, rng) -> float:
    worst = 0.0
    for p, g in zip(params, grads):
        flat = np.arange(p.data.size)
        if max_coords is not None and p.data.size > max_coords:
            flat = rng.choice(p.data.size, max_coords, replace=False)
        for k in flat:
            idx = np.unravel_index(int(k), p.data.shape)
            num = numeric_grad(loss_fn, p, idx, h)
            worst = max(worst, float(relative_error(g[idx], num)))
    return worst
