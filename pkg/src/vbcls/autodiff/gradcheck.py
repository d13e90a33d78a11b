from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

from vbcls.autodiff.tensor import Tensor, backward, no_grad, relu_monitor, reset_tape
from vbcls.errors import ConfigurationError, NumericInstabilityError


def _named(params) -> list[tuple[str, Tensor]]:
    if isinstance(params, Mapping):
        return list(params.items())
    if isinstance(params, Tensor):
        return [("p0", params)]
    return [(f"p{i}", p) for i, p in enumerate(params)]


def analytic_gradients(loss_fn: Callable[[], Tensor], params) -> dict[str, np.ndarray]:
    named = _named(params)
    reset_tape()
    loss = loss_fn()
    backward(loss, [p for _, p in named])
    return {name: p.grad.copy() for name, p in named}


def _evaluate(loss_fn):
    with no_grad(), relu_monitor() as pattern:
        value = loss_fn().item()
    if not np.isfinite(value):
        raise NumericInstabilityError(f"loss is not finite at a perturbed point ({value})")
    return value, pattern


def finite_diff_check(loss_fn: Callable[[], Tensor], params, h: float = 1e-5,
                      analytic: Mapping[str, np.ndarray] | None = None,
                      stats: dict | None = None) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``loss_fn`` takes no arguments and must read the current values of
    ``params``. Coordinates whose +h and -h evaluations see different relu
    sign patterns straddle a kink and are skipped. Pass ``analytic`` to check
    a gradient obtained some other way; otherwise it comes from ``backward``.
    If ``stats`` is given it receives ``checked``/``skipped`` counts and the
    worst coordinate.
    """
    if not h > 0:
        raise ConfigurationError(f"step must be positive, got {h}")
    named = _named(params)
    if analytic is None:
        analytic = analytic_gradients(loss_fn, params)

    worst, worst_at = 0.0, None
    checked = skipped = 0
    for name, p in named:
        flat = p.data.reshape(-1)
        g = np.asarray(analytic[name], dtype=np.float64).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up, pat_up = _evaluate(loss_fn)
            flat[i] = orig - h
            down, pat_down = _evaluate(loss_fn)
            flat[i] = orig
            if pat_up != pat_down:
                skipped += 1
                continue
            numeric = (up - down) / (2 * h)
            err = abs(g[i] - numeric) / max(abs(g[i]), abs(numeric), 1e-8)
            checked += 1
            if err > worst:
                worst, worst_at = err, (name, i, float(g[i]), numeric)
    if stats is not None:
        stats.update(checked=checked, skipped=skipped, worst=worst_at)
    return worst
