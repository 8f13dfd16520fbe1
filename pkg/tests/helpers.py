"""Shared test utilities: directional finite-difference checks and tiny fixtures."""
from __future__ import annotations

import numpy as np

from mmprompt.autograd import Parameter, Tape, backward


def rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def directional_check(loss_fn, params, n_dirs=20, eps=1e-6, seed=0):
    """Compare autograd directional derivatives with central differences.

    ``loss_fn()`` builds a scalar Tensor from the current parameter values.
    Returns the worst relative error over ``n_dirs`` random unit directions.
    """
    with Tape() as tape:
        loss = loss_fn()
    grads = backward(loss, tape)
    rng = np.random.default_rng(seed)
    base = {p: p.data.copy() for p in params}
    worst = 0.0
    for _ in range(n_dirs):
        dirs = {p: rng.standard_normal(p.shape) for p in params}
        norm = np.sqrt(sum(float((d * d).sum()) for d in dirs.values()))
        dirs = {p: d / norm for p, d in dirs.items()}
        analytic = sum(float((grads.get(p, np.zeros(p.shape)) * dirs[p]).sum()) for p in params)
        vals = []
        for sgn in (1.0, -1.0):
            for p in params:
                p.assign(base[p] + sgn * eps * dirs[p])
            vals.append(float(loss_fn().data))
        for p in params:
            p.assign(base[p])
        numeric = (vals[0] - vals[1]) / (2 * eps)
        worst = max(worst, rel_err(analytic, numeric))
    return worst


def leaf(arr, name="x"):
    return Parameter(np.asarray(arr, dtype=np.float64), name)
