"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, track_kinks


class KinkProximityError(ValueError):
    """The check point lies too close to a non-differentiable point."""


def relative_error(analytic, numeric):
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def grad_check(
    op,
    inputs,
    h=1e-5,
    dtype=np.float64,
    seed=0,
    wrt=None,
    min_kink_margin=None,
    min_pool_margin=None,
    require_stable_branches=True,
):
    """Maximum relative error between reverse-mode and central-difference
    gradients of ``op`` at ``inputs``.

    ``op`` maps Tensors to a Tensor; a non-scalar output is reduced with a
    fixed random projection.  ``wrt`` restricts the check to a subset of
    input indices (others are treated as constants).  With
    ``min_kink_margin`` set, the check refuses to run when any relu-like op
    sees an input within that distance of its kink; ``min_pool_margin`` does
    the same for max-pooling near-ties.  With ``require_stable_branches``
    every perturbed evaluation must take the same discrete branches (relu
    masks, pooling argmaxes, clip ranges) as the unperturbed one, so the
    difference quotient never straddles a kink.
    """
    arrays = [np.array(a, dtype=dtype) for a in inputs]
    wrt = range(len(arrays)) if wrt is None else list(wrt)

    tensors = [Tensor(a, requires_grad=(k in wrt)) for k, a in enumerate(arrays)]
    with track_kinks() as kinks:
        out = op(*tensors)
    if min_kink_margin is not None and kinks.margin < min_kink_margin:
        raise KinkProximityError(f"kink margin {kinks.margin:.3g} < {min_kink_margin:.3g}")
    if min_pool_margin is not None and kinks.pool_margin < min_pool_margin:
        raise KinkProximityError(f"pooling margin {kinks.pool_margin:.3g} < {min_pool_margin:.3g}")
    branches = kinks.branches
    projection = np.random.default_rng(seed).standard_normal(out.shape).astype(dtype)
    (out * projection).sum().backward()

    def scalar():
        with track_kinks() as perturbed:
            value = op(*(Tensor(a) for a in arrays))
        if require_stable_branches and perturbed.branches != branches:
            raise KinkProximityError("a finite-difference step crossed a kink")
        return float(np.sum(value.data * projection))

    worst = 0.0
    for k in wrt:
        analytic = tensors[k].grad
        if analytic is None:
            analytic = np.zeros_like(arrays[k])
        flat = arrays[k].reshape(-1)
        numeric = np.empty(flat.size)
        for idx in range(flat.size):
            saved = flat[idx]
            flat[idx] = saved + h
            up = scalar()
            flat[idx] = saved - h
            down = scalar()
            flat[idx] = saved
            numeric[idx] = (up - down) / (2.0 * h)
        if flat.size:
            worst = max(worst, float(relative_error(analytic.reshape(-1), numeric).max()))
    return worst
