"""Shared test oracles: central finite differences and gradient comparison."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from metaood import diffcore as dc


def finite_difference(f: Callable[[], float], arrays: Sequence[dc.Array],
                      step: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradients of a re-evaluable scalar function.

    ``f`` must recompute the loss from the current ``.data`` of ``arrays``
    each call; entries are perturbed in place and restored.
    """
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr.data)
        flat = arr.data.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f()
            flat[i] = orig - step
            fm = f()
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * step)
        grads.append(g)
    return grads


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Max-norm relative error between gradient tensors.

    Central differences at step 1e-5 carry ~1e-10 roundoff on O(1) losses,
    so gradients below that floor on both sides are indistinguishable from
    zero and compare as equal (e.g. a bias with exactly-zero sensitivity).
    """
    denom = max(np.max(np.abs(b)), np.max(np.abs(a)))
    if denom < 1e-7:
        return 0.0
    return float(np.max(np.abs(a - b)) / denom)


def check_gradients(build_loss: Callable[[], dc.Array], params: Sequence[dc.Array],
                    tol: float = 1e-4, step: float = 1e-5) -> float:
    """Run backward on the loss and compare every param grad to central FD.

    ``build_loss`` is called inside a fresh tape for the analytic pass and
    re-called (outside any tape) for each FD probe. Returns the worst
    relative error seen; asserts it is below ``tol``.
    """
    with dc.Tape():
        loss = build_loss()
    dc.backward(loss, leaves=params)
    analytic = [p.grad.copy() for p in params]

    numeric = finite_difference(lambda: build_loss().item(), params, step=step)
    worst = 0.0
    for got, want in zip(analytic, numeric):
        worst = max(worst, rel_err(got, want))
    assert worst < tol, f"gradient mismatch: rel err {worst:.3e} >= {tol}"
    return worst
