"""Central finite-difference gradient oracle shared by the autodiff tests."""

from __future__ import annotations

import numpy as np

from bcva.grad import Tape


def finite_diff(value_fn, arrays, h=1e-5):
    """Central-difference gradients of scalar value_fn() w.r.t. each array.

    value_fn must recompute the scalar from the arrays' current contents;
    entries are perturbed in place and restored.
    """
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = value_fn()
            flat[i] = orig - h
            fm = value_fn()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def max_rel_err(analytic, numeric, floor=1e-3):
    """Worst elementwise |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic)
    n = np.asarray(numeric)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / scale))


def check_gradients(build, arrays, rel_tol=1e-5, h=1e-5):
    """Compare tape gradients of build(tape, leaves)->scalar against FD."""

    def value():
        tape = Tape()
        leaves = [tape.leaf(a) for a in arrays]
        return build(tape, leaves).item()

    tape = Tape()
    leaves = [tape.leaf(a) for a in arrays]
    loss = build(tape, leaves)
    tape.backward(loss)
    analytic = [
        leaf.grad if leaf.grad is not None else np.zeros_like(arr)
        for leaf, arr in zip(leaves, arrays)
    ]
    numeric = finite_diff(value, arrays, h=h)
    worst = max(max_rel_err(a, n) for a, n in zip(analytic, numeric))
    assert worst <= rel_tol, f"gradient mismatch: worst relative error {worst:.3e}"
    return worst
