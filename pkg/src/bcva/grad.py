"""Reverse-mode automatic differentiation over dense float64 tensors.

A Tape records every operation in execution order; backward() walks the
record once in reverse, accumulating chain-rule gradients into per-node
buffers. All randomness (sampling noise, init) is supplied by the caller as
plain arrays, so a recorded graph is a pure deterministic function of its
leaves.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


class GradError(RuntimeError):
    """Shape mismatch, non-finite value, or misuse of the tape."""


class Tensor:
    """A value recorded on a tape; gradients live in the tape's buffers."""

    __slots__ = ("tape", "node_id", "data")

    def __init__(self, tape: "Tape", node_id: int, data: np.ndarray):
        self.tape = tape
        self.node_id = node_id
        self.data = data

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def grad(self) -> Optional[np.ndarray]:
        return self.tape.grad_of(self)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(id={self.node_id}, shape={self.shape})"


class Tape:
    """Ordered operation record; recording order is the topological order."""

    def __init__(self):
        self._shapes: list[tuple[int, ...]] = []
        self._pullbacks: list[Optional[Callable]] = []
        self._needs: list[bool] = []
        self._grads: Optional[list[Optional[np.ndarray]]] = None

    def __len__(self) -> int:
        return len(self._shapes)

    def leaf(self, data) -> Tensor:
        """A differentiable input (parameters)."""
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise GradError("leaf value contains non-finite entries")
        return self._append(arr, None, needs=True)

    def constant(self, data) -> Tensor:
        """A non-differentiable input (batch data, noise); backward skips it."""
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise GradError("constant value contains non-finite entries")
        return self._append(arr, None, needs=False)

    def needs_grad(self, tensor: Tensor) -> bool:
        return self._needs[tensor.node_id]

    def _append(self, value, pullback, needs: bool) -> Tensor:
        node_id = len(self._shapes)
        self._shapes.append(value.shape)
        self._pullbacks.append(pullback)
        self._needs.append(needs)
        self._grads = None  # any new node invalidates previous backward results
        return Tensor(self, node_id, value)

    def record(
        self, op: str, value: np.ndarray, parents: Sequence[Tensor], pullback: Callable
    ) -> Tensor:
        if not np.all(np.isfinite(value)):
            raise GradError(f"op {op!r} produced non-finite values")
        needs = any(self._needs[p.node_id] for p in parents)
        return self._append(value, pullback, needs=needs)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(node) for every node reachable from `loss`."""
        if loss.tape is not self:
            raise GradError("loss tensor belongs to a different tape")
        if loss.data.shape != ():
            raise GradError(f"loss must be scalar, got shape {loss.data.shape}")
        grads: list[Optional[np.ndarray]] = [None] * len(self._shapes)
        grads[loss.node_id] = np.ones(())
        for nid in range(loss.node_id, -1, -1):
            g = grads[nid]
            pullback = self._pullbacks[nid]
            if g is None or pullback is None or not self._needs[nid]:
                continue
            for pid, contribution in pullback(g):
                if not self._needs[pid]:
                    continue
                if grads[pid] is None:
                    grads[pid] = np.zeros(self._shapes[pid])
                grads[pid] += contribution
        self._grads = grads

    def grad_of(self, tensor: Tensor) -> Optional[np.ndarray]:
        if self._grads is None:
            return None
        return self._grads[tensor.node_id]


def _tape_of(*tensors: Tensor) -> Tape:
    tape = tensors[0].tape
    for t in tensors[1:]:
        if t.tape is not tape:
            raise GradError("operands recorded on different tapes")
    return tape


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    tape = _tape_of(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise GradError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    value = a.data @ b.data
    needs_a, needs_b = tape.needs_grad(a), tape.needs_grad(b)

    def pullback(g):
        out = []
        if needs_a:
            out.append((a.node_id, g @ b.data.T))
        if needs_b:
            out.append((b.node_id, a.data.T @ g))
        return out

    return tape.record("matmul", value, (a, b), pullback)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; `b` may be a scalar or a 1-D bias over the last axis."""
    tape = _tape_of(a, b)
    if b.shape == a.shape:
        reduce_b = None
    elif b.shape == ():
        reduce_b = "all"
    elif b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0]:
        reduce_b = "leading"
    else:
        raise GradError(f"add shape mismatch: {a.shape} + {b.shape}")
    value = a.data + b.data

    def pullback(g):
        if reduce_b is None:
            gb = g
        elif reduce_b == "all":
            gb = g.sum()
        else:
            gb = g.reshape(-1, b.shape[0]).sum(axis=0)
        return [(a.node_id, g), (b.node_id, gb)]

    return tape.record("add", value, (a, b), pullback)


def add_const(a: Tensor, c) -> Tensor:
    c = np.asarray(c, dtype=np.float64)
    if np.broadcast_shapes(a.shape, c.shape) != a.shape:
        raise GradError(f"add_const shape mismatch: {a.shape} + {c.shape}")
    return a.tape.record("add_const", a.data + c, (a,), lambda g: [(a.node_id, g)])


def scale(a: Tensor, k: float) -> Tensor:
    k = float(k)
    return a.tape.record("scale", a.data * k, (a,), lambda g: [(a.node_id, g * k)])


def mul_const(a: Tensor, c) -> Tensor:
    c = np.asarray(c, dtype=np.float64)
    if np.broadcast_shapes(a.shape, c.shape) != a.shape:
        raise GradError(f"mul_const shape mismatch: {a.shape} * {c.shape}")
    return a.tape.record("mul_const", a.data * c, (a,), lambda g: [(a.node_id, g * c)])


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return a.tape.record("relu", np.where(mask, a.data, 0.0), (a,),
                         lambda g: [(a.node_id, g * mask)])


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return a.tape.record("tanh", y, (a,), lambda g: [(a.node_id, g * (1.0 - y * y))])


def softplus(a: Tensor) -> Tensor:
    y = np.logaddexp(0.0, a.data)
    return a.tape.record("softplus", y, (a,),
                         lambda g: [(a.node_id, g * _sigmoid(a.data))])


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return a.tape.record("exp", y, (a,), lambda g: [(a.node_id, g * y)])


def log(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore", divide="ignore"):
        y = np.log(a.data)
    return a.tape.record("log", y, (a,), lambda g: [(a.node_id, g / a.data)])


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors the numpy name
    value = np.asarray(a.data.sum())
    return a.tape.record("sum", value, (a,),
                         lambda g: [(a.node_id, np.broadcast_to(g, a.shape).copy())])


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    value = np.asarray(a.data.mean())
    return a.tape.record(
        "mean", value, (a,),
        lambda g: [(a.node_id, np.broadcast_to(g / n, a.shape).copy())],
    )


def log_sum_exp(a: Tensor, axis: int = -1) -> Tensor:
    m = np.max(a.data, axis=axis, keepdims=True)
    shifted = np.exp(a.data - m)
    total = shifted.sum(axis=axis, keepdims=True)
    value = np.squeeze(m + np.log(total), axis=axis)
    softmax = shifted / total

    def pullback(g):
        return [(a.node_id, softmax * np.expand_dims(g, axis=axis))]

    return a.tape.record("log_sum_exp", value, (a,), pullback)


def huber(a: Tensor, delta: float = 1.0) -> Tensor:
    """Elementwise Huber penalty: quadratic inside |x| <= delta, linear outside."""
    delta = float(delta)
    absx = np.abs(a.data)
    small = absx <= delta
    value = np.where(small, 0.5 * a.data * a.data, delta * (absx - 0.5 * delta))

    def pullback(g):
        return [(a.node_id, g * np.clip(a.data, -delta, delta))]

    return a.tape.record("huber", value, (a,), pullback)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip with pass-through gradient strictly inside [lo, hi]."""
    inside = (a.data >= lo) & (a.data <= hi)
    return a.tape.record("clamp", np.clip(a.data, lo, hi), (a,),
                         lambda g: [(a.node_id, g * inside)])


def gaussian_reparam_sample(mean_t: Tensor, log_std: Tensor, noise) -> Tensor:
    """Reparameterized draw mean + exp(log_std) * noise, noise a fixed array."""
    tape = _tape_of(mean_t, log_std)
    noise = np.asarray(noise, dtype=np.float64)
    if mean_t.shape != log_std.shape or noise.shape != mean_t.shape:
        raise GradError(
            f"gaussian_reparam_sample shape mismatch: mean {mean_t.shape}, "
            f"log_std {log_std.shape}, noise {noise.shape}"
        )
    std = np.exp(log_std.data)
    value = mean_t.data + std * noise

    def pullback(g):
        return [(mean_t.node_id, g), (log_std.node_id, g * noise * std)]

    return tape.record("gaussian_reparam_sample", value, (mean_t, log_std), pullback)


def diag_gaussian_log_prob(x: Tensor, mean_t: Tensor, log_std: Tensor) -> Tensor:
    """Row-wise diagonal-Gaussian log density, summed over the last axis.

    `mean_t`/`log_std` either match `x` or are 1-D and broadcast over rows.
    """
    tape = _tape_of(x, mean_t, log_std)
    if mean_t.shape != log_std.shape:
        raise GradError(
            f"diag_gaussian_log_prob mean/log_std mismatch: {mean_t.shape} vs {log_std.shape}"
        )
    broadcast = mean_t.shape != x.shape
    if broadcast and not (mean_t.data.ndim == 1 and x.shape[-1] == mean_t.shape[0]):
        raise GradError(
            f"diag_gaussian_log_prob shape mismatch: x {x.shape}, mean {mean_t.shape}"
        )
    diff = x.data - mean_t.data
    inv_var = np.exp(-2.0 * log_std.data)
    per_dim = -0.5 * LOG_2PI - log_std.data - 0.5 * diff * diff * inv_var
    value = per_dim.sum(axis=-1)

    def pullback(g):
        ge = np.expand_dims(g, -1)
        gx = ge * (-diff * inv_var)
        gmean = -gx
        glog = ge * (-1.0 + diff * diff * inv_var)
        if broadcast:
            gmean = gmean.reshape(-1, mean_t.shape[0]).sum(axis=0)
            glog = glog.reshape(-1, mean_t.shape[0]).sum(axis=0)
        return [(x.node_id, gx), (mean_t.node_id, gmean), (log_std.node_id, glog)]

    return tape.record("diag_gaussian_log_prob", value, (x, mean_t, log_std), pullback)


def tile_rows(a: Tensor, reps: int) -> Tensor:
    """Repeat a 2-D tensor `reps` times along axis 0."""
    if a.data.ndim != 2 or reps < 1:
        raise GradError(f"tile_rows: need a 2-D operand and reps >= 1, got {a.shape}")
    value = np.tile(a.data, (reps, 1))
    rows = a.shape[0]

    def pullback(g):
        return [(a.node_id, g.reshape(reps, rows, -1).sum(axis=0))]

    return a.tape.record("tile_rows", value, (a,), pullback)


def select_row(a: Tensor, index: int) -> Tensor:
    if a.data.ndim != 2 or not 0 <= index < a.shape[0]:
        raise GradError(f"select_row: invalid row {index} for shape {a.shape}")

    def pullback(g):
        full = np.zeros(a.shape)
        full[index] = g
        return [(a.node_id, full)]

    return a.tape.record("select_row", a.data[index].copy(), (a,), pullback)


def column_stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack 1-D tensors of equal length as columns of a 2-D result."""
    tape = _tape_of(*tensors)
    if any(t.data.ndim != 1 or t.shape != tensors[0].shape for t in tensors):
        raise GradError("column_stack requires equal-length 1-D operands")
    value = np.stack([t.data for t in tensors], axis=1)
    ids = [t.node_id for t in tensors]

    def pullback(g):
        return [(nid, g[:, k].copy()) for k, nid in enumerate(ids)]

    return tape.record("column_stack", value, tuple(tensors), pullback)


# ---------------------------------------------------------------------------
# parameters and optimizer


class ParamStore:
    """Named parameter arrays with gradient slots and Adam moment state."""

    def __init__(self):
        self._params: dict[str, np.ndarray] = {}
        self._grads: dict[str, Optional[np.ndarray]] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, value) -> None:
        if name in self._params:
            raise GradError(f"duplicate parameter name {name!r}")
        arr = np.asarray(value, dtype=np.float64)
        self._params[name] = arr
        self._grads[name] = None
        self._m[name] = np.zeros_like(arr)
        self._v[name] = np.zeros_like(arr)

    def names(self) -> list[str]:
        return list(self._params)

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> np.ndarray:
        return self._params[name]

    def __setitem__(self, name: str, value) -> None:
        arr = np.asarray(value, dtype=np.float64)
        if name not in self._params:
            self.add(name, arr)
            return
        if arr.shape != self._params[name].shape:
            raise GradError(
                f"parameter {name!r}: shape {arr.shape} != {self._params[name].shape}"
            )
        self._params[name] = arr

    def grad(self, name: str) -> Optional[np.ndarray]:
        return self._grads[name]

    def zero_grads(self) -> None:
        for name in self._grads:
            self._grads[name] = None

    def bind(self, tape: Tape) -> dict[str, Tensor]:
        """Register every parameter as a leaf on `tape`."""
        return {name: tape.leaf(value) for name, value in self._params.items()}

    def harvest(self, bound: dict[str, Tensor]) -> None:
        """Copy gradients from bound leaves after backward; missing ones are zero."""
        for name, tensor in bound.items():
            g = tensor.grad
            self._grads[name] = np.zeros_like(self._params[name]) if g is None else g

    def state_dict(self) -> dict[str, np.ndarray]:
        return dict(self._params)


def adam_step(
    store: ParamStore,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps_hat: float = 1e-8,
) -> None:
    """One bias-corrected Adam update over every parameter in the store."""
    for name in store.names():
        if store.grad(name) is None:
            raise GradError(f"adam_step: parameter {name!r} has no gradient")
    store.step_count += 1
    t = store.step_count
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name in store.names():
        g = store.grad(name)
        m = store._m[name]
        v = store._v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        store._params[name] = store._params[name] - lr * (m / bc1) / (
            np.sqrt(v / bc2) + eps_hat
        )
