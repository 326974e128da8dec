"""Minimal reverse-mode autodiff over float64 numpy arrays.

Small enough to audit, big enough to train the per-step MLPs, recurrent
summarizers and bilinear maps used by the rest of the package. Losses are
scalars, so reverse mode over a recorded graph is the right shape.
"""

from __future__ import annotations

import numpy as np


class GradError(Exception):
    """Raised on shape mismatches or invalid backward calls."""


def _as_array(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a


class Tensor:
    """A node in the computation graph.

    ``value`` is an immutable-by-convention float64 ndarray. Leaf tensors
    (parameters, inputs) have no parents; interior nodes remember their
    parents and a closure that routes the incoming adjoint to them.
    """

    __slots__ = ("value", "grad", "_parents", "_backward", "name")

    def __init__(self, value, parents=(), backward=None, name=None):
        self.value = _as_array(value)
        self.grad = None
        self._parents = parents
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    # ---- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __neg__(self):
        return mul(self, _lift(-1.0))

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __getitem__(self, idx):
        return tslice(self, idx)

    def item(self) -> float:
        if self.value.size != 1:
            raise GradError("item() on non-scalar tensor of shape %s" % (self.shape,))
        return float(self.value)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, name={self.name})"


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x, name=None) -> Tensor:
    return Tensor(x, name=name)


# ---- primitive ops ------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum grad down to `shape` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        val = a.value + b.value
    except ValueError:
        raise GradError(f"add: incompatible shapes {a.shape} vs {b.shape}")

    def backward(g, out):
        return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))

    return Tensor(val, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        val = a.value - b.value
    except ValueError:
        raise GradError(f"sub: incompatible shapes {a.shape} vs {b.shape}")

    def backward(g, out):
        return (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))

    return Tensor(val, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        val = a.value * b.value
    except ValueError:
        raise GradError(f"mul: incompatible shapes {a.shape} vs {b.shape}")

    def backward(g, out):
        return (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape))

    return Tensor(val, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise GradError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    val = a.value @ b.value

    def backward(g, out):
        return (g @ b.value.T, a.value.T @ g)

    return Tensor(val, (a, b), backward)


def tanh(a: Tensor) -> Tensor:
    val = np.tanh(a.value)

    def backward(g, out):
        return (g * (1.0 - out.value ** 2),)

    return Tensor(val, (a,), backward)


def relu(a: Tensor) -> Tensor:
    val = np.maximum(a.value, 0.0)

    def backward(g, out):
        return (g * (a.value > 0.0),)

    return Tensor(val, (a,), backward)


def exp(a: Tensor) -> Tensor:
    val = np.exp(a.value)

    def backward(g, out):
        return (g * out.value,)

    return Tensor(val, (a,), backward)


def log(a: Tensor) -> Tensor:
    val = np.log(a.value)

    def backward(g, out):
        return (g / a.value,)

    return Tensor(val, (a,), backward)


def square(a: Tensor) -> Tensor:
    val = a.value ** 2

    def backward(g, out):
        return (g * 2.0 * a.value,)

    return Tensor(val, (a,), backward)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes through inside [lo, hi], zero outside."""
    val = np.clip(a.value, lo, hi)

    def backward(g, out):
        mask = (a.value >= lo) & (a.value <= hi)
        return (g * mask,)

    return Tensor(val, (a,), backward)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    val = a.value.sum(axis=axis, keepdims=keepdims)

    def backward(g, out):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor(val, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.value.size if axis is None else a.value.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def concat(parts, axis=0) -> Tensor:
    parts = [_lift(p) for p in parts]
    val = np.concatenate([p.value for p in parts], axis=axis)
    sizes = [p.value.shape[axis] for p in parts]

    def backward(g, out):
        splits = np.cumsum(sizes)[:-1]
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(val, tuple(parts), backward)


def tslice(a: Tensor, idx) -> Tensor:
    val = a.value[idx]

    def backward(g, out):
        full = np.zeros_like(a.value)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor(val, (a,), backward)


def transpose(a: Tensor) -> Tensor:
    val = a.value.T

    def backward(g, out):
        return (g.T,)

    return Tensor(val, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    val = a.value.reshape(shape)

    def backward(g, out):
        return (g.reshape(a.shape),)

    return Tensor(val, (a,), backward)


def stop_gradient(a: Tensor) -> Tensor:
    """Value passes through; the adjoint is cut to exactly zero."""

    def backward(g, out):
        return (np.zeros_like(a.value),)

    return Tensor(a.value, (a,), backward)


def logsumexp(a: Tensor, axis=-1) -> Tensor:
    m = a.value.max(axis=axis, keepdims=True)
    val = np.log(np.exp(a.value - m).sum(axis=axis)) + np.squeeze(m, axis=axis)

    def backward(g, out):
        soft = np.exp(a.value - np.expand_dims(out.value, axis))
        return (np.expand_dims(np.asarray(g), axis) * soft,)

    return Tensor(val, (a,), backward)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of integer labels under row-wise softmax."""
    labels = np.asarray(labels)
    n = logits.shape[0]
    lse = logsumexp(logits, axis=-1)
    picked = tslice(logits, (np.arange(n), labels))
    return tmean(lse - picked)


def ste_round(a: Tensor) -> Tensor:
    """Round forward, identity backward (straight-through)."""
    val = np.round(a.value)

    def backward(g, out):
        return (g,)

    return Tensor(val, (a,), backward)


def ste_to(a: Tensor, target: np.ndarray) -> Tensor:
    """Forward value `target`, gradient identity to `a`.

    The standard straight-through wiring  a + sg[target - a]  collapsed into
    one node; target must match a's shape.
    """
    target = _as_array(target)
    if target.shape != a.value.shape:
        raise GradError(f"ste_to: target shape {target.shape} != input {a.shape}")

    def backward(g, out):
        return (g,)

    return Tensor(target, (a,), backward)


# ---- backward pass ------------------------------------------------------


def _topo(root: Tensor):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into each reachable leaf's .grad."""
    if loss.value.size != 1:
        raise GradError("backward requires a scalar loss, got shape %s" % (loss.shape,))
    if not np.isfinite(loss.value).all():
        raise GradError("non-finite loss value in backward")
    order = _topo(loss)
    adj = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = adj.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.value)
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g, node)):
            pid = id(parent)
            if pid in adj:
                adj[pid] = adj[pid] + pg
            else:
                adj[pid] = pg


# ---- parameter store ----------------------------------------------------


class ParamStore:
    """Named parameter tensors with gradient accumulators and a step count."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.step_count = 0

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise GradError(f"duplicate parameter name: {name}")
        t = Tensor(value, name=name)
        t.grad = np.zeros_like(t.value)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def names(self):
        return list(self._params.keys())

    def items(self):
        return self._params.items()

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad[...] = 0.0

    def sgd_step(self, lr: float) -> None:
        """Plain gradient descent; lr may be 0 (no-op by construction)."""
        if lr != 0.0:
            for t in self._params.values():
                t.value = t.value - lr * t.grad
        self.step_count += 1

    def adam_step(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                  eps: float = 1e-8, sign: float = 1.0) -> None:
        """Adam update; sign=-1 ascends. lr=0 leaves values bit-identical."""
        if lr != 0.0:
            if not hasattr(self, "_adam_m"):
                self._adam_m = {k: np.zeros_like(t.value) for k, t in self._params.items()}
                self._adam_v = {k: np.zeros_like(t.value) for k, t in self._params.items()}
                self._adam_t = 0
            self._adam_t += 1
            b1t = 1.0 - beta1 ** self._adam_t
            b2t = 1.0 - beta2 ** self._adam_t
            for k, t in self._params.items():
                g = sign * t.grad
                self._adam_m[k] = beta1 * self._adam_m[k] + (1 - beta1) * g
                self._adam_v[k] = beta2 * self._adam_v[k] + (1 - beta2) * g * g
                mhat = self._adam_m[k] / b1t
                vhat = self._adam_v[k] / b2t
                t.value = t.value - lr * mhat / (np.sqrt(vhat) + eps)
        self.step_count += 1

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.value.copy() for k, t in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            t = self._params[k]
            v = _as_array(v)
            if v.shape != t.value.shape:
                raise GradError(f"shape mismatch loading {k}: {v.shape} vs {t.value.shape}")
            t.value = v.copy()
            t.grad = np.zeros_like(t.value)


# ---- finite-difference checking -----------------------------------------


def finite_diff_check(loss_fn, store: ParamStore, epsilon: float = 1e-5,
                      max_coords_per_param: int = 64, rng=None) -> dict:
    """Compare analytic gradients against central finite differences.

    ``loss_fn`` rebuilds the graph from the store's current values and
    returns a scalar Tensor. Parameters with more than
    ``max_coords_per_param`` coordinates are sampled (count reported).
    Returns a report dict with max_rel_error and the worst parameter.
    """
    if epsilon <= 0:
        raise GradError("epsilon must be positive")
    rng = rng or np.random.default_rng(0)
    store.zero_grads()
    loss = loss_fn()
    backward(loss)
    analytic = {k: t.grad.copy() for k, t in store.items()}

    max_rel = 0.0
    worst = None
    checked = 0
    for name, t in store.items():
        flat = t.value.reshape(-1)
        n = flat.size
        if n <= max_coords_per_param:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + epsilon
            hi = loss_fn().item()
            flat[c] = orig - epsilon
            lo = loss_fn().item()
            flat[c] = orig
            fd = (hi - lo) / (2.0 * epsilon)
            an = analytic[name].reshape(-1)[c]
            scale = max(abs(fd), abs(an), 1.0)
            rel = abs(fd - an) / scale
            checked += 1
            if rel > max_rel:
                max_rel = rel
                worst = (name, int(c), float(an), float(fd))
    return {
        "max_rel_error": max_rel,
        "worst_param": worst,
        "coords_checked": checked,
    }
