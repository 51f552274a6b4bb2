"""Numerical core: a small reverse-mode autodiff, MLP evaluation and RAdam.

Only the primitives the collaborative pipeline needs are provided (affine
maps, ReLU, softmax, bilinear forms / weighted sums via ``einsum``, and
cross-entropy).  Everything runs in float64.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DomainError, ShapeError, StateError, TrainingError

__all__ = [
    "Var",
    "as_var",
    "einsum",
    "add",
    "linear",
    "mul",
    "scale",
    "relu",
    "softmax",
    "softmax_row",
    "cross_entropy",
    "backward",
    "DenseParams",
    "mlp_forward",
    "glorot_params",
    "RAdam",
]


class Var:
    """A node in the computation graph.

    ``value`` is always a float64 ndarray.  Nodes built from at least one
    tracked input keep a reference to their parents and a closure that pushes
    the output gradient back to them.
    """

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Var, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Var{tag}(shape={self.value.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _node(value: np.ndarray, parents: Sequence[Var], back) -> Var:
    out = Var(value)
    tracked = tuple(p for p in parents if p.requires_grad)
    if tracked:
        out.requires_grad = True
        out._parents = tracked
        out._backward = back
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)

    def back(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _node(a.value + b.value, (a, b), back)


def mul(a, b) -> Var:
    """Elementwise product with numpy broadcasting."""
    a, b = as_var(a), as_var(b)

    def back(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.value, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.value, b.shape))

    return _node(a.value * b.value, (a, b), back)


def scale(a, c: float) -> Var:
    a = as_var(a)

    def back(g):
        a._accumulate(g * c)

    return _node(a.value * c, (a,), back)


def einsum(subscripts: str, *operands) -> Var:
    """Differentiable ``np.einsum`` with explicit output (``'ij,jk->ik'``).

    Subscripts may not repeat an index inside one operand.
    """
    if "->" not in subscripts:
        raise ValueError("einsum subscripts need an explicit output")
    if "." in subscripts:
        raise ValueError("ellipsis subscripts are not supported")
    ins, out = subscripts.replace(" ", "").split("->")
    in_subs = ins.split(",")
    if len(in_subs) != len(operands):
        raise ShapeError(f"einsum expects {len(in_subs)} operands, got {len(operands)}")
    ops = [as_var(o) for o in operands]
    for s, o in zip(in_subs, ops):
        if len(s) != o.value.ndim:
            raise ShapeError(f"einsum operand '{s}' has shape {o.shape}")
    try:
        value = np.einsum(subscripts, *(o.value for o in ops), optimize=True)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc

    def back(g):
        for k, (sk, ok) in enumerate(zip(in_subs, ops)):
            if not ok.requires_grad:
                continue
            others = [(s, o.value) for m, (s, o) in enumerate(zip(in_subs, ops)) if m != k]
            avail = set(out).union(*(set(s) for s, _ in others))
            kept = "".join(c for c in sk if c in avail)
            expr = ",".join([out] + [s for s, _ in others]) + "->" + kept
            gk = np.einsum(expr, g, *(v for _, v in others), optimize=True)
            if kept != sk:
                # indices summed away inside operand k alone: broadcast back
                idx = tuple(slice(None) if c in avail else None for c in sk)
                gk = np.broadcast_to(gk[idx], ok.shape)
            ok._accumulate(gk)

    return _node(np.asarray(value, dtype=np.float64), ops, back)


def linear(x, w) -> Var:
    """``x @ w.T`` for ``x`` of shape (..., in) and ``w`` of shape (out, in)."""
    x, w = as_var(x), as_var(w)
    if x.value.shape[-1] != w.value.shape[1]:
        raise ShapeError(f"input dim {x.value.shape[-1]} != weight input {w.value.shape[1]}")

    def back(g):
        if x.requires_grad:
            x._accumulate(g @ w.value)
        if w.requires_grad:
            w._accumulate(g.reshape(-1, g.shape[-1]).T @ x.value.reshape(-1, x.value.shape[-1]))

    return _node(x.value @ w.value.T, (x, w), back)


def relu(a) -> Var:
    a = as_var(a)
    mask = a.value > 0

    def back(g):
        a._accumulate(g * mask)

    return _node(np.where(mask, a.value, 0.0), (a,), back)


def _softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a, axis: int = -1) -> Var:
    a = as_var(a)
    if a.value.size == 0 or a.value.shape[axis] == 0:
        raise DomainError("softmax of an empty vector")
    p = _softmax(a.value, axis)

    def back(g):
        a._accumulate(p * (g - (g * p).sum(axis=axis, keepdims=True)))

    return _node(p, (a,), back)


def softmax_row(scores) -> np.ndarray:
    """Max-stabilised softmax of a 1-D score vector."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1:
        raise ShapeError(f"expected a vector, got shape {s.shape}")
    if s.size == 0:
        raise DomainError("softmax of an empty vector")
    if not np.all(np.isfinite(s)):
        raise DomainError("softmax scores must be finite")
    return _softmax(s)


def cross_entropy(logits, labels) -> Var:
    """Mean of ``-log softmax(logits)[label]`` over all leading positions.

    ``logits`` has shape ``(..., C)`` and ``labels`` the leading shape.  A
    single vector with a scalar label gives the plain per-sample loss.
    """
    logits = as_var(logits)
    labels = np.asarray(labels)
    n_classes = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise ShapeError(f"labels shape {labels.shape} vs logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise DomainError(f"label out of range for {n_classes} classes")
    z = logits.value - logits.value.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logz
    picked = np.take_along_axis(logp, labels[..., None].astype(np.intp), axis=-1)[..., 0]
    count = max(labels.size, 1)
    loss = -picked.sum() / count

    def back(g):
        grad = np.exp(logp)
        np.put_along_axis(
            grad, labels[..., None].astype(np.intp),
            np.take_along_axis(grad, labels[..., None].astype(np.intp), axis=-1) - 1.0,
            axis=-1,
        )
        logits._accumulate(grad * (g / count))

    return _node(np.asarray(loss), (logits,), back)


def backward(loss: Var, wrt: Iterable[Var] | None = None) -> dict:
    """Reverse pass from a scalar ``loss``.

    Each recorded node is visited exactly once, in reverse topological
    order.  Returns ``{leaf: grad}`` for the requested leaves (all tracked
    leaves when ``wrt`` is None); leaves that do not influence the loss get a
    zero gradient.
    """
    if not isinstance(loss, Var) or loss.value.size != 1:
        raise StateError("backward needs a scalar Var")
    wrt = list(wrt) if wrt is not None else None
    if not loss.requires_grad:
        if wrt is None:
            raise StateError("nothing recorded: loss does not depend on tracked parameters")
        return {v: np.zeros_like(v.value) for v in wrt}

    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    leaves = []
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad if node.grad is not None else np.zeros_like(node.value))
        else:
            leaves.append(node)
    targets = wrt if wrt is not None else leaves
    return {
        v: (v.grad if v.grad is not None else np.zeros_like(v.value)) for v in targets
    }


@dataclass
class DenseParams:
    """Affine/ReLU stack: ReLU on hidden layers, identity on the output."""

    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise ShapeError("one bias per weight matrix")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            wv, bv = as_var(w).value, as_var(b).value
            if wv.ndim != 2 or bv.shape != (wv.shape[0],):
                raise ShapeError(f"layer {l}: weight {wv.shape} / bias {bv.shape}")
            if l and wv.shape[1] != as_var(self.weights[l - 1]).value.shape[0]:
                raise ShapeError(f"layer {l} input {wv.shape[1]} does not chain")

    @property
    def sizes(self) -> list[int]:
        if not self.weights:
            return []
        dims = [as_var(self.weights[0]).value.shape[1]]
        dims += [as_var(w).value.shape[0] for w in self.weights]
        return dims

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def named_arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}{l}.weight"] = w
            out[f"{prefix}{l}.bias"] = b
        return out

    def with_arrays(self, arrays: dict, prefix: str = "") -> "DenseParams":
        """Same structure, parameters taken from ``arrays`` (e.g. tracked Vars)."""
        return DenseParams(
            [arrays[f"{prefix}{l}.weight"] for l in range(self.n_layers)],
            [arrays[f"{prefix}{l}.bias"] for l in range(self.n_layers)],
        )

    def is_finite(self) -> bool:
        return all(
            np.all(np.isfinite(as_var(a).value)) for a in self.named_arrays().values()
        )


def glorot_params(sizes: Sequence[int], rng: np.random.Generator) -> DenseParams:
    """Uniform(+-sqrt(6/(fan_in+fan_out))) weights, zero biases."""
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return DenseParams(weights, biases)


def mlp_forward(params: DenseParams, x, start: int = 0, stop: int | None = None):
    """Evaluate layers ``[start, stop)`` of the stack on ``x`` (..., in).

    Returns an ndarray when neither input nor parameters are tracked Vars,
    otherwise a Var recorded for ``backward``.
    """
    stop = params.n_layers if stop is None else stop
    plain = not isinstance(x, Var) and not any(
        isinstance(a, Var) for a in params.named_arrays().values()
    )
    h = np.asarray(x, dtype=np.float64) if plain else as_var(x)
    if start < stop:
        w0 = as_var(params.weights[start]).value
        if np.shape(as_var(h).value)[-1] != w0.shape[1]:
            raise ShapeError(
                f"input dim {np.shape(as_var(h).value)[-1]} != layer input {w0.shape[1]}"
            )
    last = params.n_layers - 1
    for l in range(start, stop):
        w, b = params.weights[l], params.biases[l]
        if plain:
            h = h @ w.T + b
            if l < last:
                h = np.maximum(h, 0.0)
        else:
            h = add(linear(h, w), b)
            if l < last:
                h = relu(h)
    return h


class RAdam:
    """Rectified Adam over a dict of named float64 arrays, updated in place."""

    def __init__(self, lr: float = 1e-5, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.rho_inf = 2.0 / (1.0 - self.beta2) - 1.0

    def rho(self, t: int) -> float:
        b2t = self.beta2**t
        return self.rho_inf - 2.0 * t * b2t / (1.0 - b2t)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            if name not in params:
                raise ShapeError(f"gradient for unknown parameter {name!r}")
            if g.shape != params[name].shape:
                raise ShapeError(f"{name}: grad {g.shape} vs param {params[name].shape}")
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient for {name!r}; step aborted")

        self.t += 1
        t = self.t
        b1, b2 = self.beta1, self.beta2
        rho_t = self.rho(t)
        rectified = rho_t > 4.0
        if rectified:
            r_t = math.sqrt(
                (rho_t - 4.0) * (rho_t - 2.0) * self.rho_inf
                / ((self.rho_inf - 4.0) * (self.rho_inf - 2.0) * rho_t)
            )
        for name, g in grads.items():
            p = params[name]
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            m_hat = m / (1.0 - b1**t)
            if rectified:
                v_hat = v / (1.0 - b2**t)
                p -= self.lr * r_t * m_hat / (np.sqrt(v_hat) + self.eps)
            else:
                p -= self.lr * m_hat
