"""Minimal reverse-mode differentiation over 2-D float64 matrices.

Only the operators the SRNC losses need are provided. Every op returns a
:class:`Value` whose ``_backward`` closure adds vector-Jacobian products
into the gradients of its inputs.

Gradient semantics: ``Value.backward`` resets the gradients of all
intermediate nodes before the pass and *accumulates* into leaves, so two
backward passes without :func:`zero_grad` double the leaf gradients.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

LOG_EPS = 1e-10


class Value:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), op=""):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ValueError(f"Value holds 2-D matrices, got shape {arr.shape}")
        self.data = arr
        self.grad = np.zeros_like(arr)
        self.requires_grad = bool(requires_grad or any(p.requires_grad for p in _parents))
        self._parents = tuple(_parents)
        self._backward = None
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on non-scalar Value of shape {self.shape}")
        return float(self.data[0, 0])

    def __repr__(self):
        return f"Value(shape={self.shape}, op={self.op or 'leaf'})"

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        tape = build_tape(self)
        for node in tape:
            if not node.is_leaf:
                node.grad = np.zeros_like(node.data)
        self.grad = self.grad + 1.0 if self.is_leaf else np.ones_like(self.data)
        for node in reversed(tape):
            if node._backward is not None and node.requires_grad:
                node._backward(node.grad)


def build_tape(root: Value) -> list:
    """Topological order of the graph feeding ``root`` (inputs first)."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def zero_grad(values: Iterable[Value]) -> None:
    for v in values:
        v.grad = np.zeros_like(v.data)


def _as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def _accumulate(v: Value, g: np.ndarray) -> None:
    if v.requires_grad:
        v.grad += g


def _check_inner(a_shape, b_shape, what):
    if a_shape[1] != b_shape[0]:
        raise ValueError(f"{what}: shape mismatch {a_shape} @ {b_shape}")


# --------------------------------------------------------------------------
# linear ops


def dense_matmul(a, b) -> Value:
    a, b = _as_value(a), _as_value(b)
    _check_inner(a.shape, b.shape, "dense_matmul")
    out = Value(a.data @ b.data, _parents=(a, b), op="matmul")

    def _backward(g):
        if a.requires_grad:
            a.grad += g @ b.data.T
        if b.requires_grad:
            b.grad += a.data.T @ g

    out._backward = _backward
    return out


def _sparse(s):
    if hasattr(s, "matrix"):
        s = s.matrix
    if not sp.issparse(s):
        raise TypeError("spmm expects a scipy sparse matrix or NormalizedOperator")
    return s.tocsr()


def spmm(s, x) -> Value:
    """Y = S X for a sparse S (normally the symmetric GCN operator)."""
    s = _sparse(s)
    x = _as_value(x)
    _check_inner(s.shape, x.shape, "spmm")
    out = Value(np.asarray(s @ x.data), _parents=(x,), op="spmm")

    def _backward(g):
        if x.requires_grad:
            # transpose of CSR is a free CSC view; equals S for GCN operators
            x.grad += np.asarray(s.T @ g)

    out._backward = _backward
    return out


def add_bias(x, b) -> Value:
    x, b = _as_value(x), _as_value(b)
    if b.shape != (1, x.shape[1]):
        raise ValueError(f"add_bias: bias shape {b.shape} does not match {x.shape}")
    out = Value(x.data + b.data, _parents=(x, b), op="add_bias")

    def _backward(g):
        _accumulate(x, g)
        if b.requires_grad:
            b.grad += g.sum(axis=0, keepdims=True)

    out._backward = _backward
    return out


def select_rows(x, ids) -> Value:
    x = _as_value(x)
    ids = np.asarray(ids, dtype=np.int64)
    out = Value(x.data[ids], _parents=(x,), op="select_rows")

    def _backward(g):
        if x.requires_grad:
            np.add.at(x.grad, ids, g)

    out._backward = _backward
    return out


def scalar_combine(terms: Sequence[Value], weights: Sequence[float]) -> Value:
    """Weighted sum of scalar Values."""
    terms = [_as_value(t) for t in terms]
    if len(terms) != len(weights):
        raise ValueError("scalar_combine: terms and weights differ in length")
    for t in terms:
        if t.data.size != 1:
            raise ValueError(f"scalar_combine expects scalars, got {t.shape}")
    total = sum(float(w) * t.item() for t, w in zip(terms, weights))
    out = Value(total, _parents=tuple(terms), op="combine")

    def _backward(g):
        for t, w in zip(terms, weights):
            _accumulate(t, g * float(w))

    out._backward = _backward
    return out


def mul_mask(x, mask) -> Value:
    """Elementwise product with a constant array (used for dropout)."""
    x = _as_value(x)
    mask = np.asarray(mask, dtype=np.float64)
    out = Value(x.data * mask, _parents=(x,), op="mul_mask")

    def _backward(g):
        _accumulate(x, g * mask)

    out._backward = _backward
    return out


def total_sum(x) -> Value:
    x = _as_value(x)
    out = Value(x.data.sum(), _parents=(x,), op="sum")

    def _backward(g):
        _accumulate(x, np.full_like(x.data, g.item()))

    out._backward = _backward
    return out


# --------------------------------------------------------------------------
# nonlinear ops


def relu(x) -> Value:
    x = _as_value(x)
    mask = x.data > 0
    # np.maximum propagates NaN so divergence stays visible
    out = Value(np.maximum(x.data, 0.0), _parents=(x,), op="relu")

    def _backward(g):
        _accumulate(x, g * mask)

    out._backward = _backward
    return out


def row_softmax(x) -> Value:
    x = _as_value(x)
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    out = Value(p, _parents=(x,), op="softmax")

    def _backward(g):
        if x.requires_grad:
            x.grad += p * (g - (g * p).sum(axis=1, keepdims=True))

    out._backward = _backward
    return out


def clamp_min(x, eps: float = LOG_EPS) -> Value:
    """max(x, eps) with zero gradient on clamped entries."""
    x = _as_value(x)
    keep = x.data >= eps
    out = Value(np.where(keep, x.data, eps), _parents=(x,), op="clamp")

    def _backward(g):
        _accumulate(x, g * keep)

    out._backward = _backward
    return out


def row_log(x) -> Value:
    x = _as_value(x)
    if (x.data <= 0).any():
        raise ValueError("row_log on non-positive entries; clamp first")
    out = Value(np.log(x.data), _parents=(x,), op="log")

    def _backward(g):
        _accumulate(x, g / x.data)

    out._backward = _backward
    return out


# --------------------------------------------------------------------------
# losses


def cross_entropy_rows(probs, targets, eps: float = LOG_EPS) -> Value:
    """-(1/n) sum_i sum_j t_ij log(max(p_ij, eps))."""
    probs = _as_value(probs)
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != probs.shape:
        raise ValueError(f"cross_entropy_rows: targets {t.shape} vs probs {probs.shape}")
    n = probs.shape[0]
    if n == 0:
        raise ValueError("cross_entropy_rows on zero rows")
    keep = probs.data >= eps
    clamped = np.where(probs.data < eps, eps, probs.data)
    out = Value(-(t * np.log(clamped)).sum() / n, _parents=(probs,), op="cross_entropy")

    def _backward(g):
        _accumulate(probs, -g.item() * keep * t / (clamped * n))

    out._backward = _backward
    return out


def kl_rows(p, q, eps: float = LOG_EPS) -> Value:
    """(1/n) sum_i KL(p_i || q_i); ``p`` is a constant, gradient flows into ``q``."""
    q = _as_value(q)
    p = np.asarray(p, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"kl_rows: shape mismatch {p.shape} vs {q.shape}")
    n = q.shape[0]
    if n == 0:
        raise ValueError("kl_rows on zero rows")
    keep = q.data >= eps
    qc = np.where(q.data < eps, eps, q.data)
    pos = p > 0
    plogp = np.where(pos, p * np.log(np.where(pos, p, 1.0)), 0.0)
    value = (plogp - p * np.log(qc)).sum() / n
    out = Value(value, _parents=(q,), op="kl")

    def _backward(g):
        _accumulate(q, -g.item() * keep * p / (qc * n))

    out._backward = _backward
    return out


def trace_quadratic(s, q) -> Value:
    """Tr(Q^T S Q) for symmetric sparse S, via a single sparse product."""
    s = _sparse(s)
    q = _as_value(q)
    _check_inner(s.shape, q.shape, "trace_quadratic")
    sq = np.asarray(s @ q.data)
    out = Value(float((q.data * sq).sum()), _parents=(q,), op="trace_quadratic")

    def _backward(g):
        _accumulate(q, 2.0 * g.item() * sq)

    out._backward = _backward
    return out


def rank_one_quadratic(d, q) -> Value:
    """||d^T Q||^2 = Tr(Q^T d d^T Q) without forming the outer product."""
    q = _as_value(q)
    d = np.asarray(d, dtype=np.float64).ravel()
    if d.shape[0] != q.shape[0]:
        raise ValueError(f"rank_one_quadratic: len(d)={d.shape[0]} vs Q rows {q.shape[0]}")
    dq = d @ q.data
    out = Value(float(dq @ dq), _parents=(q,), op="rank_one_quadratic")

    def _backward(g):
        _accumulate(q, 2.0 * g.item() * np.outer(d, dq))

    out._backward = _backward
    return out


def collapse_penalty(q) -> Value:
    """sqrt(C)/n * ||sum_i q_i||_2 - 1, the cluster-size regularizer of DMoN."""
    q = _as_value(q)
    n, c = q.shape
    col = q.data.sum(axis=0)
    norm = float(np.sqrt(col @ col))
    out = Value(np.sqrt(c) / n * norm - 1.0, _parents=(q,), op="collapse")

    def _backward(g):
        if norm > 0:
            _accumulate(q, np.broadcast_to(g.item() * np.sqrt(c) / n * col / norm, q.shape))

    out._backward = _backward
    return out


# --------------------------------------------------------------------------
# verification


def gradcheck(f: Callable[..., Value], leaves: Sequence[Value], h: float = 1e-4,
              floor: float = 1e-7) -> float:
    """Worst relative error between tape gradients and central differences.

    ``f`` is called with ``leaves`` and must return a scalar Value. Relative
    error per entry is ``|a - n| / max(|a|, |n|, floor)``.
    """
    zero_grad(leaves)
    out = f(*leaves)
    if out.data.size != 1:
        raise ValueError("gradcheck: f must return a scalar Value")
    out.backward()
    analytic = [leaf.grad.copy() for leaf in leaves]
    worst = 0.0
    for leaf, ana in zip(leaves, analytic):
        flat = leaf.data.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            fp = f(*leaves).item()
            flat[idx] = orig - h
            fm = f(*leaves).item()
            flat[idx] = orig
            num = (fp - fm) / (2 * h)
            a = ana.reshape(-1)[idx]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    zero_grad(leaves)
    return worst
