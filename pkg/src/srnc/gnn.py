"""Two-layer GCN used for both the classifier and the cluster network, plus Adam."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import (Value, add_bias, dense_matmul, mul_mask, relu, row_softmax,
                       spmm)
from .exceptions import DivergenceError

CHECKPOINT_MAGIC = b"SRNCCKPT"
PARAM_NAMES = ("W1", "b1", "W2", "b2")


@dataclass
class ModelConfig:
    hidden: int = 256
    layers: int = 2
    dropout_rate: float = 0.0
    learning_rate: float = 0.01
    weight_decay: float = 5e-4
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.layers != 2:
            raise ValueError("only 2-layer GCNs are supported")
        if self.hidden < 1:
            raise ValueError("hidden must be positive")


@dataclass
class GcnParams:
    W1: Value
    b1: Value
    W2: Value
    b2: Value

    def values(self) -> list:
        return [self.W1, self.b1, self.W2, self.b2]

    def named(self) -> list:
        return list(zip(PARAM_NAMES, self.values()))

    @property
    def in_dim(self) -> int:
        return self.W1.shape[0]

    @property
    def out_dim(self) -> int:
        return self.W2.shape[1]

    def snapshot(self) -> dict:
        return {name: v.data.copy() for name, v in self.named()}

    @classmethod
    def from_arrays(cls, arrays: dict) -> "GcnParams":
        return cls(*(Value(np.array(arrays[n], dtype=np.float64), requires_grad=True)
                     for n in PARAM_NAMES))

    def copy(self) -> "GcnParams":
        return GcnParams.from_arrays(self.snapshot())

    def load(self, arrays: dict) -> None:
        for name, v in self.named():
            v.data[...] = arrays[name]


def glorot_uniform(fan_in: int, fan_out: int, rng) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_params(cfg: ModelConfig, in_dim: int, out_dim: int, rng=None) -> GcnParams:
    """Glorot-uniform weights and zero biases, deterministic under ``cfg.seed``."""
    if in_dim < 1 or out_dim < 1:
        raise ValueError("layer dimensions must be positive")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    w1 = glorot_uniform(in_dim, cfg.hidden, rng)
    w2 = glorot_uniform(cfg.hidden, out_dim, rng)
    return GcnParams.from_arrays({
        "W1": w1, "b1": np.zeros((1, cfg.hidden)),
        "W2": w2, "b2": np.zeros((1, out_dim)),
    })


def gcn_forward(params: GcnParams, op, x, *, ax: Optional[np.ndarray] = None,
                dropout_rate: float = 0.0, rng=None):
    """Return ``(hidden, probs)`` for a 2-layer GCN.

    hidden = relu(A X W1 + b1), probs = softmax(A hidden W2 + b2).
    ``ax`` may carry a precomputed ``A @ X`` (the product is associative and
    the features are constant), which avoids a sparse product per call.
    """
    n = op.shape[0]
    x_arr = x.data if isinstance(x, Value) else np.asarray(x)
    if x_arr.shape[0] != n or x_arr.shape[1] != params.in_dim:
        raise ValueError(f"features {x_arr.shape} incompatible with operator {op.shape} "
                         f"and W1 {params.W1.shape}")
    training = dropout_rate > 0.0 and rng is not None
    if training:
        keep = (rng.random(x_arr.shape) >= dropout_rate) / (1.0 - dropout_rate)
        first = spmm(op, dense_matmul(mul_mask(x, keep), params.W1))
    elif ax is not None:
        first = dense_matmul(ax, params.W1)
    else:
        first = spmm(op, dense_matmul(x, params.W1))
    hidden = relu(add_bias(first, params.b1))
    h = hidden
    if training:
        keep = (rng.random(hidden.shape) >= dropout_rate) / (1.0 - dropout_rate)
        h = mul_mask(hidden, keep)
    logits = add_bias(spmm(op, dense_matmul(h, params.W2)), params.b2)
    return hidden, row_softmax(logits)


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: GcnParams) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params.values()],
                   [np.zeros_like(p.data) for p in params.values()])


def adam_step(params, grads, state: AdamState, learning_rate: float,
              weight_decay: float = 0.0) -> None:
    """One in-place Adam update; weight decay is classical L2 on the gradient."""
    values = params.values() if isinstance(params, GcnParams) else list(params)
    grads = list(grads)
    if len(grads) != len(values):
        raise ValueError("adam_step: parameter and gradient counts differ")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise DivergenceError("non-finite gradient in adam_step", module="gnn")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in values]
        state.v = [np.zeros_like(p.data) for p in values]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(values, grads, state.m, state.v):
        if p.data.shape != g.shape:
            raise ValueError(f"adam_step: grad shape {g.shape} != param {p.data.shape}")
        if weight_decay:
            g = g + weight_decay * p.data
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps)


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, tensors: dict) -> None:
    """Write named 2-D tensors: magic, u64 count, then per tensor
    (u64 name length, UTF-8 name, u64 rows, u64 cols, f64 row-major data)."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(np.atleast_2d(arr), dtype="<f8")
            if arr.ndim != 2:
                raise ValueError(f"tensor {name!r} is not 2-D")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<Q", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<QQ", *arr.shape))
            fh.write(arr.tobytes(order="C"))


def load_checkpoint(path) -> dict:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an SRNC checkpoint")
    pos = 8
    (count,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        rows, cols = struct.unpack_from("<QQ", data, pos)
        pos += 16
        nbytes = rows * cols * 8
        if pos + nbytes > len(data):
            raise ValueError(f"{path}: truncated tensor {name!r}")
        out[name] = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=pos).reshape(rows, cols).copy()
        pos += nbytes
    return out


def params_to_tensors(params: GcnParams, prefix: str = "") -> dict:
    return {prefix + name: arr for name, arr in params.snapshot().items()}


def params_from_tensors(tensors: dict, prefix: str = "") -> GcnParams:
    return GcnParams.from_arrays({n: tensors[prefix + n] for n in PARAM_NAMES})
