"""LSTM cell and linear heads, single-sample API plus batched kernels.

The batched kernels (``lstm_forward`` / ``lstm_backward``) come from the
compiled ``_kernels`` extension when it is importable, otherwise from the
numpy implementation in ``_kernels_py``.  Set ``ACTVAE_BACKEND`` to
``python`` or ``cython`` to force one (``auto`` is the default).
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import _kernels_py
from .core import Rng

try:
    from . import _kernels as _ext
except ImportError:  # extension not built
    _ext = None

__all__ = [
    "CellParams",
    "CellState",
    "LinearHead",
    "available_backends",
    "backend",
    "set_backend",
    "lstm_forward",
    "lstm_backward",
    "cell_step",
    "cell_step_backward",
    "head_apply",
    "init_cell",
    "init_head",
]

_impl = _kernels_py
_backend_name = "python"


def available_backends() -> list[str]:
    return ["python"] + (["cython"] if _ext is not None else [])


def set_backend(name: str) -> str:
    """Select the kernel backend; returns the name actually in use."""
    global _impl, _backend_name
    if name == "auto":
        name = "cython" if _ext is not None else "python"
    if name == "cython":
        if _ext is None:
            raise RuntimeError("the compiled kernel extension is not available")
        _impl, _backend_name = _ext, "cython"
    elif name == "python":
        _impl, _backend_name = _kernels_py, "python"
    else:
        raise ValueError(f"unknown backend {name!r}")
    return _backend_name


def backend() -> str:
    return _backend_name


set_backend(os.environ.get("ACTVAE_BACKEND", "auto"))


def lstm_forward(W, b, xh, c_prev):
    return _impl.lstm_forward(W, b, xh, c_prev)


def lstm_backward(W, xh, c_prev, c, act, dh, dc, dW, db):
    return _impl.lstm_backward(W, xh, c_prev, c, act, dh, dc, dW, db)


@dataclass(frozen=True)
class CellParams:
    W: np.ndarray  # (4H, input_dim + H), gates (i, f, g, o)
    b: np.ndarray  # (4H,)

    def __post_init__(self):
        W = np.ascontiguousarray(self.W)
        b = np.ascontiguousarray(self.b, dtype=W.dtype)
        if W.ndim != 2 or W.shape[0] % 4 or W.shape[1] <= W.shape[0] // 4:
            raise ValueError(f"bad gate weight shape {W.shape}")
        if b.shape != (W.shape[0],):
            raise ValueError(f"gate bias shape {b.shape} does not match {W.shape}")
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
            raise ValueError("cell parameters must be finite")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "b", b)

    @property
    def hidden_dim(self) -> int:
        return self.W.shape[0] // 4

    @property
    def input_dim(self) -> int:
        return self.W.shape[1] - self.hidden_dim


@dataclass(frozen=True)
class CellState:
    hidden: np.ndarray
    memory: np.ndarray

    def __post_init__(self):
        if np.shape(self.hidden) != np.shape(self.memory):
            raise ValueError("hidden and memory must have equal shape")

    @classmethod
    def zeros(cls, hidden_dim: int, batch: int | None = None, dtype=np.float64) -> "CellState":
        shape = (hidden_dim,) if batch is None else (batch, hidden_dim)
        return cls(np.zeros(shape, dtype), np.zeros(shape, dtype))


@dataclass(frozen=True)
class LinearHead:
    weight: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray  # (out_dim,)

    def __post_init__(self):
        w = np.asarray(self.weight)
        if w.ndim != 2 or np.shape(self.bias) != (w.shape[0],):
            raise ValueError(f"inconsistent head shapes {w.shape}, {np.shape(self.bias)}")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


def cell_step(params: CellParams, state: CellState, x: np.ndarray) -> CellState:
    """One LSTM update for a single input vector (or a batch of rows)."""
    x = np.asarray(x, dtype=params.W.dtype)
    H = params.hidden_dim
    if x.shape[-1] != params.input_dim:
        raise ValueError(f"input length {x.shape[-1]} != input_dim {params.input_dim}")
    if state.hidden.shape[-1] != H:
        raise ValueError(f"state size {state.hidden.shape[-1]} != hidden_dim {H}")
    single = x.ndim == 1
    xh = np.concatenate([np.atleast_2d(x), np.atleast_2d(state.hidden).astype(x.dtype)], axis=1)
    c_prev = np.ascontiguousarray(np.atleast_2d(state.memory), dtype=x.dtype)
    h, c, _ = lstm_forward(params.W, params.b, np.ascontiguousarray(xh), c_prev)
    if single:
        return CellState(h[0], c[0])
    return CellState(h, c)


def cell_step_backward(params: CellParams, state: CellState, x: np.ndarray,
                       d_hidden: np.ndarray, d_memory: np.ndarray):
    """Gradients of ``<d_hidden, h'> + <d_memory, c'>`` for one :func:`cell_step`.

    Returns ``(dW, db, dx, CellState(dh_prev, dc_prev))``.
    """
    dt = params.W.dtype
    x2 = np.atleast_2d(np.asarray(x, dtype=dt))
    xh = np.ascontiguousarray(np.concatenate([x2, np.atleast_2d(state.hidden).astype(dt)], axis=1))
    c_prev = np.ascontiguousarray(np.atleast_2d(state.memory), dtype=dt)
    _, c, act = lstm_forward(params.W, params.b, xh, c_prev)
    dW = np.zeros_like(params.W)
    db = np.zeros_like(params.b)
    dh = np.ascontiguousarray(np.atleast_2d(d_hidden), dtype=dt)
    dc = np.ascontiguousarray(np.atleast_2d(d_memory), dtype=dt)
    dxh, dc_prev = lstm_backward(params.W, xh, c_prev, c, act, dh, dc, dW, db)
    I = params.input_dim
    dx, dh_prev = dxh[:, :I], dxh[:, I:]
    if np.ndim(x) == 1:
        dx, dh_prev, dc_prev = dx[0], dh_prev[0], dc_prev[0]
    return dW, db, dx, CellState(dh_prev, dc_prev)


def head_apply(head: LinearHead, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.shape[-1] != head.in_dim:
        raise ValueError(f"input length {x.shape[-1]} != head in_dim {head.in_dim}")
    return x @ head.weight.T + head.bias


def _check_dims(*dims: int) -> None:
    for d in dims:
        if int(d) != d or d <= 0:
            raise ValueError(f"dimensions must be positive integers, got {dims}")


def init_cell(input_dim: int, hidden_dim: int, rng: Rng, dtype=np.float32) -> CellParams:
    """Uniform(+-1/sqrt(fan_in)) weights, forget-gate bias 1, other biases 0."""
    _check_dims(input_dim, hidden_dim)
    fan_in = input_dim + hidden_dim
    bound = 1.0 / np.sqrt(fan_in)
    W = rng.uniform(-bound, bound, (4 * hidden_dim, fan_in)).astype(dtype)
    b = np.zeros(4 * hidden_dim, dtype)
    b[hidden_dim : 2 * hidden_dim] = 1.0
    return CellParams(W, b)


def init_head(in_dim: int, out_dim: int, rng: Rng, dtype=np.float32) -> LinearHead:
    _check_dims(in_dim, out_dim)
    bound = 1.0 / np.sqrt(in_dim)
    return LinearHead(rng.uniform(-bound, bound, (out_dim, in_dim)).astype(dtype),
                      np.zeros(out_dim, dtype))
