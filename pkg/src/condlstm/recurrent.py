"""LSTM layers with optional condition-initialized first hidden state.

Gate blocks are stacked in the order input, forget, candidate, output, and
every gate reads the concatenation ``[h_prev, x]``.  In conditioned mode the
bottom layer's hidden state at the first step is replaced by
``tanh(W_con @ conditions + b_con)``; the first cell state is still computed
from the first input so memory carries forward.  Upper layers start at zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import Rng, ShapeError, sigmoid

INIT_MODES = ("conditioned", "zero")


class UsageError(ValueError):
    pass


@dataclass
class LstmParams:
    W: np.ndarray  # (4*hidden, hidden + input)
    b: np.ndarray  # (4*hidden,)

    def __post_init__(self):
        if self.W.shape[0] % 4 or self.b.shape != (self.W.shape[0],):
            raise ShapeError(f"inconsistent LSTM shapes W{self.W.shape} b{self.b.shape}")
        if self.W.shape[1] <= self.hidden_size:
            raise ShapeError(f"W{self.W.shape} leaves no room for input columns")

    @classmethod
    def init(cls, input_size: int, hidden_size: int, rng: Rng, forget_bias: float = 1.0) -> LstmParams:
        fan_in = input_size + hidden_size
        W = rng.uniform_init((4 * hidden_size, fan_in), fan_in)
        b = np.zeros(4 * hidden_size)
        b[hidden_size : 2 * hidden_size] = forget_bias
        return cls(W, b)

    @classmethod
    def from_gates(cls, W_i, W_f, W_c, W_o, b_i, b_f, b_c, b_o) -> LstmParams:
        W = np.vstack([np.atleast_2d(np.asarray(w, dtype=np.float64)) for w in (W_i, W_f, W_c, W_o)])
        b = np.concatenate([np.atleast_1d(np.asarray(v, dtype=np.float64)) for v in (b_i, b_f, b_c, b_o)])
        return cls(W, b)

    @property
    def hidden_size(self) -> int:
        return self.W.shape[0] // 4

    @property
    def input_size(self) -> int:
        return self.W.shape[1] - self.hidden_size

    def _block(self, k: int):
        H = self.hidden_size
        return self.W[k * H : (k + 1) * H], self.b[k * H : (k + 1) * H]

    W_i = property(lambda self: self._block(0)[0])
    W_f = property(lambda self: self._block(1)[0])
    W_c = property(lambda self: self._block(2)[0])
    W_o = property(lambda self: self._block(3)[0])
    b_i = property(lambda self: self._block(0)[1])
    b_f = property(lambda self: self._block(1)[1])
    b_c = property(lambda self: self._block(2)[1])
    b_o = property(lambda self: self._block(3)[1])

    def params(self) -> dict[str, np.ndarray]:
        return {"W": self.W, "b": self.b}


@dataclass
class ConditionParams:
    W_con: np.ndarray  # (hidden, condition_len)
    b_con: np.ndarray  # (hidden,)

    @classmethod
    def init(cls, condition_len: int, hidden_size: int, rng: Rng) -> ConditionParams:
        return cls(rng.uniform_init((hidden_size, condition_len), condition_len), np.zeros(hidden_size))

    def params(self) -> dict[str, np.ndarray]:
        return {"W": self.W_con, "b": self.b_con}


@dataclass(frozen=True)
class CellState:
    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, hidden_size: int) -> CellState:
        return cls(np.zeros(hidden_size), np.zeros(hidden_size))


def lstm_step(params: LstmParams, prev: CellState, x) -> CellState:
    x = np.asarray(x, dtype=np.float64)
    H = params.hidden_size
    if prev.h.shape != (H,) or prev.c.shape != (H,) or x.shape != (params.input_size,):
        raise ShapeError(
            f"lstm_step expects h,c of length {H} and x of length {params.input_size}; "
            f"got h{prev.h.shape} c{prev.c.shape} x{x.shape}"
        )
    z = params.W @ np.concatenate([prev.h, x]) + params.b
    i = sigmoid(z[:H])
    f = sigmoid(z[H : 2 * H])
    g = np.tanh(z[2 * H : 3 * H])
    o = sigmoid(z[3 * H :])
    c = f * prev.c + i * g
    return CellState(o * np.tanh(c), c)


def init_hidden_from_conditions(cp: ConditionParams, conditions) -> np.ndarray:
    conditions = np.asarray(conditions, dtype=np.float64)
    if conditions.shape[-1] != cp.W_con.shape[1]:
        raise ShapeError(f"conditions of length {conditions.shape[-1]} do not match W_con{cp.W_con.shape}")
    return np.tanh(conditions @ cp.W_con.T + cp.b_con)


# ------------------------------------------------------------ batched layer


def lstm_layer_forward(params: LstmParams, x: np.ndarray, h1: np.ndarray | None = None):
    """Run one layer over x: (batch, steps, input) from a zero state.

    ``h1`` (batch, hidden), when given, overrides the hidden state emitted at
    the first step.  Returns hidden states (batch, steps, hidden) and a cache.
    """
    B, T, I = x.shape
    H = params.hidden_size
    if I != params.input_size:
        raise ShapeError(f"LSTM layer expects input size {params.input_size}, got {I}")
    Wh, Wx = params.W[:, :H], params.W[:, H:]
    zx = x @ Wx.T + params.b
    hs = np.empty((B, T, H))
    cs = np.empty((B, T, H))
    gates = np.empty((B, T, 4 * H))
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    for t in range(T):
        z = zx[:, t] + h @ Wh.T
        a = np.empty_like(z)
        a[:, : 2 * H] = sigmoid(z[:, : 2 * H])
        a[:, 2 * H : 3 * H] = np.tanh(z[:, 2 * H : 3 * H])
        a[:, 3 * H :] = sigmoid(z[:, 3 * H :])
        c = a[:, H : 2 * H] * c + a[:, :H] * a[:, 2 * H : 3 * H]
        h = a[:, 3 * H :] * np.tanh(c)
        if t == 0 and h1 is not None:
            h = h1
        hs[:, t] = h
        cs[:, t] = c
        gates[:, t] = a
    return hs, (x, hs, cs, gates, h1 is not None)


def lstm_layer_backward(params: LstmParams, d_hs: np.ndarray, cache):
    """Backpropagate through time.  Returns (d_x, d_h1 or None, grads)."""
    x, hs, cs, gates, overridden = cache
    B, T, H = hs.shape
    Wh, Wx = params.W[:, :H], params.W[:, H:]
    dz_all = np.empty((B, T, 4 * H))
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    d_h1 = None
    for t in reversed(range(T)):
        a = gates[:, t]
        i, f, g, o = a[:, :H], a[:, H : 2 * H], a[:, 2 * H : 3 * H], a[:, 3 * H :]
        c = cs[:, t]
        c_prev = cs[:, t - 1] if t > 0 else np.zeros((B, H))
        dh = d_hs[:, t] + dh_next
        dc = dc_next.copy()
        dz = np.empty((B, 4 * H))
        if t == 0 and overridden:
            d_h1 = dh
            dz[:, 3 * H :] = 0.0
        else:
            tc = np.tanh(c)
            dz[:, 3 * H :] = dh * tc * o * (1.0 - o)
            dc += dh * o * (1.0 - tc * tc)
        dz[:, :H] = dc * g * i * (1.0 - i)
        dz[:, H : 2 * H] = dc * c_prev * f * (1.0 - f)
        dz[:, 2 * H : 3 * H] = dc * i * (1.0 - g * g)
        dz_all[:, t] = dz
        dc_next = dc * f
        dh_next = dz @ Wh
    h_prev = np.concatenate([np.zeros((B, 1, H)), hs[:, :-1]], axis=1)
    dz2 = dz_all.reshape(B * T, 4 * H)
    dW = np.empty_like(params.W)
    dW[:, :H] = dz2.T @ h_prev.reshape(B * T, H)
    dW[:, H:] = dz2.T @ x.reshape(B * T, -1)
    grads = {"W": dW, "b": dz2.sum(axis=0)}
    d_x = dz_all @ Wx
    return d_x, d_h1, grads


def lstm_stack_forward(
    stack: list[LstmParams],
    x: np.ndarray,
    cp: ConditionParams | None = None,
    conditions: np.ndarray | None = None,
):
    """Run stacked layers; returns the top layer's hidden states (batch, steps, hidden)."""
    if x.shape[1] == 0:
        raise UsageError("input sequence is empty")
    h1 = None
    if cp is not None:
        h1 = init_hidden_from_conditions(cp, conditions)
    caches = []
    h = x
    for k, layer in enumerate(stack):
        h, cache = lstm_layer_forward(layer, h, h1 if k == 0 else None)
        caches.append(cache)
    return h, (caches, conditions, h1)


def lstm_stack_backward(stack: list[LstmParams], d_top: np.ndarray, cache, cp: ConditionParams | None = None):
    """Returns (d_x, d_conditions or None, layer grads list, condition grads or None)."""
    caches, conditions, h1 = cache
    layer_grads = [None] * len(stack)
    d = d_top
    d_h1 = None
    for k in reversed(range(len(stack))):
        d, dh1, layer_grads[k] = lstm_layer_backward(stack[k], d, caches[k])
        if k == 0:
            d_h1 = dh1
    d_cond = None
    cond_grads = None
    if cp is not None and d_h1 is not None:
        dpre = d_h1 * (1.0 - h1 * h1)
        cond_grads = {"W": dpre.T @ conditions, "b": dpre.sum(axis=0)}
        d_cond = dpre @ cp.W_con
    return d, d_cond, layer_grads, cond_grads


def run_sequence(
    stack: list[LstmParams],
    cp: ConditionParams | None,
    conditions,
    inputs,
    init_mode: str = "zero",
) -> np.ndarray:
    """Final top-layer hidden state after feeding ``inputs`` (steps, features)."""
    if init_mode not in INIT_MODES:
        raise UsageError(f"init_mode must be one of {INIT_MODES}, got {init_mode!r}")
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[0] == 0:
        raise UsageError("inputs must be a non-empty (steps, features) sequence")
    if init_mode == "conditioned":
        if cp is None or conditions is None:
            raise UsageError("conditioned mode needs condition parameters and a condition vector")
        conds = np.asarray(conditions, dtype=np.float64)[None]
        hs, _ = lstm_stack_forward(stack, inputs[None], cp, conds)
    else:
        if cp is not None or conditions is not None:
            raise UsageError("zero mode takes no condition parameters or conditions")
        hs, _ = lstm_stack_forward(stack, inputs[None])
    return hs[0, -1]
