"""Feed-forward blocks: word embedding, conv/max-pool text encoder, dense stack.

Every block has a batched ``*_forward`` returning ``(output, cache)`` and a
matching ``*_backward`` returning ``(d_input, grads)``, where ``grads`` is
keyed like the block's ``params()``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .numcore import Rng, ShapeError, relu

PAD_ID = 0


class EncodingError(ValueError):
    pass


# ---------------------------------------------------------------- embedding


@dataclass
class EmbeddingTable:
    weights: np.ndarray  # (vocab_size, dim); row PAD_ID is never read

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.weights[PAD_ID] = 0.0

    @property
    def vocab_size(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def init(cls, vocab_size: int, dim: int, rng: Rng) -> EmbeddingTable:
        return cls(rng.gen.normal(0.0, 0.1, size=(vocab_size, dim)))

    def params(self) -> dict[str, np.ndarray]:
        return {"weights": self.weights}


def _check_tokens(table: EmbeddingTable, tokens: np.ndarray) -> None:
    bad = np.argwhere((tokens < 0) | (tokens >= table.vocab_size))
    if bad.size:
        pos = tuple(int(i) for i in bad[0])
        raise EncodingError(
            f"token id {int(tokens[pos])} at position {pos} is outside vocabulary of size {table.vocab_size}"
        )


def embed_post(table: EmbeddingTable, tokens) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    out, _ = embedding_forward(table, tokens[None, :])
    return out[0]


def embedding_forward(table: EmbeddingTable, tokens: np.ndarray):
    tokens = np.asarray(tokens, dtype=np.int64)
    _check_tokens(table, tokens)
    out = table.weights[tokens]
    # pad rows are masked rather than trusted to stay zero
    out[tokens == PAD_ID] = 0.0
    return out, tokens


def embedding_backward(table: EmbeddingTable, d_out: np.ndarray, tokens: np.ndarray):
    grad = np.zeros_like(table.weights)
    np.add.at(grad, tokens.reshape(-1), d_out.reshape(-1, table.dim))
    grad[PAD_ID] = 0.0
    return {"weights": grad}


# ---------------------------------------------------------------- conv/pool


@dataclass
class ConvLayer:
    weights: np.ndarray  # (filters, window, in_channels)
    bias: np.ndarray  # (filters,)
    pool_width: int

    @property
    def filter_count(self) -> int:
        return self.weights.shape[0]

    @property
    def window_width(self) -> int:
        return self.weights.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        return {"W": self.weights, "b": self.bias}


@dataclass
class ConvPoolStack:
    layers: list[ConvLayer]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("a conv/pool stack needs at least one layer")
        for i, layer in enumerate(self.layers):
            if layer.pool_width < 1:
                raise ValueError(f"layer {i}: pool width must be >= 1")

    @classmethod
    def init(cls, in_channels: int, filters: list[int], windows: list[int], pools: list[int], rng: Rng):
        layers = []
        cin = in_channels
        for i, (f, w, p) in enumerate(zip(filters, windows, pools)):
            r = rng.split(i)
            layers.append(ConvLayer(r.uniform_init((f, w, cin), w * cin), np.zeros(f), p))
            cin = f
        return cls(layers)

    def output_length(self, seq_len: int) -> int:
        """Length of the flattened encoding for an input of ``seq_len`` rows."""
        length = seq_len
        for layer in self.layers:
            length = (length - layer.window_width + 1) // layer.pool_width
        return length * self.layers[-1].filter_count

    def min_input_length(self) -> int:
        length = 1
        for layer in reversed(self.layers):
            length = length * layer.pool_width + layer.window_width - 1
        return length

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.params().items():
                out[f"{i}.{k}"] = v
        return out


def conv_stack_forward(stack: ConvPoolStack, x: np.ndarray):
    """x: (batch, length, channels) -> (batch, features)."""
    if x.shape[1] < stack.min_input_length():
        raise ShapeError(
            f"text of {x.shape[1]} tokens is shorter than the encoder's receptive field "
            f"({stack.min_input_length()}); pad the post with the pad token"
        )
    caches = []
    h = x
    for layer in stack.layers:
        w = layer.window_width
        windows = sliding_window_view(h, w, axis=1)  # (B, Lc, C, w)
        z = np.einsum("btcw,fwc->btf", windows, layer.weights, optimize=True) + layer.bias
        a = relu(z)
        p = layer.pool_width
        lp = a.shape[1] // p
        blocks = a[:, : lp * p].reshape(a.shape[0], lp, p, a.shape[2])
        arg = blocks.argmax(axis=2)
        pooled = np.take_along_axis(blocks, arg[:, :, None, :], axis=2)[:, :, 0, :]
        caches.append((h, z, arg, lp))
        h = pooled
    return h.reshape(h.shape[0], -1), (caches, h.shape)


def conv_stack_backward(stack: ConvPoolStack, d_out: np.ndarray, cache):
    caches, last_shape = cache
    dh = d_out.reshape(last_shape)
    grads: dict[str, np.ndarray] = {}
    for i in reversed(range(len(stack.layers))):
        layer = stack.layers[i]
        h_in, z, arg, lp = caches[i]
        p, w = layer.pool_width, layer.window_width
        B, Lc, F = z.shape
        d_blocks = np.zeros((B, lp, p, F))
        np.put_along_axis(d_blocks, arg[:, :, None, :], dh[:, :, None, :], axis=2)
        da = np.zeros_like(z)
        da[:, : lp * p] = d_blocks.reshape(B, lp * p, F)
        dz = da * (z > 0)
        windows = sliding_window_view(h_in, w, axis=1)
        grads[f"{i}.W"] = np.einsum("btf,btcw->fwc", dz, windows, optimize=True)
        grads[f"{i}.b"] = dz.sum(axis=(0, 1))
        dh_in = np.zeros_like(h_in)
        for k in range(w):
            dh_in[:, k : k + Lc] += dz @ layer.weights[:, k, :]
        dh = dh_in
    return dh, grads


def encode_text(stack: ConvPoolStack, embedded) -> np.ndarray:
    embedded = np.asarray(embedded, dtype=np.float64)
    out, _ = conv_stack_forward(stack, embedded[None])
    return out[0]


def concat_conditions(text_features, static_features) -> np.ndarray:
    """Condition vector: text features first, then static features."""
    return np.concatenate(
        [np.asarray(text_features, dtype=np.float64), np.asarray(static_features, dtype=np.float64)], axis=-1
    )


# ---------------------------------------------------------------- dense


@dataclass
class DenseStack:
    """Sequence of ReLU(W @ Dropout(x) + b) layers.

    Dropout is inverted: surviving activations are scaled by 1/(1-rate) in
    training so inference is the plain forward pass.
    """

    weights: list[np.ndarray]  # each (out, in)
    biases: list[np.ndarray]
    dropout_rate: float = 0.0
    final_activation: str = "relu"

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {self.dropout_rate}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("dense stack needs matching, non-empty weight and bias lists")
        for i in range(1, len(self.weights)):
            if self.weights[i].shape[1] != self.weights[i - 1].shape[0]:
                raise ShapeError(
                    f"dense layer {i} expects {self.weights[i].shape[1]} inputs but layer {i - 1} "
                    f"produces {self.weights[i - 1].shape[0]}"
                )
        if self.final_activation not in ("relu", "linear"):
            raise ValueError("final_activation must be 'relu' or 'linear'")

    @classmethod
    def init(cls, sizes: list[int], rng: Rng, dropout_rate: float = 0.0, final_activation: str = "relu"):
        ws, bs = [], []
        for i in range(len(sizes) - 1):
            ws.append(rng.split(i).uniform_init((sizes[i + 1], sizes[i]), sizes[i]))
            bs.append(np.zeros(sizes[i + 1]))
        return cls(ws, bs, dropout_rate, final_activation)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{i}.W"] = w
            out[f"{i}.b"] = b
        return out


def dense_stack_forward(stack: DenseStack, x: np.ndarray, rng: Rng | None = None):
    """x: (..., in).  ``rng`` given means training mode (dropout active)."""
    if x.shape[-1] != stack.in_dim:
        raise ShapeError(f"dense stack expects {stack.in_dim} inputs, got {x.shape[-1]}")
    caches = []
    h = x
    n = len(stack.weights)
    rate = stack.dropout_rate
    for i, (w, b) in enumerate(zip(stack.weights, stack.biases)):
        mask = None
        if rng is not None and rate > 0.0:
            keep = rng.split(i).gen.random(h.shape) >= rate
            mask = keep / (1.0 - rate)
            h = h * mask
        z = h @ w.T + b
        linear = i == n - 1 and stack.final_activation == "linear"
        caches.append((h, z, mask, linear))
        h = z if linear else relu(z)
    return h, caches


def dense_stack_backward(stack: DenseStack, d_out: np.ndarray, caches):
    grads: dict[str, np.ndarray] = {}
    dh = d_out
    for i in reversed(range(len(stack.weights))):
        h_in, z, mask, linear = caches[i]
        dz = dh if linear else dh * (z > 0)
        dz2 = dz.reshape(-1, dz.shape[-1])
        grads[f"{i}.W"] = dz2.T @ h_in.reshape(-1, h_in.shape[-1])
        grads[f"{i}.b"] = dz2.sum(axis=0)
        dh = dz @ stack.weights[i]
        if mask is not None:
            dh = dh * mask
    return dh, grads


def dense_forward(stack: DenseStack, x, mode: str = "inference", rng: Rng | None = None) -> np.ndarray:
    """Single-vector convenience wrapper; ``mode`` is 'train' or 'inference'."""
    x = np.asarray(x, dtype=np.float64)
    if mode == "train":
        if rng is None:
            raise ValueError("train mode needs an rng for dropout")
    elif mode == "inference":
        rng = None
    else:
        raise ValueError(f"mode must be 'train' or 'inference', got {mode!r}")
    out, _ = dense_stack_forward(stack, x[None], rng)
    return out[0]
