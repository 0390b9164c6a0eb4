"""Dense numeric helpers shared by every learned module.

Matrices and vectors are plain float64 numpy arrays; this module adds the
shape-checked product, activations, a seeded splittable generator and the
central-difference gradient used as the reference for backpropagation.
"""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def as_vector(v, name: str = "vector") -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {arr.shape}")
    return arr


def check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(arr))[0]
        raise NumericError(f"{what} has a non-finite entry at index {tuple(bad)}")
    return arr


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "left operand")
    b = as_matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return check_finite(a @ b, "matmul result")


def sigmoid(x):
    # tanh form never overflows and avoids masked indexing
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def relu(x):
    return np.maximum(x, 0.0)


ACTIVATIONS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "sigmoid": sigmoid,
    "tanh": np.tanh,
    "relu": relu,
}


def apply_activation(kind: str, v) -> np.ndarray:
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(ACTIVATIONS)}") from None
    return fn(np.asarray(v, dtype=np.float64))


def finite_diff_gradient(f: Callable[[np.ndarray], float], theta, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if h <= 0:
        raise ValueError("step size must be positive")
    theta = np.array(theta, dtype=np.float64, copy=True)
    grad = np.empty_like(theta)
    flat = theta.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(f(theta))
        flat[i] = orig - h
        down = float(f(theta))
        flat[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericError(f"function evaluation is not finite when perturbing index {i}")
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def max_relative_error(analytic, numeric, floor: float = 1e-4) -> float:
    """max_i |a_i - n_i| / max(|a_i|, |n_i|, floor).

    The floor keeps entries whose true gradient is ~0 from dividing
    rounding noise by rounding noise.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.shape != n.shape:
        raise ShapeError(f"gradient shapes differ: {a.shape} vs {n.shape}")
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


@dataclass(frozen=True)
class Rng:
    """Seeded Philox stream; ``split`` derives independent child streams by key."""

    seed: int
    key: tuple[int, ...] = ()
    _gen: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        ss = np.random.SeedSequence(self.seed, spawn_key=self.key)
        object.__setattr__(self, "_gen", np.random.Generator(np.random.Philox(ss)))

    @property
    def gen(self) -> np.random.Generator:
        return self._gen

    def split(self, *key: int) -> Rng:
        return Rng(self.seed, self.key + tuple(int(k) for k in key))

    def uniform_init(self, shape, fan_in: int) -> np.ndarray:
        bound = 1.0 / np.sqrt(max(fan_in, 1))
        return self._gen.uniform(-bound, bound, size=shape)


def gradient_errors(
    params: dict[str, np.ndarray],
    loss: Callable[[], float],
    analytic: dict[str, np.ndarray],
    h: float = 1e-5,
) -> dict[str, float]:
    """Max relative error between ``analytic`` and central differences, per parameter.

    ``loss`` is re-evaluated after perturbing each entry of ``params`` in place.
    """
    out = {}
    for name, arr in params.items():

        def f(theta, arr=arr):
            saved = arr.copy()
            arr[...] = theta
            try:
                return loss()
            finally:
                arr[...] = saved

        numeric = finite_diff_gradient(f, arr.copy(), h)
        out[name] = max_relative_error(analytic[name], numeric)
    return out
