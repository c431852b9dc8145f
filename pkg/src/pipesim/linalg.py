"""Dense 2-D float64 math: the Matrix container, seeded RNG streams,
layer primitives, losses, and finite-difference gradients.

Everything downstream (stages, optimizers, runtime) moves data only
through Matrix so runs stay bit-reproducible for a fixed seed.
"""

from __future__ import annotations

import hashlib

import numpy as np


class DimensionError(ValueError):
    """Shape mismatch in a matrix operation; message names both shapes."""


class NumericError(RuntimeError):
    """Non-finite value produced where a finite one is required."""


# ---- Matrix ----------------------------------------------------------------


class Matrix:
    """Dense row-major 2-D array of float64, the only numeric container."""

    __slots__ = ("a",)

    def __init__(self, values):
        a = np.asarray(values, dtype=np.float64)
        if a.ndim != 2:
            raise DimensionError(f"Matrix requires 2-D data, got ndim={a.ndim}")
        self.a = np.ascontiguousarray(a)

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "Matrix":
        return cls(np.zeros((rows, cols)))

    @classmethod
    def full(cls, rows: int, cols: int, value: float) -> "Matrix":
        return cls(np.full((rows, cols), float(value)))

    @property
    def rows(self) -> int:
        return self.a.shape[0]

    @property
    def cols(self) -> int:
        return self.a.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.a.shape

    def copy(self) -> "Matrix":
        return Matrix(self.a.copy())

    def transpose(self) -> "Matrix":
        return Matrix(self.a.T)

    def tolist(self) -> list[list[float]]:
        return self.a.tolist()

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.a).all())

    def require_finite(self, context: str) -> "Matrix":
        if not self.is_finite():
            bad = np.argwhere(~np.isfinite(self.a))[0]
            raise NumericError(
                f"non-finite value in {context} at entry ({bad[0]}, {bad[1]})"
            )
        return self

    def allclose(self, other: "Matrix", tol: float = 0.0) -> bool:
        if self.shape != other.shape:
            return False
        return bool(np.max(np.abs(self.a - other.a), initial=0.0) <= tol)

    def max_abs_diff(self, other: "Matrix") -> float:
        if self.shape != other.shape:
            raise DimensionError(
                f"max_abs_diff: shapes differ: {self.shape} vs {other.shape}"
            )
        return float(np.max(np.abs(self.a - other.a), initial=0.0))

    def __repr__(self) -> str:
        return f"Matrix({self.rows}x{self.cols})"


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """(n, k) @ (k, m) -> (n, m); rejects mismatched inner dims by name."""
    if a.cols != b.rows:
        raise DimensionError(
            f"matmul: inner dimensions differ: {a.shape} vs {b.shape}"
        )
    return Matrix(a.a @ b.a)


def add(a: Matrix, b: Matrix) -> Matrix:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes differ: {a.shape} vs {b.shape}")
    return Matrix(a.a + b.a)


def sub(a: Matrix, b: Matrix) -> Matrix:
    if a.shape != b.shape:
        raise DimensionError(f"sub: shapes differ: {a.shape} vs {b.shape}")
    return Matrix(a.a - b.a)


def scale(a: Matrix, s: float) -> Matrix:
    return Matrix(a.a * float(s))


def hadamard(a: Matrix, b: Matrix) -> Matrix:
    if a.shape != b.shape:
        raise DimensionError(f"hadamard: shapes differ: {a.shape} vs {b.shape}")
    return Matrix(a.a * b.a)


def add_rowvec(a: Matrix, row: Matrix) -> Matrix:
    """(n, m) + (1, m) broadcast over rows."""
    if row.rows != 1 or row.cols != a.cols:
        raise DimensionError(
            f"add_rowvec: expected (1, {a.cols}) row vector, got {row.shape}"
        )
    return Matrix(a.a + row.a)


def col_sum(a: Matrix) -> Matrix:
    """(n, m) -> (1, m) column sums."""
    return Matrix(a.a.sum(axis=0, keepdims=True))


# ---- RNG -------------------------------------------------------------------


def _mix_key(seed: int, label: str) -> int:
    # stable 128-bit Philox key from (seed, label), platform independent
    digest = hashlib.sha256(f"pipesim:{seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:16], "little")


class RngStream:
    """Counter-based random stream (Philox) keyed by seed and substream label.

    Identical (seed, label) always replays the identical draw sequence,
    independent of any other stream, which is what makes layer init and
    dataset generation partition- and order-independent.
    """

    def __init__(self, seed: int, label: str = "root"):
        self.seed = int(seed)
        self.label = label
        self._gen = np.random.Generator(np.random.Philox(key=_mix_key(self.seed, label)))

    def substream(self, label: str) -> "RngStream":
        return RngStream(self.seed, f"{self.label}/{label}")

    def normal(self, rows: int, cols: int, scale: float = 1.0) -> Matrix:
        return Matrix(self._gen.standard_normal((rows, cols)) * float(scale))

    def uniform(self, rows: int, cols: int, low: float = 0.0, high: float = 1.0) -> Matrix:
        return Matrix(self._gen.uniform(low, high, size=(rows, cols)))


# ---- layers ----------------------------------------------------------------

ACTIVATIONS = ("tanh", "relu", "linear")


def activation(pre: Matrix, kind: str) -> Matrix:
    if kind == "tanh":
        return Matrix(np.tanh(pre.a))
    if kind == "relu":
        return Matrix(np.maximum(pre.a, 0.0))
    if kind == "linear":
        return pre.copy()
    raise ValueError(f"unknown activation kind: {kind!r}")


def activation_grad(pre: Matrix, kind: str) -> Matrix:
    """Elementwise derivative of the activation, evaluated at pre."""
    if kind == "tanh":
        t = np.tanh(pre.a)
        return Matrix(1.0 - t * t)
    if kind == "relu":
        return Matrix((pre.a > 0.0).astype(np.float64))
    if kind == "linear":
        return Matrix(np.ones_like(pre.a))
    raise ValueError(f"unknown activation kind: {kind!r}")


def affine(x: Matrix, w: Matrix, b: Matrix) -> Matrix:
    """x (n, din), w (din, dout), b (1, dout) -> pre-activation (n, dout)."""
    return add_rowvec(matmul(x, w), b)


def layer_forward(x: Matrix, w: Matrix, b: Matrix, kind: str) -> Matrix:
    """One dense layer: activation(x @ w + b)."""
    return activation(affine(x, w, b), kind)


# ---- losses ----------------------------------------------------------------

LOSS_KINDS = ("mse", "softmax_xent")


def loss_and_grad(pred: Matrix, target: Matrix, kind: str) -> tuple[float, Matrix]:
    """Scalar loss plus its gradient with respect to pred.

    mse: mean over all entries of (pred - target)^2, grad 2*(pred-target)/numel.
    softmax_xent: pred holds logits, target is one-hot; mean row cross-entropy,
    grad (softmax - target)/rows.
    """
    if pred.shape != target.shape:
        raise DimensionError(
            f"loss_and_grad: shapes differ: {pred.shape} vs {target.shape}"
        )
    if kind == "mse":
        diff = pred.a - target.a
        n = diff.size
        loss = float(np.sum(diff * diff) / n)
        grad = Matrix(2.0 * diff / n)
    elif kind == "softmax_xent":
        z = pred.a - pred.a.max(axis=1, keepdims=True)
        ez = np.exp(z)
        sm = ez / ez.sum(axis=1, keepdims=True)
        rows = pred.rows
        picked = np.sum(sm * target.a, axis=1)
        loss = float(np.mean(-np.log(picked)))
        grad = Matrix((sm - target.a) / rows)
    else:
        raise ValueError(f"unknown loss kind: {kind!r}")
    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss under {kind}")
    grad.require_finite(f"{kind} gradient")
    return loss, grad


# ---- finite differences ----------------------------------------------------


def finite_diff_grad(f, x: Matrix, h: float = 1e-5) -> Matrix:
    """Central-difference gradient of scalar f at x, entry by entry:
    (f(x + h*e_ij) - f(x - h*e_ij)) / (2h).
    """
    out = np.zeros_like(x.a)
    for i in range(x.rows):
        for j in range(x.cols):
            bumped = x.a.copy()
            bumped[i, j] += h
            up = float(f(Matrix(bumped)))
            bumped[i, j] -= 2.0 * h
            down = float(f(Matrix(bumped)))
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError(
                    f"finite_diff_grad: non-finite f at entry ({i}, {j})"
                )
            out[i, j] = (up - down) / (2.0 * h)
    return Matrix(out)
