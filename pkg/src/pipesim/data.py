"""Seeded desk-scale datasets and the deterministic batch stream.

Three generators: a teacher-network regression task, the classic two-spirals
classification task, and Gaussian-blob classification. Every draw comes from
labelled substreams of the dataset seed, so a given config always produces
bit-identical data, and the clean regression targets can be re-derived from
the same seed. The train/eval split is a fixed 80/20 interleave (every fifth
sample is held out), which keeps alternating class labels balanced on both
sides.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .linalg import Matrix, RngStream
from .runtime import BatchSource

DATASET_KINDS = ("synthetic-regression", "two-spirals", "tiny-classification")

TEACHER_HIDDEN = 8


@dataclass
class Dataset:
    kind: str
    x_train: Matrix
    y_train: Matrix
    x_eval: Matrix
    y_eval: Matrix
    loss_kind: str

    @property
    def n_train(self) -> int:
        return self.x_train.rows


def teacher_params(input_dim: int, target_dim: int, seed: int) -> tuple[Matrix, Matrix]:
    """The fixed two-layer tanh teacher behind synthetic-regression targets."""
    rng = RngStream(seed, "dataset/teacher")
    w1 = rng.normal(input_dim, TEACHER_HIDDEN, scale=input_dim ** -0.5)
    w2 = rng.normal(TEACHER_HIDDEN, target_dim, scale=TEACHER_HIDDEN ** -0.5)
    return w1, w2


def _split_80_20(x: np.ndarray, y: np.ndarray):
    idx = np.arange(x.shape[0])
    eval_mask = (idx % 5) == 4
    return (
        Matrix(x[~eval_mask]),
        Matrix(y[~eval_mask]),
        Matrix(x[eval_mask]),
        Matrix(y[eval_mask]),
    )


def _one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    out = np.zeros((labels.shape[0], n_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def generate_dataset(
    kind: str,
    n_samples: int,
    seed: int,
    input_dim: int = 4,
    target_dim: int = 1,
    n_classes: int = 2,
    noise: float = 0.0,
) -> Dataset:
    if kind not in DATASET_KINDS:
        raise ValueError(f"unknown dataset kind: {kind!r}")
    if n_samples < 10:
        raise ValueError(f"n_samples must be >= 10, got {n_samples}")

    if kind == "synthetic-regression":
        rng_x = RngStream(seed, "dataset/x")
        x = rng_x.normal(n_samples, input_dim).a
        w1, w2 = teacher_params(input_dim, target_dim, seed)
        clean = np.tanh(x @ w1.a) @ w2.a
        y = clean
        if noise > 0.0:
            y = clean + noise * RngStream(seed, "dataset/noise").normal(
                n_samples, target_dim
            ).a
        return Dataset(kind, *_split_80_20(x, y), "mse")

    if kind == "two-spirals":
        if n_classes != 2:
            raise ValueError("two-spirals is a 2-class task")
        labels = np.arange(n_samples) % 2
        arm_pos = np.arange(n_samples) // 2
        arm_len = max(1, (n_samples + 1) // 2 - 1)
        phi = 3.0 * math.pi * arm_pos / arm_len
        r = 0.2 + 0.8 * phi / (3.0 * math.pi)
        angle = phi + labels * math.pi
        x = np.stack([r * np.cos(angle), r * np.sin(angle)], axis=1)
        if noise > 0.0:
            x = x + noise * RngStream(seed, "dataset/noise").normal(n_samples, 2).a
        y = _one_hot(labels, 2)
        return Dataset(kind, *_split_80_20(x, y), "softmax_xent")

    # tiny-classification: one Gaussian blob per class
    labels = np.arange(n_samples) % n_classes
    centers = RngStream(seed, "dataset/centers").normal(n_classes, input_dim, scale=3.0).a
    spread = RngStream(seed, "dataset/points").normal(n_samples, input_dim, scale=0.5).a
    x = centers[labels] + spread
    if noise > 0.0:
        x = x + noise * RngStream(seed, "dataset/noise").normal(n_samples, input_dim).a
    y = _one_hot(labels, n_classes)
    return Dataset(kind, *_split_80_20(x, y), "softmax_xent")


class BatchStream(BatchSource):
    """Cycles the training split in fixed order, batch_size rows per
    mini-batch; the remainder that does not fill a batch is dropped.
    """

    def __init__(self, dataset: Dataset, batch_size: int):
        if batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {batch_size}")
        if batch_size > dataset.n_train:
            raise ValueError(
                f"batch_size {batch_size} exceeds the {dataset.n_train}-sample "
                f"training split"
            )
        self.dataset = dataset
        self.batch_size = batch_size
        self.steps_per_epoch = dataset.n_train // batch_size

    def batch(self, mb: int) -> tuple[Matrix, Matrix]:
        if mb < 1:
            raise ValueError(f"mb is 1-indexed, got {mb}")
        idx = (mb - 1) % self.steps_per_epoch
        lo = idx * self.batch_size
        hi = lo + self.batch_size
        return (
            Matrix(self.dataset.x_train.a[lo:hi]),
            Matrix(self.dataset.y_train.a[lo:hi]),
        )

    def epoch_of(self, mb: int) -> int:
        """1-indexed epoch the mini-batch belongs to."""
        return (mb - 1) // self.steps_per_epoch + 1
