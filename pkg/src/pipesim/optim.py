"""Optimizer step rules and the weight-prediction reads built on top of them.

Three rules are supported: SGD with momentum (sgdm), adam, and adamw with
decoupled decay. Each step records enough state that the direction of the
next update can be read back without touching gradients, which is what the
predictive pipeline strategies consume.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import Matrix, NumericError

OPTIMIZER_KINDS = ("sgdm", "adam", "adamw")


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str
    momentum: float = 0.9
    dampening: float = 0.0
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decoupled_decay: float = 1e-2

    def __post_init__(self):
        if self.kind not in OPTIMIZER_KINDS:
            raise ValueError(f"unknown optimizer kind: {self.kind!r}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if not 0.0 <= self.dampening <= 1.0:
            raise ValueError(f"dampening must be in [0, 1], got {self.dampening}")
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ValueError(f"{name} must be in [0, 1), got {v}")
        if self.eps <= 0.0:
            raise ValueError(f"eps must be positive, got {self.eps}")


class OptimizerState:
    """Mutable per-stage optimizer state over a named list of parameters.

    step_count is the number of updates applied so far; moment buffers are
    lazily zero-initialized to the parameter shapes on the first step.
    """

    def __init__(self, config: OptimizerConfig, names: list[str]):
        self.config = config
        self.names = list(names)
        self.step_count = 0
        self.momentum_buf: list[Matrix] | None = None
        self.exp_avg: list[Matrix] | None = None
        self.exp_avg_sq: list[Matrix] | None = None

    # -- update -------------------------------------------------------------

    def step(self, params: list[Matrix], grads: list[Matrix], lr: float) -> tuple[list[Matrix], list[Matrix]]:
        """Apply one update; returns (new params, applied directions).

        The applied direction d satisfies new = old - lr * d exactly, with
        any weight decay folded in, so summed directions reconstruct the
        trajectory.
        """
        if len(params) != len(grads) or len(params) != len(self.names):
            raise ValueError(
                f"step: got {len(params)} params, {len(grads)} grads, "
                f"{len(self.names)} names"
            )
        cfg = self.config
        if cfg.kind == "sgdm":
            dirs = self._sgdm_directions(params, grads)
        else:
            dirs = self._adam_directions(params, grads)
        new_params = []
        for name, w, d in zip(self.names, params, dirs):
            nw = Matrix(w.a - lr * d.a)
            if not nw.is_finite():
                raise NumericError(f"optimizer step produced non-finite values in {name}")
            new_params.append(nw)
        self.step_count += 1
        return new_params, dirs

    def _sgdm_directions(self, params, grads):
        cfg = self.config
        if self.momentum_buf is None:
            self.momentum_buf = [Matrix.zeros(p.rows, p.cols) for p in params]
        dirs = []
        for i, (w, g) in enumerate(zip(params, grads)):
            eff = g.a + cfg.weight_decay * w.a
            v = cfg.momentum * self.momentum_buf[i].a + (1.0 - cfg.dampening) * eff
            self.momentum_buf[i] = Matrix(v)
            dirs.append(Matrix(v))
        return dirs

    def _adam_directions(self, params, grads):
        cfg = self.config
        if self.exp_avg is None:
            self.exp_avg = [Matrix.zeros(p.rows, p.cols) for p in params]
            self.exp_avg_sq = [Matrix.zeros(p.rows, p.cols) for p in params]
        t = self.step_count + 1
        bc1 = 1.0 - cfg.beta1 ** t
        bc2 = 1.0 - cfg.beta2 ** t
        dirs = []
        for i, (w, g) in enumerate(zip(params, grads)):
            m = cfg.beta1 * self.exp_avg[i].a + (1.0 - cfg.beta1) * g.a
            v = cfg.beta2 * self.exp_avg_sq[i].a + (1.0 - cfg.beta2) * (g.a * g.a)
            self.exp_avg[i] = Matrix(m)
            self.exp_avg_sq[i] = Matrix(v)
            d = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
            if cfg.kind == "adamw":
                d = d + cfg.decoupled_decay * w.a
            dirs.append(Matrix(d))
        return dirs

    # -- prediction reads -----------------------------------------------------

    def prediction_direction(self, params: list[Matrix]) -> list[Matrix]:
        """Direction the next update is expected to take, read from buffers.

        Pure read: no state or parameter mutation. Before the first step the
        buffers are empty and the direction is zero. For adamw the decoupled
        decay term is deliberately not part of the read; prediction follows
        the moment estimate alone.
        """
        if self.step_count == 0:
            return [Matrix.zeros(p.rows, p.cols) for p in params]
        cfg = self.config
        if cfg.kind == "sgdm":
            return [v.copy() for v in self.momentum_buf]
        t = self.step_count
        bc1 = 1.0 - cfg.beta1 ** t
        bc2 = 1.0 - cfg.beta2 ** t
        out = []
        for m, v in zip(self.exp_avg, self.exp_avg_sq):
            out.append(Matrix((m.a / bc1) / (np.sqrt(v.a / bc2) + cfg.eps)))
        return out


def predict_weights(params: list[Matrix], lr: float, steps_ahead: int, directions: list[Matrix]) -> list[Matrix]:
    """Extrapolate parameters steps_ahead updates into the future:
    each w becomes w - lr * steps_ahead * d. Inputs are not mutated.
    """
    if steps_ahead < 0:
        raise ValueError(f"steps_ahead must be >= 0, got {steps_ahead}")
    if len(params) != len(directions):
        raise ValueError(
            f"predict_weights: {len(params)} params vs {len(directions)} directions"
        )
    return [Matrix(w.a - lr * steps_ahead * d.a) for w, d in zip(params, directions)]


def version_difference(depth: int, rank: int) -> int:
    """Number of updates a stage applies between a mini-batch's forward and
    its backward once the one-forward-one-backward pipeline is in steady
    state: depth - rank - 1. The last stage sees zero.
    """
    if depth < 1:
        raise ValueError(f"depth must be >= 1, got {depth}")
    if not 0 <= rank < depth:
        raise ValueError(f"rank must be in [0, {depth}), got {rank}")
    return depth - rank - 1
