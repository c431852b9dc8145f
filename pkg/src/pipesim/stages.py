"""Layer partitioning and per-stage forward/backward execution.

A model is a flat list of dense layers, initialized per layer from seeded
substreams so the parameter values do not depend on how layers are later
split across stages. Each stage owns its slice of layers, a weight version
counter, and an activation stash keyed by (mini-batch, micro-batch).
"""

from __future__ import annotations

from dataclasses import dataclass

from .linalg import (
    ACTIVATIONS,
    DimensionError,
    Matrix,
    RngStream,
    activation,
    activation_grad,
    affine,
    col_sum,
    hadamard,
    matmul,
)


class StashError(RuntimeError):
    """Activation stash misuse: duplicate store or missing entry."""


@dataclass(frozen=True)
class LayerSpec:
    index: int
    in_dim: int
    out_dim: int
    activation: str

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation kind: {self.activation!r}")
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError(
                f"layer {self.index}: dims must be positive, got "
                f"{self.in_dim}x{self.out_dim}"
            )


def build_layers(layer_dims: list[int], activations: list[str]) -> list[LayerSpec]:
    """Layer specs for an MLP given its dim chain and per-layer activations."""
    if len(layer_dims) < 2:
        raise ValueError("layer_dims needs at least an input and an output dim")
    if len(activations) != len(layer_dims) - 1:
        raise ValueError(
            f"expected {len(layer_dims) - 1} activations for "
            f"{len(layer_dims)} dims, got {len(activations)}"
        )
    return [
        LayerSpec(i, layer_dims[i], layer_dims[i + 1], activations[i])
        for i in range(len(layer_dims) - 1)
    ]


def partition_layers(layers: list[LayerSpec], depth: int) -> list[list[LayerSpec]]:
    """Contiguous split into depth groups; sizes differ by at most one and
    earlier stages take the extra layer.
    """
    if depth < 1:
        raise ValueError(f"depth must be >= 1, got {depth}")
    if depth > len(layers):
        raise ValueError(
            f"cannot split {len(layers)} layers across {depth} stages"
        )
    base, extra = divmod(len(layers), depth)
    out = []
    start = 0
    for k in range(depth):
        size = base + (1 if k < extra else 0)
        out.append(layers[start : start + size])
        start += size
    return out


def init_layer_params(spec: LayerSpec, rng: RngStream) -> tuple[Matrix, Matrix]:
    """Weights scaled by 1/sqrt(in_dim) from the layer's own substream; zero bias.

    Drawing from a per-layer substream keeps init identical across partitions.
    """
    stream = rng.substream(f"layer-{spec.index}")
    w = stream.normal(spec.in_dim, spec.out_dim, scale=spec.in_dim ** -0.5)
    b = Matrix.zeros(1, spec.out_dim)
    return w, b


@dataclass
class StashEntry:
    version: int
    layer_inputs: list[Matrix]
    pre_acts: list[Matrix]


class ActivationStash:
    """Holds forward context per (mb, micro) until the matching backward."""

    def __init__(self):
        self._entries: dict[tuple[int, int], StashEntry] = {}
        self.peak = 0

    def put(self, key: tuple[int, int], entry: StashEntry) -> None:
        if key in self._entries:
            raise StashError(f"stash already holds an entry for {key}")
        self._entries[key] = entry
        self.peak = max(self.peak, len(self._entries))

    def pop(self, key: tuple[int, int]) -> StashEntry:
        if key not in self._entries:
            raise StashError(f"no stash entry for {key}")
        return self._entries.pop(key)

    def __len__(self) -> int:
        return len(self._entries)


class StageModel:
    """One pipeline stage: a slice of layers, live parameters, and a version.

    Parameters are stored as a flat list [w0, b0, w1, b1, ...] aligned with
    param_names; versions start at 1 and advance once per applied update.
    """

    def __init__(self, rank: int, layers: list[LayerSpec], rng: RngStream):
        self.rank = rank
        self.layers = list(layers)
        self.params: list[Matrix] = []
        self.param_names: list[str] = []
        for spec in self.layers:
            w, b = init_layer_params(spec, rng)
            self.params.extend([w, b])
            self.param_names.extend([f"layer{spec.index}.w", f"layer{spec.index}.b"])
        self.version = 1
        self.stash = ActivationStash()

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim


def build_stages(layers: list[LayerSpec], depth: int, rng: RngStream) -> list[StageModel]:
    groups = partition_layers(layers, depth)
    return [StageModel(rank, group, rng) for rank, group in enumerate(groups)]


def stage_forward(
    stage: StageModel,
    weights: list[Matrix],
    key: tuple[int, int],
    x: Matrix,
    version: int,
) -> Matrix:
    """Run the stage's layers on x using the given weights view and stash the
    per-layer context needed by the matching backward.

    version records which weight version the view represents; it feeds the
    consistency bookkeeping, not the math.
    """
    if x.cols != stage.in_dim:
        raise DimensionError(
            f"stage {stage.rank}: input has {x.cols} cols, expected {stage.in_dim}"
        )
    layer_inputs = []
    pre_acts = []
    h = x
    for i, spec in enumerate(stage.layers):
        w, b = weights[2 * i], weights[2 * i + 1]
        layer_inputs.append(h)
        pre = affine(h, w, b)
        pre_acts.append(pre)
        h = activation(pre, spec.activation)
    h.require_finite(f"stage {stage.rank} forward output")
    stage.stash.put(key, StashEntry(version, layer_inputs, pre_acts))
    return h


def stage_backward(
    stage: StageModel,
    weights: list[Matrix],
    key: tuple[int, int],
    grad_out: Matrix,
) -> tuple[Matrix, list[Matrix]]:
    """Backpropagate grad_out through the stage using the stashed context.

    The weights view may differ from the one used at forward time; gradients
    are then computed against these weights with the stashed activations,
    which is exactly the inconsistency the version records measure.
    Returns (gradient wrt stage input, flat parameter gradients).
    """
    entry = stage.stash.pop(key)
    param_grads: list[Matrix | None] = [None] * len(weights)
    g = grad_out
    for i in reversed(range(len(stage.layers))):
        spec = stage.layers[i]
        dpre = hadamard(g, activation_grad(entry.pre_acts[i], spec.activation))
        param_grads[2 * i] = matmul(entry.layer_inputs[i].transpose(), dpre)
        param_grads[2 * i + 1] = col_sum(dpre)
        g = matmul(dpre, weights[2 * i].transpose())
    return g, param_grads


def network_forward(stages: list[StageModel], params_per_stage: list[list[Matrix]], x: Matrix) -> Matrix:
    """Pure chained forward over all stages with explicit weights; no stash."""
    h = x
    for stage, weights in zip(stages, params_per_stage):
        for i, spec in enumerate(stage.layers):
            h = activation(affine(h, weights[2 * i], weights[2 * i + 1]), spec.activation)
    return h


def params_by_layer(stages: list[StageModel]) -> dict[int, tuple[Matrix, Matrix]]:
    """Live (w, b) per global layer index, partition independent."""
    out = {}
    for stage in stages:
        for i, spec in enumerate(stage.layers):
            out[spec.index] = (stage.params[2 * i], stage.params[2 * i + 1])
    return out
