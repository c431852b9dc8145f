"""Strategy-aware execution of a schedule timeline over real stage math.

execute() walks a validated timeline event by event, moving activations down
and gradients up through the stages while a weight policy decides which
parameter version every forward and backward sees:

  serial / naive / gpipe  live weights; gpipe averages micro gradients
  async_raw               live weights on the 1f1b schedule, no mitigation
  weight_stashing         forward snapshots are replayed at backward time
  two_buffered            the last two versions are retained; a backward
                          reuses its forward's version while it survives
  spectrain               momentum-buffer extrapolation of future weights
  optimizer_prediction    extrapolation along the optimizer's own next-step
                          direction, last stage runs live

Every forward/backward pair leaves a VersionRecord, from which staleness and
inconsistency metrics are derived; snapshots held per stage are counted so
memory behaviour is observable too.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

from .linalg import Matrix, NumericError, loss_and_grad
from .optim import OptimizerState, predict_weights
from .schedule import (
    BACKWARD,
    FORWARD,
    UPDATE,
    Timeline,
    bubble_ratio,
    makespan,
    steady_state_window,
    validate_timeline,
)
from .stages import StageModel, stage_backward, stage_forward

STRATEGY_KINDS = (
    "serial",
    "naive",
    "gpipe",
    "async_raw",
    "weight_stashing",
    "two_buffered",
    "spectrain",
    "optimizer_prediction",
)

# which schedule each strategy executes on
STRATEGY_SCHEDULE = {
    "serial": "serial",
    "naive": "naive",
    "gpipe": "gpipe",
    "async_raw": "1f1b",
    "weight_stashing": "1f1b",
    "two_buffered": "1f1b",
    "spectrain": "1f1b",
    "optimizer_prediction": "1f1b",
}

PREDICTIVE_STRATEGIES = ("spectrain", "optimizer_prediction")


@dataclass
class VersionRecord:
    """Which weight versions one forward/backward pair actually used.

    forward_version is the live version the forward started from; when the
    forward ran on extrapolated weights, predicted is set and
    prediction_target names the version the extrapolation aimed for.
    backward_version is the version whose weights the backward consumed,
    live_backward_version the stage's counter at that moment.
    """

    mb: int
    micro: int
    stage: int
    forward_version: int
    predicted: bool = False
    prediction_target: int | None = None
    backward_version: int | None = None
    live_backward_version: int | None = None

    @property
    def effective_forward_version(self) -> int:
        return self.prediction_target if self.predicted else self.forward_version

    @property
    def inconsistent(self) -> bool:
        if self.predicted:
            return self.prediction_target != self.backward_version
        return self.forward_version != self.backward_version

    @property
    def staleness(self) -> int:
        return self.live_backward_version - self.effective_forward_version

    def to_dict(self) -> dict:
        return {
            "mb": self.mb,
            "micro": self.micro,
            "stage": self.stage,
            "forward_version": self.forward_version,
            "predicted": self.predicted,
            "prediction_target": self.prediction_target,
            "backward_version": self.backward_version,
            "live_backward_version": self.live_backward_version,
            "staleness": self.staleness,
            "inconsistent": self.inconsistent,
        }


@dataclass
class RunReport:
    strategy: str
    timeline_kind: str
    depth: int
    n_batches: int
    micro_per_mini: int
    losses: list[float]
    records: list[VersionRecord]
    snapshot_peaks: list[int]
    stash_peaks: list[int]
    final_versions: list[int]
    params_checksum: str
    bubble_overall: str
    bubble_steady: str | None
    steady_window: tuple[int, int] | None
    makespan_unit: float
    seed: int | None = None
    config_echo: dict | None = None

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "timeline_kind": self.timeline_kind,
            "depth": self.depth,
            "n_batches": self.n_batches,
            "micro_per_mini": self.micro_per_mini,
            "losses": self.losses,
            "records": [r.to_dict() for r in self.records],
            "snapshot_peaks": self.snapshot_peaks,
            "stash_peaks": self.stash_peaks,
            "final_versions": self.final_versions,
            "params_checksum": self.params_checksum,
            "bubble_overall": self.bubble_overall,
            "bubble_steady": self.bubble_steady,
            "steady_window": list(self.steady_window) if self.steady_window else None,
            "makespan_unit": self.makespan_unit,
            "seed": self.seed,
            "config_echo": self.config_echo,
        }


# ---- weight policies ---------------------------------------------------------


class _StageRt:
    """Mutable per-stage execution context shared with the policy."""

    def __init__(self, model: StageModel, opt: OptimizerState, depth: int):
        self.model = model
        self.opt = opt
        self.depth = depth
        self.pending: list[Matrix] | None = None
        self.pending_count = 0
        # policy scratch
        self.stashed_weights: dict[tuple[int, int], tuple[int, list[Matrix]]] = {}
        self.retained: dict[int, list[Matrix]] = {}


class _LivePolicy:
    """Always the live parameters, both directions."""

    def forward_view(self, rt: _StageRt, mb, micro, lr):
        return rt.model.params, rt.model.version, False, None

    def backward_view(self, rt: _StageRt, mb, micro, forward_version):
        return rt.model.params, rt.model.version

    def after_update(self, rt: _StageRt):
        pass

    def snapshot_count(self, rt: _StageRt) -> int:
        return 1


class _StashPolicy:
    """Snapshot the forward view per mini-batch and replay it at backward."""

    def forward_view(self, rt: _StageRt, mb, micro, lr):
        rt.stashed_weights[(mb, micro)] = (rt.model.version, rt.model.params)
        return rt.model.params, rt.model.version, False, None

    def backward_view(self, rt: _StageRt, mb, micro, forward_version):
        version, weights = rt.stashed_weights.pop((mb, micro))
        return weights, version

    def after_update(self, rt: _StageRt):
        pass

    def snapshot_count(self, rt: _StageRt) -> int:
        versions = {v for v, _ in rt.stashed_weights.values()}
        versions.add(rt.model.version)
        return len(versions)


class _TwoBufferedPolicy:
    """Keep the two most recent versions; a backward reuses its forward's
    version while one of the two buffers still holds it, else the older one.
    """

    def forward_view(self, rt: _StageRt, mb, micro, lr):
        if not rt.retained:
            rt.retained[rt.model.version] = rt.model.params
        return rt.model.params, rt.model.version, False, None

    def backward_view(self, rt: _StageRt, mb, micro, forward_version):
        if forward_version in rt.retained:
            return rt.retained[forward_version], forward_version
        oldest = min(rt.retained)
        return rt.retained[oldest], oldest

    def after_update(self, rt: _StageRt):
        rt.retained[rt.model.version] = rt.model.params
        while len(rt.retained) > 2:
            del rt.retained[min(rt.retained)]

    def snapshot_count(self, rt: _StageRt) -> int:
        return max(1, len(rt.retained))


class _PredictivePolicy:
    """Forward on weights extrapolated to the version expected at backward.

    The extrapolation step count is the timeline-exact number of updates the
    stage applies between this mini-batch's forward and backward, which
    settles to depth - rank - 1 once warm-up ends. The last stage always
    runs live. Backward-time extrapolation would target a gap of zero under
    per-backward updates, so it is deliberately a no-op. Live parameters are
    never touched: prediction writes into a scratch copy.
    """

    def __init__(self, gaps: dict[tuple[int, int], int]):
        self.gaps = gaps
        self.predicting: set[int] = set()

    def forward_view(self, rt: _StageRt, mb, micro, lr):
        self.predicting.discard(rt.model.rank)
        if rt.model.rank == rt.depth - 1:
            return rt.model.params, rt.model.version, False, None
        steps_ahead = self.gaps[(mb, rt.model.rank)]
        dirs = rt.opt.prediction_direction(rt.model.params)
        scratch = predict_weights(rt.model.params, lr, steps_ahead, dirs)
        self.predicting.add(rt.model.rank)
        return scratch, rt.model.version, True, rt.model.version + steps_ahead

    def backward_view(self, rt: _StageRt, mb, micro, forward_version):
        return rt.model.params, rt.model.version

    def after_update(self, rt: _StageRt):
        pass

    def snapshot_count(self, rt: _StageRt) -> int:
        return 2 if rt.model.rank in self.predicting else 1


def _make_policy(strategy: str, tl: Timeline):
    if strategy in ("serial", "naive", "gpipe", "async_raw"):
        return _LivePolicy()
    if strategy == "weight_stashing":
        return _StashPolicy()
    if strategy == "two_buffered":
        return _TwoBufferedPolicy()
    if strategy in PREDICTIVE_STRATEGIES:
        return _PredictivePolicy(update_gaps(tl))
    raise ValueError(f"unknown strategy kind: {strategy!r}")


def build_timeline(strategy: str, depth: int, n_batches: int, micro_per_mini: int = 1) -> Timeline:
    """The timeline a strategy executes on; serial demands depth 1."""
    from .schedule import build_1f1b, build_gpipe, build_naive, build_serial

    if strategy not in STRATEGY_KINDS:
        raise ValueError(f"unknown strategy kind: {strategy!r}")
    kind = STRATEGY_SCHEDULE[strategy]
    if kind == "serial":
        if depth != 1:
            raise ValueError(f"serial strategy requires depth 1, got {depth}")
        return build_serial(n_batches)
    if kind == "naive":
        return build_naive(depth, n_batches)
    if kind == "gpipe":
        return build_gpipe(depth, n_batches, micro_per_mini)
    return build_1f1b(depth, n_batches)


def update_gaps(tl: Timeline) -> dict[tuple[int, int], int]:
    """Updates applied on a stage strictly between each mini-batch's forward
    and backward there, keyed by (mb, stage). One pass per stage.
    """
    gaps: dict[tuple[int, int], int] = {}
    for k in range(tl.depth):
        seen_updates = 0
        at_forward: dict[int, int] = {}
        for e in tl.stage_events(k):
            if e.kind == FORWARD and e.micro == 0:
                at_forward[e.mb] = seen_updates
            elif e.kind == BACKWARD and e.micro == 0:
                gaps[(e.mb, k)] = seen_updates - at_forward[e.mb]
            elif e.kind == UPDATE:
                seen_updates += 1
    return gaps


# ---- data protocol -------------------------------------------------------------


class BatchSource:
    """Anything with batch(mb) -> (x, y); mb is 1-indexed and deterministic."""

    def batch(self, mb: int) -> tuple[Matrix, Matrix]:
        raise NotImplementedError


def _micro_slice(m: Matrix, micro: int, micros: int) -> Matrix:
    if micros == 1:
        return m
    base, extra = divmod(m.rows, micros)
    start = micro * base + min(micro, extra)
    size = base + (1 if micro < extra else 0)
    if size == 0:
        raise ValueError(
            f"cannot split {m.rows} rows into {micros} micro-batches"
        )
    return Matrix(m.a[start : start + size])


# ---- executor -------------------------------------------------------------------


def params_checksum(stages: list[StageModel]) -> str:
    h = hashlib.sha256()
    for stage in stages:
        for name, p in zip(stage.param_names, stage.params):
            h.update(name.encode())
            h.update(str(p.shape).encode())
            h.update(p.a.tobytes())
    return h.hexdigest()


def execute(
    tl: Timeline,
    stages: list[StageModel],
    opt_states: list[OptimizerState],
    strategy: str,
    data: BatchSource,
    loss_kind: str,
    lr_for_mb,
) -> RunReport:
    """Run the timeline to completion and report losses, version records,
    and per-stage memory peaks.

    Stages and optimizer states are mutated in place; the final version of
    every stage is n_batches + 1 (one update per mini-batch per stage).
    """
    if strategy not in STRATEGY_KINDS:
        raise ValueError(f"unknown strategy kind: {strategy!r}")
    expected = STRATEGY_SCHEDULE[strategy]
    if tl.kind != expected:
        raise ValueError(
            f"strategy {strategy!r} runs on a {expected!r} timeline, got {tl.kind!r}"
        )
    if len(stages) != tl.depth or len(opt_states) != tl.depth:
        raise ValueError(
            f"timeline depth {tl.depth} needs {tl.depth} stages and optimizer "
            f"states, got {len(stages)} and {len(opt_states)}"
        )
    if strategy == "spectrain" and any(s.config.kind != "sgdm" for s in opt_states):
        raise ValueError("spectrain requires the sgdm optimizer")
    validate_timeline(tl)

    depth = tl.depth
    micros = tl.micro_per_mini
    policy = _make_policy(strategy, tl)
    rts = [_StageRt(s, o, depth) for s, o in zip(stages, opt_states)]

    acts: dict[tuple[int, int, int], Matrix] = {}
    grads: dict[tuple[int, int, int], Matrix] = {}
    data_cache: dict[int, tuple[Matrix, Matrix]] = {}
    micro_losses: dict[int, list[float]] = {}
    losses: list[float | None] = [None] * tl.n_batches
    records: dict[tuple[int, int, int], VersionRecord] = {}
    record_order: list[VersionRecord] = []
    snapshot_peaks = [1] * depth

    def batch_for(mb: int) -> tuple[Matrix, Matrix]:
        if mb not in data_cache:
            data_cache[mb] = data.batch(mb)
        return data_cache[mb]

    for e in tl.events:
        rt = rts[e.stage]
        if e.kind == FORWARD:
            if e.stage == 0:
                x = _micro_slice(batch_for(e.mb)[0], e.micro, micros)
            else:
                x = acts.pop((e.mb, e.micro, e.stage))
            weights, fv, predicted, target = policy.forward_view(
                rt, e.mb, e.micro, lr_for_mb(e.mb)
            )
            try:
                out = stage_forward(rt.model, weights, (e.mb, e.micro), x, fv)
            except NumericError as err:
                raise NumericError(f"mb {e.mb} stage {e.stage}: {err}") from err
            rec = VersionRecord(e.mb, e.micro, e.stage, fv, predicted, target)
            records[(e.mb, e.micro, e.stage)] = rec
            record_order.append(rec)
            if e.stage < depth - 1:
                acts[(e.mb, e.micro, e.stage + 1)] = out
            else:
                y = _micro_slice(batch_for(e.mb)[1], e.micro, micros)
                try:
                    loss, g = loss_and_grad(out, y, loss_kind)
                except NumericError as err:
                    raise NumericError(f"mb {e.mb} stage {e.stage}: {err}") from err
                micro_losses.setdefault(e.mb, []).append(loss)
                if len(micro_losses[e.mb]) == micros:
                    vals = micro_losses.pop(e.mb)
                    losses[e.mb - 1] = sum(vals) / len(vals)
                grads[(e.mb, e.micro, e.stage)] = g
        elif e.kind == BACKWARD:
            g_out = grads.pop((e.mb, e.micro, e.stage))
            rec = records[(e.mb, e.micro, e.stage)]
            weights, bv = policy.backward_view(rt, e.mb, e.micro, rec.forward_version)
            g_in, pgrads = stage_backward(rt.model, weights, (e.mb, e.micro), g_out)
            if e.stage > 0:
                grads[(e.mb, e.micro, e.stage - 1)] = g_in
            if rt.pending is None:
                rt.pending = [p.copy() for p in pgrads]
                rt.pending_count = 1
            else:
                rt.pending = [Matrix(a.a + b.a) for a, b in zip(rt.pending, pgrads)]
                rt.pending_count += 1
            rec.backward_version = bv
            rec.live_backward_version = rt.model.version
        else:  # update
            if rt.pending is None:
                raise RuntimeError(f"update without gradients at mb {e.mb} stage {e.stage}")
            gs = rt.pending
            if rt.pending_count > 1:
                gs = [Matrix(g.a / rt.pending_count) for g in gs]
            try:
                new_params, _ = rt.opt.step(rt.model.params, gs, lr_for_mb(e.mb))
            except NumericError as err:
                raise NumericError(f"mb {e.mb} stage {e.stage}: {err}") from err
            rt.model.params = new_params
            rt.model.version += 1
            rt.pending = None
            rt.pending_count = 0
            policy.after_update(rt)
        snapshot_peaks[e.stage] = max(
            snapshot_peaks[e.stage], policy.snapshot_count(rt)
        )

    for rt in rts:
        if rt.model.version != tl.n_batches + 1:
            raise RuntimeError(
                f"stage {rt.model.rank} ended at version {rt.model.version}, "
                f"expected {tl.n_batches + 1}"
            )
        if len(rt.model.stash) != 0:
            raise RuntimeError(f"stage {rt.model.rank} stash not drained")
    if acts or grads or any(v is None for v in losses):
        raise RuntimeError("timeline left unconsumed activations or gradients")

    steady = steady_state_window(tl)
    return RunReport(
        strategy=strategy,
        timeline_kind=tl.kind,
        depth=depth,
        n_batches=tl.n_batches,
        micro_per_mini=micros,
        losses=[float(v) for v in losses],
        records=record_order,
        snapshot_peaks=snapshot_peaks,
        stash_peaks=[s.stash.peak for s in stages],
        final_versions=[s.version for s in stages],
        params_checksum=params_checksum(stages),
        bubble_overall=str(bubble_ratio(tl)),
        bubble_steady=str(bubble_ratio(tl, *steady)) if steady else None,
        steady_window=steady,
        makespan_unit=makespan(tl),
    )


# ---- metrics --------------------------------------------------------------------


def staleness_and_inconsistency(report: RunReport) -> dict:
    """Per-stage and overall staleness/inconsistency summary of a run."""
    per_stage = []
    for k in range(report.depth):
        recs = [r for r in report.records if r.stage == k]
        n_inc = sum(1 for r in recs if r.inconsistent)
        stale = [r.staleness for r in recs]
        per_stage.append(
            {
                "stage": k,
                "records": len(recs),
                "inconsistent": n_inc,
                "mean_staleness": sum(stale) / len(stale) if stale else 0.0,
                "max_staleness": max(stale) if stale else 0,
            }
        )
    total_inc = sum(row["inconsistent"] for row in per_stage)
    all_stale = [r.staleness for r in report.records]
    return {
        "per_stage": per_stage,
        "inconsistent_total": total_inc,
        "mean_staleness": sum(all_stale) / len(all_stale) if all_stale else 0.0,
    }


def memory_peaks(report: RunReport) -> list[int]:
    """Peak number of simultaneously held weight versions per stage."""
    return list(report.snapshot_peaks)
