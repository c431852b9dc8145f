"""Slot-indexed execution timelines for the four pipeline schedules.

A timeline is a list of (slot, stage, kind, mb, micro) events. Slots are
abstract unit-work ticks: every forward and backward occupies exactly one
slot on its stage, while updates are zero-cost and share the slot of the
backward that produced their gradient. Wall-clock style analysis (makespan)
re-times the same event structure under an explicit cost model instead of
trusting slot indices.

Schedules built here:
  serial  one stage, forward/backward/update per mini-batch
  naive   depth stages, one mini-batch in flight at a time
  gpipe   micro-batched fill/drain with a synchronous flush per mini-batch
  1f1b    depth - rank warm-up forwards per stage, then alternate
          one-backward-one-forward with per-backward updates
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction

FORWARD = "forward"
BACKWARD = "backward"
UPDATE = "update"

_KIND_ORDER = {FORWARD: 0, BACKWARD: 0, UPDATE: 1}


class TimelineError(ValueError):
    """A timeline violates the schedule invariants."""


@dataclass(frozen=True)
class ScheduleEvent:
    slot: int
    stage: int
    kind: str
    mb: int
    micro: int = 0


@dataclass
class CostModel:
    """Per-stage forward/backward durations in real time units.

    Scalar costs apply to every stage; list costs are per stage. Updates are
    free. Micro-batched events (gpipe) are scaled by 1/micro_per_mini so a
    mini-batch costs the same total work under every schedule.
    """

    forward_cost: float | list[float] = 1.0
    backward_cost: float | list[float] = 1.0

    def fcost(self, stage: int) -> float:
        c = self.forward_cost
        return float(c[stage]) if isinstance(c, list) else float(c)

    def bcost(self, stage: int) -> float:
        c = self.backward_cost
        return float(c[stage]) if isinstance(c, list) else float(c)


@dataclass
class Timeline:
    kind: str
    depth: int
    n_batches: int
    micro_per_mini: int
    events: list[ScheduleEvent] = field(default_factory=list)

    def __post_init__(self):
        self.events.sort(key=lambda e: (e.slot, e.stage, _KIND_ORDER[e.kind]))

    @property
    def horizon(self) -> int:
        return max((e.slot for e in self.events), default=-1) + 1

    def stage_events(self, stage: int) -> list[ScheduleEvent]:
        return [e for e in self.events if e.stage == stage]


# ---- builders ----------------------------------------------------------------


def build_serial(n_batches: int) -> Timeline:
    """One stage: forward at slot 2(m-1), backward and update at 2m-1."""
    _require_batches(n_batches)
    ev = []
    for m in range(1, n_batches + 1):
        ev.append(ScheduleEvent(2 * (m - 1), 0, FORWARD, m))
        ev.append(ScheduleEvent(2 * m - 1, 0, BACKWARD, m))
        ev.append(ScheduleEvent(2 * m - 1, 0, UPDATE, m))
    return Timeline("serial", 1, n_batches, 1, ev)


def build_naive(depth: int, n_batches: int) -> Timeline:
    """One mini-batch in flight: forward ripples down, backward ripples up,
    next mini-batch starts only after the first stage's update.
    """
    _require_depth(depth)
    _require_batches(n_batches)
    ev = []
    for m in range(1, n_batches + 1):
        base = (m - 1) * 2 * depth
        for k in range(depth):
            ev.append(ScheduleEvent(base + k, k, FORWARD, m))
            ev.append(ScheduleEvent(base + 2 * depth - 1 - k, k, BACKWARD, m))
            ev.append(ScheduleEvent(base + 2 * depth - 1 - k, k, UPDATE, m))
    return Timeline("naive", depth, n_batches, 1, ev)


def build_gpipe(depth: int, n_batches: int, micro_per_mini: int) -> Timeline:
    """Micro-batched fill/drain with one update per stage per mini-batch.

    Within a mini-batch, micro forwards pipeline down in micro order; micro
    backwards drain in reverse micro order; the stage update shares the slot
    of its last micro backward (the synchronous flush).
    """
    _require_depth(depth)
    _require_batches(n_batches)
    if micro_per_mini < 1:
        raise TimelineError(f"micro_per_mini must be >= 1, got {micro_per_mini}")
    t = micro_per_mini
    window = 2 * (t + depth - 1)
    ev = []
    for m in range(1, n_batches + 1):
        base = (m - 1) * window
        for k in range(depth):
            for mu in range(t):
                ev.append(ScheduleEvent(base + mu + k, k, FORWARD, m, mu))
                ev.append(
                    ScheduleEvent(
                        base + (t + depth - 1) + (t - 1 - mu) + (depth - 1 - k),
                        k,
                        BACKWARD,
                        m,
                        mu,
                    )
                )
            ev.append(
                ScheduleEvent(
                    base + (t + depth - 1) + (t - 1) + (depth - 1 - k), k, UPDATE, m
                )
            )
    return Timeline("gpipe", depth, n_batches, t, ev)


def build_1f1b(depth: int, n_batches: int) -> Timeline:
    """Stage k runs depth-k warm-up forwards, then alternates
    backward/forward; every backward is followed by an update in its slot.

    Closed-form slots: backward of mb m on stage k sits at
    2*depth - 1 - k + 2*(m - 1); a post-warm-up forward follows the backward
    that freed its pipeline seat.
    """
    _require_depth(depth)
    _require_batches(n_batches)
    ev = []
    for k in range(depth):
        warm = depth - k
        for m in range(1, n_batches + 1):
            if m <= warm:
                fslot = k + (m - 1)
            else:
                fslot = 2 * depth - k + 2 * (m - warm - 1)
            bslot = 2 * depth - 1 - k + 2 * (m - 1)
            ev.append(ScheduleEvent(fslot, k, FORWARD, m))
            ev.append(ScheduleEvent(bslot, k, BACKWARD, m))
            ev.append(ScheduleEvent(bslot, k, UPDATE, m))
    return Timeline("1f1b", depth, n_batches, 1, ev)


def _require_depth(depth: int) -> None:
    if depth < 1:
        raise TimelineError(f"depth must be >= 1, got {depth}")


def _require_batches(n: int) -> None:
    if n < 1:
        raise TimelineError(f"n_batches must be >= 1, got {n}")


# ---- validation ---------------------------------------------------------------


def validate_timeline(tl: Timeline) -> None:
    """Check structural invariants; raises TimelineError on the first breach.

    Enforced: event fields in range; one forward/backward per stage-slot;
    forwards of a micro precede the next stage's; backwards precede the
    previous stage's and follow the micro's forward; exactly one update per
    (mb, stage) sharing the slot of that pair's last backward; work
    conservation per stage.
    """
    t = tl.micro_per_mini
    fw: dict[tuple[int, int, int], int] = {}
    bw: dict[tuple[int, int, int], int] = {}
    up: dict[tuple[int, int], int] = {}
    busy: set[tuple[int, int]] = set()

    for e in tl.events:
        if e.slot < 0:
            raise TimelineError(f"negative slot in {e}")
        if not 0 <= e.stage < tl.depth:
            raise TimelineError(f"stage out of range in {e}")
        if not 1 <= e.mb <= tl.n_batches:
            raise TimelineError(f"mb out of range in {e}")
        if not 0 <= e.micro < t:
            raise TimelineError(f"micro out of range in {e}")
        if e.kind == UPDATE:
            if (e.mb, e.stage) in up:
                raise TimelineError(f"duplicate update for mb {e.mb} stage {e.stage}")
            up[(e.mb, e.stage)] = e.slot
            continue
        if e.kind not in (FORWARD, BACKWARD):
            raise TimelineError(f"unknown kind in {e}")
        if (e.stage, e.slot) in busy:
            raise TimelineError(f"two work events on stage {e.stage} slot {e.slot}")
        busy.add((e.stage, e.slot))
        table = fw if e.kind == FORWARD else bw
        key = (e.mb, e.micro, e.stage)
        if key in table:
            raise TimelineError(f"duplicate {e.kind} for mb/micro/stage {key}")
        table[key] = e.slot

    for m in range(1, tl.n_batches + 1):
        for mu in range(t):
            for k in range(tl.depth):
                key = (m, mu, k)
                if key not in fw or key not in bw:
                    raise TimelineError(f"missing forward/backward for {key}")
                if k > 0 and fw[key] <= fw[(m, mu, k - 1)]:
                    raise TimelineError(
                        f"forward of mb {m} micro {mu} at stage {k} does not "
                        f"follow stage {k - 1}"
                    )
                if k < tl.depth - 1 and bw[key] <= bw[(m, mu, k + 1)]:
                    raise TimelineError(
                        f"backward of mb {m} micro {mu} at stage {k} does not "
                        f"follow stage {k + 1}"
                    )
                if bw[key] <= fw[key]:
                    raise TimelineError(
                        f"backward of mb {m} micro {mu} at stage {k} does not "
                        f"follow its forward"
                    )
        for k in range(tl.depth):
            if (m, k) not in up:
                raise TimelineError(f"missing update for mb {m} stage {k}")
            last_bw = max(bw[(m, mu, k)] for mu in range(t))
            if up[(m, k)] != last_bw:
                raise TimelineError(
                    f"update for mb {m} stage {k} not in the slot of its "
                    f"last backward"
                )

    per_stage = tl.n_batches * t
    for k in range(tl.depth):
        nf = sum(1 for key in fw if key[2] == k)
        nb = sum(1 for key in bw if key[2] == k)
        nu = sum(1 for key in up if key[1] == k)
        if nf != per_stage or nb != per_stage or nu != tl.n_batches:
            raise TimelineError(
                f"work not conserved on stage {k}: {nf} forwards, {nb} "
                f"backwards, {nu} updates"
            )


# ---- analyses -----------------------------------------------------------------


def bubble_ratio(tl: Timeline, start: int | None = None, end: int | None = None) -> Fraction:
    """Idle stage-slots divided by depth * window length, exact rational.

    A stage-slot is busy when the stage runs a forward or backward there;
    updates are zero-cost and never occupy a slot by themselves.
    """
    lo = 0 if start is None else start
    hi = tl.horizon if end is None else end
    if hi <= lo:
        raise TimelineError(f"empty slot window [{lo}, {hi})")
    busy = {
        (e.stage, e.slot)
        for e in tl.events
        if e.kind != UPDATE and lo <= e.slot < hi
    }
    total = tl.depth * (hi - lo)
    return Fraction(total - len(busy), total)


def steady_state_window(tl: Timeline) -> tuple[int, int] | None:
    """Longest contiguous run of slots in which every stage is busy, as a
    half-open (start, end); None when no slot keeps all stages busy.
    """
    busy_count: dict[int, set[int]] = {}
    for e in tl.events:
        if e.kind != UPDATE:
            busy_count.setdefault(e.slot, set()).add(e.stage)
    full = sorted(s for s, stages in busy_count.items() if len(stages) == tl.depth)
    if not full:
        return None
    best = (full[0], full[0])
    cur_start = prev = full[0]
    for s in full[1:]:
        if s == prev + 1:
            prev = s
        else:
            if prev - cur_start > best[1] - best[0]:
                best = (cur_start, prev)
            cur_start = prev = s
    if prev - cur_start > best[1] - best[0]:
        best = (cur_start, prev)
    return best[0], best[1] + 1


def _stage_order_key(e: ScheduleEvent) -> tuple[int, int]:
    return (e.slot, _KIND_ORDER[e.kind])


def count_updates_between(
    tl: Timeline,
    stage: int,
    from_event: tuple,
    to_event: tuple,
) -> int:
    """Updates applied on a stage strictly between two of its events.

    from_event/to_event are (kind, mb) or (kind, mb, micro) selectors.
    """
    sel = []
    for spec in (from_event, to_event):
        kind, mb = spec[0], spec[1]
        micro = spec[2] if len(spec) > 2 else 0
        matches = [
            e
            for e in tl.events
            if e.stage == stage and e.kind == kind and e.mb == mb and e.micro == micro
        ]
        if not matches:
            raise TimelineError(f"no event {spec} on stage {stage}")
        sel.append(matches[0])
    lo, hi = _stage_order_key(sel[0]), _stage_order_key(sel[1])
    if hi < lo:
        raise TimelineError("to_event precedes from_event")
    return sum(
        1
        for e in tl.events
        if e.stage == stage
        and e.kind == UPDATE
        and lo < _stage_order_key(e) < hi
    )


def makespan(tl: Timeline, costs: CostModel | None = None) -> float:
    """Critical-path completion time under the cost model.

    Events run in slot order on each stage (per-stage serialization); a
    forward additionally waits for the previous stage's forward of the same
    micro, a backward for the next stage's backward and its own forward.
    Updates are instantaneous.
    """
    costs = costs or CostModel()
    scale = 1.0 / tl.micro_per_mini
    done: dict[tuple, float] = {}
    stage_ready = [0.0] * tl.depth
    finish = 0.0
    for e in tl.events:
        deps = [stage_ready[e.stage]]
        if e.kind == FORWARD:
            dur = costs.fcost(e.stage) * scale
            if e.stage > 0:
                deps.append(done[(FORWARD, e.mb, e.micro, e.stage - 1)])
        elif e.kind == BACKWARD:
            dur = costs.bcost(e.stage) * scale
            deps.append(done[(FORWARD, e.mb, e.micro, e.stage)])
            if e.stage < tl.depth - 1:
                deps.append(done[(BACKWARD, e.mb, e.micro, e.stage + 1)])
        else:
            dur = 0.0
        end = max(deps) + dur
        done[(e.kind, e.mb, e.micro, e.stage)] = end
        stage_ready[e.stage] = end
        finish = max(finish, end)
    return finish


# ---- export -------------------------------------------------------------------

TIMELINE_CSV_HEADER = "slot,stage,kind,mb,micro"


def timeline_rows(tl: Timeline) -> list[dict]:
    return [
        {"slot": e.slot, "stage": e.stage, "kind": e.kind, "mb": e.mb, "micro": e.micro}
        for e in tl.events
    ]


def timeline_csv_text(tl: Timeline) -> str:
    lines = [TIMELINE_CSV_HEADER]
    for e in tl.events:
        lines.append(f"{e.slot},{e.stage},{e.kind},{e.mb},{e.micro}")
    return "\n".join(lines) + "\n"


def timeline_json_obj(tl: Timeline) -> dict:
    return {
        "kind": tl.kind,
        "depth": tl.depth,
        "n_batches": tl.n_batches,
        "micro_per_mini": tl.micro_per_mini,
        "horizon": tl.horizon,
        "events": timeline_rows(tl),
    }


def timeline_from_json_obj(obj: dict) -> Timeline:
    events = [
        ScheduleEvent(r["slot"], r["stage"], r["kind"], r["mb"], r["micro"])
        for r in obj["events"]
    ]
    return Timeline(
        obj["kind"], obj["depth"], obj["n_batches"], obj["micro_per_mini"], events
    )


def timeline_json_text(tl: Timeline) -> str:
    return json.dumps(timeline_json_obj(tl), indent=2, sort_keys=True) + "\n"
