"""Grace-period arrangement: how many decode steps to run before migrating.

A preemption notice leaves T_remaining seconds; decoding is useful work, so
the arranger runs as many steps as fit while still reserving the migration
window (maximize S with l_exe(S) < T- - T_mig).  If the migration would cost
more than the work it preserves, the batch just drains the grace period and
reroutes without its cache.  An acquisition is the mirror image: keep decoding
on the old configuration until the new instance's initialization period is
covered (minimize S with l_exe(S) >= T+), then join and migrate.
"""

import math
from dataclasses import dataclass

from .costmodel import PerfProfile
from .domain import ClusterState, InstanceState, ModelSpec, ParallelConfig


class ArrangerError(ValueError):
    pass


@dataclass
class BatchProgress:
    """Decode position of the batch an arrangement applies to."""

    steps_remaining: int  # decode iterations left for the longest request
    prefill_pending: bool = False  # True before the initial phase has run


@dataclass
class GraceContext:
    """Snapshot handed to the arranger when a grace period opens."""

    kind: str  # "preemption" | "acquisition"
    t_remaining: float  # T- (preemption) or T+ (acquisition init period)
    t_migration: float  # estimated migration cost
    batch: BatchProgress
    config: ParallelConfig

    def __post_init__(self):
        if self.kind not in ("preemption", "acquisition"):
            raise ArrangerError(f"unknown grace kind {self.kind!r}")
        if self.t_remaining < 0 or self.t_migration < 0:
            raise ArrangerError("grace context times must be >= 0")


@dataclass
class Arrangement:
    steps: int  # decode iterations to run before stopping
    action_after: str  # migrate_with_cache | reroute_without_cache | join_and_migrate


def _latency_of(ctx: GraceContext, profile: PerfProfile, steps: int, s_in: int | None = None) -> float:
    """l_exe(S | C_t) measured from the batch's current decode position."""
    step = profile.decode_seconds(ctx.config)
    init = 0.0
    if ctx.batch.prefill_pending:
        init = profile.prefill_seconds(ctx.config, profile.nominal_s_in if s_in is None else s_in)
    return init + steps * step


def _max_steps_below(ctx: GraceContext, profile: PerfProfile, budget: float) -> int:
    """Largest S in [0, remaining] with l_exe(S) strictly below the budget."""
    remaining = ctx.batch.steps_remaining
    if _latency_of(ctx, profile, 0) >= budget:
        return 0
    step = profile.decode_seconds(ctx.config)
    base = _latency_of(ctx, profile, 0)
    # strict inequality: largest S with base + S*step < budget
    s = int(math.ceil((budget - base) / step)) - 1
    while _latency_of(ctx, profile, s + 1) < budget:
        s += 1
    while s > 0 and _latency_of(ctx, profile, s) >= budget:
        s -= 1
    return max(0, min(s, remaining))


def arrange_preemption(ctx: GraceContext, profile: PerfProfile) -> Arrangement:
    """Maximize useful decode steps while reserving the migration window.

    Falls back to reroute-without-cache when migrating costs at least as much
    as the decode work it would preserve (the arrangement must not increase
    the request's latency).
    """
    if ctx.kind != "preemption":
        raise ArrangerError("arrange_preemption needs a preemption context")
    steps = _max_steps_below(ctx, profile, ctx.t_remaining - ctx.t_migration)
    if ctx.t_migration < _latency_of(ctx, profile, steps):
        return Arrangement(steps=steps, action_after="migrate_with_cache")
    drain = _max_steps_below(ctx, profile, ctx.t_remaining)
    return Arrangement(steps=drain, action_after="reroute_without_cache")


def arrange_acquisition(ctx: GraceContext, profile: PerfProfile) -> Arrangement:
    """Smallest decode count covering the new instance's initialization."""
    if ctx.kind != "acquisition":
        raise ArrangerError("arrange_acquisition needs an acquisition context")
    remaining = ctx.batch.steps_remaining
    step = profile.decode_seconds(ctx.config)
    s = 0
    if _latency_of(ctx, profile, 0) < ctx.t_remaining:
        base = _latency_of(ctx, profile, 0)
        s = max(0, int(math.floor((ctx.t_remaining - base) / step)))
        while _latency_of(ctx, profile, s) < ctx.t_remaining:
            s += 1
        while s > 0 and _latency_of(ctx, profile, s - 1) >= ctx.t_remaining:
            s -= 1
    if s > remaining:
        s = remaining
    return Arrangement(steps=s, action_after="join_and_migrate")


@dataclass
class ResolvedArrangement:
    context: GraceContext
    arrangement: Arrangement
    migration_start: float  # seconds from now


def resolve_conflicts(pending: list[GraceContext], profile: PerfProfile) -> list[ResolvedArrangement]:
    """Serialize overlapping grace periods.

    Preemptions keep their schedules (ordered by deadline) and never overlap;
    an acquisition's join is pushed past any preemption-triggered migration
    still in flight, so no instance takes part in two migrations at once.
    """
    preemptions = sorted(
        (c for c in pending if c.kind == "preemption"),
        key=lambda c: c.t_remaining,
    )
    acquisitions = [c for c in pending if c.kind == "acquisition"]
    out: list[ResolvedArrangement] = []
    busy_until = 0.0
    for ctx in preemptions:
        arr = arrange_preemption(ctx, profile)
        start = max(_latency_of(ctx, profile, arr.steps), busy_until)
        if arr.action_after == "migrate_with_cache":
            busy_until = start + ctx.t_migration
        out.append(ResolvedArrangement(ctx, arr, start))
    for ctx in acquisitions:
        arr = arrange_acquisition(ctx, profile)
        start = max(_latency_of(ctx, profile, arr.steps), ctx.t_remaining, busy_until)
        busy_until = start + ctx.t_migration
        out.append(ResolvedArrangement(ctx, arr, start))
    return out


# ---------------------------------------------------------------------------
# Early-loss fallback

@dataclass
class RecoveryAction:
    kind: str  # "none" | "migrate_from_replicas" | "restart_from_storage"
    source: str | None = None  # local_disk | remote_storage when restarting


def handle_early_loss(lost: InstanceState, cluster: ClusterState, model: ModelSpec,
                      local_weights_available: bool = False) -> RecoveryAction:
    """Recovery when an instance dies before its arranged migration ran.

    Its cache is gone either way.  If the survivors still cover every model
    shard the lost instance held, context migrates from replicas; if some
    shard has no surviving copy the system must reload weights, from local
    disk when present, else from remote storage.
    """
    lost_shards = [s for inv in lost.gpu_inventories for s in inv.model_shards]
    if not lost_shards:
        return RecoveryAction(kind="none")

    survivors = [
        inst for inst in cluster.instances
        if inst.id != lost.id and inst.status in ("active", "grace_preempting")
    ]
    surviving: dict[int, list] = {}
    for inst in survivors:
        for inv in inst.gpu_inventories:
            for layer, lo, hi in inv.model_shards:
                surviving.setdefault(layer, []).append((lo, hi))

    from .domain import subtract_intervals

    for layer, lo, hi in lost_shards:
        uncovered = subtract_intervals((lo, hi), surviving.get(layer, []))
        if uncovered:
            source = "local_disk" if local_weights_available else "remote_storage"
            return RecoveryAction(kind="restart_from_storage", source=source)
    return RecoveryAction(kind="migrate_from_replicas")
