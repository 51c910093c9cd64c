"""Analytic latency, throughput, migration-time and monetary-cost estimation.

All execution costs come from a calibrated profile: per-(P,M,B) decode-step
and prefill tables measured offline, a pipeline efficiency scalar, and a
uniform full-duplex interconnect model.  A batch of S_out decode steps costs

    prefill(P,M,B,S_in) + S_out * decode(P,M,B)

which is the KV-cache approximation of summing a per-length step cost; the
exact summation form is kept alongside to bound the approximation error.

The profile tables double as the feasibility filter: a (P,M,B) shape that is
absent was not profiled (e.g. it does not fit in GPU memory) and is not a
candidate configuration.  There is deliberately no nearest-neighbor fallback.
"""

import json
from dataclasses import dataclass
from pathlib import Path

from .domain import ModelSpec, ParallelConfig

HOUR = 3600.0


class CostModelError(ValueError):
    pass


class ProfileMissError(CostModelError):
    """A (P,M,B) shape or s_in entry is not covered by the profile."""


@dataclass
class LatencyBreakdown:
    """End-to-end request latency split into queueing and execution parts."""

    l_sch: float
    l_exe: float

    def __post_init__(self):
        if self.l_sch < 0 or self.l_exe < 0:
            raise CostModelError("latency components must be >= 0")

    @property
    def l_req(self) -> float:
        return self.l_sch + self.l_exe


@dataclass(frozen=True)
class PriceSheet:
    spot_usd_per_hour: float
    ondemand_usd_per_hour: float

    def __post_init__(self):
        if self.spot_usd_per_hour <= 0 or self.ondemand_usd_per_hour <= 0:
            raise CostModelError("prices must be positive")

    def rate(self, kind: str) -> float:
        if kind == "spot":
            return self.spot_usd_per_hour
        if kind == "ondemand":
            return self.ondemand_usd_per_hour
        raise CostModelError(f"unknown instance kind {kind!r}")


Shape = tuple[int, int, int]  # (P, M, B)


@dataclass
class PerfProfile:
    """Calibrated execution/transfer cost tables for one model."""

    model: ModelSpec
    decode_table: dict[Shape, float]
    prefill_table: dict[Shape, dict[int, float]]
    pipeline_efficiency: float
    bandwidth: float  # bytes/second between any instance pair, full duplex
    transfer_latency: float  # per-round fixed latency, seconds
    prices: PriceSheet
    local_restart_ratio: float = 1.45
    remote_restart_ratio: float = 9.54
    restart_baseline_s: float = 10.0  # default equivalent-migration baseline
    nominal_s_in: int = 512
    nominal_s_out: int = 128

    def __post_init__(self):
        if not (0 < self.pipeline_efficiency <= 1):
            raise CostModelError("pipeline_efficiency must be in (0, 1]")
        if self.bandwidth <= 0 or self.transfer_latency < 0:
            raise CostModelError("bad interconnect parameters")
        for shape, v in self.decode_table.items():
            if v <= 0:
                raise CostModelError(f"decode cost for {shape} must be positive")

    def shapes(self) -> list[Shape]:
        return sorted(self.decode_table)

    def has_shape(self, config: ParallelConfig, batch_size: int | None = None) -> bool:
        b = config.batch_limit if batch_size is None else batch_size
        return (config.pipeline_stages, config.tensor_shards, b) in self.decode_table

    def decode_seconds(self, config: ParallelConfig, batch_size: int | None = None) -> float:
        b = config.batch_limit if batch_size is None else batch_size
        key = (config.pipeline_stages, config.tensor_shards, b)
        try:
            return self.decode_table[key]
        except KeyError:
            raise ProfileMissError(f"no decode entry for (P,M,B)={key}") from None

    def prefill_seconds(self, config: ParallelConfig, s_in: int, batch_size: int | None = None) -> float:
        b = config.batch_limit if batch_size is None else batch_size
        key = (config.pipeline_stages, config.tensor_shards, b)
        try:
            entries = self.prefill_table[key]
        except KeyError:
            raise ProfileMissError(f"no prefill entry for (P,M,B)={key}") from None
        return _prefill_at(entries, s_in)


def _prefill_at(entries: dict[int, float], s_in: int) -> float:
    """Table lookup with linear interpolation over tabulated s_in points."""
    if s_in in entries:
        return entries[s_in]
    pts = sorted(entries.items())
    if len(pts) == 1:
        ref_s, ref_v = pts[0]
        return ref_v * s_in / ref_s
    if s_in < pts[0][0]:
        (x0, y0), (x1, y1) = pts[0], pts[1]
    elif s_in > pts[-1][0]:
        (x0, y0), (x1, y1) = pts[-2], pts[-1]
    else:
        for (x0, y0), (x1, y1) in zip(pts, pts[1:]):
            if x0 <= s_in <= x1:
                break
    frac = (s_in - x0) / (x1 - x0)
    return y0 + frac * (y1 - y0)


# ---------------------------------------------------------------------------
# Latency and throughput

def exec_latency(profile: PerfProfile, config: ParallelConfig, s_in: int, s_out: int,
                 batch_size: int | None = None) -> float:
    """Batch execution latency: prefill plus s_out constant decode steps."""
    if s_in < 0 or s_out < 0:
        raise CostModelError("sequence lengths must be >= 0")
    init = profile.prefill_seconds(config, s_in, batch_size)
    if s_out == 0:
        return init
    return init + s_out * profile.decode_seconds(config, batch_size)


def exec_latency_exact(profile: PerfProfile, config: ParallelConfig, s_in: int, s_out: int,
                       batch_size: int | None = None, per_length_cost=None) -> float:
    """Summation form: prefill plus a per-length step cost for every decode.

    With the default constant step cost this reduces to exec_latency exactly;
    a caller-supplied per_length_cost(seq_len) exposes the approximation error
    of the constant-step model.
    """
    if per_length_cost is None:
        step = profile.decode_seconds(config, batch_size)
        per_length_cost = lambda _s: step
    total = profile.prefill_seconds(config, s_in, batch_size)
    for i in range(1, s_out + 1):
        total += per_length_cost(s_in + i)
    return total


def throughput(profile: PerfProfile, config: ParallelConfig,
               s_in: int | None = None, s_out: int | None = None) -> float:
    """Serving throughput phi(C) in requests/second at the nominal workload.

    D pipelines each complete B requests per batch; with P stages in flight
    the per-batch makespan amortizes to exec_latency / (P * eta).
    """
    s_in = profile.nominal_s_in if s_in is None else s_in
    s_out = profile.nominal_s_out if s_out is None else s_out
    latency = exec_latency(profile, config, s_in, s_out)
    effective = latency / (config.pipeline_stages * profile.pipeline_efficiency)
    return config.data_parallel * config.batch_limit / effective


# ---------------------------------------------------------------------------
# Migration and restart stalls

def plan_timeline(plan, profile: PerfProfile, release: dict[str, float] | None = None,
                  start: float = 0.0) -> list[float]:
    """Completion time of each plan action under asynchronous transfers.

    Transfers issue in plan order (the order is the priority: cache rounds
    first, then layers), every instance's full-duplex link serializes its own
    sends and its own receives, and transfers on disjoint instance pairs
    stream concurrently -- rounds pipeline instead of barriering, matching
    batched asynchronous send/recv execution.  Same-instance copies ride the
    intra-instance interconnect and cost no link time.  Each round with
    transfers adds one fixed latency, and round completions are monotone so
    stage-start markers stay meaningful.

    `release` gives per-instance earliest transfer times (an instance still
    finishing arranged decode work frees its link only when it stops).
    """
    release = release or {}
    out_free: dict[str, float] = {}
    in_free: dict[str, float] = {}
    ends: list[float] = []
    prev_end = start
    for action in plan.actions:
        end = prev_end
        moved = False
        for tr in action.transfers:
            src, dst = tr.src[0], tr.dst[0]
            if src == dst:
                continue
            moved = True
            begin = max(out_free.get(src, release.get(src, start)),
                        in_free.get(dst, release.get(dst, start)))
            fin = begin + tr.bytes / profile.bandwidth
            out_free[src] = fin
            in_free[dst] = fin
            end = max(end, fin)
        if moved:
            end += profile.transfer_latency
        ends.append(max(end, prev_end))
        prev_end = ends[-1]
    return ends


def migration_cost(plan, profile: PerfProfile, config: ParallelConfig | None = None,
                   progressive: bool = False, release: dict[str, float] | None = None,
                   start: float = 0.0) -> float:
    """Service stall imposed by a migration plan, in seconds from `start`.

    Without progressive start the stall is the full plan duration.  With it,
    serving resumes once the first stage's context lands, and a later stage p
    only stalls inference if its context is not ready by the time a resumed
    batch reaches it ((p-1)/P of a decode step later); the cost is the worst
    such constraint.
    """
    timeline = plan_timeline(plan, profile, release=release, start=start)
    total = max(timeline[-1] if timeline else start, start) - start
    if not progressive:
        return total
    starts = [
        (action.stage, end)
        for action, end in zip(plan.actions, timeline)
        if action.kind == "start_stage"
    ]
    if not starts:
        return total
    if config is not None:
        step = profile.decode_seconds(config) / config.pipeline_stages
    else:
        step = 0.0
    stall = 0.0
    for order, (_stage, ready) in enumerate(sorted(starts, key=lambda s: s[0])):
        stall = max(stall, ready - start - order * step)
    return max(0.0, stall)


def restart_cost(profile: PerfProfile, source: str, migration_baseline: float | None = None) -> float:
    """Cold-restart stall relative to an equivalent context migration.

    Loading weights from local disk or remote storage costs a profiled multiple
    of what migrating the same context over the interconnect would have cost.
    """
    baseline = profile.restart_baseline_s if migration_baseline is None else migration_baseline
    if source == "local_disk":
        return profile.local_restart_ratio * baseline
    if source == "remote_storage":
        return profile.remote_restart_ratio * baseline
    raise CostModelError(f"unknown restart source {source!r}")


def full_reload_baseline(profile: PerfProfile, config: ParallelConfig,
                         gpus_per_instance: int) -> float:
    """Equivalent-migration time for a full (zero-reuse) context load.

    Every instance pulls its G resident GPU slices over its own link, so the
    reload time is the per-instance byte volume at line rate.
    """
    per_gpu = profile.model.total_param_bytes / (config.pipeline_stages * config.tensor_shards)
    return gpus_per_instance * per_gpu / profile.bandwidth + profile.transfer_latency


# ---------------------------------------------------------------------------
# Monetary accounting

@dataclass
class CostSummary:
    total_usd: float
    usd_per_token: float | None


def monetary_cost(usage_log, prices: PriceSheet, tokens_served: int | None = None) -> CostSummary:
    """Bill a usage log of (instance_id, kind, start_s, end_s) active intervals."""
    by_instance: dict[str, list[tuple[float, float]]] = {}
    total = 0.0
    for instance_id, kind, start, end in usage_log:
        if end < start:
            raise CostModelError(f"negative interval for {instance_id}")
        for s0, e0 in by_instance.get(instance_id, ()):
            if start < e0 and s0 < end:
                raise CostModelError(f"overlapping usage intervals for {instance_id}")
        by_instance.setdefault(instance_id, []).append((start, end))
        total += (end - start) / HOUR * prices.rate(kind)
    per_token = None
    if tokens_served is not None and tokens_served > 0:
        per_token = total / tokens_served
    return CostSummary(total_usd=total, usd_per_token=per_token)


# ---------------------------------------------------------------------------
# Profile file I/O

def profile_from_dict(doc: dict) -> PerfProfile:
    model = ModelSpec(
        name=doc["model"]["name"],
        num_layers=doc["model"]["num_layers"],
        bytes_per_layer=doc["model"]["bytes_per_layer"],
        kv_bytes_per_token_per_layer=doc["model"]["kv_bytes_per_token_per_layer"],
    )
    decode = {_parse_shape(k): float(v) for k, v in doc["t_dec"].items()}
    prefill = {
        _parse_shape(k): {int(s): float(v) for s, v in entries.items()}
        for k, entries in doc["t_init"].items()
    }
    restart = doc.get("restart", {})
    nominal = doc.get("nominal", {})
    return PerfProfile(
        model=model,
        decode_table=decode,
        prefill_table=prefill,
        pipeline_efficiency=float(doc["pipeline_efficiency"]),
        bandwidth=float(doc["bandwidth_bytes_per_s"]),
        transfer_latency=float(doc.get("transfer_latency_s", 0.0)),
        prices=PriceSheet(
            spot_usd_per_hour=float(doc["prices"]["spot_usd_per_hour"]),
            ondemand_usd_per_hour=float(doc["prices"]["ondemand_usd_per_hour"]),
        ),
        local_restart_ratio=float(restart.get("local_ratio", 1.45)),
        remote_restart_ratio=float(restart.get("remote_ratio", 9.54)),
        restart_baseline_s=float(restart.get("baseline_s", 10.0)),
        nominal_s_in=int(nominal.get("s_in", 512)),
        nominal_s_out=int(nominal.get("s_out", 128)),
    )


def profile_to_dict(profile: PerfProfile) -> dict:
    return {
        "model": {
            "name": profile.model.name,
            "num_layers": profile.model.num_layers,
            "bytes_per_layer": profile.model.bytes_per_layer,
            "kv_bytes_per_token_per_layer": profile.model.kv_bytes_per_token_per_layer,
        },
        "pipeline_efficiency": profile.pipeline_efficiency,
        "bandwidth_bytes_per_s": profile.bandwidth,
        "transfer_latency_s": profile.transfer_latency,
        "restart": {
            "local_ratio": profile.local_restart_ratio,
            "remote_ratio": profile.remote_restart_ratio,
            "baseline_s": profile.restart_baseline_s,
        },
        "prices": {
            "spot_usd_per_hour": profile.prices.spot_usd_per_hour,
            "ondemand_usd_per_hour": profile.prices.ondemand_usd_per_hour,
        },
        "nominal": {"s_in": profile.nominal_s_in, "s_out": profile.nominal_s_out},
        "t_dec": {_shape_key(s): v for s, v in sorted(profile.decode_table.items())},
        "t_init": {
            _shape_key(s): {str(k): v for k, v in sorted(entries.items())}
            for s, entries in sorted(profile.prefill_table.items())
        },
    }


def load_profile(path: str | Path) -> PerfProfile:
    with open(path) as f:
        return profile_from_dict(json.load(f))


def save_profile(profile: PerfProfile, path: str | Path):
    Path(path).write_text(json.dumps(profile_to_dict(profile), indent=1) + "\n")


def _parse_shape(key: str) -> Shape:
    p, m, b = (int(x) for x in key.split(","))
    return (p, m, b)


def _shape_key(shape: Shape) -> str:
    return ",".join(str(x) for x in shape)
