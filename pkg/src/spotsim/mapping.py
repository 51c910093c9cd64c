"""Device mapping: assign GPUs to topology positions by max-weight matching.

Edge weights are reusable bytes (model context overlap plus KV-cache overlap
for requests the target pipeline inherits), so a maximum-weight assignment is
exactly the one minimizing migration traffic.  Multi-GPU instances go through
a two-step matching: GPUs are fused per instance and positions per
tensor-parallel group, an inner match fixes the per-GPU pairing inside each
fused pair, and an outer match assigns fused groups.
"""

from dataclasses import dataclass

from .domain import (
    ContextInventory,
    DomainError,
    GpuRef,
    InstanceState,
    ModelSpec,
    ParallelConfig,
    RequestSpec,
    TopologyPosition,
    natural_key,
    overlap_bytes,
    positions,
    required_context,
    shard_interval,
    stage_layers,
)


class MappingError(ValueError):
    pass


@dataclass
class BipartiteGraph:
    """Dense weight matrix between GPU nodes and topology positions."""

    gpus: list[GpuRef]
    slots: list[TopologyPosition]
    weights: list[list[float]]  # weights[i][j] = reusable bytes gpu i -> slot j

    def __post_init__(self):
        if len(self.weights) != len(self.gpus):
            raise MappingError("weight rows must match gpu count")
        for row in self.weights:
            if len(row) != len(self.slots):
                raise MappingError("weight cols must match slot count")
            if any(w < 0 for w in row):
                raise MappingError("weights must be >= 0")


@dataclass
class DeviceMapping:
    """Injective GPU -> position assignment and its total reused bytes."""

    assignment: dict[GpuRef, TopologyPosition]
    total_weight: float
    config: ParallelConfig | None = None

    def position_of(self, gpu: GpuRef) -> TopologyPosition | None:
        return self.assignment.get(gpu)

    def gpu_for(self) -> dict[TopologyPosition, GpuRef]:
        return {pos: gpu for gpu, pos in self.assignment.items()}


# ---------------------------------------------------------------------------
# Kuhn-Munkres

def _hungarian_max(weights: list[list[float]]) -> list[int]:
    """Max-weight perfect matching on an n x n matrix; returns col for each row.

    Potentials + augmenting-path form, O(n^3).  Columns are scanned in
    ascending order so ties resolve to the lexicographically least matching.
    """
    n = len(weights)
    if n == 0:
        return []
    cost = [[-w for w in row] for row in weights]
    INF = float("inf")
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    match = [0] * (n + 1)  # match[j] = row assigned to column j (1-based)
    way = [0] * (n + 1)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = [INF] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta = INF
            j1 = 0
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1][j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    row_to_col = [0] * n
    for j in range(1, n + 1):
        row_to_col[match[j] - 1] = j - 1
    return row_to_col


def km_match(graph: BipartiteGraph) -> DeviceMapping:
    """Maximum-weight assignment of GPUs to positions.

    Rectangular graphs are padded with zero-weight dummies; dummy-assigned
    GPUs stay idle and dummy-assigned positions stay uncovered (only possible
    when there are fewer GPUs than positions).
    """
    n_l, n_r = len(graph.gpus), len(graph.slots)
    n = max(n_l, n_r)
    if n == 0:
        return DeviceMapping(assignment={}, total_weight=0.0)
    padded = [[0.0] * n for _ in range(n)]
    for i in range(n_l):
        row = graph.weights[i]
        for j in range(n_r):
            padded[i][j] = row[j]
    row_to_col = _hungarian_max(padded)
    assignment: dict[GpuRef, TopologyPosition] = {}
    total = 0.0
    for i in range(n_l):
        j = row_to_col[i]
        if j < n_r:
            assignment[graph.gpus[i]] = graph.slots[j]
            total += graph.weights[i][j]
    return DeviceMapping(assignment=assignment, total_weight=total)


# ---------------------------------------------------------------------------
# Graph construction

def required_context_with_cache(config: ParallelConfig, pos: TopologyPosition, model: ModelSpec,
                                inherited: list[tuple[str, int]] | None) -> ContextInventory:
    """Model context of a position plus cache shards for inherited requests."""
    base = required_context(config, pos, model)
    if not inherited:
        return base
    lo, hi = shard_interval(config.tensor_shards, pos.shard)
    layers = stage_layers(model.num_layers, config.pipeline_stages, pos.stage)
    cache = tuple(
        (rid, lyr, lo, hi, tokens)
        for rid, tokens in inherited
        for lyr in layers
        if tokens > 0
    )
    return ContextInventory(model_shards=base.model_shards, cache_shards=cache)


def default_inheritance(d_old: int, d_new: int) -> dict[int, int]:
    """Identity pipeline inheritance on min(D_old, D_new)."""
    return {d: d for d in range(1, min(d_old, d_new) + 1)}


def sorted_gpu_refs(instances: list[InstanceState]) -> list[GpuRef]:
    refs = []
    for inst in sorted(instances, key=lambda i: natural_key(i.id)):
        refs.extend(inst.gpu_refs())
    return refs


def build_graph(instances: list[InstanceState], target: ParallelConfig, model: ModelSpec,
                inheritance: dict[int, int] | None = None,
                requests_by_old_pipeline: dict[int, list[RequestSpec]] | None = None) -> BipartiteGraph:
    """Edge weights = overlap between each GPU's holdings and each position's needs.

    inheritance maps old pipeline index -> new pipeline index (identity prefix
    by default); requests on inherited pipelines contribute cache overlap to
    the inheriting pipeline's positions.
    """
    gpus: list[GpuRef] = []
    inventories: dict[GpuRef, ContextInventory] = {}
    for inst in sorted(instances, key=lambda i: natural_key(i.id)):
        for g, ref in enumerate(inst.gpu_refs()):
            gpus.append(ref)
            inventories[ref] = inst.gpu_inventories[g]

    inherited_by_new: dict[int, list[tuple[str, int]]] = {}
    if inheritance and requests_by_old_pipeline:
        for d_old in sorted(requests_by_old_pipeline):
            d_new = inheritance.get(d_old)
            if d_new is None:
                continue
            for req in sorted(requests_by_old_pipeline[d_old], key=lambda r: r.id):
                tokens = req.s_in + req.tokens_generated
                inherited_by_new.setdefault(d_new, []).append((req.id, tokens))

    slots = positions(target)
    needs = [
        required_context_with_cache(target, pos, model, inherited_by_new.get(pos.pipeline))
        for pos in slots
    ]
    weights = [[overlap_bytes(inventories[gpu], need, model) for need in needs] for gpu in gpus]
    return BipartiteGraph(gpus=gpus, slots=slots, weights=weights)


# ---------------------------------------------------------------------------
# Two-step matching for multi-GPU instances

def map_devices(instances: list[InstanceState], target: ParallelConfig, model: ModelSpec,
                gpus_per_instance: int,
                inheritance: dict[int, int] | None = None,
                requests_by_old_pipeline: dict[int, list[RequestSpec]] | None = None,
                fused_weight: str = "max") -> DeviceMapping:
    """Two-step device mapping: fuse, match within fused pairs, match fused graph.

    Group size is min(G, M): an instance's GPUs are fused in index order and a
    (pipeline, stage) row's shards are fused along m, so a fused pair is
    matched by an inner KM whose matching both scores the fused edge (max of
    matched edge weights per the reference rule, or their sum with
    fused_weight="sum") and fixes the per-GPU expansion.
    """
    for inst in instances:
        if inst.gpus != gpus_per_instance:
            raise MappingError(f"instance {inst.id} has {inst.gpus} GPUs, expected {gpus_per_instance}")
    if fused_weight not in ("max", "sum"):
        raise MappingError("fused_weight must be 'max' or 'sum'")

    graph = build_graph(instances, target, model, inheritance, requests_by_old_pipeline)
    group = min(gpus_per_instance, target.tensor_shards)
    if group == 1 and gpus_per_instance == 1:
        mapping = km_match(graph)
        mapping.config = target
        return mapping
    if gpus_per_instance % group or target.tensor_shards % group:
        raise MappingError(
            f"group size {group} must divide both G={gpus_per_instance} and M={target.tensor_shards}"
        )

    gpu_index = {ref: i for i, ref in enumerate(graph.gpus)}
    slot_index = {pos: j for j, pos in enumerate(graph.slots)}

    fused_gpus = [graph.gpus[i:i + group] for i in range(0, len(graph.gpus), group)]
    fused_slots = [graph.slots[j:j + group] for j in range(0, len(graph.slots), group)]

    inner: dict[tuple[int, int], tuple[float, list[int]]] = {}
    fused_w = [[0.0] * len(fused_slots) for _ in fused_gpus]
    for a, gpu_grp in enumerate(fused_gpus):
        for b, slot_grp in enumerate(fused_slots):
            sub = [
                [graph.weights[gpu_index[g]][slot_index[s]] for s in slot_grp]
                for g in gpu_grp
            ]
            perm = _hungarian_max(sub)
            matched = [sub[i][perm[i]] for i in range(group)]
            inner[(a, b)] = (sum(matched), perm)
            fused_w[a][b] = max(matched) if fused_weight == "max" else sum(matched)

    outer = _hungarian_max(_pad_square(fused_w))
    assignment: dict[GpuRef, TopologyPosition] = {}
    total = 0.0
    for a in range(len(fused_gpus)):
        b = outer[a]
        if b >= len(fused_slots):
            continue
        _, perm = inner[(a, b)]
        for i, g in enumerate(fused_gpus[a]):
            s = fused_slots[b][perm[i]]
            assignment[g] = s
            total += graph.weights[gpu_index[g]][slot_index[s]]
    return DeviceMapping(assignment=assignment, total_weight=total, config=target)


def _pad_square(weights: list[list[float]]) -> list[list[float]]:
    n = max(len(weights), len(weights[0]) if weights else 0)
    out = [[0.0] * n for _ in range(n)]
    for i, row in enumerate(weights):
        for j, w in enumerate(row):
            out[i][j] = w
    return out


# ---------------------------------------------------------------------------
# Cache retention

def retain_cache(active_requests: list[RequestSpec], current: ParallelConfig,
                 target: ParallelConfig) -> list[RequestSpec]:
    """Requests whose KV cache survives a capacity shrink.

    When the target handles fewer concurrent requests, the ones with the most
    decoding progress are kept (ties to the lower request id); everything else
    recomputes from scratch after the switch.
    """
    capacity = target.concurrent_requests
    if current.concurrent_requests <= capacity and len(active_requests) <= capacity:
        return sorted(active_requests, key=lambda r: r.id)
    ranked = sorted(active_requests, key=lambda r: (-r.tokens_generated, r.id))
    return sorted(ranked[:capacity], key=lambda r: r.id)
