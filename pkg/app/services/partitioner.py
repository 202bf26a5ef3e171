"""Stage partitioning of diffusion backbones.

The objective (slots + 2S - 2) * max_s T0(s) + max(max_s gap(s), 0) mixes two
running maxima, so it does not decompose stage by stage. The dynamic program
keeps, for every sub-problem (layers, stages, last replicas, devices), the
Pareto front of (running maxima, max stage compute, tie-break key) instead of
a single value. The final objective is monotone in every front coordinate, so
pruning dominated prefixes never loses the optimum or changes tie-breaking.
"""

from functools import lru_cache
from itertools import combinations, product
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple
import math
import logging

from app.config import settings
from app.errors import ExtrapolationError, InfeasibleError, OracleTooLargeError
from app.models.plan import Direction, PartitionPlan, PlanConfig, PlanMode, StageAssignment, StageCosts
from app.models.profile import ClusterConfig, ComponentProfile, CostField, ModelProfile
from app.services.profile import cost_at
from app.services.simulator import PipelineSpec, StageTiming, simulate_pipelines

logger = logging.getLogger(__name__)

BIDIRECTIONAL_COMM_FACTOR = 2.0

# Forward/backward splits of a unit stage probed when counting paired slots.
_UNIT_SPLITS = ((0.5, 0.5), (0.25, 0.75), (0.75, 0.25))


class StageTerms(NamedTuple):
    fwd: float
    bwd: float
    grad: float
    fwd_bytes: float
    bwd_bytes: float
    has_boundary: bool


def local_batch(batch: int, replicas: int) -> int:
    if replicas < 1 or batch % replicas:
        raise InfeasibleError(f"micro-batch {batch} is not divisible by {replicas} replica(s)")
    return batch // replicas


def stage_terms(backbone: ComponentProfile, layer_range: Tuple[int, int], replicas: int, batch: int) -> StageTerms:
    lo, hi = layer_range
    num_layers = len(backbone.layers)
    if not 0 <= lo < hi <= num_layers:
        raise InfeasibleError(f"layer range [{lo}, {hi}) is not inside [0, {num_layers})")
    b = local_batch(batch, replicas)
    layers = backbone.layers[lo:hi]
    fwd = sum(cost_at(layer, CostField.FWD_TIME, b) for layer in layers)
    bwd = sum(cost_at(layer, CostField.BWD_TIME, b) for layer in layers)
    grad = sum(cost_at(layer, CostField.GRAD_BYTES, b) for layer in layers)
    if hi < num_layers:
        edge = backbone.layers[hi - 1]
        return StageTerms(fwd, bwd, grad, cost_at(edge, CostField.FWD_COMM_BYTES, b),
                          cost_at(edge, CostField.BWD_COMM_BYTES, b), True)
    return StageTerms(fwd, bwd, grad, 0.0, 0.0, False)


def p2p_delays(terms: StageTerms, cluster: ClusterConfig, comm_factor: float = 1.0) -> Tuple[float, float]:
    """Activation and gradient transfer times across the stage's right boundary."""
    if not terms.has_boundary:
        return 0.0, 0.0
    comm = cluster.comm
    return (
        comm_factor * terms.fwd_bytes / comm.bandwidth_p2p + comm.latency_p2p,
        comm_factor * terms.bwd_bytes / comm.bandwidth_p2p + comm.latency_p2p,
    )


def sync_time(terms: StageTerms, cluster: ClusterConfig) -> float:
    return terms.grad / cluster.comm.bandwidth_ar + cluster.comm.latency_ar


def costs_from_terms(terms: StageTerms, cluster: ClusterConfig, comm_factor: float = 1.0) -> StageCosts:
    comm = cluster.comm
    if terms.has_boundary:
        send = comm_factor * (terms.fwd_bytes + terms.bwd_bytes) / comm.bandwidth_p2p + 2 * comm.latency_p2p
        send_sc = comm_factor * (2 * terms.fwd_bytes + terms.bwd_bytes) / comm.bandwidth_p2p + 3 * comm.latency_p2p
    else:
        send = send_sc = 0.0
    t_sync = sync_time(terms, cluster)
    return StageCosts(
        t0=max(terms.fwd + terms.bwd, send),
        t_sync=t_sync,
        t_comp=terms.bwd,
        gap=t_sync - terms.bwd,
        t0_sc=max(2 * terms.fwd + terms.bwd, send_sc),
    )


def stage_cost_single(
    backbone: ComponentProfile,
    cluster: ClusterConfig,
    layer_range: Tuple[int, int],
    replicas: int,
    batch: int,
    selfcond: bool = False,
    comm_factor: float = 1.0,
) -> StageCosts:
    """Cost terms of one stage holding `layer_range` on `replicas` devices.

    With `selfcond` the returned `t0` includes the extra forward pass.
    """
    costs = costs_from_terms(stage_terms(backbone, layer_range, replicas, batch), cluster, comm_factor)
    if selfcond:
        return costs.model_copy(update={"t0": costs.t0_sc})
    return costs.model_copy(update={"t0_sc": None})


def feedback_time(backbone: ComponentProfile, cluster: ClusterConfig, replicas: int, batch: int) -> float:
    """Upper bound of sending the last layer's output back to the first stage."""
    out_bytes = cost_at(backbone.layers[-1], CostField.OUT_BYTES, local_batch(batch, replicas))
    return out_bytes / cluster.comm.bandwidth_p2p + cluster.comm.latency_p2p


def selfcond_objective(plan_nosc: float, plan_sc: float, p: float) -> float:
    return p * plan_sc + (1 - p) * plan_nosc


@lru_cache(maxsize=256)
def compute_m_cdm(num_stages: int, num_microbatches: int) -> int:
    """Paired forward/backward slots of a bidirectional pipeline.

    Simulates M down and M up micro-batches over unit-cost stages and counts
    the makespan beyond the S - 1 fill slots. The maximum over several
    forward/backward splits is kept so the count bounds uneven stages too.
    """
    slots = 0
    for tf, tb in _UNIT_SPLITS:
        down = tuple(StageTiming(devices=(s,), fwd=tf, bwd=tb) for s in range(num_stages))
        up = tuple(StageTiming(devices=(num_stages - 1 - s,), fwd=tf, bwd=tb) for s in range(num_stages))
        schedule = simulate_pipelines(
            [
                PipelineSpec(Direction.DOWN, down, num_microbatches),
                PipelineSpec(Direction.UP, up, num_microbatches),
            ],
            num_stages,
        )
        slots = max(slots, math.ceil(schedule.makespan - (num_stages - 1) - 1e-9))
    return slots


MCdmFn = Callable[[int, int], int]


# Shared machinery for the dynamic programs and the brute-force oracle


class _Stage(NamedTuple):
    vector: Tuple[float, float, float]  # (t0, t0 with extra forward, gap)
    compute: float
    costs: StageCosts


class _Entry(NamedTuple):
    agg: Tuple[float, float, float]
    compute: float
    key: Tuple[Tuple[int, ...], ...]
    stages: Tuple


class _StageTable:
    """Memoized stage costs of one backbone at one micro-batch size."""

    def __init__(self, backbone: ComponentProfile, cluster: ClusterConfig, batch: int, comm_factor: float, selfcond: bool):
        self.backbone = backbone
        self.cluster = cluster
        self.batch = batch
        self.comm_factor = comm_factor
        self.selfcond = selfcond
        self.last_error: Optional[Exception] = None
        self._cache: Dict[Tuple[int, int, int], Optional[_Stage]] = {}

    def get(self, lo: int, hi: int, replicas: int) -> Optional[_Stage]:
        key = (lo, hi, replicas)
        if key not in self._cache:
            self._cache[key] = self._build(lo, hi, replicas)
        return self._cache[key]

    def _build(self, lo: int, hi: int, replicas: int) -> Optional[_Stage]:
        try:
            terms = stage_terms(self.backbone, (lo, hi), replicas, self.batch)
        except (ExtrapolationError, InfeasibleError) as e:
            self.last_error = e
            return None
        costs = costs_from_terms(terms, self.cluster, self.comm_factor)
        if not self.selfcond:
            costs = costs.model_copy(update={"t0_sc": None})
        sc = costs.t0_sc if self.selfcond else 0.0
        return _Stage((costs.t0, sc, costs.gap), terms.fwd + terms.bwd, costs)


def _merge(a: Tuple[float, ...], b: Tuple[float, ...]) -> Tuple[float, ...]:
    return tuple(max(x, y) for x, y in zip(a, b))


def _dominates(f: _Entry, e: _Entry) -> bool:
    return all(x <= y for x, y in zip(f.agg, e.agg)) and f.compute <= e.compute and f.key <= e.key


def _pareto(entries: List[_Entry]) -> List[_Entry]:
    kept: List[_Entry] = []
    for entry in sorted(set(entries), key=lambda e: (e.agg, e.compute, e.key)):
        if not any(_dominates(other, entry) for other in kept):
            kept.append(entry)
    return kept


class _Objective(NamedTuple):
    slots: int
    num_stages: int
    num_microbatches: int
    selfcond: bool
    p: float

    def evaluate(self, agg: Tuple[float, float, float], t_feedback: float) -> Tuple[float, float, Optional[float]]:
        w, w_sc, gap = agg
        clamped = max(gap, 0.0)
        plain = (self.slots + 2 * self.num_stages - 2) * w + clamped
        if not self.selfcond:
            return plain, plain, None
        sc = (self.num_microbatches + 2 * self.num_stages - 2) * w_sc + clamped + t_feedback
        return selfcond_objective(plain, sc, self.p), plain, sc


def _replica_options(cfg: PlanConfig) -> List[int]:
    if cfg.equal_replication:
        if cfg.group_size % cfg.num_stages:
            raise InfeasibleError(
                f"equal replication needs num_stages {cfg.num_stages} to divide group_size {cfg.group_size}"
            )
        return [cfg.group_size // cfg.num_stages]
    return list(range(1, cfg.group_size - cfg.num_stages + 2))


def _check_point(cluster: ClusterConfig, cfg: PlanConfig, num_layers: Sequence[int]) -> None:
    if cluster.world_size % cfg.group_size:
        raise InfeasibleError(f"group_size {cfg.group_size} does not divide world_size {cluster.world_size}")
    for count in num_layers:
        if count < cfg.num_stages:
            raise InfeasibleError(f"{count} layer(s) cannot fill {cfg.num_stages} stages")


def _single_backbone(profile: ModelProfile) -> ComponentProfile:
    if len(profile.backbones) != 1:
        raise InfeasibleError(f"expected one backbone, profile has {len(profile.backbones)}")
    return profile.backbones[0]


def _objective_for(profile: ModelProfile, cfg: PlanConfig, selfcond_prob: Optional[float]) -> _Objective:
    p = profile.selfcond_prob if selfcond_prob is None else selfcond_prob
    return _Objective(cfg.num_microbatches, cfg.num_stages, cfg.num_microbatches, cfg.selfcond, p)


def _single_plan(
    cfg: PlanConfig, objective: _Objective, table: _StageTable, entry: _Entry,
    scores: Tuple[float, float, Optional[float]], t_feedback: float,
) -> PartitionPlan:
    stages, per_stage = [], []
    device = 0
    for lo, hi, replicas in entry.stages:
        stages.append(StageAssignment(backbone=0, layer_range=(lo, hi), replicas=replicas, first_device=device))
        per_stage.append(table.get(lo, hi, replicas).costs)
        device += replicas
    total, plain, sc = scores
    return PartitionPlan(
        config=cfg,
        mode=PlanMode.SELFCOND if cfg.selfcond else PlanMode.SINGLE,
        stages=stages,
        per_stage=per_stage,
        objective=total,
        objective_plain=plain,
        objective_sc=sc,
        feedback_time=t_feedback if cfg.selfcond else None,
        selfcond_prob=objective.p if cfg.selfcond else 0.0,
    )


def partition_single(
    profile: ModelProfile, cluster: ClusterConfig, cfg: PlanConfig, selfcond_prob: Optional[float] = None,
) -> PartitionPlan:
    """Optimal contiguous partition of a single backbone.

    With `cfg.selfcond` the minimized value is the p-weighted expectation of
    the plain and the self-conditioned bounds over one shared partition.
    """
    backbone = _single_backbone(profile)
    num_layers = len(backbone.layers)
    _check_point(cluster, cfg, [num_layers])
    options = _replica_options(cfg)
    min_replicas = min(options)
    objective = _objective_for(profile, cfg, selfcond_prob)
    table = _StageTable(backbone, cluster, cfg.micro_batch, 1.0, cfg.selfcond)
    memo: Dict[Tuple[int, int, int, int], List[_Entry]] = {}

    def front(l: int, k: int, r: int, d: int) -> List[_Entry]:
        state = (l, k, r, d)
        if state in memo:
            return memo[state]
        found: List[_Entry] = []
        if k == 1:
            stage = table.get(0, l, r) if d == r else None
            if stage is not None:
                found.append(_Entry(stage.vector, stage.compute, ((), (r,)), ((0, l, r),)))
        else:
            for lp in range(k - 1, l):
                stage = table.get(lp, l, r)
                if stage is None:
                    continue
                for rp in options:
                    if d - r - rp < (k - 2) * min_replicas:
                        continue
                    for prev in front(lp, k - 1, rp, d - r):
                        found.append(_Entry(
                            _merge(prev.agg, stage.vector),
                            max(prev.compute, stage.compute),
                            (prev.key[0] + (lp,), prev.key[1] + (r,)),
                            prev.stages + ((lp, l, r),),
                        ))
        memo[state] = _pareto(found)
        return memo[state]

    best = None
    for r in options:
        try:
            t_feedback = feedback_time(backbone, cluster, r, cfg.micro_batch) if cfg.selfcond else 0.0
        except (ExtrapolationError, InfeasibleError) as e:
            table.last_error = e
            continue
        for entry in front(num_layers, cfg.num_stages, r, cfg.group_size):
            scores = objective.evaluate(entry.agg, t_feedback)
            rank = (scores[0], entry.compute, entry.key)
            if best is None or rank < best[0]:
                best = (rank, entry, scores, t_feedback)

    if best is None:
        reason = f": {table.last_error}" if table.last_error else ""
        raise InfeasibleError(f"no partition of {num_layers} layers into {cfg.num_stages} stages on {cfg.group_size} devices{reason}")
    logger.debug(f"DP explored {len(memo)} states for S={cfg.num_stages} D={cfg.group_size} M={cfg.num_microbatches}")
    _, entry, scores, t_feedback = best
    return _single_plan(cfg, objective, table, entry, scores, t_feedback)


def _pair(down: _Stage, up: _Stage) -> Tuple[Tuple[float, float, float], float]:
    return _merge(down.vector, up.vector), max(down.compute, up.compute)


def _bidirectional_plan(
    cfg: PlanConfig, tables: Tuple[_StageTable, _StageTable], entry: _Entry, objective: float, slots: int,
) -> PartitionPlan:
    down_stages, up_stages, down_costs, up_costs = [], [], [], []
    device = 0
    groups = []
    for (dlo, dhi), (ulo, uhi), replicas in entry.stages:
        groups.append((device, (ulo, uhi), replicas))
        down_stages.append(StageAssignment(backbone=0, layer_range=(dlo, dhi), replicas=replicas, first_device=device))
        down_costs.append(tables[0].get(dlo, dhi, replicas).costs)
        device += replicas
    # Up stage j lives on device group S - 1 - j.
    for first_device, (ulo, uhi), replicas in reversed(groups):
        up_stages.append(StageAssignment(
            backbone=1, layer_range=(ulo, uhi), replicas=replicas, direction=Direction.UP, first_device=first_device,
        ))
        up_costs.append(tables[1].get(ulo, uhi, replicas).costs)
    return PartitionPlan(
        config=cfg,
        mode=PlanMode.BIDIRECTIONAL,
        stages=down_stages + up_stages,
        per_stage=down_costs + up_costs,
        objective=objective,
        objective_plain=objective,
        paired_slots=slots,
    )


def _bidirectional_setup(profile: ModelProfile, cluster: ClusterConfig, cfg: PlanConfig, m_cdm: MCdmFn):
    if len(profile.backbones) != 2:
        raise InfeasibleError(f"bidirectional planning needs two backbones, profile has {len(profile.backbones)}")
    if cfg.selfcond:
        raise InfeasibleError("self-conditioning is planned for single-backbone models only")
    down, up = profile.backbones
    _check_point(cluster, cfg, [len(down.layers), len(up.layers)])
    tables = (
        _StageTable(down, cluster, cfg.micro_batch, BIDIRECTIONAL_COMM_FACTOR, False),
        _StageTable(up, cluster, cfg.micro_batch, BIDIRECTIONAL_COMM_FACTOR, False),
    )
    slots = m_cdm(cfg.num_stages, cfg.num_microbatches)
    objective = _Objective(slots, cfg.num_stages, cfg.num_microbatches, False, 0.0)
    return tables, slots, objective


def partition_bidirectional(
    profile: ModelProfile, cluster: ClusterConfig, cfg: PlanConfig, m_cdm: MCdmFn = compute_m_cdm,
) -> PartitionPlan:
    """Optimal paired partition of a down and an up backbone.

    Device group g hosts down stage g and up stage S - 1 - g, so a prefix of
    g groups holds a prefix of the down backbone and a suffix of the up one.
    """
    tables, slots, objective = _bidirectional_setup(profile, cluster, cfg, m_cdm)
    num_down, num_up = len(profile.backbones[0].layers), len(profile.backbones[1].layers)
    options = _replica_options(cfg)
    min_replicas = min(options)
    memo: Dict[Tuple[int, int, int, int, int], List[_Entry]] = {}

    def front(ld: int, lu: int, k: int, r: int, d: int) -> List[_Entry]:
        state = (ld, lu, k, r, d)
        if state in memo:
            return memo[state]
        found: List[_Entry] = []
        if k == 1:
            if d == r:
                down, up = tables[0].get(0, ld, r), tables[1].get(lu, num_up, r)
                if down is not None and up is not None:
                    agg, compute = _pair(down, up)
                    found.append(_Entry(agg, compute, ((), (), (r,)), (((0, ld), (lu, num_up), r),)))
        else:
            for ldp in range(k - 1, ld):
                down = tables[0].get(ldp, ld, r)
                if down is None:
                    continue
                for lup in range(lu + 1, num_up - k + 2):
                    up = tables[1].get(lu, lup, r)
                    if up is None:
                        continue
                    agg, compute = _pair(down, up)
                    for rp in options:
                        if d - r - rp < (k - 2) * min_replicas:
                            continue
                        for prev in front(ldp, lup, k - 1, rp, d - r):
                            found.append(_Entry(
                                _merge(prev.agg, agg),
                                max(prev.compute, compute),
                                (prev.key[0] + (ldp,), prev.key[1] + (lup,), prev.key[2] + (r,)),
                                prev.stages + (((ldp, ld), (lu, lup), r),),
                            ))
        memo[state] = _pareto(found)
        return memo[state]

    best = None
    for r in options:
        for entry in front(num_down, 0, cfg.num_stages, r, cfg.group_size):
            value = objective.evaluate(entry.agg, 0.0)[0]
            rank = (value, entry.compute, entry.key)
            if best is None or rank < best[0]:
                best = (rank, entry, value)

    if best is None:
        errors = [t.last_error for t in tables if t.last_error]
        reason = f": {errors[0]}" if errors else ""
        raise InfeasibleError(f"no paired partition into {cfg.num_stages} stages on {cfg.group_size} devices{reason}")
    _, entry, value = best
    return _bidirectional_plan(cfg, tables, entry, value, slots)


def partition(
    profile: ModelProfile, cluster: ClusterConfig, cfg: PlanConfig,
    selfcond_prob: Optional[float] = None, m_cdm: MCdmFn = compute_m_cdm,
) -> PartitionPlan:
    if profile.is_bidirectional:
        return partition_bidirectional(profile, cluster, cfg, m_cdm=m_cdm)
    return partition_single(profile, cluster, cfg, selfcond_prob=selfcond_prob)


# Brute-force oracle


def _replications(num_stages: int, group_size: int, equal: bool):
    if equal:
        if group_size % num_stages == 0:
            yield (group_size // num_stages,) * num_stages
        return
    for reps in product(range(1, group_size + 1), repeat=num_stages):
        if sum(reps) == group_size:
            yield reps


def _check_oracle_guards(num_layers: Sequence[int], cfg: PlanConfig, max_layers, max_stages, max_devices) -> None:
    max_layers = settings.oracle_max_layers if max_layers is None else max_layers
    max_stages = settings.oracle_max_stages if max_stages is None else max_stages
    max_devices = settings.oracle_max_devices if max_devices is None else max_devices
    if max(num_layers) > max_layers or cfg.num_stages > max_stages or cfg.group_size > max_devices:
        raise OracleTooLargeError(
            f"oracle limited to L<={max_layers}, S<={max_stages}, D<={max_devices}; "
            f"got L={max(num_layers)}, S={cfg.num_stages}, D={cfg.group_size}"
        )


def brute_force_partition(
    profile: ModelProfile,
    cluster: ClusterConfig,
    cfg: PlanConfig,
    selfcond_prob: Optional[float] = None,
    m_cdm: MCdmFn = compute_m_cdm,
    max_layers: Optional[int] = None,
    max_stages: Optional[int] = None,
    max_devices: Optional[int] = None,
) -> PartitionPlan:
    """Enumerate every contiguous partition and replication split.

    Uses the same stage costs, objective and tie-break key as the dynamic
    programs, so both return identical plans.
    """
    if profile.is_bidirectional:
        _check_oracle_guards([len(b.layers) for b in profile.backbones], cfg, max_layers, max_stages, max_devices)
        return _brute_force_bidirectional(profile, cluster, cfg, m_cdm)

    backbone = _single_backbone(profile)
    num_layers = len(backbone.layers)
    _check_oracle_guards([num_layers], cfg, max_layers, max_stages, max_devices)
    _check_point(cluster, cfg, [num_layers])
    objective = _objective_for(profile, cfg, selfcond_prob)
    table = _StageTable(backbone, cluster, cfg.micro_batch, 1.0, cfg.selfcond)

    best = None
    for cuts in combinations(range(1, num_layers), cfg.num_stages - 1):
        bounds = (0,) + cuts + (num_layers,)
        for reps in _replications(cfg.num_stages, cfg.group_size, cfg.equal_replication):
            stages = [table.get(bounds[i], bounds[i + 1], reps[i]) for i in range(cfg.num_stages)]
            if any(stage is None for stage in stages):
                continue
            try:
                t_feedback = feedback_time(backbone, cluster, reps[-1], cfg.micro_batch) if cfg.selfcond else 0.0
            except (ExtrapolationError, InfeasibleError):
                continue
            agg = stages[0].vector
            for stage in stages[1:]:
                agg = _merge(agg, stage.vector)
            compute = max(stage.compute for stage in stages)
            entry = _Entry(agg, compute, (cuts, reps), tuple((bounds[i], bounds[i + 1], reps[i]) for i in range(cfg.num_stages)))
            scores = objective.evaluate(agg, t_feedback)
            rank = (scores[0], compute, entry.key)
            if best is None or rank < best[0]:
                best = (rank, entry, scores, t_feedback)

    if best is None:
        raise InfeasibleError(f"no partition of {num_layers} layers into {cfg.num_stages} stages on {cfg.group_size} devices")
    _, entry, scores, t_feedback = best
    return _single_plan(cfg, objective, table, entry, scores, t_feedback)


def _brute_force_bidirectional(profile: ModelProfile, cluster: ClusterConfig, cfg: PlanConfig, m_cdm: MCdmFn) -> PartitionPlan:
    tables, slots, objective = _bidirectional_setup(profile, cluster, cfg, m_cdm)
    num_down, num_up = len(profile.backbones[0].layers), len(profile.backbones[1].layers)
    S = cfg.num_stages

    best = None
    for dcuts in combinations(range(1, num_down), S - 1):
        dbounds = (0,) + dcuts + (num_down,)
        for ucomb in combinations(range(1, num_up), S - 1):
            ucuts = tuple(reversed(ucomb))
            ubounds = (num_up,) + ucuts + (0,)
            for reps in _replications(S, cfg.group_size, cfg.equal_replication):
                groups = []
                for g in range(S):
                    down = tables[0].get(dbounds[g], dbounds[g + 1], reps[g])
                    up = tables[1].get(ubounds[g + 1], ubounds[g], reps[g])
                    if down is None or up is None:
                        break
                    groups.append(_pair(down, up))
                else:
                    agg = groups[0][0]
                    for pair_agg, _ in groups[1:]:
                        agg = _merge(agg, pair_agg)
                    compute = max(c for _, c in groups)
                    key = (dcuts, ucuts, reps)
                    value = objective.evaluate(agg, 0.0)[0]
                    rank = (value, compute, key)
                    if best is None or rank < best[0]:
                        stages = tuple(
                            ((dbounds[g], dbounds[g + 1]), (ubounds[g + 1], ubounds[g]), reps[g]) for g in range(S)
                        )
                        best = (rank, _Entry(agg, compute, key, stages), value)

    if best is None:
        raise InfeasibleError(f"no paired partition into {S} stages on {cfg.group_size} devices")
    _, entry, value = best
    return _bidirectional_plan(cfg, tables, entry, value, slots)
