"""FIFO-1F1B schedules, bubbles and bubble ratio for partition plans."""

from bisect import bisect_right
from typing import Dict, List, Optional, Sequence, Tuple
import logging

from app.models.plan import Direction, PartitionPlan, PlanMode, StageAssignment
from app.models.profile import ClusterConfig, ComponentProfile, ModelProfile
from app.models.schedule import Bubble, Schedule, Task, TaskKind
from app.services.partitioner import (
    BIDIRECTIONAL_COMM_FACTOR, costs_from_terms, feedback_time, p2p_delays, stage_terms, sync_time,
)
from app.services.simulator import PipelineSpec, StageTiming, simulate_pipelines

logger = logging.getLogger(__name__)

DEFAULT_BUBBLE_MIN = 0.010
_EPS = 1e-12


def _overlapped_slots(fwd: float, bwd: float, slot: float, forwards: int) -> Tuple[float, float]:
    """Forward and backward durations once transfers overlap compute.

    A stage whose transfers take longer than its compute is stretched so its
    per-micro-batch work (`forwards` forwards and one backward) fills `slot`,
    the stage time max(compute, transfer) of the cost model.
    """
    compute = forwards * fwd + bwd
    if slot <= compute:
        return fwd, bwd
    if compute <= 0:
        share = slot / (forwards + 1)
        return share, share
    scale = slot / compute
    return fwd * scale, bwd * scale


def _pipeline_spec(
    stages: Sequence[StageAssignment],
    backbone: ComponentProfile,
    cluster: ClusterConfig,
    batch: int,
    direction: Direction,
    num_microbatches: int,
    comm_factor: float = 1.0,
    selfcond: bool = False,
) -> PipelineSpec:
    timings = []
    for stage in stages:
        terms = stage_terms(backbone, stage.layer_range, stage.replicas, batch)
        send_fwd, send_bwd = p2p_delays(terms, cluster, comm_factor)
        costs = costs_from_terms(terms, cluster, comm_factor)
        if selfcond:
            fwd, bwd = _overlapped_slots(terms.fwd, terms.bwd, costs.t0_sc, 2)
        else:
            fwd, bwd = _overlapped_slots(terms.fwd, terms.bwd, costs.t0, 1)
        timings.append(StageTiming(
            devices=stage.devices, fwd=fwd, bwd=bwd, sync=sync_time(terms, cluster),
            send_fwd=send_fwd, send_bwd=send_bwd,
        ))
    feedback = 0.0
    if selfcond and len(stages) > 1:
        feedback = feedback_time(backbone, cluster, stages[-1].replicas, batch)
    return PipelineSpec(direction, tuple(timings), num_microbatches, selfcond, feedback)


def build_schedule(
    plan: PartitionPlan, profile: ModelProfile, cluster: ClusterConfig, selfcond: Optional[bool] = None,
) -> Schedule:
    """Simulate one training iteration of `plan`.

    `selfcond` overrides the plan's flag, so a self-conditioning plan can be
    simulated both with and without the extra forward pass.
    """
    if plan.mode == PlanMode.BIDIRECTIONAL:
        return build_bidirectional_schedule(plan, profile, cluster)
    cfg = plan.config
    selfcond = cfg.selfcond if selfcond is None else selfcond
    stages = plan.stages_for(Direction.DOWN)
    backbone = profile.backbones[stages[0].backbone]
    spec = _pipeline_spec(
        stages, backbone, cluster, cfg.micro_batch, Direction.DOWN, cfg.num_microbatches, selfcond=selfcond,
    )
    schedule = simulate_pipelines([spec], cfg.group_size)
    logger.debug(f"1F1B schedule S={cfg.num_stages} M={cfg.num_microbatches} selfcond={selfcond}: makespan {schedule.makespan:.6f}s")
    return schedule


def build_bidirectional_schedule(plan: PartitionPlan, profile: ModelProfile, cluster: ClusterConfig) -> Schedule:
    cfg = plan.config
    directions = [d for d in (Direction.DOWN, Direction.UP) if plan.stages_for(d)]
    comm_factor = BIDIRECTIONAL_COMM_FACTOR if len(directions) == 2 else 1.0
    specs = []
    for direction in directions:
        stages = plan.stages_for(direction)
        backbone = profile.backbones[stages[0].backbone]
        specs.append(_pipeline_spec(
            stages, backbone, cluster, cfg.micro_batch, direction, cfg.num_microbatches, comm_factor,
        ))
    return simulate_pipelines(specs, cfg.group_size)


def extract_bubbles(schedule: Schedule, min_len: float = DEFAULT_BUBBLE_MIN) -> List[Bubble]:
    """Maximal idle intervals with a constant idle-device set.

    The timeline is split at every compute task boundary, adjacent pieces with
    the same idle set are merged, then pieces shorter than `min_len` dropped.
    """
    per_device: Dict[int, Tuple[List[float], List[float]]] = {}
    boundaries = {0.0, schedule.makespan}
    for device in range(schedule.device_count):
        tasks = sorted((t for t in schedule.compute_tasks(device) if t.end > t.start), key=lambda t: t.start)
        per_device[device] = ([t.start for t in tasks], [t.end for t in tasks])
        boundaries.update(t.start for t in tasks)
        boundaries.update(t.end for t in tasks)

    def busy(device: int, at: float) -> bool:
        starts, ends = per_device[device]
        index = bisect_right(starts, at) - 1
        return index >= 0 and ends[index] > at

    points = sorted(b for b in boundaries if b <= schedule.makespan)
    merged: List[List] = []
    for a, b in zip(points, points[1:]):
        if b <= a:
            continue
        middle = (a + b) / 2
        idle = tuple(d for d in range(schedule.device_count) if not busy(d, middle))
        if merged and merged[-1][1] == a and merged[-1][2] == idle:
            merged[-1][1] = b
        else:
            merged.append([a, b, idle])

    return [
        Bubble(start=a, end=b, idle_devices=idle)
        for a, b, idle in merged
        if idle and b - a > 0 and b - a >= min_len
    ]


def idle_device_time(bubbles: Sequence[Bubble]) -> float:
    return sum(bubble.duration * bubble.width for bubble in bubbles)


def bubble_ratio(schedule: Schedule, bubbles: Sequence[Bubble]) -> float:
    if schedule.makespan <= 0:
        return 0.0
    return idle_device_time(bubbles) / (schedule.makespan * schedule.device_count)


def _dependency_keys(task: Task, depth: Dict[Direction, int]) -> List[Tuple]:
    m, s, direction = task.micro_batch, task.stage, task.direction
    last = depth[direction] - 1
    if task.kind == TaskKind.FWD_SC:
        return [(direction, TaskKind.FWD_SC, m, s - 1)] if s > 0 else []
    if task.kind == TaskKind.FWD:
        if s > 0:
            return [(direction, TaskKind.FWD, m, s - 1)]
        return [(direction, TaskKind.FWD_SC, m, last)]
    if task.kind == TaskKind.BWD:
        keys = [(direction, TaskKind.FWD, m, s)]
        if s < last:
            keys.append((direction, TaskKind.BWD, m, s + 1))
        return keys
    return []


def critical_path(schedule: Schedule) -> List[Task]:
    """Chain of binding predecessors ending at the last compute task.

    A predecessor is either the previous task on the same device or a
    pipeline dependency; the latest-finishing one binds, dependencies win ties.
    """
    pipeline_tasks = [t for t in schedule.compute_tasks() if t.kind != TaskKind.FILL]
    if not pipeline_tasks:
        return []
    depth: Dict[Direction, int] = {}
    index: Dict[Tuple, Task] = {}
    by_device: Dict[int, List[Task]] = {}
    for task in pipeline_tasks:
        depth[task.direction] = max(depth.get(task.direction, 0), task.stage + 1)
        index.setdefault((task.direction, task.kind, task.micro_batch, task.stage), task)
        by_device.setdefault(task.device, []).append(task)
    for tasks in by_device.values():
        tasks.sort(key=lambda t: t.start)

    current = max(pipeline_tasks, key=lambda t: (t.end, -t.device))
    path = [current]
    while current.start > _EPS:
        options = []
        for key in _dependency_keys(current, depth):
            dep = index.get(key)
            if dep is not None and dep.end <= current.start + _EPS:
                options.append((dep.end, 1, dep))
        device_tasks = by_device[current.device]
        position = device_tasks.index(current)
        if position > 0:
            previous = device_tasks[position - 1]
            options.append((previous.end, 0, previous))
        if not options:
            break
        current = max(options, key=lambda option: (option[0], option[1]))[2]
        path.append(current)
    path.reverse()
    return path
