"""Event-driven FIFO-1F1B simulation over abstract stage timings.

Stage timings are plain numbers here; `app.services.scheduler` derives them
from a PartitionPlan and the cost model. Replicas of a stage run in lockstep,
so a replica group is simulated as one resource and its tasks are copied to
every device of the group.

Point-to-point transfers overlap compute: the scheduler stretches a stage's
slots to max(compute, transfer) and dependency edges carry no delay. Only the
self-conditioning feedback of the last stage is a delay on the edge into the
first stage's forward.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple
import enum
import logging

from app.models.plan import Direction
from app.models.schedule import Lane, Schedule, Task, TaskKind

logger = logging.getLogger(__name__)


class Priority(enum.IntEnum):
    BACKWARD = 0
    FORWARD = 1
    EXTRA_FORWARD = 2


_PRIORITY = {TaskKind.BWD: Priority.BACKWARD, TaskKind.FWD: Priority.FORWARD, TaskKind.FWD_SC: Priority.EXTRA_FORWARD}


@dataclass(frozen=True)
class StageTiming:
    devices: Tuple[int, ...]
    fwd: float
    bwd: float
    sync: float = 0.0
    send_fwd: float = 0.0  # activations to the next stage, overlapped with compute
    send_bwd: float = 0.0  # gradients from the next stage back to this one, overlapped with compute


@dataclass(frozen=True)
class PipelineSpec:
    direction: Direction
    stages: Tuple[StageTiming, ...]
    num_microbatches: int
    selfcond: bool = False
    feedback: float = 0.0

    @property
    def kinds(self) -> Tuple[TaskKind, ...]:
        if self.selfcond:
            return (TaskKind.BWD, TaskKind.FWD, TaskKind.FWD_SC)
        return (TaskKind.BWD, TaskKind.FWD)


TaskKey = Tuple[int, TaskKind, int, int]  # pipeline, kind, micro-batch, stage


def task_sort_key(task: Task):
    return (
        task.start, task.device, task.lane.value, task.end, task.kind.value,
        task.direction.value if task.direction else "", task.stage or 0, task.micro_batch or 0,
        task.component or 0, task.layer or 0,
    )


@dataclass
class _Resource:
    devices: Tuple[int, ...]
    hosted: List[Tuple[int, int]] = field(default_factory=list)  # (pipeline, stage)
    free_at: float = 0.0
    last_direction: Optional[Direction] = None


class PipelineSimulator:
    def __init__(self, pipelines: Sequence[PipelineSpec], device_count: int):
        self.pipelines = [pipe for pipe in pipelines if pipe.stages and pipe.num_microbatches > 0]
        self.device_count = device_count
        self.resources: Dict[Tuple[int, ...], _Resource] = {}
        for p, pipe in enumerate(self.pipelines):
            for s, stage in enumerate(pipe.stages):
                resource = self.resources.setdefault(stage.devices, _Resource(devices=stage.devices))
                resource.hosted.append((p, s))
        self.start: Dict[TaskKey, float] = {}
        self.end: Dict[TaskKey, float] = {}
        self.next_index: Dict[Tuple[int, TaskKind, int], int] = {}
        self.inflight: Dict[Tuple[int, int], int] = {}
        self.tasks: List[Task] = []

    def _deps(self, key: TaskKey) -> List[Tuple[TaskKey, float]]:
        p, kind, m, s = key
        pipe = self.pipelines[p]
        last = len(pipe.stages) - 1
        if kind == TaskKind.FWD_SC:
            return [((p, TaskKind.FWD_SC, m, s - 1), 0.0)] if s > 0 else []
        if kind == TaskKind.FWD:
            if s > 0:
                return [((p, TaskKind.FWD, m, s - 1), 0.0)]
            if pipe.selfcond:
                return [((p, TaskKind.FWD_SC, m, last), pipe.feedback)]
            return []
        deps = [((p, TaskKind.FWD, m, s), 0.0)]
        if s < last:
            deps.append(((p, TaskKind.BWD, m, s + 1), 0.0))
        return deps

    def _ready_at(self, key: TaskKey) -> Optional[float]:
        ready = 0.0
        for dep, delay in self._deps(key):
            if dep not in self.end:
                return None
            ready = max(ready, self.end[dep] + delay)
        return ready

    def _candidates(self, resource: _Resource):
        candidates = []
        for p, s in resource.hosted:
            pipe = self.pipelines[p]
            cap = len(pipe.stages) - s
            for kind in pipe.kinds:
                m = self.next_index.get((p, kind, s), 0)
                if m >= pipe.num_microbatches:
                    continue
                if kind == TaskKind.FWD and self.inflight.get((p, s), 0) >= cap:
                    continue
                ready = self._ready_at((p, kind, m, s))
                if ready is not None:
                    candidates.append((ready, (p, kind, m, s)))
        return candidates

    def _pick(self, resource: _Resource) -> Optional[Tuple[float, TaskKey]]:
        candidates = self._candidates(resource)
        if not candidates:
            return None
        at = max(resource.free_at, min(ready for ready, _ in candidates))
        eligible = [key for ready, key in candidates if ready <= at]
        best_class = min(_PRIORITY[key[1]] for key in eligible)
        eligible = [key for key in eligible if _PRIORITY[key[1]] == best_class]
        preferred = Direction.UP if resource.last_direction == Direction.DOWN else Direction.DOWN
        eligible.sort(key=lambda key: (self.pipelines[key[0]].direction != preferred, key[0]))
        return at, eligible[0]

    def _dispatch(self, resource: _Resource, at: float, key: TaskKey) -> None:
        p, kind, m, s = key
        pipe = self.pipelines[p]
        stage = pipe.stages[s]
        duration = stage.bwd if kind == TaskKind.BWD else stage.fwd
        end = at + duration
        self.start[key] = at
        self.end[key] = end
        resource.free_at = end
        resource.last_direction = pipe.direction
        self.next_index[(p, kind, s)] = m + 1
        if kind == TaskKind.FWD:
            self.inflight[(p, s)] = self.inflight.get((p, s), 0) + 1
        elif kind == TaskKind.BWD:
            self.inflight[(p, s)] -= 1

        self._emit(stage.devices, kind, at, end, Lane.COMPUTE, m, s, pipe.direction)
        last = len(pipe.stages) - 1
        # Transfers stream out during the producing slot and never delay the consumer.
        if kind in (TaskKind.FWD, TaskKind.FWD_SC) and s < last and stage.send_fwd > 0:
            self._emit(stage.devices, TaskKind.P2P_COMM, max(at, end - stage.send_fwd), end, Lane.COMM, m, s, pipe.direction)
        if kind == TaskKind.BWD and s > 0 and pipe.stages[s - 1].send_bwd > 0:
            delay = pipe.stages[s - 1].send_bwd
            self._emit(stage.devices, TaskKind.P2P_COMM, max(at, end - delay), end, Lane.COMM, m, s, pipe.direction)
        if kind == TaskKind.FWD_SC and s == last and pipe.feedback > 0:
            self._emit(stage.devices, TaskKind.FEEDBACK_COMM, end, end + pipe.feedback, Lane.COMM, m, s, pipe.direction)

    def _emit(self, devices, kind, start, end, lane, m, s, direction) -> None:
        for device in devices:
            self.tasks.append(
                Task(device=device, kind=kind, start=start, end=end, lane=lane,
                     micro_batch=m, stage=s, direction=direction)
            )

    def _append_syncs(self) -> None:
        # The all-reduce is bucketed behind the stage's last backward on the comm lane.
        for p, pipe in enumerate(self.pipelines):
            last_mb = pipe.num_microbatches - 1
            for s, stage in enumerate(pipe.stages):
                if stage.sync <= 0:
                    continue
                key = (p, TaskKind.BWD, last_mb, s)
                end = max(self.end[key], self.start[key] + stage.sync)
                for device in stage.devices:
                    self.tasks.append(
                        Task(device=device, kind=TaskKind.SYNC, start=end - stage.sync, end=end,
                             lane=Lane.COMM, stage=s, direction=pipe.direction)
                    )

    def run(self) -> Schedule:
        total = sum(len(pipe.kinds) * pipe.num_microbatches * len(pipe.stages) for pipe in self.pipelines)
        resources = sorted(self.resources.values(), key=lambda resource: resource.devices)
        for _ in range(total):
            best = None
            for resource in resources:
                choice = self._pick(resource)
                if choice is not None and (best is None or choice[0] < best[0]):
                    best = (choice[0], resource, choice[1])
            if best is None:
                raise RuntimeError("pipeline simulation stalled with pending tasks")
            at, resource, key = best
            self._dispatch(resource, at, key)
        self._append_syncs()

        tasks = sorted(self.tasks, key=task_sort_key)
        makespan = max((task.end for task in tasks), default=0.0)
        logger.debug(f"Simulated {total} compute slots on {self.device_count} devices, makespan {makespan:.6f}s")
        return Schedule(tasks=tasks, makespan=makespan, device_count=self.device_count)


def simulate_pipelines(pipelines: Sequence[PipelineSpec], device_count: int) -> Schedule:
    return PipelineSimulator(pipelines, device_count).run()
