"""Filling pipeline bubbles with frozen-component forward work.

Frozen layers are packed greedily into the bubbles of one iteration in
chronological order. Each bubble takes the longest combination of full-batch
layer prefixes (one per ready component) plus at most one layer on a partial
batch. Whatever does not fit runs data-parallel on every device after the
pipeline drains.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple
import copy
import logging
import math

import networkx as nx

from app.errors import ExtrapolationError
from app.models.fill import BubbleFill, FillPlan, LayerWork, PartialAssignment
from app.models.profile import CostField, LayerCost, ModelProfile
from app.models.schedule import Bubble, Lane, Schedule, Task, TaskKind
from app.services.profile import cost_at
from app.services.simulator import task_sort_key

logger = logging.getLogger(__name__)

# Per-device batch sizes a partial layer may run at, largest first.
VALID_LOCAL_BATCHES = (96, 64, 48, 32, 24, 16, 12, 8, 4)

Candidate = Tuple[int, ...]


@dataclass
class FillState:
    """Progress of the frozen forward work through one iteration's bubbles."""

    profile: ModelProfile
    global_batch: int
    preds: Dict[int, Set[int]]
    cursor: List[int]
    remaining: List[List[int]]
    completed: Set[int] = field(default_factory=set)
    ready: List[int] = field(default_factory=list)

    @classmethod
    def initial(cls, profile: ModelProfile, global_batch: int) -> "FillState":
        graph = profile.dependency_graph()
        state = cls(
            profile=profile,
            global_batch=global_batch,
            preds={c: set(graph.predecessors(c)) for c in graph.nodes},
            cursor=[0] * len(profile.frozen),
            remaining=[[global_batch] * len(component.layers) for component in profile.frozen],
        )
        state.promote()
        return state

    def copy(self) -> "FillState":
        return FillState(
            profile=self.profile,
            global_batch=self.global_batch,
            preds=self.preds,
            cursor=list(self.cursor),
            remaining=copy.deepcopy(self.remaining),
            completed=set(self.completed),
            ready=list(self.ready),
        )

    def num_layers(self, component: int) -> int:
        return len(self.profile.frozen[component].layers)

    def layer(self, component: int, index: int) -> LayerCost:
        return self.profile.frozen[component].layers[index]

    def samples_done(self, component: int, index: int) -> int:
        return self.global_batch - self.remaining[component][index]

    def promote(self) -> None:
        for component, layers in enumerate(self.remaining):
            if component not in self.completed and self.cursor[component] >= len(layers):
                self.completed.add(component)
        self.ready = [
            c for c in range(len(self.cursor))
            if c not in self.completed and self.preds[c] <= self.completed
        ]

    @property
    def finished(self) -> bool:
        return len(self.completed) == len(self.cursor)


def _clamped_cost(layer: LayerCost, local_batch: float) -> float:
    """Forward time of `layer` at `local_batch`.

    A local batch below the smallest profiled key is costed at that key rather
    than rejected, so small remainders still fit a bubble. Batches above the
    largest key raise ExtrapolationError.
    """
    keys = layer.batch_keys
    return cost_at(layer, CostField.FWD_TIME, max(local_batch, keys[0]))


def full_layer_time(state: FillState, component: int, index: int, devices: int) -> float:
    """Time to finish a layer's remaining samples on `devices` devices; inf if out of profile."""
    try:
        return _clamped_cost(state.layer(component, index), state.remaining[component][index] / devices)
    except ExtrapolationError:
        return math.inf


def ffc(state: FillState, bubble_time: float, devices: int, index: int = 0) -> List[Candidate]:
    """Full-batch filling candidates for the ready components from `index` on.

    Each candidate holds one prefix length per ready component. The component
    at `index` takes its longest fitting prefix k0, then every shorter prefix
    down to zero hands the leftover time to the next component.
    """
    ready = state.ready
    if index >= len(ready):
        return [()]
    component = ready[index]
    start = state.cursor[component]

    used = 0.0
    prefix_times = [0.0]
    for layer in range(start, state.num_layers(component)):
        cost = full_layer_time(state, component, layer, devices)
        if used + cost > bubble_time:
            break
        used += cost
        prefix_times.append(used)
    longest = len(prefix_times) - 1

    if index == len(ready) - 1:
        return [(longest,)]
    candidates: List[Candidate] = []
    for k in range(longest, -1, -1):
        for rest in ffc(state, bubble_time - prefix_times[k], devices, index + 1):
            candidates.append((k,) + rest)
    return candidates


def shortened(candidate: Candidate) -> List[Candidate]:
    """`candidate` followed by every shorter prefix of its last component.

    Over all of `ffc`'s candidates these are every prefix vector that fits,
    since each fitting vector only differs from one candidate in its last entry.
    """
    if not candidate:
        return [candidate]
    lead, last = candidate[:-1], candidate[-1]
    return [lead + (k,) for k in range(last, -1, -1)]


def candidate_time(state: FillState, candidate: Candidate, devices: int) -> float:
    total = 0.0
    for component, k in zip(state.ready, candidate):
        start = state.cursor[component]
        for layer in range(start, start + k):
            total += full_layer_time(state, component, layer, devices)
    return total


def largest_partial(
    state: FillState, component: int, index: int, devices: int, base: float, budget: float,
) -> Optional[Tuple[int, float]]:
    """Largest valid partial batch of one layer that still fits after `base` seconds."""
    layer = state.layer(component, index)
    remaining = state.remaining[component][index]
    for local in VALID_LOCAL_BATCHES:
        samples = local * devices
        if samples >= remaining:
            continue
        try:
            cost = cost_at(layer, CostField.FWD_TIME, local)
        except ExtrapolationError:
            continue
        if base + cost <= budget:
            return samples, cost
    return None


def fill_bubble(
    state: FillState,
    bubble: Bubble,
    devices: Optional[int] = None,
    overhead: float = 0.0,
) -> BubbleFill:
    """Fill one bubble and advance `state` past the work placed in it.

    Every prefix vector that fits is tried with and without one partial layer;
    the largest fill wins, ties going to full layers only.
    """
    devices = devices or bubble.width
    budget = bubble.duration - overhead
    if budget <= 0 or not state.ready:
        return BubbleFill(bubble=bubble)

    ready = list(state.ready)
    best = None
    for vector in (v for candidate in ffc(state, budget, devices) for v in shortened(candidate)):
        base = candidate_time(state, vector, devices)
        if base > budget:
            continue
        options = [(base, None)]
        for position, (component, k) in enumerate(zip(ready, vector)):
            index = state.cursor[component] + k
            if index >= state.num_layers(component):
                continue
            partial = largest_partial(state, component, index, devices, base, budget)
            if partial is not None:
                samples, cost = partial
                options.append((base + cost, (position, component, index, samples, cost)))
        for total, partial in options:
            rank = (total, partial is None, vector, -partial[0] if partial else 0)
            if best is None or rank > best[0]:
                best = (rank, vector, partial)

    if best is None:
        return BubbleFill(bubble=bubble)
    _, candidate, partial = best
    fill = _place(state, bubble, devices, overhead, candidate, partial)
    state.promote()
    if not fill.is_empty:
        logger.debug(
            f"Bubble [{bubble.start:.6f}, {bubble.end:.6f}) x{devices}: "
            f"{sum(len(v) for v in fill.full_layers.values())} full layer(s), "
            f"partial={fill.partial is not None}, fill {fill.fill_time:.6f}s of {bubble.duration:.6f}s"
        )
    return fill


def _place(state, bubble, devices, overhead, candidate, partial) -> BubbleFill:
    elapsed = overhead
    work: List[LayerWork] = []
    full_layers: Dict[int, List[int]] = {}
    for component, k in zip(list(state.ready), candidate):
        start = state.cursor[component]
        for index in range(start, start + k):
            duration = full_layer_time(state, component, index, devices)
            samples = state.remaining[component][index]
            work.append(LayerWork(
                component=component, layer=index, sample_start=state.samples_done(component, index),
                samples=samples, local_batch=samples / devices,
                start=bubble.start + elapsed, end=bubble.start + elapsed + duration,
            ))
            elapsed += duration
            state.remaining[component][index] = 0
            full_layers.setdefault(component, []).append(index)
        state.cursor[component] = start + k

    assignment = None
    if partial is not None:
        _, component, index, samples, cost = partial
        assignment = PartialAssignment(
            component=component, layer=index, samples=samples,
            sample_start=state.samples_done(component, index),
        )
        work.append(LayerWork(
            component=component, layer=index, sample_start=assignment.sample_start,
            samples=samples, local_batch=samples / devices,
            start=bubble.start + elapsed, end=bubble.start + elapsed + cost, partial=True,
        ))
        elapsed += cost
        state.remaining[component][index] -= samples

    if not work:
        return BubbleFill(bubble=bubble)
    return BubbleFill(bubble=bubble, full_layers=full_layers, partial=assignment, fill_time=elapsed, work=work)


def _tail_layer_time(layer: LayerCost, local_batch: float) -> Tuple[float, float]:
    """(time, local batch) of a layer run on all devices, chunked past the largest key."""
    keys = layer.batch_keys
    chunks = max(1, math.ceil(local_batch / keys[-1]))
    local = max(local_batch / chunks, keys[0])
    return chunks * cost_at(layer, CostField.FWD_TIME, local), local


def run_tail(state: FillState, devices: int, start: float = 0.0) -> Tuple[List[LayerWork], float]:
    """Run every unprocessed sample data-parallel on all devices, in dependency order."""
    order = nx.lexicographical_topological_sort(state.profile.dependency_graph())
    work: List[LayerWork] = []
    elapsed = 0.0
    for component in order:
        for index in range(state.cursor[component], state.num_layers(component)):
            samples = state.remaining[component][index]
            if samples <= 0:
                continue
            duration, local = _tail_layer_time(state.layer(component, index), samples / devices)
            work.append(LayerWork(
                component=component, layer=index, sample_start=state.samples_done(component, index),
                samples=samples, local_batch=local, start=start + elapsed, end=start + elapsed + duration,
            ))
            elapsed += duration
            state.remaining[component][index] = 0
        state.cursor[component] = state.num_layers(component)
    state.promote()
    return work, elapsed


def fill_all(
    bubbles: Sequence[Bubble],
    profile: ModelProfile,
    global_batch: int,
    schedule: Schedule,
    overhead: float = 0.0,
) -> FillPlan:
    """Sweep the bubbles chronologically, then send leftover work to the tail."""
    if not profile.frozen:
        return FillPlan()

    state = FillState.initial(profile, global_batch)
    fills = []
    for bubble in sorted(bubbles, key=lambda b: (b.start, b.idle_devices)):
        fills.append(fill_bubble(state, bubble, overhead=overhead))

    tail, tail_time = run_tail(state, schedule.device_count, start=schedule.makespan)
    residual = sum(fill.bubble.duration - fill.fill_time for fill in fills)
    logger.debug(
        f"Filled {sum(1 for f in fills if not f.is_empty)}/{len(fills)} bubbles, "
        f"tail {len(tail)} layer(s) {tail_time:.6f}s, residual {residual:.6f}s"
    )
    return FillPlan(fills=fills, tail=tail, tail_time=tail_time, residual_bubble_time=residual)


def apply_fills(schedule: Schedule, plan: FillPlan) -> Schedule:
    """Stamp fill tasks onto the idle devices of each filled bubble."""
    tasks = list(schedule.tasks)
    for fill in plan.fills:
        for work in fill.work:
            for device in fill.bubble.idle_devices:
                tasks.append(Task(
                    device=device, kind=TaskKind.FILL, start=work.start, end=work.end, lane=Lane.COMPUTE,
                    component=work.component, layer=work.layer,
                ))
    tasks.sort(key=task_sort_key)
    return Schedule(tasks=tasks, makespan=schedule.makespan, device_count=schedule.device_count)


def covered_samples(plan: FillPlan) -> Dict[Tuple[int, int], int]:
    """Samples processed per (component, layer) across fills and tail."""
    totals: Dict[Tuple[int, int], int] = {}
    for work in [w for fill in plan.fills for w in fill.work] + list(plan.tail):
        key = (work.component, work.layer)
        totals[key] = totals.get(key, 0) + work.samples
    return totals
