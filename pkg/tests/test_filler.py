import itertools
import random

import pytest

from app.errors import ExtrapolationError
from app.models.fill import FillPlan
from app.models.profile import CostField
from app.models.schedule import Bubble, Schedule, TaskKind
from app.services.filler import (
    VALID_LOCAL_BATCHES, FillState, apply_fills, candidate_time, covered_samples, ffc, fill_all, fill_bubble,
    full_layer_time,
)
from app.services.partitioner import partition, partition_single
from app.services.profile import cost_at
from app.services.scheduler import build_schedule, extract_bubbles
from factories import (
    cluster, config, frozen_component, linear, model, random_backbone, random_cluster, random_deps, random_frozen,
    uniform_backbone,
)

BACKBONE = uniform_backbone(1, fwd=1.0, bwd=1.0)


def _state(frozen, deps=(), batch=8):
    return FillState.initial(model([BACKBONE], frozen=frozen, deps=deps), batch)


def _bubble(duration, devices=(0,), start=0.0):
    return Bubble(start=start, end=start + duration, idle_devices=tuple(devices))


def _empty_schedule(devices=1, makespan=1.0):
    return Schedule(tasks=[], makespan=makespan, device_count=devices)


def test_ffc_single_component_takes_its_longest_prefix():
    state = _state([frozen_component("a", [1.0, 1.0, 5.0])])

    assert ffc(state, 2.0, 1) == [(2,)]


def test_ffc_hands_leftover_time_to_the_next_component():
    state = _state([frozen_component("a", [1.0, 1.0]), frozen_component("b", [1.0, 1.0])])

    assert ffc(state, 2.0, 1) == [(2, 0), (1, 1), (0, 2)]


def test_ffc_with_no_time_is_all_zero():
    state = _state([frozen_component("a", [1.0]), frozen_component("b", [1.0])])

    assert ffc(state, 0.0, 1) == [(0, 0)]


def test_nothing_fits_leaves_the_bubble_empty():
    state = _state([frozen_component("a", [5.0])])

    fill = fill_bubble(state, _bubble(1.0))

    assert fill.is_empty and fill.fill_time == 0.0
    assert state.cursor == [0] and state.remaining == [[8]]


def test_partial_batch_takes_the_largest_fitting_size():
    state = _state([frozen_component("a", [linear(0.001)])], batch=64)

    first = fill_bubble(state, _bubble(0.016))
    second = fill_bubble(state, _bubble(0.016))

    assert first.partial.samples == 16 and first.partial.sample_start == 0
    assert first.full_layers == {}
    assert second.partial.sample_start == 16
    assert state.remaining == [[32]] and state.cursor == [0]


def test_overhead_is_paid_before_the_first_layer():
    state = _state([frozen_component("a", [1.0, 1.0, 1.0])])

    fill = fill_bubble(state, _bubble(2.0), overhead=0.5)

    assert fill.full_layers == {0: [0]}
    assert fill.fill_time == 1.5
    assert fill.work[0].start == 0.5


def test_equal_fills_prefer_earlier_components():
    state = _state([frozen_component("a", [1.0]), frozen_component("b", [1.0])])

    fill = fill_bubble(state, _bubble(1.0))

    assert fill.full_layers == {0: [0]}
    assert state.ready == [1]


def test_small_remainders_are_costed_at_the_smallest_profiled_batch():
    state = _state([frozen_component("a", [linear(0.001)])], batch=2)

    assert full_layer_time(state, 0, 0, 4) == pytest.approx(0.001)


def test_layers_past_the_largest_profiled_batch_do_not_fit_a_bubble():
    state = _state([frozen_component("a", [linear(0.001)])], batch=256)

    assert full_layer_time(state, 0, 0, 2) == float("inf")


def _exhaustive_best(state, budget, devices):
    """Best fill over every prefix vector with at most one partial layer."""
    ready = state.ready
    ranges = [range(state.num_layers(c) - state.cursor[c] + 1) for c in ready]
    best = 0.0
    for vector in itertools.product(*ranges):
        base = 0.0
        for component, k in zip(ready, vector):
            for index in range(state.cursor[component], state.cursor[component] + k):
                base += full_layer_time(state, component, index, devices)
        if base > budget:
            continue
        best = max(best, base)
        for component, k in zip(ready, vector):
            index = state.cursor[component] + k
            if index >= state.num_layers(component):
                continue
            for local in VALID_LOCAL_BATCHES:
                if local * devices >= state.remaining[component][index]:
                    continue
                try:
                    cost = cost_at(state.layer(component, index), CostField.FWD_TIME, local)
                except ExtrapolationError:
                    continue
                if base + cost <= budget:
                    best = max(best, base + cost)
    return best


def _random_state(rng):
    count = rng.randint(1, 3)
    profile = model([BACKBONE], frozen=random_frozen(rng, count), deps=random_deps(rng, count))
    return FillState.initial(profile, rng.choice((8, 16, 32, 64)))


def test_greedy_fill_matches_exhaustive_search():
    rng = random.Random(2024)
    for _ in range(500):
        state = _random_state(rng)
        devices = rng.randint(1, 4)
        budget = rng.uniform(0.0, 0.05)
        expected = _exhaustive_best(state.copy(), budget, devices)

        fill = fill_bubble(state, _bubble(budget, devices=range(devices)))

        assert fill.fill_time == pytest.approx(expected, abs=1e-12)
        assert fill.fill_time <= budget + 1e-12


def test_dropping_a_short_full_layer_for_a_larger_partial():
    state = _state([frozen_component("a", [linear(0.01)]), frozen_component("b", [0.02])], batch=16)

    fill = fill_bubble(state, _bubble(0.13))

    assert fill.full_layers == {}
    assert fill.partial.component == 0 and fill.partial.samples == 12
    assert fill.fill_time == pytest.approx(0.12)


def test_ffc_covers_the_best_prefix_vector():
    rng = random.Random(77)
    for _ in range(200):
        state = _random_state(rng)
        devices = rng.randint(1, 4)
        budget = rng.uniform(0.0, 0.05)

        best = 0.0
        ranges = [range(state.num_layers(c) - state.cursor[c] + 1) for c in state.ready]
        for vector in itertools.product(*ranges):
            total = candidate_time(state, vector, devices)
            if total <= budget:
                best = max(best, total)
        from_ffc = max(candidate_time(state, c, devices) for c in ffc(state, budget, devices))

        assert from_ffc == pytest.approx(best, abs=1e-12)


def test_profile_without_frozen_components_needs_no_filling(one_layer_profile):
    plan = fill_all([_bubble(1.0)], one_layer_profile, 8, _empty_schedule())

    assert plan == FillPlan()


def test_dependents_wait_for_the_next_bubble():
    profile = model([BACKBONE], frozen=[frozen_component("a", [1.0]), frozen_component("b", [1.0])], deps=[(0, 1)])
    bubbles = [_bubble(3.0), _bubble(2.0, start=4.0)]

    plan = fill_all(bubbles, profile, 8, _empty_schedule(makespan=6.0))

    assert plan.fills[0].full_layers == {0: [0]}
    assert plan.fills[1].full_layers == {1: [0]}
    assert plan.tail == [] and plan.tail_time == 0.0
    assert plan.residual_bubble_time == pytest.approx(3.0)


def test_tail_chunks_batches_past_the_largest_key():
    profile = model([BACKBONE], frozen=[frozen_component("a", [linear(0.001)])])

    plan = fill_all([], profile, 256, _empty_schedule(devices=2))

    (work,) = plan.tail
    assert work.local_batch == 64 and work.samples == 256
    assert work.start == 1.0
    assert plan.tail_time == pytest.approx(2 * 0.064)


def test_tail_runs_tiny_batches_at_the_smallest_key():
    profile = model([BACKBONE], frozen=[frozen_component("a", [linear(0.001)])])

    plan = fill_all([], profile, 2, _empty_schedule(devices=4))

    assert plan.tail[0].local_batch == 1
    assert plan.tail_time == pytest.approx(0.001)


def test_tail_follows_dependency_order():
    profile = model(
        [BACKBONE],
        frozen=[frozen_component("late", [1.0]), frozen_component("early", [1.0])],
        deps=[(1, 0)],
    )

    plan = fill_all([], profile, 8, _empty_schedule())

    assert [w.component for w in plan.tail] == [1, 0]


def _bubble_trade_schedule(profile):
    cl = cluster(2)
    plan = partition_single(profile, cl, config(2, 4, 2, 8))
    return build_schedule(plan, profile, cl)


def test_bubbles_absorb_all_frozen_work(bubble_trade_profile):
    schedule = _bubble_trade_schedule(bubble_trade_profile)

    plan = fill_all(extract_bubbles(schedule, 0.0), bubble_trade_profile, 8, schedule)

    assert schedule.makespan == 15 / 32
    assert plan.tail == [] and plan.tail_time == 0.0
    assert plan.residual_bubble_time == pytest.approx(0.0, abs=1e-12)
    assert covered_samples(plan) == {(0, layer): 8 for layer in range(6)}


def test_applied_fills_close_every_bubble(bubble_trade_profile):
    schedule = _bubble_trade_schedule(bubble_trade_profile)
    plan = fill_all(extract_bubbles(schedule, 0.0), bubble_trade_profile, 8, schedule)

    filled = apply_fills(schedule, plan)

    assert filled.makespan == schedule.makespan
    assert extract_bubbles(filled, 0.0) == []
    fills = [t for t in filled.tasks if t.kind == TaskKind.FILL]
    assert len(fills) == 6
    for task in fills:
        others = [t for t in schedule.compute_tasks(task.device)]
        assert all(t.end <= task.start or t.start >= task.end for t in others)


def test_filling_is_the_same_every_iteration(bubble_trade_profile):
    schedule = _bubble_trade_schedule(bubble_trade_profile)
    bubbles = extract_bubbles(schedule, 0.0)

    first = fill_all(bubbles, bubble_trade_profile, 8, schedule)
    second = fill_all(bubbles, bubble_trade_profile, 8, schedule)

    assert first == second


def _random_filled(rng):
    count = rng.randint(1, 3)
    frozen = random_frozen(rng, count)
    deps = random_deps(rng, count)
    mode = rng.choice(("single", "selfcond", "bidirectional"))
    stages = rng.randint(1, 3)
    devices = rng.randint(stages, 4)
    microbatches = rng.choice((1, 2, 4))
    if mode == "bidirectional":
        backbones = [random_backbone(rng, rng.randint(stages, 5), n) for n in ("down", "up")]
    else:
        backbones = [random_backbone(rng, rng.randint(stages, 6))]
    profile = model(backbones, frozen=frozen, deps=deps)
    cfg = config(stages, microbatches, devices, 12 * microbatches,
                 equal_replication=False, selfcond=mode == "selfcond")
    cl = random_cluster(rng, devices)
    schedule = build_schedule(partition(profile, cl, cfg, selfcond_prob=0.5), profile, cl)
    plan = fill_all(extract_bubbles(schedule, 0.0), profile, cfg.global_batch, schedule)
    return profile, cfg, schedule, plan


def test_random_fills_cover_every_sample_once_in_order():
    rng = random.Random(99)
    for _ in range(100):
        profile, cfg, schedule, plan = _random_filled(rng)
        batch = cfg.global_batch
        all_work = [w for fill in plan.fills for w in fill.work] + list(plan.tail)

        expected = {(c, l): batch for c, comp in enumerate(profile.frozen) for l in range(len(comp.layers))}
        assert covered_samples(plan) == expected

        for fill in plan.fills:
            assert fill.fill_time <= fill.bubble.duration + 1e-12
            for work in fill.work:
                assert fill.bubble.start - 1e-12 <= work.start <= work.end <= fill.bubble.end + 1e-12
        assert all(w.start >= schedule.makespan - 1e-12 for w in plan.tail)

        by_layer = {}
        for work in all_work:
            by_layer.setdefault((work.component, work.layer), []).append(work)
        for (c, l), works in by_layer.items():
            ranges = sorted((w.sample_start, w.sample_start + w.samples) for w in works)
            assert ranges[0][0] == 0 and ranges[-1][1] == batch
            assert all(a[1] == b[0] for a, b in zip(ranges, ranges[1:]))
            if (c, l + 1) in by_layer:
                assert max(w.end for w in works) <= min(w.start for w in by_layer[(c, l + 1)]) + 1e-12

        for a, b in profile.frozen_deps:
            a_end = max(w.end for w in all_work if w.component == a)
            assert all(w.start >= a_end - 1e-12 for w in all_work if w.component == b)
