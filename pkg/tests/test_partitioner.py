import random

import pytest

from app.errors import InfeasibleError, OracleTooLargeError
from app.models.plan import Direction, PlanMode
from app.services.partitioner import (
    brute_force_partition, compute_m_cdm, partition, partition_bidirectional, partition_single,
    selfcond_objective, stage_cost_single,
)
from app.services.scheduler import build_schedule
from factories import (
    cluster, component, config, layer, model, random_backbone, random_cluster, random_curve, random_point,
    slow_link_cluster, uniform_backbone,
)


def test_stage_cost_direct_substitution():
    backbone = model([uniform_backbone(1, fwd=2.0, bwd=4.0)]).backbones[0]

    costs = stage_cost_single(backbone, cluster(1), (0, 1), 1, 8)

    assert (costs.t0, costs.t_sync, costs.t_comp, costs.gap) == (6.0, 0.0, 4.0, -4.0)
    assert costs.t0_sc is None


def test_stage_cost_selfcond_doubles_forward():
    backbone = model([uniform_backbone(1, fwd=2.0, bwd=4.0)]).backbones[0]

    assert stage_cost_single(backbone, cluster(1), (0, 1), 1, 8, selfcond=True).t0 == 8.0


def test_stage_cost_communication_bound():
    backbone = model([uniform_backbone(3, fwd=0.1, bwd=0.2, fwd_comm=1000, bwd_comm=1000)]).backbones[0]
    slow = cluster(1, bandwidth_p2p=100.0, latency_p2p=0.5)

    costs = stage_cost_single(backbone, slow, (0, 2), 1, 8)

    assert costs.t0 == pytest.approx(21.0, rel=1e-12)
    # the last stage has no right neighbour to talk to
    assert stage_cost_single(backbone, slow, (2, 3), 1, 8).t0 == pytest.approx(0.3, rel=1e-12)


def test_stage_cost_replicas_split_the_micro_batch():
    backbone = model([uniform_backbone(2, fwd={k: k / 8 for k in (1, 2, 4, 8)}, bwd=0.0, keys=(1, 2, 4, 8))]).backbones[0]

    assert stage_cost_single(backbone, cluster(2), (0, 2), 2, 8).t0 == 1.0
    with pytest.raises(InfeasibleError):
        stage_cost_single(backbone, cluster(3), (0, 2), 3, 8)


def test_single_stage_objective_clamps_the_gap(one_layer_profile):
    plan = partition_single(one_layer_profile, cluster(1), config(1, 4, 1, 4))

    assert plan.objective == 24.0
    assert [s.layer_range for s in plan.stages] == [(0, 1)]
    assert plan.mode == PlanMode.SINGLE


def test_uniform_layers_split_evenly():
    profile = model([uniform_backbone(4, fwd=1.0, bwd=2.0)])

    plan = partition_single(profile, cluster(2), config(2, 4, 2, 4))

    assert plan.cut_points == [2]
    assert plan.objective == 36.0
    assert [s.devices for s in plan.stages] == [(0,), (1,)]


def test_fewer_layers_than_stages_is_infeasible():
    profile = model([uniform_backbone(2, fwd=1.0, bwd=2.0)])

    with pytest.raises(InfeasibleError):
        partition_single(profile, cluster(4), config(3, 1, 4, 4, equal_replication=False))


def test_equal_replication_needs_divisible_group():
    profile = model([uniform_backbone(4, fwd=1.0, bwd=2.0)])

    with pytest.raises(InfeasibleError):
        partition_single(profile, cluster(3), config(2, 1, 3, 6))


@pytest.mark.parametrize("p, expected", [(0.0, 24.0), (1.0, 32.0), (0.5, 28.0)])
def test_selfcond_objective_is_a_weighted_mean(p, expected):
    assert selfcond_objective(24.0, 32.0, p) == expected


def test_selfcond_plan_includes_feedback_time():
    profile = model([uniform_backbone(1, fwd=2.0, bwd=4.0, out=100)])
    slow = cluster(1, bandwidth_p2p=100.0, latency_p2p=0.5)

    plan = partition_single(profile, slow, config(1, 4, 1, 4, selfcond=True), selfcond_prob=0.5)

    assert plan.mode == PlanMode.SELFCOND
    assert plan.feedback_time == 1.5
    assert plan.objective_plain == 24.0
    assert plan.objective_sc == 33.5
    assert plan.objective == 28.75


def _random_single(rng):
    num_layers = rng.randint(1, 8)
    point = random_point(rng, num_layers)
    profile = model([random_backbone(rng, num_layers)])
    cfg = config(point["stages"], point["microbatches"], point["devices"], point["batch"],
                 equal_replication=point["equal_replication"])
    return profile, random_cluster(rng, point["devices"]), cfg


def _assert_same_plan(plan, oracle):
    assert plan.objective == pytest.approx(oracle.objective, rel=1e-12)
    assert plan.stages == oracle.stages


def test_single_backbone_matches_brute_force():
    rng = random.Random(2024)
    checked = 0
    for _ in range(120):
        profile, cl, cfg = _random_single(rng)
        try:
            plan = partition_single(profile, cl, cfg)
        except InfeasibleError:
            with pytest.raises(InfeasibleError):
                brute_force_partition(profile, cl, cfg)
            continue
        _assert_same_plan(plan, brute_force_partition(profile, cl, cfg))
        checked += 1
    assert checked >= 100


def test_selfcond_matches_brute_force():
    rng = random.Random(77)
    for _ in range(60):
        profile, cl, cfg = _random_single(rng)
        cfg = cfg.model_copy(update={"selfcond": True})
        p = rng.choice((0.0, 0.25, 0.5, 1.0))
        plan = partition_single(profile, cl, cfg, selfcond_prob=p)
        oracle = brute_force_partition(profile, cl, cfg, selfcond_prob=p)
        _assert_same_plan(plan, oracle)
        assert plan.objective == selfcond_objective(plan.objective_plain, plan.objective_sc, p)


def test_bidirectional_matches_brute_force():
    rng = random.Random(99)
    for _ in range(60):
        stages = rng.randint(1, 3)
        devices = rng.randint(stages, 4)
        equal = devices % stages == 0 and rng.random() < 0.5
        microbatches = rng.choice((1, 2, 4))
        profile = model([
            random_backbone(rng, rng.randint(stages, 5), "down"),
            random_backbone(rng, rng.randint(stages, 5), "up"),
        ])
        cfg = config(stages, microbatches, devices, 12 * microbatches, equal_replication=equal)
        cl = random_cluster(rng, devices)

        plan = partition_bidirectional(profile, cl, cfg)
        oracle = brute_force_partition(profile, cl, cfg)

        _assert_same_plan(plan, oracle)
        assert plan.paired_slots == compute_m_cdm(stages, microbatches)


def _assert_valid(plan, profile):
    cfg = plan.config
    for direction, backbone in zip((Direction.DOWN, Direction.UP), profile.backbones):
        stages = plan.stages_for(direction)
        if direction == Direction.UP:
            stages = sorted(stages, key=lambda s: s.layer_range)
        bounds = [s.layer_range for s in stages]
        assert bounds[0][0] == 0 and bounds[-1][1] == len(backbone.layers)
        assert all(a[1] == b[0] for a, b in zip(bounds, bounds[1:]))
        assert sum(s.replicas for s in stages) == cfg.group_size
        if cfg.equal_replication:
            assert len({s.replicas for s in stages}) == 1
    devices = sorted(d for s in plan.stages_for(Direction.DOWN) for d in s.devices)
    assert devices == list(range(cfg.group_size))


def test_plans_cover_every_layer_and_device():
    rng = random.Random(5)
    for _ in range(80):
        profile, cl, cfg = _random_single(rng)
        try:
            plan = partition(profile, cl, cfg)
        except InfeasibleError:
            continue
        _assert_valid(plan, profile)


def test_simulated_makespan_never_exceeds_the_objective():
    rng = random.Random(31337)
    violations = []
    checked = 0
    for _ in range(220):
        profile, cl, cfg = _random_single(rng)
        selfcond = rng.random() < 0.4
        p = rng.choice((0.5, 1.0)) if selfcond else 0.0
        cfg = cfg.model_copy(update={"selfcond": selfcond})
        try:
            plan = partition_single(profile, cl, cfg, selfcond_prob=p)
        except InfeasibleError:
            continue
        checked += 1
        plain = build_schedule(plan, profile, cl, selfcond=False).makespan
        if plain > plan.objective_plain * (1 + 1e-12):
            violations.append(("plain", plain, plan.objective_plain))
        if selfcond:
            extra = build_schedule(plan, profile, cl, selfcond=True).makespan
            if extra > plan.objective_sc * (1 + 1e-12):
                violations.append(("selfcond", extra, plan.objective_sc))
    assert checked >= 200
    assert violations == []


@pytest.mark.parametrize("fwd_units, bwd_units", [(1, 1), (1, 3), (3, 1)])
def test_bidirectional_makespan_never_exceeds_the_objective(fwd_units, bwd_units):
    rng = random.Random(10 * fwd_units + bwd_units)
    for _ in range(20):
        stages = rng.randint(1, 4)
        microbatches = rng.choice((1, 2, 4, 8))
        num_layers = stages * rng.randint(1, 2)
        unit = rng.choice((1 / 64, 1 / 32, 1 / 16))
        profile = model([
            uniform_backbone(num_layers, fwd=fwd_units * unit, bwd=bwd_units * unit, name=name)
            for name in ("down", "up")
        ])

        plan = partition_bidirectional(profile, cluster(stages), config(stages, microbatches, stages, microbatches))
        makespan = build_schedule(plan, profile, cluster(stages)).makespan

        assert makespan <= plan.objective * (1 + 1e-12)


def test_transfers_as_long_as_compute_stay_within_the_objective():
    profile = model([component("unet", [
        layer(fwd=3.0, bwd=3.0, fwd_comm=3, bwd_comm=3),
        layer(fwd=0.0, bwd=2.0),
    ], True)])
    cl = cluster(2, bandwidth_p2p=1.0)
    plan = partition_single(profile, cl, config(2, 3, 2, 3))

    schedule = build_schedule(plan, profile, cl)

    assert plan.per_stage[0].t0 == 6.0
    assert plan.objective == 30.0
    assert schedule.makespan == pytest.approx(20.0)


def test_comm_heavy_makespan_never_exceeds_the_objective():
    rng = random.Random(2718)
    violations = []
    checked = {False: 0, True: 0}
    for _ in range(300):
        num_layers = rng.randint(1, 8)
        point = random_point(rng, num_layers)
        profile = model([random_backbone(rng, num_layers, comm_high=10 ** 5)])
        cl = slow_link_cluster(rng, point["devices"])
        selfcond = rng.random() < 0.4
        cfg = config(point["stages"], point["microbatches"], point["devices"], point["batch"],
                     equal_replication=point["equal_replication"], selfcond=selfcond)
        try:
            plan = partition_single(profile, cl, cfg, selfcond_prob=1.0 if selfcond else 0.0)
        except InfeasibleError:
            continue
        checked[selfcond] += 1
        plain = build_schedule(plan, profile, cl, selfcond=False).makespan
        if plain > plan.objective_plain * (1 + 1e-9):
            violations.append(("plain", plain, plan.objective_plain))
        if selfcond:
            extra = build_schedule(plan, profile, cl, selfcond=True).makespan
            if extra > plan.objective_sc * (1 + 1e-9):
                violations.append(("selfcond", extra, plan.objective_sc))
    assert checked[False] >= 100 and checked[True] >= 60
    assert violations == []


def test_comm_heavy_bidirectional_makespan_never_exceeds_the_objective():
    rng = random.Random(1618)
    violations = []
    checked = 0
    for _ in range(240):
        stages = rng.randint(1, 3)
        devices = rng.randint(stages, 4)
        equal = devices % stages == 0 and rng.random() < 0.5
        microbatches = rng.choice((1, 2, 4))
        profile = model([
            random_backbone(rng, rng.randint(stages, 5), "down", comm_high=10 ** 5),
            random_backbone(rng, rng.randint(stages, 5), "up", comm_high=10 ** 5),
        ])
        cfg = config(stages, microbatches, devices, 12 * microbatches, equal_replication=equal)
        cl = slow_link_cluster(rng, devices)
        try:
            plan = partition_bidirectional(profile, cl, cfg)
        except InfeasibleError:
            continue
        checked += 1
        makespan = build_schedule(plan, profile, cl).makespan
        if makespan > plan.objective * (1 + 1e-9):
            violations.append((stages, microbatches, devices, makespan, plan.objective))
    assert checked >= 200
    assert violations == []


@pytest.mark.parametrize("factor", [2.0, 0.5])
def test_scaling_layer_times_scales_the_objective(factor):
    rng = random.Random(11)
    for _ in range(40):
        num_layers = rng.randint(1, 8)
        point = random_point(rng, num_layers)
        curves = [(random_curve(rng, 0.01), random_curve(rng, 0.02)) for _ in range(num_layers)]
        base = model([component("unet", [layer(fwd=f, bwd=b) for f, b in curves], True)])
        scaled = model([component("unet", [
            layer(fwd={k: v * factor for k, v in f.items()}, bwd={k: v * factor for k, v in b.items()})
            for f, b in curves
        ], True)])
        cfg = config(point["stages"], point["microbatches"], point["devices"], point["batch"],
                     equal_replication=point["equal_replication"])
        cl = cluster(point["devices"])

        plan, scaled_plan = partition_single(base, cl, cfg), partition_single(scaled, cl, cfg)

        assert scaled_plan.objective == plan.objective * factor
        assert scaled_plan.stages == plan.stages


def test_zero_probability_matches_plain_planning():
    rng = random.Random(3)
    for _ in range(30):
        profile, cl, cfg = _random_single(rng)
        plain = partition_single(profile, cl, cfg)
        selfcond = partition_single(profile, cl, cfg.model_copy(update={"selfcond": True}), selfcond_prob=0.0)

        assert selfcond.objective == plain.objective
        assert selfcond.stages == plain.stages


def test_oracle_guards():
    profile = model([uniform_backbone(11, fwd=1.0, bwd=1.0)])

    with pytest.raises(OracleTooLargeError):
        brute_force_partition(profile, cluster(2), config(2, 1, 2, 2))


def test_oracle_respects_equal_replication():
    profile = model([uniform_backbone(4, fwd=1.0, bwd=2.0)])

    plan = brute_force_partition(profile, cluster(4), config(2, 2, 4, 8))

    assert [s.replicas for s in plan.stages] == [2, 2]


def test_single_layer_bidirectional_base_case():
    profile = model([uniform_backbone(1, 2.0, 4.0, name="down"), uniform_backbone(1, 2.0, 4.0, name="up")])

    plan = partition_bidirectional(profile, cluster(1), config(1, 4, 1, 4))

    assert compute_m_cdm(1, 4) == 8
    assert plan.objective == 8 * 6.0
    assert [(s.direction, s.layer_range) for s in plan.stages] == [(Direction.DOWN, (0, 1)), (Direction.UP, (0, 1))]


def test_bidirectional_pairs_opposite_ends():
    profile = model([uniform_backbone(4, 1.0, 2.0, name="down"), uniform_backbone(4, 1.0, 2.0, name="up")])

    plan = partition_bidirectional(profile, cluster(2), config(2, 2, 2, 2))

    down, up = plan.stages_for(Direction.DOWN), plan.stages_for(Direction.UP)
    assert [s.layer_range for s in down] == [(0, 2), (2, 4)]
    assert [s.layer_range for s in up] == [(0, 2), (2, 4)]
    # up stage j sits on the device group of down stage S - 1 - j
    assert [s.first_device for s in up] == [1, 0]


def test_heavier_backbone_is_split_to_match_the_oracle():
    profile = model([uniform_backbone(4, 2.0, 4.0, name="down"), uniform_backbone(4, 1.0, 2.0, name="up")])
    cfg = config(2, 4, 2, 4)

    plan = partition_bidirectional(profile, cluster(2), cfg)

    _assert_same_plan(plan, brute_force_partition(profile, cluster(2), cfg))


def test_selfcond_with_two_backbones_is_rejected():
    profile = model([uniform_backbone(2, 1.0, 2.0), uniform_backbone(2, 1.0, 2.0)])

    with pytest.raises(InfeasibleError):
        partition(profile, cluster(2), config(2, 1, 2, 2, selfcond=True))


@pytest.mark.parametrize("microbatches", [1, 2, 4, 8])
def test_one_stage_pairs_every_micro_batch_of_both_pipelines(microbatches):
    assert compute_m_cdm(1, microbatches) == 2 * microbatches
