"""Hyper-parameter grid search over (stages, micro-batches, group size).

Each grid point is partitioned, simulated, bubble-filled and scored on its
own; the point with the smallest predicted iteration time wins. Feasibility
is structural only: there is no device-memory model.
"""

from concurrent.futures import ProcessPoolExecutor
from itertools import product
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union
import logging

from pydantic import ValidationError as PydanticValidationError

from app.config import settings
from app.errors import InfeasibleError, NoFeasiblePlanError, PlanDocumentError, PlannerError, ValidationError
from app.models.plan import PartitionPlan, PlanConfig
from app.models.profile import ClusterConfig, ModelProfile
from app.models.report import IterationResult, PlanDocument, PlanReport, PointFailure, PointResult, SearchSpace
from app.services.filler import apply_fills, fill_all
from app.services.partitioner import partition
from app.services.scheduler import bubble_ratio, build_schedule, extract_bubbles, idle_device_time

logger = logging.getLogger(__name__)

Point = Tuple[int, int, int]  # (S, M, D)


def _divisors(n: int) -> List[int]:
    return [d for d in range(1, n + 1) if n % d == 0]


def default_space(
    profile: ModelProfile,
    world_size: int,
    global_batch: int,
    stage_counts: Optional[Sequence[int]] = None,
    microbatch_counts: Optional[Sequence[int]] = None,
    group_sizes: Optional[Sequence[int]] = None,
    equal_replication: bool = True,
) -> SearchSpace:
    """Fill in whatever part of the grid the caller left open.

    Group sizes default to the divisors of `world_size` that keep the global
    batch divisible across groups. Stage counts default to those that some
    group size can host (dividing it under equal replication).
    """
    if group_sizes is None:
        group_sizes = [d for d in _divisors(world_size) if global_batch % (world_size // d) == 0]
    if microbatch_counts is None:
        microbatch_counts = list(settings.default_microbatches)
    if stage_counts is None:
        shortest = min(len(component.layers) for component in profile.backbones)
        stage_counts = sorted({
            s for d in group_sizes for s in range(1, min(d, shortest) + 1)
            if not equal_replication or d % s == 0
        }) or [1]
    return SearchSpace(
        stage_counts=list(stage_counts),
        microbatch_counts=list(microbatch_counts),
        group_sizes=list(group_sizes),
        global_batch=global_batch,
    )


def validate_space(space: SearchSpace, cluster: ClusterConfig) -> None:
    for name, values in (
        ("stage_counts", space.stage_counts),
        ("microbatch_counts", space.microbatch_counts),
        ("group_sizes", space.group_sizes),
    ):
        for value in values:
            if value < 1:
                raise ValidationError(f"{name} must be positive, got {value}", invariant="positive", location=name)
    for d in space.group_sizes:
        if cluster.world_size % d:
            raise ValidationError(
                f"group size {d} does not divide world_size {cluster.world_size}",
                invariant="group_divides_world", location="group_sizes",
            )
        replicas = cluster.world_size // d
        if space.global_batch % replicas:
            raise ValidationError(
                f"global batch {space.global_batch} is not divisible by {replicas} pipeline group(s)",
                invariant="batch_divisible_dp", location="batch",
            )


def check_selfcond_prob(p: float) -> None:
    if not 0.0 <= p <= 1.0:
        raise ValidationError(
            f"self-conditioning probability must lie in [0, 1], got {p}",
            invariant="probability", location="selfcond_prob",
        )


def space_points(space: SearchSpace) -> List[Point]:
    return sorted(product(set(space.stage_counts), set(space.microbatch_counts), set(space.group_sizes)))


def run_iteration(
    plan: PartitionPlan,
    profile: ModelProfile,
    cluster: ClusterConfig,
    selfcond: bool,
    bubble_min: float,
    overhead: float = 0.0,
) -> IterationResult:
    """Simulate one iteration flavour of `plan`, fill its bubbles and score it."""
    cfg = plan.config
    schedule = build_schedule(plan, profile, cluster, selfcond=selfcond)
    before = bubble_ratio(schedule, extract_bubbles(schedule, 0.0))
    fill = fill_all(extract_bubbles(schedule, bubble_min), profile, cfg.global_batch, schedule, overhead)
    filled = apply_fills(schedule, fill)
    iter_time = filled.makespan + fill.tail_time
    after = idle_device_time(extract_bubbles(filled, 0.0)) / (iter_time * cfg.group_size) if iter_time > 0 else 0.0
    return IterationResult(
        selfcond=selfcond,
        schedule=filled,
        fill=fill,
        iter_time=iter_time,
        bubble_ratio_before=before,
        bubble_ratio_after=after,
    )


def evaluate_point(
    profile: ModelProfile,
    cluster: ClusterConfig,
    point: Point,
    global_batch: int,
    selfcond_prob: Optional[float] = None,
    bubble_min: float = 0.010,
    equal_replication: bool = True,
    overhead: float = 0.0,
) -> PlanReport:
    """Plan, simulate and fill one (S, M, D) point.

    `global_batch` is the batch of the whole cluster; each of the
    world_size / D pipeline groups trains its share. With 0 < p < 1 the
    report's main timeline is the plain iteration and the self-conditioned
    one is attached as `selfcond_iteration`.
    """
    num_stages, num_microbatches, group_size = point
    p = profile.selfcond_prob if selfcond_prob is None else selfcond_prob
    check_selfcond_prob(p)
    if profile.is_bidirectional and p > 0:
        raise InfeasibleError("self-conditioning is planned for single-backbone models only")
    groups = cluster.world_size // group_size
    try:
        cfg = PlanConfig(
            num_stages=num_stages,
            num_microbatches=num_microbatches,
            group_size=group_size,
            global_batch=global_batch // groups,
            selfcond=p > 0,
            equal_replication=equal_replication,
        )
    except PydanticValidationError as e:
        raise InfeasibleError(e.errors()[0]["msg"]) from e

    plan = partition(profile, cluster, cfg, selfcond_prob=p)
    plain = run_iteration(plan, profile, cluster, False, bubble_min, overhead) if p < 1 else None
    extra = run_iteration(plan, profile, cluster, True, bubble_min, overhead) if p > 0 else None

    main = plain if plain is not None else extra
    if plain is not None and extra is not None:
        predicted = (1 - p) * plain.iter_time + p * extra.iter_time
        before = (1 - p) * plain.bubble_ratio_before + p * extra.bubble_ratio_before
        after = (1 - p) * plain.bubble_ratio_after + p * extra.bubble_ratio_after
    else:
        predicted, before, after = main.iter_time, main.bubble_ratio_before, main.bubble_ratio_after

    throughput = groups * cfg.global_batch * len(profile.backbones) / predicted if predicted > 0 else 0.0
    logger.debug(
        f"Point S={num_stages} M={num_microbatches} D={group_size}: objective {plan.objective:.6f}s, "
        f"iteration {predicted:.6f}s, bubbles {before:.3f} -> {after:.3f}"
    )
    return PlanReport(
        cluster=cluster,
        plan=plan,
        schedule=main.schedule,
        fill=main.fill,
        predicted_iter_time=predicted,
        bubble_ratio_before=before,
        bubble_ratio_after=after,
        throughput=throughput,
        selfcond_iteration=extra if plain is not None else None,
    )


def _evaluate_safely(args) -> Tuple[Point, Optional[PlanReport], Optional[str]]:
    profile, cluster, point, global_batch, selfcond_prob, bubble_min, equal_replication, overhead = args
    try:
        report = evaluate_point(
            profile, cluster, point, global_batch, selfcond_prob, bubble_min, equal_replication, overhead,
        )
        return point, report, None
    except PlannerError as e:
        return point, None, str(e)


def search(
    profile: ModelProfile,
    cluster: ClusterConfig,
    space: SearchSpace,
    selfcond_prob: Optional[float] = None,
    bubble_min: Optional[float] = None,
    equal_replication: Optional[bool] = None,
    overhead: Optional[float] = None,
    workers: Optional[int] = None,
) -> PlanReport:
    """Evaluate every grid point and return the fastest one.

    Ties on predicted iteration time go to the smallest (S, M, D). The
    returned report lists every evaluated and every failed point.
    """
    validate_space(space, cluster)
    if selfcond_prob is not None:
        check_selfcond_prob(selfcond_prob)
    bubble_min = settings.bubble_min_seconds if bubble_min is None else bubble_min
    equal_replication = settings.equal_replication if equal_replication is None else equal_replication
    overhead = settings.fill_overhead_seconds if overhead is None else overhead
    workers = settings.search_workers if workers is None else workers

    points = space_points(space)
    logger.info(f"Searching {len(points)} grid point(s) on {cluster.world_size} device(s), batch {space.global_batch}")
    jobs = [
        (profile, cluster, point, space.global_batch, selfcond_prob, bubble_min, equal_replication, overhead)
        for point in points
    ]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_evaluate_safely, jobs))
    else:
        outcomes = [_evaluate_safely(job) for job in jobs]

    evaluated: List[PointResult] = []
    failures: List[PointFailure] = []
    best = None
    for point, report, reason in outcomes:
        num_stages, num_microbatches, group_size = point
        if report is None:
            logger.warning(f"Point S={num_stages} M={num_microbatches} D={group_size} infeasible: {reason}")
            failures.append(PointFailure(
                num_stages=num_stages, num_microbatches=num_microbatches, group_size=group_size, reason=reason,
            ))
            continue
        evaluated.append(PointResult(
            num_stages=num_stages, num_microbatches=num_microbatches, group_size=group_size,
            predicted_iter_time=report.predicted_iter_time, objective=report.plan.objective,
        ))
        rank = (report.predicted_iter_time, point)
        if best is None or rank < best[0]:
            best = (rank, report)

    if best is None:
        raise NoFeasiblePlanError(
            f"none of the {len(points)} grid point(s) is feasible",
            diagnostics=[failure.model_dump() for failure in failures],
        )
    (_, (num_stages, num_microbatches, group_size)), report = best
    logger.info(
        f"Selected S={num_stages} M={num_microbatches} D={group_size}: "
        f"{report.predicted_iter_time:.6f}s/iteration, {report.throughput:.2f} samples/s "
        f"({len(evaluated)} evaluated, {len(failures)} infeasible)"
    )
    return report.model_copy(update={"evaluated": evaluated, "failures": failures})


def plan_document_json(report: PlanReport) -> str:
    return PlanDocument.from_report(report).model_dump_json(indent=2, exclude_none=True)


def emit_plan(report: PlanReport, path: Union[str, Path]) -> None:
    path = Path(path)
    try:
        path.write_text(plan_document_json(report), encoding="utf-8")
    except OSError as e:
        logger.error(f"Failed to write plan {path}: {e}")
        raise PlanDocumentError(str(path), f"cannot write plan: {e}") from e
    logger.info(f"Plan written to {path}")


def load_plan(path: Union[str, Path]) -> PlanReport:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise PlanDocumentError(str(path), f"cannot read plan: {e}") from e
    try:
        document = PlanDocument.model_validate_json(text)
    except PydanticValidationError as e:
        raise PlanDocumentError(str(path), f"not a plan document: {e.errors()[0]['msg']}") from e
    return document.to_report()
