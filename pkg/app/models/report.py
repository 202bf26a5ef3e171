from pydantic import BaseModel, ConfigDict, Field
from typing import List, Optional

from app.models.fill import FillPlan
from app.models.plan import PartitionPlan, PlanConfig, PlanMode, StageAssignment, StageCosts
from app.models.profile import ClusterConfig, ModelProfile
from app.models.schedule import Schedule


PLAN_FORMAT_VERSION = "1"


class SearchSpace(BaseModel):
    model_config = ConfigDict(frozen=True)

    stage_counts: List[int] = Field(..., min_length=1)
    microbatch_counts: List[int] = Field(..., min_length=1)
    group_sizes: List[int] = Field(..., min_length=1)
    global_batch: int = Field(..., ge=1, description="Global training batch across all pipeline groups")

    @property
    def size(self) -> int:
        return len(set(self.stage_counts)) * len(set(self.microbatch_counts)) * len(set(self.group_sizes))


class PointResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    num_stages: int
    num_microbatches: int
    group_size: int
    predicted_iter_time: float
    objective: float


class PointFailure(BaseModel):
    model_config = ConfigDict(frozen=True)

    num_stages: int
    num_microbatches: int
    group_size: int
    reason: str


class IterationResult(BaseModel):
    """Simulated and filled timeline of one iteration flavour."""

    model_config = ConfigDict(frozen=True)

    selfcond: bool = False
    schedule: Schedule
    fill: FillPlan
    iter_time: float
    bubble_ratio_before: float
    bubble_ratio_after: float


class PlanReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    cluster: ClusterConfig
    plan: PartitionPlan
    schedule: Schedule
    fill: FillPlan
    predicted_iter_time: float
    bubble_ratio_before: float
    bubble_ratio_after: float
    throughput: float
    selfcond_iteration: Optional[IterationResult] = None
    evaluated: List[PointResult] = Field(default_factory=list)
    failures: List[PointFailure] = Field(default_factory=list)


# Plan document sections


class ConfigSection(BaseModel):
    plan: PlanConfig
    mode: PlanMode
    cluster: ClusterConfig
    selfcond_prob: float = 0.0


class StagesSection(BaseModel):
    stages: List[StageAssignment]
    per_stage: List[StageCosts]
    objective: float
    objective_plain: Optional[float] = None
    objective_sc: Optional[float] = None
    feedback_time: Optional[float] = None
    paired_slots: Optional[int] = None


class MetricsSection(BaseModel):
    predicted_iter_time: float
    makespan: float
    tail_time: float
    bubble_ratio_before: float
    bubble_ratio_after: float
    throughput: float


class DiagnosticsSection(BaseModel):
    evaluated: List[PointResult] = Field(default_factory=list)
    failures: List[PointFailure] = Field(default_factory=list)


class PlanDocument(BaseModel):
    format_version: str = PLAN_FORMAT_VERSION
    config: ConfigSection
    stages: StagesSection
    schedule: Schedule
    fills: Optional[FillPlan] = None
    selfcond: Optional[IterationResult] = None
    metrics: MetricsSection
    diagnostics: DiagnosticsSection

    @classmethod
    def from_report(cls, report: PlanReport) -> "PlanDocument":
        plan = report.plan
        return cls(
            config=ConfigSection(
                plan=plan.config, mode=plan.mode, cluster=report.cluster, selfcond_prob=plan.selfcond_prob,
            ),
            stages=StagesSection(
                stages=plan.stages,
                per_stage=plan.per_stage,
                objective=plan.objective,
                objective_plain=plan.objective_plain,
                objective_sc=plan.objective_sc,
                feedback_time=plan.feedback_time,
                paired_slots=plan.paired_slots,
            ),
            schedule=report.schedule,
            fills=None if report.fill.is_empty else report.fill,
            selfcond=report.selfcond_iteration,
            metrics=MetricsSection(
                predicted_iter_time=report.predicted_iter_time,
                makespan=report.schedule.makespan,
                tail_time=report.fill.tail_time,
                bubble_ratio_before=report.bubble_ratio_before,
                bubble_ratio_after=report.bubble_ratio_after,
                throughput=report.throughput,
            ),
            diagnostics=DiagnosticsSection(evaluated=report.evaluated, failures=report.failures),
        )

    def to_report(self) -> PlanReport:
        plan = PartitionPlan(
            config=self.config.plan,
            mode=self.config.mode,
            stages=self.stages.stages,
            per_stage=self.stages.per_stage,
            objective=self.stages.objective,
            objective_plain=self.stages.objective_plain,
            objective_sc=self.stages.objective_sc,
            feedback_time=self.stages.feedback_time,
            selfcond_prob=self.config.selfcond_prob,
            paired_slots=self.stages.paired_slots,
        )
        return PlanReport(
            cluster=self.config.cluster,
            plan=plan,
            schedule=self.schedule,
            fill=self.fills if self.fills is not None else FillPlan(),
            predicted_iter_time=self.metrics.predicted_iter_time,
            bubble_ratio_before=self.metrics.bubble_ratio_before,
            bubble_ratio_after=self.metrics.bubble_ratio_after,
            throughput=self.metrics.throughput,
            selfcond_iteration=self.selfcond,
            evaluated=self.diagnostics.evaluated,
            failures=self.diagnostics.failures,
        )


# API request bodies


class PlanSearchRequest(BaseModel):
    profile: ModelProfile
    cluster: ClusterConfig
    batch: int = Field(..., ge=1, description="Global training batch")
    stage_counts: Optional[List[int]] = None
    microbatch_counts: Optional[List[int]] = None
    group_sizes: Optional[List[int]] = None
    selfcond_prob: Optional[float] = Field(None, ge=0.0, le=1.0)
    bubble_min_ms: Optional[float] = Field(None, ge=0.0)
    equal_replication: Optional[bool] = None
