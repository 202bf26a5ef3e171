# Planner Models Package
from .profile import CostField, CommCosts, ClusterConfig, LayerCost, ComponentProfile, ModelProfile
from .plan import Direction, PlanMode, PlanConfig, StageAssignment, StageCosts, PartitionPlan
from .schedule import TaskKind, Lane, Task, Schedule, Bubble
from .fill import PartialAssignment, LayerWork, BubbleFill, FillPlan
from .report import SearchSpace, PointResult, PointFailure, IterationResult, PlanReport, PlanDocument, PlanSearchRequest

__all__ = [
    "CostField", "CommCosts", "ClusterConfig", "LayerCost", "ComponentProfile", "ModelProfile",
    "Direction", "PlanMode", "PlanConfig", "StageAssignment", "StageCosts", "PartitionPlan",
    "TaskKind", "Lane", "Task", "Schedule", "Bubble",
    "PartialAssignment", "LayerWork", "BubbleFill", "FillPlan",
    "SearchSpace", "PointResult", "PointFailure", "IterationResult", "PlanReport", "PlanDocument", "PlanSearchRequest",
]
