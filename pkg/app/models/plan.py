from pydantic import BaseModel, ConfigDict, Field, computed_field, model_validator
from pydantic_core import PydanticCustomError
from typing import List, Optional, Tuple
from enum import Enum


class Direction(str, Enum):
    DOWN = "down"
    UP = "up"


class PlanMode(str, Enum):
    SINGLE = "single"
    BIDIRECTIONAL = "bidirectional"
    SELFCOND = "selfcond"


class PlanConfig(BaseModel):
    """Pipeline hyper-parameters of one grid point.

    `global_batch` is the batch one pipeline group of `group_size` devices
    trains per iteration.
    """

    model_config = ConfigDict(frozen=True)

    num_stages: int = Field(..., ge=1)
    num_microbatches: int = Field(..., ge=1)
    group_size: int = Field(..., ge=1)
    global_batch: int = Field(..., ge=1)
    selfcond: bool = False
    equal_replication: bool = True

    @computed_field
    @property
    def micro_batch(self) -> int:
        return self.global_batch // self.num_microbatches

    @model_validator(mode="after")
    def check_shape(self) -> "PlanConfig":
        if self.num_stages > self.group_size:
            raise PydanticCustomError(
                "stages_le_devices", "num_stages {s} exceeds group_size {d}",
                {"s": self.num_stages, "d": self.group_size},
            )
        if self.global_batch % self.num_microbatches:
            raise PydanticCustomError(
                "batch_divisible", "global_batch {b} is not divisible by num_microbatches {m}",
                {"b": self.global_batch, "m": self.num_microbatches},
            )
        return self


class StageAssignment(BaseModel):
    model_config = ConfigDict(frozen=True)

    backbone: int = Field(..., ge=0)
    layer_range: Tuple[int, int]
    replicas: int = Field(..., ge=1)
    direction: Direction = Direction.DOWN
    first_device: int = Field(0, ge=0)

    @model_validator(mode="after")
    def check_range(self) -> "StageAssignment":
        lo, hi = self.layer_range
        if lo < 0 or hi <= lo:
            raise PydanticCustomError("layer_range", "empty or negative layer range [{lo}, {hi})", {"lo": lo, "hi": hi})
        return self

    @property
    def devices(self) -> Tuple[int, ...]:
        return tuple(range(self.first_device, self.first_device + self.replicas))

    @property
    def num_layers(self) -> int:
        return self.layer_range[1] - self.layer_range[0]


class StageCosts(BaseModel):
    """Per-stage cost terms.

    `t0` is the stage time without the extra forward pass; `t0_sc` is only
    set for self-conditioning plans.
    """

    model_config = ConfigDict(frozen=True)

    t0: float = Field(..., ge=0)
    t_sync: float = Field(..., ge=0)
    t_comp: float = Field(..., ge=0)
    gap: float
    t0_sc: Optional[float] = Field(None, ge=0)


class PartitionPlan(BaseModel):
    model_config = ConfigDict(frozen=True)

    config: PlanConfig
    mode: PlanMode = PlanMode.SINGLE
    stages: List[StageAssignment]
    per_stage: List[StageCosts]
    objective: float
    objective_plain: Optional[float] = None
    objective_sc: Optional[float] = None
    feedback_time: Optional[float] = None
    selfcond_prob: float = 0.0
    paired_slots: Optional[int] = None

    def stages_for(self, direction: Direction) -> List[StageAssignment]:
        return [stage for stage in self.stages if stage.direction == direction]

    def costs_for(self, direction: Direction) -> List[StageCosts]:
        return [costs for stage, costs in zip(self.stages, self.per_stage) if stage.direction == direction]

    @property
    def cut_points(self) -> List[int]:
        return [stage.layer_range[0] for stage in self.stages_for(Direction.DOWN)[1:]]
