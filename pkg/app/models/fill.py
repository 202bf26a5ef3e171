from pydantic import BaseModel, ConfigDict, Field
from typing import Dict, List, Optional

from app.models.schedule import Bubble


class PartialAssignment(BaseModel):
    model_config = ConfigDict(frozen=True)

    component: int = Field(..., ge=0)
    layer: int = Field(..., ge=0)
    samples: int = Field(..., ge=1)
    sample_start: int = Field(0, ge=0)


class LayerWork(BaseModel):
    """One frozen layer executed on a contiguous sample range.

    Sample range is [sample_start, sample_start + samples) of the
    per-iteration batch; `start`/`end` are absolute seconds.
    """

    model_config = ConfigDict(frozen=True)

    component: int = Field(..., ge=0)
    layer: int = Field(..., ge=0)
    sample_start: int = Field(..., ge=0)
    samples: int = Field(..., ge=1)
    local_batch: float = Field(..., gt=0)
    start: float
    end: float
    partial: bool = False

    @property
    def duration(self) -> float:
        return self.end - self.start


class BubbleFill(BaseModel):
    model_config = ConfigDict(frozen=True)

    bubble: Bubble
    full_layers: Dict[int, List[int]] = Field(default_factory=dict)
    partial: Optional[PartialAssignment] = None
    fill_time: float = 0.0
    work: List[LayerWork] = Field(default_factory=list)

    @property
    def is_empty(self) -> bool:
        return not self.work


class FillPlan(BaseModel):
    model_config = ConfigDict(frozen=True)

    fills: List[BubbleFill] = Field(default_factory=list)
    tail: List[LayerWork] = Field(default_factory=list)
    tail_time: float = 0.0
    residual_bubble_time: float = 0.0

    @property
    def is_empty(self) -> bool:
        return not self.fills and not self.tail
