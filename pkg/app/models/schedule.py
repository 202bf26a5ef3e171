from pydantic import BaseModel, ConfigDict, Field
from typing import List, Optional, Tuple
from enum import Enum

from app.models.plan import Direction


class TaskKind(str, Enum):
    FWD = "fwd"
    BWD = "bwd"
    FWD_SC = "fwd_sc"
    P2P_COMM = "p2p_comm"
    FEEDBACK_COMM = "feedback_comm"
    SYNC = "sync"
    FILL = "fill"


class Lane(str, Enum):
    COMPUTE = "compute"
    COMM = "comm"


COMPUTE_KINDS = frozenset({TaskKind.FWD, TaskKind.BWD, TaskKind.FWD_SC, TaskKind.FILL})


class Task(BaseModel):
    model_config = ConfigDict(frozen=True)

    device: int = Field(..., ge=0)
    kind: TaskKind
    start: float
    end: float
    lane: Lane = Lane.COMPUTE
    micro_batch: Optional[int] = None
    stage: Optional[int] = None
    direction: Optional[Direction] = None
    component: Optional[int] = None
    layer: Optional[int] = None

    @property
    def duration(self) -> float:
        return self.end - self.start


class Schedule(BaseModel):
    model_config = ConfigDict(frozen=True)

    tasks: List[Task]
    makespan: float
    device_count: int = Field(..., ge=1)

    def compute_tasks(self, device: Optional[int] = None) -> List[Task]:
        return [
            task for task in self.tasks
            if task.lane == Lane.COMPUTE and (device is None or task.device == device)
        ]

    def busy_time(self) -> float:
        return sum(task.duration for task in self.compute_tasks())


class Bubble(BaseModel):
    """Maximal interval during which one fixed set of devices is idle."""

    model_config = ConfigDict(frozen=True)

    start: float
    end: float
    idle_devices: Tuple[int, ...]

    @property
    def duration(self) -> float:
        return self.end - self.start

    @property
    def width(self) -> int:
        return len(self.idle_devices)
