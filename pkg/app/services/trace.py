"""Chrome trace-event export of simulated schedules (load in chrome://tracing or Perfetto)."""

from pathlib import Path
from typing import Any, Dict, List, Optional, Union
import json
import logging

from app.errors import PlanDocumentError
from app.models.fill import FillPlan
from app.models.schedule import Lane, Schedule, Task, TaskKind

logger = logging.getLogger(__name__)

_US = 1e6

_SHORT = {
    TaskKind.FWD: "F",
    TaskKind.BWD: "B",
    TaskKind.FWD_SC: "SC",
    TaskKind.P2P_COMM: "P2P",
    TaskKind.FEEDBACK_COMM: "FB",
    TaskKind.SYNC: "AR",
}


def _category(task: Task) -> str:
    if task.kind == TaskKind.FILL:
        return "fill"
    return "computation" if task.lane == Lane.COMPUTE else "communication"


def _name(task: Task) -> str:
    if task.kind == TaskKind.FILL:
        return f"fill c{task.component}.l{task.layer}"
    name = _SHORT[task.kind]
    if task.micro_batch is not None and task.kind != TaskKind.SYNC:
        name += str(task.micro_batch)
    if task.stage is not None:
        name += f"@s{task.stage}"
    if task.direction is not None:
        name += f"/{task.direction.value}"
    return name


def _event(name: str, cat: str, pid: int, tid: int, start: float, end: float) -> Dict[str, Any]:
    return {
        "name": name,
        "cat": cat,
        "ph": "X",
        "pid": pid,
        "tid": tid,
        "ts": start * _US,
        "dur": (end - start) * _US,
    }


def export_trace(schedule: Schedule, fill: Optional[FillPlan] = None) -> Dict[str, Any]:
    """One complete event per task; pid is the device, tid 0/1 the compute/comm lane.

    With `fill`, the post-pipeline tail is appended on every device.
    """
    events: List[Dict[str, Any]] = [
        _event(_name(task), _category(task), task.device, 0 if task.lane == Lane.COMPUTE else 1, task.start, task.end)
        for task in schedule.tasks
    ]
    if fill is not None:
        for work in fill.tail:
            for device in range(schedule.device_count):
                events.append(_event(f"tail c{work.component}.l{work.layer}", "tail", device, 0, work.start, work.end))
    return {"traceEvents": events, "displayTimeUnit": "ms"}


def write_trace(trace: Dict[str, Any], path: Union[str, Path]) -> None:
    path = Path(path)
    try:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(trace, f)
    except OSError as e:
        logger.error(f"Failed to write trace {path}: {e}")
        raise PlanDocumentError(str(path), f"cannot write trace: {e}") from e
    logger.info(f"Trace with {len(trace['traceEvents'])} events written to {path}")
