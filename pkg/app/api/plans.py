from fastapi import APIRouter, HTTPException, Response, status
from typing import Any, Dict
from app.config import settings
from app.errors import NoFeasiblePlanError, PlannerError, ValidationError
from app.models.report import PlanReport, PlanSearchRequest
from app.services.planner import default_space, plan_document_json, search
from app.services.trace import export_trace
import logging

logger = logging.getLogger(__name__)

router = APIRouter(prefix="/plans", tags=["Plans"])


def _run_search(request: PlanSearchRequest) -> PlanReport:
    equal_replication = settings.equal_replication if request.equal_replication is None else request.equal_replication
    space = default_space(
        request.profile,
        request.cluster.world_size,
        request.batch,
        stage_counts=request.stage_counts,
        microbatch_counts=request.microbatch_counts,
        group_sizes=request.group_sizes,
        equal_replication=equal_replication,
    )
    bubble_min = None if request.bubble_min_ms is None else request.bubble_min_ms / 1000.0
    try:
        return search(
            request.profile,
            request.cluster,
            space,
            selfcond_prob=request.selfcond_prob,
            bubble_min=bubble_min,
            equal_replication=equal_replication,
        )
    except NoFeasiblePlanError as e:
        raise HTTPException(
            status_code=status.HTTP_409_CONFLICT,
            detail={"message": str(e), "diagnostics": e.diagnostics},
        )
    except ValidationError as e:
        raise HTTPException(
            status_code=status.HTTP_422_UNPROCESSABLE_ENTITY,
            detail={"message": str(e), "invariant": e.invariant, "location": e.location},
        )
    except PlannerError as e:
        raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail=str(e))


@router.post("/search")
def search_plan(request: PlanSearchRequest):
    """Search the hyper-parameter grid and return the best plan document"""
    try:
        report = _run_search(request)
        logger.info(
            f"Plan search on {request.cluster.world_size} device(s) selected "
            f"S={report.plan.config.num_stages} M={report.plan.config.num_microbatches} "
            f"D={report.plan.config.group_size}"
        )
        return Response(content=plan_document_json(report), media_type="application/json")

    except HTTPException:
        raise
    except Exception as e:
        logger.error(f"Error searching plans: {e}")
        raise HTTPException(
            status_code=status.HTTP_500_INTERNAL_SERVER_ERROR,
            detail="Internal server error"
        )


@router.post("/trace")
def trace_plan(request: PlanSearchRequest) -> Dict[str, Any]:
    """Search the grid and return the selected schedule as Chrome trace events"""
    try:
        report = _run_search(request)
        return export_trace(report.schedule, report.fill)

    except HTTPException:
        raise
    except Exception as e:
        logger.error(f"Error exporting plan trace: {e}")
        raise HTTPException(
            status_code=status.HTTP_500_INTERNAL_SERVER_ERROR,
            detail="Internal server error"
        )
