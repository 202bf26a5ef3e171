from fastapi import APIRouter, Body, HTTPException, Query, status
from typing import Any, Dict, Optional
from app.errors import PlannerError, ValidationError
from app.services.profile import frozen_to_trainable_ratio, profile_from_dict, profile_schema, summarize_profile
import logging

logger = logging.getLogger(__name__)

router = APIRouter(prefix="/profiles", tags=["Profiles"])


@router.post("/validate")
async def validate_profile(
    document: Dict[str, Any] = Body(...),
    batch: Optional[float] = Query(None, gt=0, description="Batch size at which to report the frozen/trainable time ratio"),
):
    """Validate a profile document and summarize its components"""
    try:
        profile = profile_from_dict(document)
        summary = summarize_profile(profile)
        if batch is not None:
            summary["frozen_to_trainable_ratio"] = frozen_to_trainable_ratio(profile, batch)
        return summary

    except ValidationError as e:
        logger.info(f"Rejected profile: {e}")
        raise HTTPException(
            status_code=status.HTTP_422_UNPROCESSABLE_ENTITY,
            detail={"message": str(e), "invariant": e.invariant, "location": e.location},
        )
    except PlannerError as e:
        raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail=str(e))
    except Exception as e:
        logger.error(f"Error validating profile: {e}")
        raise HTTPException(
            status_code=status.HTTP_500_INTERNAL_SERVER_ERROR,
            detail="Internal server error"
        )


@router.get("/schema")
async def get_profile_schema():
    """JSON Schema of the profile document"""
    return profile_schema()
