"""Loading, validating and querying layer cost profiles."""

from pathlib import Path
from typing import Any, Dict, Union
import json
import logging

import numpy as np
from pydantic import ValidationError as PydanticValidationError

from app.errors import ExtrapolationError, ParseError, PlanDocumentError, ValidationError
from app.models.profile import ComponentProfile, CostField, LayerCost, ModelProfile

logger = logging.getLogger(__name__)


def _location(loc) -> str:
    parts = []
    for item in loc:
        if isinstance(item, int):
            parts.append(f"[{item}]")
        else:
            parts.append(("." if parts else "") + str(item))
    return "".join(parts)


def translate_validation_error(error: PydanticValidationError) -> ValidationError:
    """Turn the first pydantic error into a domain ValidationError."""
    first = error.errors()[0]
    return ValidationError(first["msg"], invariant=first["type"], location=_location(first["loc"]) or None)


def profile_from_dict(data: Dict[str, Any]) -> ModelProfile:
    try:
        return ModelProfile.model_validate(data)
    except PydanticValidationError as e:
        raise translate_validation_error(e) from e


def parse_profile(text: str) -> ModelProfile:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"profile is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ParseError("profile document must be a JSON object")
    return profile_from_dict(data)


def load_profile(path: Union[str, Path]) -> ModelProfile:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ParseError(f"cannot read profile {path}: {e}") from e

    try:
        profile = parse_profile(text)
    except (ParseError, ValidationError) as e:
        logger.error(f"Rejected profile {path}: {e}")
        raise

    logger.info(
        f"Loaded profile {path}: {len(profile.backbones)} backbone(s), "
        f"{len(profile.frozen)} frozen component(s), {count_layers(profile.frozen)} frozen layers"
    )
    return profile


def save_profile(profile: ModelProfile, path: Union[str, Path]) -> None:
    path = Path(path)
    try:
        path.write_text(profile.model_dump_json(indent=2), encoding="utf-8")
    except OSError as e:
        raise PlanDocumentError(str(path), f"cannot write profile: {e}") from e
    logger.info(f"Profile written to {path}")


def profile_schema() -> Dict[str, Any]:
    return ModelProfile.model_json_schema()


def write_profile_schema(path: Union[str, Path]) -> None:
    """Write the profile JSON Schema, as shipped in docs/profile.schema.json."""
    path = Path(path)
    try:
        path.write_text(json.dumps(profile_schema(), indent=2) + "\n", encoding="utf-8")
    except OSError as e:
        raise PlanDocumentError(str(path), f"cannot write schema: {e}") from e
    logger.info(f"Profile schema written to {path}")


def cost_at(layer: LayerCost, cost_field: Union[CostField, str], batch: float) -> float:
    """Evaluate one cost curve at `batch`.

    Exact at profiled keys, linear in between, and an ExtrapolationError
    outside [min key, max key]. `batch` may be fractional (e.g. B/3).
    """
    keys, values = layer.curve(CostField(cost_field))
    if batch < keys[0] or batch > keys[-1]:
        raise ExtrapolationError(batch, keys[0], keys[-1])
    return float(np.interp(batch, keys, values))


def count_layers(components) -> int:
    return sum(len(component.layers) for component in components)


def component_forward_time(component: ComponentProfile, batch: float) -> float:
    return sum(cost_at(layer, CostField.FWD_TIME, batch) for layer in component.layers)


def frozen_to_trainable_ratio(profile: ModelProfile, batch: float) -> float:
    """Frozen forward time over backbone forward+backward time at one batch size."""
    frozen = sum(component_forward_time(component, batch) for component in profile.frozen)
    trainable = sum(
        cost_at(layer, CostField.FWD_TIME, batch) + cost_at(layer, CostField.BWD_TIME, batch)
        for backbone in profile.backbones
        for layer in backbone.layers
    )
    return frozen / trainable if trainable > 0 else 0.0


def summarize_profile(profile: ModelProfile) -> Dict[str, Any]:
    return {
        "backbones": [
            {"name": backbone.name, "layers": len(backbone.layers)} for backbone in profile.backbones
        ],
        "frozen": [
            {"name": component.name, "layers": len(component.layers)} for component in profile.frozen
        ],
        "frozen_layers": count_layers(profile.frozen),
        "frozen_deps": [list(edge) for edge in profile.frozen_deps],
        "selfcond_prob": profile.selfcond_prob,
        "bidirectional": profile.is_bidirectional,
    }
