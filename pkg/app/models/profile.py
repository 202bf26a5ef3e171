from pydantic import BaseModel, ConfigDict, Field, NonNegativeFloat, NonNegativeInt, PositiveInt, PrivateAttr, model_validator
from pydantic_core import PydanticCustomError
from typing import Dict, List, Tuple
from enum import Enum
import networkx as nx


class CostField(str, Enum):
    FWD_TIME = "fwd_time"
    BWD_TIME = "bwd_time"
    FWD_COMM_BYTES = "fwd_comm_bytes"
    BWD_COMM_BYTES = "bwd_comm_bytes"
    GRAD_BYTES = "grad_bytes"
    OUT_BYTES = "out_bytes"


class CommCosts(BaseModel):
    model_config = ConfigDict(frozen=True)

    bandwidth_ar: float = Field(..., gt=0, description="All-reduce bandwidth, bytes/second")
    latency_ar: float = Field(..., ge=0, description="All-reduce latency, seconds")
    bandwidth_p2p: float = Field(..., gt=0, description="Point-to-point bandwidth, bytes/second")
    latency_p2p: float = Field(..., ge=0, description="Point-to-point latency, seconds")


class ClusterConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    world_size: int = Field(..., ge=1)
    comm: CommCosts


class LayerCost(BaseModel):
    """Profiled costs of one layer, keyed by batch size.

    Times are seconds, sizes are bytes. Every map shares one key set.
    """

    model_config = ConfigDict(frozen=True)

    fwd_time: Dict[PositiveInt, NonNegativeFloat] = Field(..., min_length=1)
    bwd_time: Dict[PositiveInt, NonNegativeFloat] = Field(..., min_length=1)
    fwd_comm_bytes: Dict[PositiveInt, NonNegativeInt] = Field(..., min_length=1)
    bwd_comm_bytes: Dict[PositiveInt, NonNegativeInt] = Field(..., min_length=1)
    grad_bytes: Dict[PositiveInt, NonNegativeInt] = Field(..., min_length=1)
    out_bytes: Dict[PositiveInt, NonNegativeInt] = Field(..., min_length=1)

    _curves: Dict[str, Tuple[Tuple[int, ...], Tuple[float, ...]]] = PrivateAttr(default_factory=dict)

    @model_validator(mode="after")
    def check_shared_keys(self) -> "LayerCost":
        keys = set(self.fwd_time)
        for cost_field in CostField:
            other = set(getattr(self, cost_field.value))
            if other != keys:
                raise PydanticCustomError(
                    "shared_keys",
                    "{field} keys {other} differ from fwd_time keys {keys}",
                    {"field": cost_field.value, "other": sorted(other), "keys": sorted(keys)},
                )
        return self

    def model_post_init(self, __context) -> None:
        for cost_field in CostField:
            values = getattr(self, cost_field.value)
            keys = tuple(sorted(values))
            self._curves[cost_field.value] = (keys, tuple(float(values[k]) for k in keys))

    def curve(self, cost_field: CostField) -> Tuple[Tuple[int, ...], Tuple[float, ...]]:
        return self._curves[CostField(cost_field).value]

    @property
    def batch_keys(self) -> Tuple[int, ...]:
        return self.curve(CostField.FWD_TIME)[0]


class ComponentProfile(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str = Field(..., min_length=1)
    layers: List[LayerCost] = Field(..., min_length=1)
    trainable: bool


class ModelProfile(BaseModel):
    """Cost model of a diffusion model: trainable backbones plus frozen components."""

    model_config = ConfigDict(frozen=True)

    backbones: List[ComponentProfile] = Field(..., min_length=1, max_length=2)
    frozen: List[ComponentProfile] = Field(default_factory=list)
    frozen_deps: List[Tuple[NonNegativeInt, NonNegativeInt]] = Field(default_factory=list)
    selfcond_prob: float = Field(0.0, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def check_components(self) -> "ModelProfile":
        for index, backbone in enumerate(self.backbones):
            if not backbone.trainable:
                raise PydanticCustomError(
                    "backbone_trainable", "backbone {index} ({name}) must be trainable",
                    {"index": index, "name": backbone.name},
                )
        for index, component in enumerate(self.frozen):
            if component.trainable:
                raise PydanticCustomError(
                    "frozen_not_trainable", "frozen component {index} ({name}) must not be trainable",
                    {"index": index, "name": component.name},
                )
            for layer_index, layer in enumerate(component.layers):
                if any(value != 0 for value in layer.bwd_time.values()):
                    raise PydanticCustomError(
                        "frozen_zero_backward",
                        "frozen component {name} layer {layer} has non-zero bwd_time",
                        {"name": component.name, "layer": layer_index},
                    )
        return self

    @model_validator(mode="after")
    def check_frozen_deps(self) -> "ModelProfile":
        for src, dst in self.frozen_deps:
            if src >= len(self.frozen) or dst >= len(self.frozen):
                raise PydanticCustomError(
                    "dep_index", "frozen_deps edge ({src}, {dst}) references a missing component",
                    {"src": src, "dst": dst},
                )
        graph = self.dependency_graph()
        if not nx.is_directed_acyclic_graph(graph):
            cycle = [edge[0] for edge in nx.find_cycle(graph)]
            names = " -> ".join(self.frozen[i].name if i < len(self.frozen) else str(i) for i in cycle + cycle[:1])
            raise PydanticCustomError("dag", "frozen_deps contains a cycle: {cycle}", {"cycle": names})
        return self

    def dependency_graph(self) -> nx.DiGraph:
        graph = nx.DiGraph()
        graph.add_nodes_from(range(len(self.frozen)))
        graph.add_edges_from(self.frozen_deps)
        return graph

    @property
    def is_bidirectional(self) -> bool:
        return len(self.backbones) == 2
