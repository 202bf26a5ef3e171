from pathlib import Path

import pytest

from app.services.profile import load_profile
from factories import cluster, frozen_component, model, uniform_backbone

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"


@pytest.fixture
def sd21_path() -> Path:
    return FIXTURES / "sd21-like.profile"


@pytest.fixture
def cdm_path() -> Path:
    return FIXTURES / "cdm-like.profile"


@pytest.fixture
def sd21_profile(sd21_path):
    return load_profile(sd21_path)


@pytest.fixture
def cdm_profile(cdm_path):
    return load_profile(cdm_path)


@pytest.fixture
def fast_cluster():
    """Four devices with communication cheap enough to vanish in float64."""
    return cluster(4, bandwidth_ar=1e30, bandwidth_p2p=1e30)


@pytest.fixture
def one_layer_profile():
    return model([uniform_backbone(1, fwd=2.0, bwd=4.0)])


@pytest.fixture
def bubble_trade_profile():
    """Two-layer backbone whose 2-stage bubbles exactly fit six frozen layers."""
    return model(
        [uniform_backbone(2, fwd={k: k / 64 for k in (1, 2, 4, 8, 16, 32, 64)},
                          bwd={k: 2 * k / 64 for k in (1, 2, 4, 8, 16, 32, 64)})],
        frozen=[frozen_component("encoder", [1 / 32] * 6)],
    )
