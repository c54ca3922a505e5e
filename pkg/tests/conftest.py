import numpy as np
import pytest

from langrasp.config import load_config
from langrasp.runtime import Setup

SMALL_POLICY = {"width": 64, "heads": 4, "ff_mult": 2, "head_hidden": 64}


@pytest.fixture(scope="session")
def setup64():
    """Scaled-width setup with the default noise levels."""
    return Setup(load_config(overrides={"policy": SMALL_POLICY}))


@pytest.fixture(scope="session")
def setup64_clean():
    """Scaled width, no alignment noise, no proposal noise."""
    return Setup(load_config(overrides={
        "policy": SMALL_POLICY,
        "encoder": {"sigma_align": 0.0},
        "proposals": {"position_jitter": 0.0, "quality_jitter": 0.0},
    }))


@pytest.fixture(scope="session")
def setup512():
    """Paper-default width (concept-basis geometry tests)."""
    return Setup(load_config())
