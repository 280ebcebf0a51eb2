import math

import numpy as np
import pytest

from nlos_locate.cloud import RaysConfig, SelectionConfig
from nlos_locate.gmm import EmConfig
from nlos_locate.scene import generate_scene
from nlos_locate.sim import GridConfig, SceneConfig, TrialConfig


@pytest.fixture(scope="session")
def empty_room():
    return generate_scene()


@pytest.fixture(scope="session")
def cluttered_room():
    return generate_scene(clutter=6)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def quick_config(**kw) -> TrialConfig:
    """Small, fast pipeline settings for harness and CLI tests."""
    base = dict(
        scene=SceneConfig(clutter=6),
        sigma_eta=math.radians(1.0),
        n_rays=100,
        rays=RaysConfig(max_bounces=3, max_length=40.0, step=0.1),
        selection=SelectionConfig(n_select=400),
        gmm=EmConfig(k_max=2, n_init=1, max_fit_points=400, max_iters=30),
        grid=GridConfig(spacing=0.1),
    )
    base.update(kw)
    return TrialConfig(**base)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
