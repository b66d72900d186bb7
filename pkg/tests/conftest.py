"""Shared fixtures: small synthetic scenes rendered once per session."""

import numpy as np
import pytest

from gridsurf import scenes


@pytest.fixture(scope="session")
def box_scene():
    return scenes.make_scene("box", n_frames=6, width=48, height=36)


@pytest.fixture(scope="session")
def box_frames(box_scene):
    return scenes.generate_dataset(box_scene)


@pytest.fixture(scope="session")
def cluttered_scene():
    return scenes.make_scene("cluttered", n_frames=6, width=48, height=36)


@pytest.fixture(scope="session")
def cluttered_frames(cluttered_scene):
    return scenes.generate_dataset(cluttered_scene)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
