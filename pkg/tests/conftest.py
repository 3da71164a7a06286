"""Shared fixtures: small hand-checkable models and trajectories."""

import numpy as np
import pytest

from latentdtr.ct_hmm import EmissionParams, ModelParams, Trajectory


@pytest.fixture
def tiny_model():
    """Two latent states, two actions, scalar observations, AR intercept on."""
    return ModelParams(
        rates=np.array(
            [
                [[-0.7, 0.7], [0.4, -0.4]],
                [[-0.2, 0.2], [1.1, -1.1]],
            ]
        ),
        emission=EmissionParams(
            mu=np.array([[0.0], [1.5]]),
            psi=np.array([[[0.3]], [[-0.2]]]),
            sigma=np.array([[[0.4]], [[0.25]]]),
        ),
        init_dist=np.array([0.6, 0.4]),
        ar_intercept=True,
    )


@pytest.fixture
def tiny_traj():
    return Trajectory(
        times=np.array([0.0, 0.8, 2.0]),
        actions=np.array([1, 2, 1]),
        x=np.array([[0.2], [1.1], [0.7]]),
        subject_id="s0",
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
