import numpy as np
import pytest

from kanlb.simnet import OBS_DIM, StepOutcome


class BanditEnv:
    """One-state environment with reward -(action - optimum)^2.

    Duck-types the load-balancing env for the PPO collector; used to check
    that the training loop actually optimizes.
    """

    def __init__(self, optimum: float = 0.3, episode_len: int = 50):
        self.optimum = optimum
        self.episode_len = episode_len
        self._t = 0

    def reset(self, config=None) -> np.ndarray:
        self._t = 0
        return np.zeros(OBS_DIM)

    def step(self, action: float) -> StepOutcome:
        self._t += 1
        r = -((float(action) - self.optimum) ** 2)
        return StepOutcome(np.zeros(OBS_DIM), r, r, self._t >= self.episode_len, {})


@pytest.fixture
def bandit_env():
    return BanditEnv()
