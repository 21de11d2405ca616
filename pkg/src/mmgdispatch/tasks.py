"""Vector-valued task adapters consumed by the trainer.

A task exposes per-agent observation/action sizes and box bounds, takes
actions in ``[-1, 1]`` and maps them affinely into environment units.
"""

from __future__ import annotations

import numpy as np

from .domain import Scenario
from .env import AgentAction, MultiMicrogridEnv, Observation


class Task:
    n_agents: int
    obs_dims: list[int]
    act_dims: list[int]
    action_low: list[np.ndarray]
    action_high: list[np.ndarray]
    reward_scale: float = 1.0

    def scale_action(self, i: int, unit) -> np.ndarray:
        lo, hi = self.action_low[i], self.action_high[i]
        return lo + (np.asarray(unit) + 1.0) * 0.5 * (hi - lo)

    def unscale_action(self, i: int, action) -> np.ndarray:
        lo, hi = self.action_low[i], self.action_high[i]
        span = np.where(hi > lo, hi - lo, 1.0)
        return 2.0 * (np.asarray(action) - lo) / span - 1.0

    def reset(self) -> list[np.ndarray]:
        raise NotImplementedError

    def step(self, unit_actions):
        """Returns ``(next_obs, rewards, done, info)``; ``info["actions"]`` holds env units."""
        raise NotImplementedError


class MicrogridTask(Task):
    """Wraps :class:`MultiMicrogridEnv`; rewards stay in $, observations are rescaled.

    Action layout per agent: ``[p_mgts, p_ij for every j != i, p_ig]`` plus a
    trailing ``p_esd`` when ``esd_in_action`` is set.
    """

    def __init__(self, scenario: Scenario, trading: bool = True, esd_in_action: bool = False,
                 reward_scale: float = 1e-3):
        self.scenario = scenario
        self.env = MultiMicrogridEnv(scenario, trading=trading, esd_in_action=esd_in_action)
        self.esd_in_action = esd_in_action
        self.reward_scale = reward_scale
        n = scenario.n_mg
        self.n_agents = n
        self.obs_dims = [Observation.SIZE] * n
        self.action_low, self.action_high = [], []
        for i, p in enumerate(scenario.params):
            lo = [p.p_mgts_min] + [-p.p_ij_max] * (n - 1) + [-p.p_ig_max]
            hi = [p.p_mgts_max] + [p.p_ij_max] * (n - 1) + [p.p_ig_max]
            if esd_in_action:
                lo.append(-p.p_dc_max)
                hi.append(p.p_ch_max)
            self.action_low.append(np.array(lo, dtype=np.float64))
            self.action_high.append(np.array(hi, dtype=np.float64))
        self.act_dims = [len(lo) for lo in self.action_low]
        power_scale = max(float(np.max(scenario.load)), float(np.max(scenario.p_wt)),
                          float(np.max(scenario.p_pv)), 1.0)
        price_scale = max(float(np.max(scenario.price_grid_buy)), 1e-6)
        self.obs_scale = np.array([power_scale, 1.0, power_scale, power_scale,
                                   price_scale, price_scale, price_scale, 1.0])

    def encode(self, obs: Observation) -> np.ndarray:
        return obs.to_array() / self.obs_scale

    def to_agent_action(self, i: int, action) -> AgentAction:
        n = self.n_agents
        action = np.asarray(action, dtype=np.float64)
        p_ij = [0.0] * n
        others = [j for j in range(n) if j != i]
        for k, j in enumerate(others):
            p_ij[j] = float(action[1 + k])
        p_esd = float(action[n + 1]) if self.esd_in_action else 0.0
        return AgentAction(p_mgts=float(action[0]), p_ij=tuple(p_ij), p_ig=float(action[n]),
                           p_esd=p_esd)

    def reset(self) -> list[np.ndarray]:
        return [self.encode(o) for o in self.env.reset()]

    def step(self, unit_actions):
        actions = [np.clip(self.scale_action(i, u), self.action_low[i], self.action_high[i])
                   for i, u in enumerate(unit_actions)]
        result = self.env.step([self.to_agent_action(i, a) for i, a in enumerate(actions)])
        next_obs = [self.encode(o) for o in result.next_obs]
        return next_obs, result.reward, result.done, {"actions": actions, "result": result}


class QuadraticToyTask(Task):
    """One-step game: every agent sees a constant observation and earns ``-(a - target)^2``."""

    def __init__(self, n_agents: int = 2, target: float = 0.5, obs_value: float = 1.0):
        self.n_agents = n_agents
        self.target = target
        self.obs_dims = [1] * n_agents
        self.act_dims = [1] * n_agents
        self.action_low = [np.array([-1.0])] * n_agents
        self.action_high = [np.array([1.0])] * n_agents
        self._obs = [np.array([obs_value]) for _ in range(n_agents)]

    def reset(self):
        return [o.copy() for o in self._obs]

    def step(self, unit_actions):
        actions = [self.scale_action(i, u) for i, u in enumerate(unit_actions)]
        rewards = np.array([-(float(a[0]) - self.target) ** 2 for a in actions])
        return [o.copy() for o in self._obs], rewards, True, {"actions": actions}
