"""Desk-scale continuous-control tasks behind one reset/step contract.

Environments are stateless objects: ``reset(seed)`` returns an ``EnvState`` and
``step(state, action)`` returns the successor state and the reward, so a
trajectory is fully determined by the seed and the action sequence.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ConfigError(ValueError):
    """Invalid run or environment configuration."""


class EnvUsageError(RuntimeError):
    """Environment driven outside its contract, e.g. stepping a finished episode."""


@dataclass(frozen=True, eq=False)
class EnvSpec:
    env_id: str
    state_dim: int
    action_dim: int
    action_low: np.ndarray
    action_high: np.ndarray
    max_episode_steps: int

    def __post_init__(self):
        low = np.asarray(self.action_low, dtype=np.float64)
        high = np.asarray(self.action_high, dtype=np.float64)
        if low.shape != (self.action_dim,) or high.shape != (self.action_dim,):
            raise ConfigError("action bounds must have length action_dim")
        if not np.all(low < high):
            raise ConfigError("action_low must be strictly below action_high")
        if self.state_dim < 1 or self.action_dim < 1 or self.max_episode_steps < 1:
            raise ConfigError("dimensions and max_episode_steps must be positive")
        object.__setattr__(self, "action_low", low)
        object.__setattr__(self, "action_high", high)

    def __eq__(self, other):
        if not isinstance(other, EnvSpec):
            return NotImplemented
        return (self.env_id == other.env_id and self.state_dim == other.state_dim
                and self.action_dim == other.action_dim
                and np.array_equal(self.action_low, other.action_low)
                and np.array_equal(self.action_high, other.action_high)
                and self.max_episode_steps == other.max_episode_steps)


@dataclass(frozen=True, eq=False)
class EnvState:
    """Snapshot of an episode.

    ``done`` ends the episode for either reason; ``terminal`` is true only for a
    genuine termination (so TD targets must not bootstrap), never for a time-limit
    truncation.
    """

    observation: np.ndarray
    step_index: int = 0
    done: bool = False
    terminal: bool = False
    physics: np.ndarray = field(default=None, repr=False)

    @property
    def truncated(self) -> bool:
        return self.done and not self.terminal


class PointMass:
    """2-D double integrator that must reach a fixed goal.

    Observation is ``(x, y, vx, vy)``. Positions are confined to ``[-1, 1]^2``;
    hitting a wall zeroes the velocity component normal to it. Episodes start at
    rest, uniformly in ``[-0.2, 0.2]^2``.
    """

    dt = 0.05
    goal = np.array([0.8, 0.8])
    goal_radius = 0.05
    goal_bonus = 10.0
    action_cost = 0.01
    arena = 1.0
    start_half_width = 0.2

    def __init__(self, max_episode_steps: int = 200):
        self.spec = EnvSpec("pointmass", 4, 2, -np.ones(2), np.ones(2), max_episode_steps)

    @property
    def reward_bounds(self) -> tuple[float, float]:
        diameter = 2.0 * np.sqrt(2.0) * self.arena
        a_max_sq = float(np.sum(self.spec.action_high ** 2))
        return -(diameter + self.action_cost * a_max_sq), self.goal_bonus

    def reset(self, seed: int) -> EnvState:
        rng = np.random.default_rng(seed)
        pos = rng.uniform(-self.start_half_width, self.start_half_width, size=2)
        obs = np.concatenate([pos, np.zeros(2)])
        return EnvState(obs, 0, False, False, obs.copy())

    def step(self, state: EnvState, action) -> tuple[EnvState, float]:
        _check_running(self.spec, state)
        a = np.clip(np.asarray(action, dtype=np.float64), self.spec.action_low, self.spec.action_high)
        pos, vel = state.physics[:2], state.physics[2:]
        new_pos = pos + self.dt * vel
        new_vel = vel + self.dt * a
        hit = np.abs(new_pos) > self.arena
        if hit.any():
            new_pos = np.clip(new_pos, -self.arena, self.arena)
            new_vel = np.where(hit, 0.0, new_vel)
        dist = float(np.linalg.norm(new_pos - self.goal))
        reward = -dist - self.action_cost * float(a @ a)
        terminal = dist < self.goal_radius
        if terminal:
            reward += self.goal_bonus
        obs = np.concatenate([new_pos, new_vel])
        t = state.step_index + 1
        done = terminal or t >= self.spec.max_episode_steps
        return EnvState(obs, t, done, terminal, obs.copy()), reward


class Swingup:
    """Torque-limited pendulum started near the bottom; upright is angle 0.

    Observation is ``(cos angle, sin angle, angular velocity)``; never terminates.
    """

    dt = 0.05
    gravity = 10.0
    mass = 1.0
    length = 1.0
    max_speed = 8.0
    max_torque = 2.0

    def __init__(self, max_episode_steps: int = 200):
        self.spec = EnvSpec("swingup", 3, 1, np.array([-self.max_torque]),
                            np.array([self.max_torque]), max_episode_steps)

    def reset(self, seed: int) -> EnvState:
        rng = np.random.default_rng(seed)
        angle = np.pi + rng.uniform(-0.2, 0.2)
        speed = rng.uniform(-0.1, 0.1)
        physics = np.array([angle, speed])
        return EnvState(self._observe(physics), 0, False, False, physics)

    @staticmethod
    def _observe(physics):
        return np.array([np.cos(physics[0]), np.sin(physics[0]), physics[1]])

    def step(self, state: EnvState, action) -> tuple[EnvState, float]:
        _check_running(self.spec, state)
        u = float(np.clip(np.asarray(action, dtype=np.float64).reshape(-1)[0],
                          -self.max_torque, self.max_torque))
        angle, speed = state.physics
        wrapped = (angle + np.pi) % (2.0 * np.pi) - np.pi
        reward = -(wrapped ** 2 + 0.1 * speed ** 2 + 0.001 * u ** 2)
        accel = (3.0 * self.gravity / (2.0 * self.length) * np.sin(angle)
                 + 3.0 / (self.mass * self.length ** 2) * u)
        speed = float(np.clip(speed + accel * self.dt, -self.max_speed, self.max_speed))
        angle = angle + speed * self.dt
        physics = np.array([angle, speed])
        t = state.step_index + 1
        done = t >= self.spec.max_episode_steps
        return EnvState(self._observe(physics), t, done, False, physics), float(reward)


def _check_running(spec: EnvSpec, state: EnvState):
    if state.done:
        raise EnvUsageError(f"{spec.env_id}: step() called on a finished episode "
                            f"(step_index={state.step_index})")


ENVIRONMENTS = {"pointmass": PointMass, "swingup": Swingup}


def make_env(env_id: str, **kwargs):
    try:
        return ENVIRONMENTS[env_id](**kwargs)
    except KeyError:
        raise ConfigError(f"unknown env_id {env_id!r}; known: {sorted(ENVIRONMENTS)}") from None


def env_reset(env, seed: int) -> EnvState:
    if isinstance(env, str):
        env = make_env(env)
    return env.reset(seed)


def env_step(env, state: EnvState, action) -> tuple[EnvState, float]:
    return env.step(state, action)
