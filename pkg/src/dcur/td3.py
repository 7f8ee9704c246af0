"""TD3 actor-critic on top of the numpy MLP core.

The agent object owns its networks and optimizer state and is updated in place by
``critic_update`` / ``actor_update`` / ``train_step``; it is never shared between
training loops.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import Batch
from .envs import EnvSpec
from .nn import (AdamState, MlpParams, NonFiniteError, adam_step, adam_update, backward_cached,
                 forward_cached, init_mlp, load_params, mlp_forward, polyak_update, save_params)

NETWORK_NAMES = ("actor", "critic1", "critic2", "target_actor", "target_critic1", "target_critic2")


@dataclass
class Td3Config:
    gamma: float = 0.99
    rho: float = 0.995
    target_noise_sigma: float = 0.2
    target_noise_clip: float = 0.5
    exploration_sigma: float = 0.1
    policy_delay: int = 2
    batch_size: int = 100
    actor_lr: float = 1e-3
    critic_lr: float = 1e-3
    hidden_sizes: tuple = (64, 64)

    def __post_init__(self):
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)
        checks = [
            (0.0 < self.gamma <= 1.0, "gamma must lie in (0, 1]"),
            (0.0 <= self.rho <= 1.0, "rho must lie in [0, 1]"),
            (self.target_noise_sigma >= 0.0, "target_noise_sigma must be >= 0"),
            (self.target_noise_clip >= 0.0, "target_noise_clip must be >= 0"),
            (self.exploration_sigma >= 0.0, "exploration_sigma must be >= 0"),
            (int(self.policy_delay) >= 1, "policy_delay must be a positive integer"),
            (int(self.batch_size) >= 1, "batch_size must be a positive integer"),
            (self.actor_lr >= 0.0 and self.critic_lr >= 0.0, "learning rates must be >= 0"),
            (all(h > 0 for h in self.hidden_sizes), "hidden sizes must be positive"),
        ]
        for ok, message in checks:
            if not ok:
                raise ValueError(message)
        self.policy_delay = int(self.policy_delay)
        self.batch_size = int(self.batch_size)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d


@dataclass(eq=False)
class Td3Agent:
    env_spec: EnvSpec
    config: Td3Config
    actor: MlpParams
    critic1: MlpParams
    critic2: MlpParams
    target_actor: MlpParams
    target_critic1: MlpParams
    target_critic2: MlpParams
    actor_opt: AdamState = None
    critic_opt: AdamState = None
    update_count: int = 0
    actor_update_count: int = 0
    _center: np.ndarray = field(init=False, repr=False)
    _half: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        low, high = self.env_spec.action_low, self.env_spec.action_high
        self._center = 0.5 * (high + low)
        self._half = 0.5 * (high - low)
        cfg = self.config
        if self.actor_opt is None:
            self.actor_opt = AdamState.fresh(self.actor, cfg.actor_lr)
        if self.critic_opt is None:
            # one optimizer over both critics' concatenated parameters
            self.critic_opt = AdamState.fresh(self.critic1.flat.size + self.critic2.flat.size,
                                              cfg.critic_lr)

    @classmethod
    def create(cls, env_spec: EnvSpec, config: Td3Config | None = None,
               rng: np.random.Generator | int = 0) -> "Td3Agent":
        config = config or Td3Config()
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        sd, ad, hidden = env_spec.state_dim, env_spec.action_dim, list(config.hidden_sizes)
        actor = init_mlp([sd, *hidden, ad], rng, "relu", "tanh")
        critic1 = init_mlp([sd + ad, *hidden, 1], rng)
        critic2 = init_mlp([sd + ad, *hidden, 1], rng)
        return cls(env_spec, config, actor, critic1, critic2,
                   actor.copy(), critic1.copy(), critic2.copy())

    # -- policies ------------------------------------------------------------

    def _scale(self, squashed):
        return self._center + self._half * squashed

    def clip_action(self, actions):
        return np.clip(actions, self.env_spec.action_low, self.env_spec.action_high)

    def policy(self, states) -> np.ndarray:
        """Deterministic actor output, already inside the action bounds."""
        return self._scale(mlp_forward(self.actor, states))

    def target_policy(self, states) -> np.ndarray:
        return self._scale(mlp_forward(self.target_actor, states))

    def select_action(self, state, noise_sigma: float, rng: np.random.Generator | None = None):
        a = self.policy(state)
        if noise_sigma > 0.0:
            a = a + rng.normal(0.0, noise_sigma, size=a.shape)
        return self.clip_action(a)

    def target_action(self, next_states, rng: np.random.Generator) -> np.ndarray:
        """Smoothed successor action: clip(pi_targ(s') + clip(N(0, sigma), -clip, clip), bounds)."""
        a = self.target_policy(next_states)
        cfg = self.config
        if cfg.target_noise_clip > 0.0 and cfg.target_noise_sigma > 0.0:
            noise = rng.normal(0.0, cfg.target_noise_sigma, size=a.shape)
            a = a + np.clip(noise, -cfg.target_noise_clip, cfg.target_noise_clip)
        return self.clip_action(a)

    # -- learning --------------------------------------------------------------

    def q_values(self, states, actions, which: int = 1) -> np.ndarray:
        critic = self.critic1 if which == 1 else self.critic2
        return mlp_forward(critic, np.hstack([states, actions]))[:, 0]

    def compute_targets(self, batch: Batch, rng: np.random.Generator) -> np.ndarray:
        """y = r + gamma * (1 - done) * min_i Q_targ_i(s', a'(s'))."""
        next_a = self.target_action(batch.next_states, rng)
        sa = np.hstack([batch.next_states, next_a])
        q1 = mlp_forward(self.target_critic1, sa)[:, 0]
        q2 = mlp_forward(self.target_critic2, sa)[:, 0]
        for k, q in ((1, q1), (2, q2)):
            if not np.isfinite(q).all():
                raise NonFiniteError(f"target critic {k} produced non-finite values after "
                                     f"{self.update_count} updates")
        q_min = np.minimum(q1, q2)
        dones = np.asarray(batch.dones, dtype=np.float64)
        return batch.rewards + self.config.gamma * (1.0 - dones) * q_min

    def critic_update(self, batch: Batch, rng: np.random.Generator | None = None,
                      targets=None) -> float:
        """One Adam step on both critics towards ``targets`` (computed if omitted).

        Returns the pre-update loss ``mean((Q1 - y)^2) + mean((Q2 - y)^2)``.
        """
        y = self.compute_targets(batch, rng) if targets is None else np.asarray(targets, float)
        sa = np.hstack([batch.states, batch.actions])
        n = len(y)
        loss = 0.0
        grads = []
        for name in ("critic1", "critic2"):
            params = getattr(self, name)
            q, cache = forward_cached(params, sa)
            if not np.isfinite(q).all():
                raise NonFiniteError(f"{name} produced non-finite values after "
                                     f"{self.update_count} updates")
            resid = q[:, 0] - y
            loss += float(resid @ resid) / n
            grad, _ = backward_cached(params, cache, (2.0 / n) * resid[:, None],
                                      need_input_grad=False)
            grads.append(grad)
        joint, self.critic_opt = adam_update(
            np.concatenate([self.critic1.flat, self.critic2.flat]), np.concatenate(grads),
            self.critic_opt)
        size = self.critic1.flat.size
        self.critic1 = self.critic1.with_flat(joint[:size])
        self.critic2 = self.critic2.with_flat(joint[size:])
        return loss

    def actor_update(self, batch: Batch, action_value_grad=None) -> None:
        """Ascend mean Q1(s, pi(s)), then Polyak-average all three target networks.

        ``action_value_grad(states, actions)`` may replace critic 1 as the source of
        dQ/da (used to drive the actor with analytic test critics).
        """
        states = batch.states
        n = len(states)
        squashed, actor_cache = forward_cached(self.actor, states)
        actions = self._scale(squashed)
        if action_value_grad is None:
            q, critic_cache = forward_cached(self.critic1, np.hstack([states, actions]))
            _, d_input = backward_cached(self.critic1, critic_cache, np.full_like(q, -1.0 / n),
                                         need_param_grads=False)
            d_actions = d_input[:, self.env_spec.state_dim:]
        else:
            d_actions = -np.asarray(action_value_grad(states, actions), dtype=np.float64) / n
        grad, _ = backward_cached(self.actor, actor_cache, d_actions * self._half,
                                  need_input_grad=False)
        self.actor, self.actor_opt = adam_step(self.actor, grad, self.actor_opt)
        self.actor_update_count += 1
        self.update_targets()

    def update_targets(self) -> None:
        rho = self.config.rho
        self.target_actor = polyak_update(self.target_actor, self.actor, rho)
        self.target_critic1 = polyak_update(self.target_critic1, self.critic1, rho)
        self.target_critic2 = polyak_update(self.target_critic2, self.critic2, rho)

    def train_step(self, batch: Batch, rng: np.random.Generator) -> float:
        """Critic step every call; actor + target step when update_count hits the delay."""
        loss = self.critic_update(batch, rng)
        self.update_count += 1
        if self.update_count % self.config.policy_delay == 0:
            self.actor_update(batch)
        return loss

    def mean_estimated_q(self, batch: Batch) -> float:
        return float(np.mean(self.q_values(batch.states, batch.actions)))

    def networks(self) -> dict[str, MlpParams]:
        return {name: getattr(self, name) for name in NETWORK_NAMES}


def save_agent(agent: Td3Agent, directory) -> Path:
    """Write the six networks plus a JSON manifest. Optimizer moments are not saved."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, params in agent.networks().items():
        files[name] = f"{name}.dcnn"
        save_params(params, directory / files[name])
    spec = agent.env_spec
    manifest = {
        "format": "dcur-td3-agent",
        "networks": files,
        "config": agent.config.to_dict(),
        "env_spec": {"env_id": spec.env_id, "state_dim": spec.state_dim,
                     "action_dim": spec.action_dim, "action_low": spec.action_low.tolist(),
                     "action_high": spec.action_high.tolist(),
                     "max_episode_steps": spec.max_episode_steps},
        "update_count": agent.update_count,
        "actor_update_count": agent.actor_update_count,
    }
    path = directory / "agent.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_agent(directory) -> Td3Agent:
    directory = Path(directory)
    manifest = json.loads((directory / "agent.json").read_text())
    s = manifest["env_spec"]
    spec = EnvSpec(s["env_id"], s["state_dim"], s["action_dim"], np.array(s["action_low"]),
                   np.array(s["action_high"]), s["max_episode_steps"])
    nets = {name: load_params(directory / fname) for name, fname in manifest["networks"].items()}
    agent = Td3Agent(spec, Td3Config(**manifest["config"]), **nets)
    agent.update_count = manifest["update_count"]
    agent.actor_update_count = manifest["actor_update_count"]
    return agent
