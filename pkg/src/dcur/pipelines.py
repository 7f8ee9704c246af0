"""Teacher and student training loops, plus noisy-rollout dataset generators.

Every run is a deterministic function of its ``RunConfig`` (including the seed).
Independent random streams are spawned from the seed for network init, minibatch
and target-noise draws, exploration noise, training episodes, test episodes and
Q diagnostics, so e.g. changing the number of test episodes does not perturb
training.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import (Additive, CurriculumSpec, EmptyUnionError, OnlineBuffer, Provenance, Scale,
                   TeacherDataset, eligible_window, load_dataset, parse_curriculum,
                   sample_minibatch)
from .envs import ConfigError, make_env
from .td3 import Td3Agent, Td3Config

ONLINE_PRESETS = (0.0, 2.5, 5.0, 10.0)
REWARD_TRANSFORMS = ("time_shaped", "sparse_time")


def online_cadence(online_percent: float) -> int:
    """Gradient updates per online environment step (``100 / X``); 0 means offline."""
    if online_percent == 0:
        return 0
    if online_percent < 0 or online_percent > 100:
        raise ConfigError(f"online percent must lie in [0, 100], got {online_percent}")
    k = 100.0 / online_percent
    if abs(k - round(k)) > 1e-9:
        raise ConfigError(f"online percent {online_percent:g} is not usable: 100/{online_percent:g} "
                          f"= {k:.4g} is not an integer number of updates per environment step")
    return int(round(k))


@dataclass
class RunConfig:
    env_id: str
    role: str = "teacher"
    total_updates: int = 60_000
    epoch_length: int = 4000
    random_warmup_steps: int = 1000
    curriculum: CurriculumSpec | None = None
    online_percent: float = 0.0
    test_episodes_per_epoch: int = 10
    seed: int = 0
    td3: Td3Config = field(default_factory=Td3Config)
    dataset_path: str | None = None
    reward_transform: dict | None = None

    def validate(self, dataset_given: bool = False) -> None:
        make_env(self.env_id)
        if self.role not in ("teacher", "student"):
            raise ConfigError(f"role must be teacher or student, got {self.role!r}")
        if self.total_updates < 1 or self.epoch_length < 1 or self.test_episodes_per_epoch < 1:
            raise ConfigError("total_updates, epoch_length and test_episodes_per_epoch must be positive")
        if self.random_warmup_steps < 0:
            raise ConfigError("random_warmup_steps must be >= 0")
        online_cadence(self.online_percent)
        if self.role == "student":
            if self.curriculum is None:
                raise ConfigError("student runs need a curriculum")
            if self.dataset_path is None and not dataset_given:
                raise ConfigError("student runs need a dataset_path")
        if self.reward_transform is not None:
            kind = self.reward_transform.get("kind")
            if kind not in REWARD_TRANSFORMS:
                raise ConfigError(f"reward_transform kind must be one of {REWARD_TRANSFORMS}")

    def to_dict(self) -> dict:
        return {
            "env_id": self.env_id, "role": self.role, "total_updates": self.total_updates,
            "epoch_length": self.epoch_length, "random_warmup_steps": self.random_warmup_steps,
            "curriculum": None if self.curriculum is None else str(self.curriculum),
            "online_percent": self.online_percent,
            "test_episodes_per_epoch": self.test_episodes_per_epoch, "seed": self.seed,
            "td3": self.td3.to_dict(), "dataset_path": self.dataset_path,
            "reward_transform": self.reward_transform,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        if d.get("curriculum") is not None:
            d["curriculum"] = parse_curriculum(d["curriculum"])
        d["td3"] = Td3Config(**d.get("td3", {}))
        return cls(**d)

    def cell_name(self) -> str:
        """Directory name encoding env, curriculum and online percent (seeds live below it)."""
        cur = "none" if self.curriculum is None else curriculum_slug(self.curriculum)
        return f"{self.env_id}_{cur}_x{self.online_percent:g}"


def curriculum_slug(spec: CurriculumSpec) -> str:
    if isinstance(spec, Additive):
        p = "inf" if spec.p is None else str(spec.p)
        return f"add-p{p}-f{spec.f}"
    return f"scale-c{spec.c:g}"


@dataclass
class EvalLog:
    returns: list = field(default_factory=list)      # per epoch, one return per test episode
    mean_q: list = field(default_factory=list)       # per epoch
    wall_clock: list = field(default_factory=list)   # seconds since run start, per epoch
    config: dict = field(default_factory=dict)
    gradient_updates: int = 0
    skipped_updates: int = 0
    training_env_steps: int = 0
    online_step_times: list = field(default_factory=list)
    index_trace_digest: str = ""
    final_agent: Td3Agent | None = field(default=None, repr=False)

    @property
    def epochs(self) -> int:
        return len(self.returns)

    def all_returns(self) -> np.ndarray:
        """Every test-episode return in chronological order."""
        return np.array([r for epoch in self.returns for r in epoch], dtype=np.float64)

    def manifest(self, include_timing: bool = True) -> dict:
        out = {
            "config": self.config,
            "epochs": self.epochs,
            "gradient_updates": self.gradient_updates,
            "skipped_updates": self.skipped_updates,
            "training_env_steps": self.training_env_steps,
            "online_steps": len(self.online_step_times),
            "index_trace_sha256": self.index_trace_digest,
        }
        if include_timing:
            out["wall_clock_per_epoch"] = self.wall_clock
        return out


def write_eval_log(log: EvalLog, directory, stem: str = "eval") -> tuple[Path, Path]:
    """Write ``<stem>.csv`` (epoch, episode_index, return, mean_q) and ``<stem>.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    csv_path = directory / f"{stem}.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh, quoting=csv.QUOTE_MINIMAL, lineterminator="\r\n")
        writer.writerow(["epoch", "episode_index", "return", "mean_q"])
        for epoch, (rets, q) in enumerate(zip(log.returns, log.mean_q), start=1):
            for i, r in enumerate(rets):
                writer.writerow([epoch, i, repr(float(r)), repr(float(q))])
    json_path = directory / f"{stem}.json"
    json_path.write_text(json.dumps(log.manifest(), indent=2, sort_keys=True) + "\n")
    return csv_path, json_path


def read_eval_log(csv_path) -> EvalLog:
    """Rebuild returns and mean-Q series from a CSV written by ``write_eval_log``."""
    csv_path = Path(csv_path)
    by_epoch: dict[int, list] = {}
    q_by_epoch: dict[int, float] = {}
    with open(csv_path, newline="") as fh:
        for row in csv.DictReader(fh):
            e = int(row["epoch"])
            by_epoch.setdefault(e, []).append((int(row["episode_index"]), float(row["return"])))
            q_by_epoch[e] = float(row["mean_q"])
    log = EvalLog()
    for e in sorted(by_epoch):
        log.returns.append([r for _, r in sorted(by_epoch[e])])
        log.mean_q.append(q_by_epoch[e])
    json_path = csv_path.with_suffix(".json")
    if json_path.exists():
        meta = json.loads(json_path.read_text())
        log.config = meta.get("config", {})
        log.gradient_updates = meta.get("gradient_updates", 0)
        log.skipped_updates = meta.get("skipped_updates", 0)
        log.training_env_steps = meta.get("training_env_steps", 0)
        log.index_trace_digest = meta.get("index_trace_sha256", "")
    return log


# -- helpers -------------------------------------------------------------------

class _Streams:
    def __init__(self, seed: int):
        names = ("init", "train", "explore", "env", "eval", "diag")
        children = np.random.SeedSequence(seed).spawn(len(names))
        for name, child in zip(names, children):
            setattr(self, name, np.random.default_rng(child))

    def episode_seed(self, rng=None) -> int:
        return int((rng or self.env).integers(0, 2 ** 62))


def run_test_episodes(policy, env, seeds) -> list[float]:
    """Noise-free episodes run side by side; ``policy`` maps a batch of observations to actions."""
    states = [env.reset(s) for s in seeds]
    returns = [0.0] * len(seeds)
    live = list(range(len(seeds)))
    while live:
        actions = policy(np.stack([states[i].observation for i in live]))
        still = []
        for i, a in zip(live, actions):
            states[i], r = env.step(states[i], a)
            returns[i] += r
            if not states[i].done:
                still.append(i)
        live = still
    return returns


def random_policy_returns(env_id: str, seeds, rng: np.random.Generator) -> list[float]:
    """Returns of the uniform random policy on the given episode seeds."""
    env = make_env(env_id)
    low, high = env.spec.action_low, env.spec.action_high
    return run_test_episodes(lambda obs: rng.uniform(low, high, size=(len(obs), len(low))),
                             env, seeds)


def _evaluate(agent, env, streams, n_episodes) -> list[float]:
    seeds = [streams.episode_seed(streams.eval) for _ in range(n_episodes)]
    return run_test_episodes(agent.policy, env, seeds)


# -- teacher ---------------------------------------------------------------------

def train_teacher(config: RunConfig) -> tuple[Td3Agent, TeacherDataset, EvalLog]:
    """Online TD3 with every environment interaction logged in order.

    The first ``random_warmup_steps`` actions come from the uniform random policy;
    afterwards there is one gradient update per environment step.
    """
    config.validate()
    if config.role != "teacher":
        raise ConfigError("train_teacher needs role='teacher'")
    env = make_env(config.env_id)
    spec = env.spec
    streams = _Streams(config.seed)
    agent = Td3Agent.create(spec, config.td3, streams.init)
    replay = OnlineBuffer(spec.state_dim, spec.action_dim, initial_capacity=config.total_updates)
    log = EvalLog(config=config.to_dict())
    sigma = config.td3.exploration_sigma
    batch_size = config.td3.batch_size
    start = time.perf_counter()
    state = env.reset(streams.episode_seed())
    for t in range(config.total_updates):
        if t < config.random_warmup_steps:
            action = streams.explore.uniform(spec.action_low, spec.action_high)
        else:
            action = agent.select_action(state.observation, sigma, streams.explore)
        nxt, reward = env.step(state, action)
        replay.append(state.observation, action, reward, nxt.observation, nxt.terminal)
        state = env.reset(streams.episode_seed()) if nxt.done else nxt
        if t >= config.random_warmup_steps:
            agent.train_step(replay.sample(batch_size, streams.train), streams.train)
            log.gradient_updates += 1
        if (t + 1) % config.epoch_length == 0:
            log.returns.append(_evaluate(agent, env, streams, config.test_episodes_per_epoch))
            log.mean_q.append(agent.mean_estimated_q(replay.sample(batch_size, streams.diag)))
            log.wall_clock.append(time.perf_counter() - start)
    log.training_env_steps = config.total_updates
    dataset = replay.to_dataset(spec, Provenance.logged_history, {
        "generator": "train_teacher", "seed": config.seed,
        "total_steps": config.total_updates, "random_warmup_steps": config.random_warmup_steps,
    })
    return agent, dataset, log


# -- student ---------------------------------------------------------------------

def apply_reward_transform(dataset: TeacherDataset, transform: dict | None, seed: int):
    if transform is None:
        return dataset
    from .analysis import shape_rewards_time, train_time_predictor

    predictor = train_time_predictor(dataset, seed=seed)
    alpha = float(transform.get("alpha", 1.0))
    return shape_rewards_time(dataset, predictor, alpha,
                              sparse=transform["kind"] == "sparse_time")


def train_student(config: RunConfig, dataset: TeacherDataset | None = None,
                  eval_hook=None) -> EvalLog:
    """Train a TD3 student from teacher data under a curriculum.

    The time cursor ``t`` runs from ``random_warmup_steps`` to ``total_updates``
    (so a student performs as many gradient updates as a teacher would). With
    ``online_percent = X > 0`` the student takes one exploration step in its own
    environment whenever ``t % (100 / X) == 0``, before that step's update; the
    online episode persists across the gaps. Updates are skipped (and counted)
    while no data is eligible. ``eval_hook(agent, epoch, window)`` runs after
    each epoch's evaluation.
    """
    config.validate(dataset_given=dataset is not None)
    if config.role != "student":
        raise ConfigError("train_student needs role='student'")
    if dataset is None:
        dataset = load_dataset(config.dataset_path)
    if dataset.env_spec.env_id != config.env_id:
        raise ConfigError(f"dataset was generated on {dataset.env_spec.env_id!r} "
                          f"but the run is configured for {config.env_id!r}")
    dataset = apply_reward_transform(dataset, config.reward_transform, config.seed)
    env = make_env(config.env_id)
    spec = env.spec
    streams = _Streams(config.seed)
    agent = Td3Agent.create(spec, config.td3, streams.init)
    online = OnlineBuffer(spec.state_dim, spec.action_dim)
    k = online_cadence(config.online_percent)
    n = len(dataset)
    sigma = config.td3.exploration_sigma
    batch_size = config.td3.batch_size
    trace = hashlib.sha256()
    log = EvalLog(config=config.to_dict())
    start = time.perf_counter()
    online_state = env.reset(streams.episode_seed()) if k else None
    for t in range(config.random_warmup_steps, config.total_updates):
        window = eligible_window(config.curriculum, t, n)
        if k and t % k == 0:
            action = agent.select_action(online_state.observation, sigma, streams.explore)
            nxt, reward = env.step(online_state, action)
            online.append(online_state.observation, action, reward, nxt.observation, nxt.terminal)
            online_state = env.reset(streams.episode_seed()) if nxt.done else nxt
            log.online_step_times.append(t)
        if window[1] - window[0] + len(online) == 0:
            log.skipped_updates += 1
        else:
            batch = sample_minibatch(dataset, window, online, batch_size, streams.train)
            trace.update(batch.indices.astype("<i8").tobytes())
            agent.train_step(batch, streams.train)
            log.gradient_updates += 1
        if (t + 1) % config.epoch_length == 0:
            log.returns.append(_evaluate(agent, env, streams, config.test_episodes_per_epoch))
            try:
                diag = sample_minibatch(dataset, window, online, batch_size, streams.diag)
                log.mean_q.append(agent.mean_estimated_q(diag))
            except EmptyUnionError:
                log.mean_q.append(math.nan)
            log.wall_clock.append(time.perf_counter() - start)
            if eval_hook is not None:
                eval_hook(agent, len(log.returns), window)
    log.training_env_steps = len(log.online_step_times)
    log.index_trace_digest = trace.hexdigest()
    log.final_agent = agent
    return log


# -- noisy rollouts of a fixed policy ------------------------------------------------

def _rollout(agent: Td3Agent, n_tuples: int, seed: int, choose, provenance, metadata):
    env = make_env(agent.env_spec.env_id)
    spec = env.spec
    rng = np.random.default_rng(seed)
    buf = OnlineBuffer(spec.state_dim, spec.action_dim, initial_capacity=max(n_tuples, 1))
    episode_param = None
    state = None
    perturbed = 0
    while len(buf) < n_tuples:
        if state is None:
            state = env.reset(int(rng.integers(0, 2 ** 62)))
            episode_param = choose.new_episode(rng)
        action, noisy = choose.act(agent, state.observation, episode_param, rng)
        perturbed += noisy
        nxt, reward = env.step(state, action)
        buf.append(state.observation, action, reward, nxt.observation, nxt.terminal)
        state = None if nxt.done else nxt
    meta = dict(metadata, seed=seed, n_tuples=n_tuples, perturbed_steps=perturbed)
    return buf.to_dataset(spec, provenance, meta)


class _GaussianChoice:
    def __init__(self, max_std, xi):
        self.max_std, self.xi = max_std, xi

    def new_episode(self, rng):
        return rng.uniform(0.0, self.max_std)

    def act(self, agent, obs, sigma_k, rng):
        a = agent.policy(obs)
        if rng.random() < self.xi:
            return agent.clip_action(a + rng.normal(0.0, sigma_k, size=a.shape)), True
        return a, False


class _UniformChoice:
    def __init__(self, max_prob):
        self.max_prob = max_prob

    def new_episode(self, rng):
        return rng.uniform(0.0, self.max_prob)

    def act(self, agent, obs, xi_k, rng):
        if rng.random() < xi_k:
            spec = agent.env_spec
            return rng.uniform(spec.action_low, spec.action_high), True
        return agent.policy(obs), False


def generate_rollout_gaussian(agent: Td3Agent, max_std: float, xi: float, n_tuples: int,
                              seed: int) -> TeacherDataset:
    """Roll out a fixed policy; each episode draws sigma_k ~ U(0, max_std) and each step
    adds N(0, sigma_k^2 I) to the action with probability ``xi``."""
    if max_std < 0 or not 0.0 <= xi <= 1.0:
        raise ConfigError("need max_std >= 0 and xi in [0, 1]")
    return _rollout(agent, n_tuples, seed, _GaussianChoice(max_std, xi),
                    Provenance.rollout_gaussian, {"max_std": max_std, "xi": xi})


def generate_rollout_uniform(agent: Td3Agent, max_prob: float, n_tuples: int,
                             seed: int) -> TeacherDataset:
    """Roll out a fixed policy; each episode draws xi_k ~ U(0, max_prob) and each step
    replaces the action by a uniform draw over the action box with probability xi_k."""
    if not 0.0 <= max_prob <= 1.0:
        raise ConfigError("need max_prob in [0, 1]")
    return _rollout(agent, n_tuples, seed, _UniformChoice(max_prob),
                    Provenance.rollout_uniform, {"max_prob": max_prob})
