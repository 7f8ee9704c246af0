"""Teacher datasets, curriculum windows and minibatch sampling.

A ``TeacherDataset`` is the time-ordered log of a teacher's interaction, kept as
column arrays.  A curriculum maps the student's training step ``t`` to a
half-open index range of that log; minibatches are drawn uniformly, with
replacement, from the union of that range and the student's own online tuples.
"""

from __future__ import annotations

import enum
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Union

import numpy as np

from .envs import EnvSpec

DATASET_MAGIC = b"DCURDS1"
DATASET_VERSION = 1


class Provenance(enum.IntEnum):
    logged_history = 0
    rollout_gaussian = 1
    rollout_uniform = 2
    reordered = 3
    reward_shaped = 4


class DatasetFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class EmptyUnionError(RuntimeError):
    """No teacher tuple is eligible and the online buffer is empty."""


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    done: bool


def _frozen(a, dtype, shape):
    arr = np.array(a, dtype=dtype, copy=True).reshape(shape)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class TeacherDataset:
    """Immutable ordered log of ``N`` transitions.

    ``done`` marks genuine terminations only; time-limit truncations are stored as
    ``False`` so they still bootstrap.
    """

    env_spec: EnvSpec
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    provenance: Provenance = Provenance.logged_history
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        spec = self.env_spec
        n = len(self.rewards)
        sd, ad = spec.state_dim, spec.action_dim
        cols = {
            "states": _frozen(self.states, np.float64, (n, sd)),
            "actions": _frozen(self.actions, np.float64, (n, ad)),
            "rewards": _frozen(self.rewards, np.float64, (n,)),
            "next_states": _frozen(self.next_states, np.float64, (n, sd)),
            "dones": _frozen(self.dones, bool, (n,)),
        }
        for name in ("states", "actions", "rewards", "next_states"):
            if not np.isfinite(cols[name]).all():
                raise ValueError(f"dataset column {name!r} contains non-finite values")
        for name, arr in cols.items():
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "provenance", Provenance(self.provenance))
        object.__setattr__(self, "metadata", {str(k): str(v) for k, v in self.metadata.items()})

    @classmethod
    def from_transitions(cls, env_spec: EnvSpec, transitions: Iterable[Transition],
                         provenance=Provenance.logged_history, metadata=None) -> "TeacherDataset":
        ts = list(transitions)
        sd, ad = env_spec.state_dim, env_spec.action_dim
        return cls(
            env_spec,
            np.array([t.state for t in ts], dtype=np.float64).reshape(len(ts), sd),
            np.array([t.action for t in ts], dtype=np.float64).reshape(len(ts), ad),
            np.array([t.reward for t in ts], dtype=np.float64),
            np.array([t.next_state for t in ts], dtype=np.float64).reshape(len(ts), sd),
            np.array([t.done for t in ts], dtype=bool),
            provenance,
            metadata or {},
        )

    def __len__(self) -> int:
        return len(self.rewards)

    def __getitem__(self, i: int) -> Transition:
        return Transition(self.states[i], self.actions[i], float(self.rewards[i]),
                          self.next_states[i], bool(self.dones[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def replace(self, **changes) -> "TeacherDataset":
        fields = dict(env_spec=self.env_spec, states=self.states, actions=self.actions,
                      rewards=self.rewards, next_states=self.next_states, dones=self.dones,
                      provenance=self.provenance, metadata=self.metadata)
        fields.update(changes)
        return TeacherDataset(**fields)

    def identical_to(self, other: "TeacherDataset") -> bool:
        """Bitwise equality of every column and of the header."""
        if not isinstance(other, TeacherDataset):
            return False
        return (self.env_spec == other.env_spec and self.provenance == other.provenance
                and self.metadata == other.metadata
                and all(a.tobytes() == b.tobytes() for a, b in zip(
                    (self.states, self.actions, self.rewards, self.next_states, self.dones),
                    (other.states, other.actions, other.rewards, other.next_states, other.dones))))


# -- curricula ---------------------------------------------------------------

@dataclass(frozen=True)
class Additive:
    """Tuples from ``t - p`` up to (excluding) ``t + f``; ``p=None`` means from index 0."""

    f: int
    p: int | None = None

    def __post_init__(self):
        if self.f < 0 or (self.p is not None and self.p < 0):
            raise ValueError(f"additive curriculum needs p, f >= 0, got p={self.p}, f={self.f}")

    def __str__(self):
        p = "inf" if self.p is None else str(self.p)
        return f"add:p={p},f={self.f}"


@dataclass(frozen=True)
class Scale:
    """Tuples from index 0 up to (excluding) ``floor(t * c)``."""

    c: float

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError(f"scale curriculum needs c > 0, got {self.c}")

    def __str__(self):
        return f"scale:c={float(self.c)!r}"


CurriculumSpec = Union[Additive, Scale]


def eligible_window(spec: CurriculumSpec, t: int, n: int) -> tuple[int, int]:
    """Half-open range ``[lo, hi)`` of dataset indices eligible at student step ``t``."""
    if t < 0 or n < 1:
        raise ValueError(f"need t >= 0 and n >= 1, got t={t}, n={n}")
    if isinstance(spec, Additive):
        lo = 0 if spec.p is None else max(0, t - spec.p)
        hi = min(n, t + spec.f)
    elif isinstance(spec, Scale):
        lo = 0
        hi = min(n, math.floor(t * spec.c))
    else:
        raise TypeError(f"unknown curriculum {spec!r}")
    return min(lo, hi), hi


def parse_curriculum(text: str) -> CurriculumSpec:
    """Parse ``add:p=inf,f=50000`` / ``add:f=0`` / ``scale:c=1.10``."""
    kind, _, rest = text.strip().partition(":")
    params = {}
    for item in filter(None, rest.split(",")):
        key, eq, value = item.partition("=")
        if not eq:
            raise ValueError(f"malformed curriculum parameter {item!r} in {text!r}")
        params[key.strip()] = value.strip()
    try:
        if kind == "add":
            unknown = set(params) - {"p", "f"}
            if unknown or "f" not in params:
                raise ValueError
            p = params.get("p", "inf")
            return Additive(f=int(params["f"]), p=None if p in ("inf", "unbounded") else int(p))
        if kind == "scale":
            if set(params) != {"c"}:
                raise ValueError
            return Scale(float(params["c"]))
    except ValueError as err:
        raise ValueError(f"cannot parse curriculum {text!r}: {err}") from None
    raise ValueError(f"unknown curriculum kind {kind!r} in {text!r} (expected add or scale)")


# -- student online data and sampling --------------------------------------------

class OnlineBuffer:
    """Append-only store of the student's self-generated tuples; nothing is evicted."""

    def __init__(self, state_dim: int, action_dim: int, initial_capacity: int = 1024):
        self.state_dim = state_dim
        self.action_dim = action_dim
        self._size = 0
        self._alloc(initial_capacity)

    def _alloc(self, cap):
        old = getattr(self, "states", None)
        new = {
            "states": np.empty((cap, self.state_dim)),
            "actions": np.empty((cap, self.action_dim)),
            "rewards": np.empty(cap),
            "next_states": np.empty((cap, self.state_dim)),
            "dones": np.empty(cap, dtype=bool),
        }
        if old is not None:
            for k, arr in new.items():
                arr[:self._size] = getattr(self, k)[:self._size]
        for k, arr in new.items():
            setattr(self, k, arr)

    def __len__(self) -> int:
        return self._size

    def append(self, state, action, reward, next_state, done) -> None:
        if self._size == len(self.rewards):
            self._alloc(2 * len(self.rewards))
        i = self._size
        self.states[i] = state
        self.actions[i] = action
        self.rewards[i] = reward
        self.next_states[i] = next_state
        self.dones[i] = done
        self._size += 1

    def sample(self, batch_size: int, rng: np.random.Generator) -> "Batch":
        """Uniform draw with replacement over everything stored so far."""
        if self._size == 0:
            raise EmptyUnionError("cannot sample from an empty buffer")
        idx = rng.integers(0, self._size, size=batch_size)
        return Batch(self.states[idx], self.actions[idx], self.rewards[idx],
                     self.next_states[idx], self.dones[idx].astype(np.float64), idx)

    def to_dataset(self, env_spec: EnvSpec, provenance=Provenance.logged_history,
                   metadata=None) -> TeacherDataset:
        n = self._size
        return TeacherDataset(env_spec, self.states[:n], self.actions[:n], self.rewards[:n],
                              self.next_states[:n], self.dones[:n], provenance, metadata or {})

    def __getitem__(self, i: int) -> Transition:
        if not -self._size <= i < self._size:
            raise IndexError(i)
        i %= self._size
        return Transition(self.states[i].copy(), self.actions[i].copy(), float(self.rewards[i]),
                          self.next_states[i].copy(), bool(self.dones[i]))


@dataclass
class Batch:
    """Column-wise minibatch. ``indices`` are union indices: teacher tuple ``i`` is
    reported as ``i``, online tuple ``j`` as ``N + j``."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    indices: np.ndarray = None

    def __len__(self):
        return len(self.rewards)

    @classmethod
    def from_transitions(cls, transitions) -> "Batch":
        ts = list(transitions)
        return cls(np.array([t.state for t in ts], dtype=np.float64),
                   np.array([t.action for t in ts], dtype=np.float64),
                   np.array([t.reward for t in ts], dtype=np.float64),
                   np.array([t.next_state for t in ts], dtype=np.float64),
                   np.array([t.done for t in ts], dtype=np.float64))

    def transitions(self) -> list[Transition]:
        return [Transition(self.states[i], self.actions[i], float(self.rewards[i]),
                           self.next_states[i], bool(self.dones[i])) for i in range(len(self))]


def sample_minibatch(dataset: TeacherDataset, window: tuple[int, int], online: OnlineBuffer | None,
                     batch_size: int, rng: np.random.Generator) -> Batch:
    """Draw ``batch_size`` i.i.d. uniform tuples from window ∪ online buffer."""
    lo, hi = window
    if not 0 <= lo <= hi <= len(dataset):
        raise ValueError(f"window {window} invalid for dataset of size {len(dataset)}")
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    m = hi - lo
    n_online = 0 if online is None else len(online)
    total = m + n_online
    if total == 0:
        raise EmptyUnionError(
            f"no eligible data: window {window} is empty and the online buffer holds no tuples; "
            "delay gradient updates until data exists")
    draws = rng.integers(0, total, size=batch_size)
    if n_online == 0:
        idx = lo + draws
        return Batch(dataset.states[idx], dataset.actions[idx], dataset.rewards[idx],
                     dataset.next_states[idx], dataset.dones[idx].astype(np.float64), idx)
    teacher = draws < m
    t_idx = lo + draws[teacher]
    o_idx = draws[~teacher] - m

    def gather(t_col, o_col):
        out = np.empty((batch_size,) + t_col.shape[1:], dtype=t_col.dtype)
        out[teacher] = t_col[t_idx]
        out[~teacher] = o_col[o_idx]
        return out

    indices = np.where(teacher, lo + draws, len(dataset) + draws - m)
    return Batch(gather(dataset.states, online.states), gather(dataset.actions, online.actions),
                 gather(dataset.rewards, online.rewards),
                 gather(dataset.next_states, online.next_states),
                 gather(dataset.dones, online.dones).astype(np.float64), indices)


def reorder_by_reward(dataset: TeacherDataset) -> TeacherDataset:
    """Stable permutation of the tuples into non-decreasing reward order."""
    order = np.argsort(dataset.rewards, kind="stable")
    meta = dict(dataset.metadata)
    meta["reordered_from"] = dataset.provenance.name
    return dataset.replace(states=dataset.states[order], actions=dataset.actions[order],
                           rewards=dataset.rewards[order], next_states=dataset.next_states[order],
                           dones=dataset.dones[order], provenance=Provenance.reordered,
                           metadata=meta)


# -- persistence -----------------------------------------------------------------

def _record_dtype(state_dim: int, action_dim: int) -> np.dtype:
    return np.dtype([("state", "<f8", (state_dim,)), ("action", "<f8", (action_dim,)),
                     ("reward", "<f8"), ("next_state", "<f8", (state_dim,)), ("done", "u1")])


def _lp_string(text: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def dataset_to_bytes(dataset: TeacherDataset) -> bytes:
    spec = dataset.env_spec
    header = b"".join([
        DATASET_MAGIC,
        struct.pack("<I", DATASET_VERSION),
        _lp_string(spec.env_id),
        struct.pack("<II", spec.state_dim, spec.action_dim),
        spec.action_low.astype("<f8").tobytes(),
        spec.action_high.astype("<f8").tobytes(),
        struct.pack("<IBQ", spec.max_episode_steps, int(dataset.provenance), len(dataset)),
        _lp_string(json.dumps(dataset.metadata, sort_keys=True)),
    ])
    body = np.empty(len(dataset), dtype=_record_dtype(spec.state_dim, spec.action_dim))
    body["state"] = dataset.states
    body["action"] = dataset.actions
    body["reward"] = dataset.rewards
    body["next_state"] = dataset.next_states
    body["done"] = dataset.dones
    return header + body.tobytes()


def dataset_from_bytes(buf: bytes) -> TeacherDataset:
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise DatasetFormatError(f"file truncated while reading {what}", len(buf))
        out = buf[pos:pos + n]
        pos += n
        return out

    def take_string(what):
        start = pos
        (length,) = struct.unpack("<I", take(4, f"{what} length"))
        try:
            return take(length, what).decode("utf-8")
        except UnicodeDecodeError:
            raise DatasetFormatError(f"{what} is not valid UTF-8", start + 4) from None

    if take(len(DATASET_MAGIC), "magic") != DATASET_MAGIC:
        raise DatasetFormatError("bad magic, not a dataset file", 0)
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"unsupported format version {version}", pos - 4)
    env_id = take_string("env_id")
    state_dim, action_dim = struct.unpack("<II", take(8, "dimensions"))
    if state_dim == 0 or action_dim == 0:
        raise DatasetFormatError("zero state or action dimension", pos - 8)
    low = np.frombuffer(take(8 * action_dim, "action_low"), dtype="<f8").astype(np.float64)
    high = np.frombuffer(take(8 * action_dim, "action_high"), dtype="<f8").astype(np.float64)
    max_steps, prov_code, n = struct.unpack("<IBQ", take(13, "episode/provenance/count header"))
    if prov_code not in Provenance._value2member_map_:
        raise DatasetFormatError(f"unknown provenance code {prov_code}", pos - 9)
    meta_at = pos
    meta_text = take_string("metadata")
    try:
        metadata = json.loads(meta_text)
    except json.JSONDecodeError:
        raise DatasetFormatError("metadata is not valid JSON", meta_at + 4) from None
    if not isinstance(metadata, dict):
        raise DatasetFormatError("metadata must be a JSON object", meta_at + 4)
    try:
        spec = EnvSpec(env_id, state_dim, action_dim, low, high, max_steps)
    except ValueError as err:
        raise DatasetFormatError(f"invalid environment header: {err}", meta_at) from None
    rec = _record_dtype(state_dim, action_dim)
    body_len = len(buf) - pos
    if body_len < n * rec.itemsize:
        complete = body_len // rec.itemsize
        raise DatasetFormatError(
            f"truncated body: record {complete} of {n} is incomplete", pos + complete * rec.itemsize)
    if body_len > n * rec.itemsize:
        raise DatasetFormatError("trailing bytes after the last record", pos + n * rec.itemsize)
    body = np.frombuffer(buf, dtype=rec, count=n, offset=pos)
    bad = np.flatnonzero(body["done"] > 1)
    if bad.size:
        raise DatasetFormatError(f"record {bad[0]} has invalid done byte",
                                 pos + bad[0] * rec.itemsize + rec.fields["done"][1])
    finite = np.ones(n, dtype=bool)
    for name in ("state", "action", "next_state"):
        finite &= np.isfinite(body[name]).all(axis=1)
    finite &= np.isfinite(body["reward"])
    if not finite.all():
        first = int(np.flatnonzero(~finite)[0])
        raise DatasetFormatError(f"record {first} holds a non-finite value",
                                 pos + first * rec.itemsize)
    return TeacherDataset(spec, body["state"], body["action"], body["reward"], body["next_state"],
                          body["done"].astype(bool), Provenance(prov_code), metadata)


def save_dataset(dataset: TeacherDataset, path) -> None:
    Path(path).write_bytes(dataset_to_bytes(dataset))


def load_dataset(path) -> TeacherDataset:
    return dataset_from_bytes(Path(path).read_bytes())
