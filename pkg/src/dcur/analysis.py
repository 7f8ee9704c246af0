"""Metrics, the standard-error bolding rule, state-overlap estimation, the time
predictor with its reward-shaping transforms, and Q-value diagnostics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Provenance, TeacherDataset
from .nn import MlpParams, adam_step, AdamState, backward_cached, forward_cached, init_mlp, mlp_forward


class AnalysisUsageError(ValueError):
    """Analysis called with inputs it cannot summarise."""


# -- per-run metrics -------------------------------------------------------------

def metric_m1(returns, window: int = 100) -> float:
    """Mean of the last ``window`` test-episode returns (all of them if fewer)."""
    r = np.asarray(returns, dtype=np.float64).ravel()
    if r.size == 0:
        raise AnalysisUsageError("M1 needs at least one test episode")
    return float(np.mean(r[-window:]))


def metric_m2(returns) -> float:
    """Mean over every test-episode return."""
    r = np.asarray(returns, dtype=np.float64).ravel()
    if r.size == 0:
        raise AnalysisUsageError("M2 needs at least one test episode")
    return float(np.mean(r))


def aggregate_over_seeds(values) -> tuple[float, float]:
    """Mean and standard error (sample std with n-1, over sqrt(n)); stderr is NaN for n=1."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise AnalysisUsageError("cannot aggregate an empty set of runs")
    mean = float(np.mean(v))
    if v.size == 1:
        return mean, math.nan
    return mean, float(np.std(v, ddof=1) / math.sqrt(v.size))


def bold_set(stats: Sequence[tuple[float, float]]) -> set[int]:
    """Indices that tie with the best mean under the standard-error overlap rule.

    With the best entry at ``w ± x``, entry ``y ± z`` is excluded only when
    ``w - x > y + z``. Every entry tied at the maximum is included.
    """
    if len(stats) == 0:
        raise AnalysisUsageError("bold_set needs at least one entry")
    means = [float(m) for m, _ in stats]
    errs = [0.0 if (s is None or math.isnan(s)) else float(s) for _, s in stats]
    best = int(np.argmax(means))
    w, x = means[best], errs[best]
    return {j for j in range(len(stats)) if means[j] == w or not (w - x > means[j] + errs[j])}


@dataclass
class CellMetrics:
    env_id: str
    curriculum: str
    online_percent: float
    m1_mean: float
    m1_stderr: float
    m2_mean: float
    m2_stderr: float
    seed_count: int
    m1_fallback: bool = False   # some run had fewer episodes than the M1 window
    m1_bold: bool = False
    m2_bold: bool = False


@dataclass
class MetricReport:
    cells: list = field(default_factory=list)

    @classmethod
    def from_runs(cls, runs: dict, m1_window: int = 100) -> "MetricReport":
        """``runs`` maps ``(env_id, curriculum, online_percent)`` to a list of per-seed
        return sequences (or objects with ``all_returns()``)."""
        cells = []
        for (env_id, cur, x), seeds in runs.items():
            per_seed = [np.asarray(s.all_returns() if hasattr(s, "all_returns") else s).ravel()
                        for s in seeds]
            m1 = [metric_m1(r, m1_window) for r in per_seed]
            m2 = [metric_m2(r) for r in per_seed]
            m1_mean, m1_se = aggregate_over_seeds(m1)
            m2_mean, m2_se = aggregate_over_seeds(m2)
            cells.append(CellMetrics(env_id, str(cur), float(x), m1_mean, m1_se, m2_mean, m2_se,
                                     len(per_seed), any(r.size < m1_window for r in per_seed)))
        report = cls(cells)
        report._mark_bold()
        return report

    def groups(self) -> dict:
        """Cells compared against each other: same environment and online percent."""
        out: dict = {}
        for i, c in enumerate(self.cells):
            out.setdefault((c.env_id, c.online_percent), []).append(i)
        return out

    def _mark_bold(self):
        for idx in self.groups().values():
            for metric in ("m1", "m2"):
                stats = [(getattr(self.cells[i], f"{metric}_mean"),
                          getattr(self.cells[i], f"{metric}_stderr")) for i in idx]
                chosen = bold_set(stats)
                for k, i in enumerate(idx):
                    setattr(self.cells[i], f"{metric}_bold", k in chosen)

    def write_csv(self, path) -> None:
        cols = ["env_id", "curriculum", "online_percent", "seed_count", "m1_mean", "m1_stderr",
                "m1_bold", "m2_mean", "m2_stderr", "m2_bold", "m1_fallback"]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\r\n")
            writer.writerow(cols)
            for c in self.cells:
                writer.writerow([getattr(c, k) for k in cols])

    def to_text(self) -> str:
        """Aligned table; bold cells carry a ``*`` suffix."""
        def fmt(mean, se, bold):
            se_txt = "n/a" if math.isnan(se) else f"{se:.1f}"
            return f"{mean:.1f} ± {se_txt}" + ("*" if bold else "")

        header = ["env", "X%", "curriculum", "seeds", "M1", "M2"]
        rows = [[c.env_id, f"{c.online_percent:g}", c.curriculum, str(c.seed_count),
                 fmt(c.m1_mean, c.m1_stderr, c.m1_bold), fmt(c.m2_mean, c.m2_stderr, c.m2_bold)]
                for c in self.cells]
        widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
        lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
        lines.append("  ".join("-" * w for w in widths))
        lines += ["  ".join(v.ljust(w) for v, w in zip(r, widths)) for r in rows]
        if any(c.m1_fallback for c in self.cells):
            lines.append("note: some runs had fewer test episodes than the M1 window; "
                         "M1 averages all of their episodes")
        return "\n".join(lines) + "\n"


# -- overlap ---------------------------------------------------------------------

def f_olap_from_accuracy(accuracy: float) -> float:
    """Overlap 2 * (1 - accuracy), clamped to [0, 1]."""
    return float(min(1.0, max(0.0, 2.0 * (1.0 - accuracy))))


@dataclass
class OverlapConfig:
    hidden_sizes: tuple = (64, 64)
    learning_rate: float = 1e-3
    batch_size: int = 128
    max_epochs: int = 200
    patience: int = 10
    validation_fraction: float = 0.2
    min_class_size: int = 10


@dataclass
class OverlapReport:
    f_olap: float
    accuracy: float
    class_counts: tuple
    accuracy_history: list = field(default_factory=list)


def _standardizer(x):
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std[std < 1e-12] = 1.0
    return mean, std


def train_overlap_classifier(d1, d2, config: OverlapConfig | None = None,
                             seed: int = 0) -> OverlapReport:
    """Estimate how distinguishable two state sets are.

    The larger set is subsampled to the size of the smaller, the pooled data is
    split into train/validation, and a sigmoid-output MLP is trained with binary
    cross-entropy until validation accuracy has not improved for ``patience``
    epochs. The best validation accuracy gives the overlap.
    """
    config = config or OverlapConfig()
    d1 = np.asarray(d1, dtype=np.float64)
    d2 = np.asarray(d2, dtype=np.float64)
    if min(len(d1), len(d2)) < config.min_class_size:
        raise AnalysisUsageError(f"each state set needs at least {config.min_class_size} states, "
                                 f"got {len(d1)} and {len(d2)}")
    if d1.ndim != 2 or d2.ndim != 2 or d1.shape[1] != d2.shape[1]:
        raise AnalysisUsageError(f"state sets must be 2-D with equal width, got {d1.shape}, {d2.shape}")
    rng = np.random.default_rng(seed)
    n = min(len(d1), len(d2))
    d1 = d1[rng.choice(len(d1), n, replace=False)] if len(d1) > n else d1
    d2 = d2[rng.choice(len(d2), n, replace=False)] if len(d2) > n else d2
    x = np.vstack([d1, d2])
    y = np.concatenate([np.ones(n), np.zeros(n)])
    order = rng.permutation(2 * n)
    x, y = x[order], y[order]
    n_val = max(2, int(round(config.validation_fraction * 2 * n)))
    x_val, y_val, x_tr, y_tr = x[:n_val], y[:n_val], x[n_val:], y[n_val:]
    mean, std = _standardizer(x_tr)
    x_tr = (x_tr - mean) / std
    x_val = (x_val - mean) / std

    net = init_mlp([x.shape[1], *config.hidden_sizes, 1], rng, "relu", "sigmoid")
    opt = AdamState.fresh(net, config.learning_rate)
    best, since_best, history = -1.0, 0, []
    for _ in range(config.max_epochs):
        perm = rng.permutation(len(x_tr))
        for start in range(0, len(perm), config.batch_size):
            idx = perm[start:start + config.batch_size]
            p, cache = forward_cached(net, x_tr[idx])
            # d(BCE)/d(logit) = p - y
            delta = (p[:, 0] - y_tr[idx])[:, None] / len(idx)
            grad, _ = backward_cached(net, cache, delta, through_output=False, need_input_grad=False)
            net, opt = adam_step(net, grad, opt)
        acc = float(np.mean((mlp_forward(net, x_val)[:, 0] >= 0.5) == (y_val == 1.0)))
        history.append(acc)
        if acc > best:
            best, since_best = acc, 0
        else:
            since_best += 1
            if since_best >= config.patience:
                break
    return OverlapReport(f_olap_from_accuracy(best), best, (n, n), history)


def collect_policy_states(agent, n_states: int, seed: int) -> np.ndarray:
    """States visited by the agent's noise-free policy over fresh episodes."""
    from .envs import make_env

    env = make_env(agent.env_spec.env_id)
    rng = np.random.default_rng(seed)
    states = []
    state = None
    while len(states) < n_states:
        if state is None:
            state = env.reset(int(rng.integers(0, 2 ** 62)))
        states.append(state.observation)
        state, _ = env.step(state, agent.policy(state.observation))
        if state.done:
            state = None
    return np.array(states)


def student_overlap(agent, dataset: TeacherDataset, window: tuple[int, int], n_states: int = 5000,
                    config: OverlapConfig | None = None, seed: int = 0) -> OverlapReport:
    """Overlap between the student's visited states and the curriculum-eligible teacher states."""
    lo, hi = window
    rng = np.random.default_rng(seed)
    eligible = np.arange(lo, hi)
    if len(eligible) > n_states:
        eligible = rng.choice(eligible, n_states, replace=False)
    teacher_states = dataset.states[np.sort(eligible)]
    student_states = collect_policy_states(agent, n_states, seed)
    return train_overlap_classifier(student_states, teacher_states, config, seed)


def write_overlap_csv(reports: Sequence[OverlapReport], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\r\n")
        writer.writerow(["epoch", "f_olap", "accuracy", "n_per_class"])
        for epoch, r in enumerate(reports, start=1):
            writer.writerow([epoch, repr(r.f_olap), repr(r.accuracy), r.class_counts[0]])


# -- time predictor and reward shaping ---------------------------------------------

@dataclass
class TimePredictorConfig:
    hidden_sizes: tuple = (64, 64)
    learning_rate: float = 1e-3
    batch_size: int = 256
    epochs: int = 30


@dataclass
class TimePredictor:
    """Regressor from a state to its normalised position ``i / N`` in the teacher log."""

    network: MlpParams
    input_mean: np.ndarray
    input_std: np.ndarray
    loss_history: list = field(default_factory=list)

    @property
    def state_dim(self) -> int:
        return self.network.input_size

    def __call__(self, states) -> np.ndarray:
        s = np.asarray(states, dtype=np.float64)
        if s.shape[-1] != self.state_dim:
            raise AnalysisUsageError(f"time predictor expects states of width {self.state_dim}, "
                                     f"got {s.shape[-1]}")
        out = mlp_forward(self.network, (s - self.input_mean) / self.input_std)
        return np.clip(out[..., 0], 0.0, 1.0)


def train_time_predictor(dataset: TeacherDataset, config: TimePredictorConfig | None = None,
                         seed: int = 0) -> TimePredictor:
    """Fit h(s_i) ~ i / N with mean squared error."""
    config = config or TimePredictorConfig()
    n = len(dataset)
    if n < 2:
        raise AnalysisUsageError("time predictor needs at least two tuples")
    rng = np.random.default_rng(seed)
    x = dataset.states
    labels = np.arange(n, dtype=np.float64) / n
    mean, std = _standardizer(x)
    xs = (x - mean) / std
    net = init_mlp([x.shape[1], *config.hidden_sizes, 1], rng)
    opt = AdamState.fresh(net, config.learning_rate)
    history = []
    for _ in range(config.epochs):
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            out, cache = forward_cached(net, xs[idx])
            resid = out[:, 0] - labels[idx]
            total += float(resid @ resid)
            grad, _ = backward_cached(net, cache, (2.0 / len(idx)) * resid[:, None],
                                      need_input_grad=False)
            net, opt = adam_step(net, grad, opt)
        history.append(total / n)
    return TimePredictor(net, mean, std, history)


def time_shaping_deltas(dataset: TeacherDataset, predictor, alpha: float,
                        variant: str = "full") -> np.ndarray:
    """Per-tuple reward bonus: alpha * (h(s') - h(s)), or alpha * h(s') for ``drop_baseline``."""
    if variant not in ("full", "drop_baseline"):
        raise AnalysisUsageError(f"unknown shaping variant {variant!r}")
    if getattr(predictor, "state_dim", dataset.env_spec.state_dim) != dataset.env_spec.state_dim:
        raise AnalysisUsageError(f"predictor state width {predictor.state_dim} does not match "
                                 f"dataset state_dim {dataset.env_spec.state_dim}")
    h_next = np.asarray(predictor(dataset.next_states), dtype=np.float64)
    if variant == "drop_baseline":
        return alpha * h_next
    return alpha * (h_next - np.asarray(predictor(dataset.states), dtype=np.float64))


def shape_rewards_time(dataset: TeacherDataset, predictor, alpha: float, variant: str = "full",
                       sparse: bool = False) -> TeacherDataset:
    """New dataset with time-shaped rewards; ``sparse`` zeroes the logged rewards first."""
    base = np.zeros(len(dataset)) if sparse else dataset.rewards
    delta = time_shaping_deltas(dataset, predictor, alpha, variant)
    # a zero bonus leaves the stored reward bit-identical (keeps -0.0 intact)
    rewards = np.where(delta == 0.0, base, base + delta)
    meta = dict(dataset.metadata, shaping_alpha=repr(float(alpha)), shaping_variant=variant,
                shaping_sparse=str(bool(sparse)), shaped_from=dataset.provenance.name)
    return dataset.replace(rewards=rewards, provenance=Provenance.reward_shaped, metadata=meta)


# -- Q diagnostics -------------------------------------------------------------------

def q_diagnostic_table(eval_logs) -> list[tuple[int, float, float]]:
    """Per-epoch ``(epoch, mean, stderr)`` of mean estimated Q across runs.

    Accepts ``EvalLog`` objects or plain per-epoch sequences.
    """
    series = [list(getattr(log, "mean_q", log)) for log in eval_logs]
    if not series:
        raise AnalysisUsageError("no runs given")
    lengths = {len(s) for s in series}
    if len(lengths) != 1:
        raise AnalysisUsageError(f"runs disagree on the number of epochs: {sorted(lengths)}")
    table = []
    for epoch, values in enumerate(zip(*series), start=1):
        mean, se = aggregate_over_seeds(values)
        table.append((epoch, mean, se))
    return table


def write_q_table_csv(table, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\r\n")
        writer.writerow(["epoch", "mean_q", "stderr"])
        for epoch, mean, se in table:
            writer.writerow([epoch, repr(mean), "nan" if math.isnan(se) else repr(se)])
