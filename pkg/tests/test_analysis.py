import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcur.analysis import (AnalysisUsageError, MetricReport, OverlapConfig, TimePredictor,
                           TimePredictorConfig, aggregate_over_seeds, bold_set,
                           f_olap_from_accuracy, metric_m1, metric_m2, q_diagnostic_table,
                           shape_rewards_time, time_shaping_deltas, train_overlap_classifier,
                           train_time_predictor, write_q_table_csv)
from dcur.data import Provenance, TeacherDataset
from dcur.envs import make_env
from dcur.nn import init_mlp
from oracles import two_pass_stderr

HALFCHEETAH_M1 = [(8067.3, 123.6), (7416.2, 540.2), (8028.4, 321.1), (7108.7, 449.6),
                  (7447.3, 187.8), (7650.4, 806.4), (7467.8, 52.3), (7392.6, 235.4),
                  (8305.3, 246.2), (8306.0, 255.1), (7843.8, 150.2)]
WALKER_M2 = list(zip([1712.1, 1810.5, 1651.9, 1183.5, 1096.4, 1521.8, 799.9, 1251.5, 1305.7,
                      1698.1, 1747.4],
                     [148.6, 191.5, 38.3, 81.8, 76.9, 74.7, 111.5, 71.4, 86.6, 59.6, 85.8]))

SPEC = make_env("pointmass").spec


def dataset_from_states(states, rewards=None, next_states=None):
    n = len(states)
    return TeacherDataset(SPEC, states, np.zeros((n, 2)),
                          np.ones(n) if rewards is None else rewards,
                          states if next_states is None else next_states, np.zeros(n, bool))


class Constant:
    """Stub predictor returning ``value`` for every state."""

    def __init__(self, value, state_dim=4):
        self.value, self.state_dim = value, state_dim

    def __call__(self, states):
        return np.full(len(states), self.value)


class Lookup:
    """Stub predictor reading the prediction off the first state coordinate."""

    state_dim = 4

    def __call__(self, states):
        return np.asarray(states)[:, 0]


# -- per-run metrics -------------------------------------------------------------

def test_m1_examples():
    assert metric_m1(np.full((250, 10), 5.0)) == 5.0
    assert metric_m1(np.arange(1, 201)) == 150.5
    fifty = np.random.default_rng(0).normal(size=50)
    assert metric_m1(fifty) == pytest.approx(sum(fifty) / 50, abs=1e-12)
    with pytest.raises(AnalysisUsageError):
        metric_m1([])


def test_m2_examples(rng):
    assert metric_m2(np.full(30, 5.0)) == 5.0
    assert metric_m2([0.0, 10.0]) == 5.0
    v = rng.normal(size=1000)
    assert metric_m2(v) == pytest.approx(math.fsum(v) / 1000, abs=1e-12)
    with pytest.raises(AnalysisUsageError):
        metric_m2([])


def test_m2_is_order_free_but_m1_is_not(rng):
    v = rng.normal(size=300)
    p = rng.permutation(v)
    assert metric_m2(p) == pytest.approx(metric_m2(v), abs=1e-12)
    ramp = np.arange(300.0)
    assert metric_m1(ramp) != metric_m1(ramp[::-1])


def test_aggregate_examples(rng):
    assert aggregate_over_seeds([3, 3, 3, 3, 3]) == (3.0, 0.0)
    assert aggregate_over_seeds([0, 10]) == (5.0, pytest.approx(5.0, abs=1e-12))
    v = list(rng.normal(size=5))
    mean, se = aggregate_over_seeds(v)
    m, s = two_pass_stderr(v)
    assert abs(mean - m) < 1e-10 and abs(se - s) < 1e-10
    mean, se = aggregate_over_seeds([4.0])
    assert mean == 4.0 and math.isnan(se)
    with pytest.raises(AnalysisUsageError):
        aggregate_over_seeds([])


# -- bolding ---------------------------------------------------------------------

def test_bold_halfcheetah_column():
    assert bold_set(HALFCHEETAH_M1) == {0, 2, 5, 8, 9}


def test_bold_walker_column():
    assert bold_set(WALKER_M2) == {0, 1, 2, 9, 10}


def test_bold_trivial_cases():
    assert bold_set([(1.0, 0.5)]) == {0}
    assert bold_set([(1.0, 0.0), (3.0, 0.0), (2.0, 0.0)]) == {1}
    assert bold_set([(2.0, 0.0), (2.0, 0.0), (1.0, 0.0)]) == {0, 1}
    assert bold_set([(2.0, math.nan), (1.0, 1.0)]) == {0, 1}
    with pytest.raises(AnalysisUsageError):
        bold_set([])


stat_lists = st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(0, 1e2)), min_size=1, max_size=12)


@settings(max_examples=200, deadline=None)
@given(stat_lists)
def test_bold_contains_argmax(stats):
    best = max(range(len(stats)), key=lambda j: stats[j][0])
    assert best in bold_set(stats)


@settings(max_examples=200, deadline=None)
@given(stat_lists, st.integers(0, 11), st.floats(0, 1e3))
def test_bold_monotone_in_stderr(stats, j, extra):
    j %= len(stats)
    best = max(range(len(stats)), key=lambda k: stats[k][0])
    if j == best:
        return
    before = bold_set(stats)
    bumped = list(stats)
    bumped[j] = (stats[j][0], stats[j][1] + extra)
    after = bold_set(bumped)
    assert before - {j} == after - {j} and (j not in before or j in after)


# -- metric report -------------------------------------------------------------------

def test_report_matches_hand_computation(tmp_path):
    rng = np.random.default_rng(3)
    seeds_a = [rng.normal(10.0, 1.0, size=120) for _ in range(5)]
    seeds_b = [rng.normal(0.0, 1.0, size=120) for _ in range(5)]
    report = MetricReport.from_runs({("pointmass", "scale:c=1.0", 0.0): seeds_a,
                                     ("pointmass", "add:f=0", 0.0): seeds_b})
    a, b = report.cells
    m1 = [s[-100:].mean() for s in seeds_a]
    m2 = [s.mean() for s in seeds_a]
    assert a.m1_mean == pytest.approx(np.mean(m1), abs=1e-12)
    assert a.m1_stderr == pytest.approx(two_pass_stderr(m1)[1], abs=1e-12)
    assert a.m2_stderr == pytest.approx(two_pass_stderr(m2)[1], abs=1e-12)
    assert a.seed_count == 5 and not a.m1_fallback
    assert a.m1_bold and a.m2_bold and not b.m1_bold and not b.m2_bold

    path = tmp_path / "m.csv"
    report.write_csv(path)
    assert path.read_bytes().count(b"\r\n") == 3
    rows = list(csv.DictReader(path.read_text().splitlines()))
    assert rows[0]["curriculum"] == "scale:c=1.0" and rows[0]["m1_bold"] == "True"
    text = report.to_text()
    assert "*" in text.splitlines()[2] and "*" not in text.splitlines()[3]


def test_report_groups_by_env_and_online_share():
    runs = {("pointmass", "a", 0.0): [[1.0], [1.0]], ("pointmass", "b", 0.0): [[5.0], [5.0]],
            ("pointmass", "a", 10.0): [[3.0], [3.0]], ("swingup", "a", 0.0): [[-9.0], [-9.0]]}
    report = MetricReport.from_runs(runs)
    assert [c.m1_bold for c in report.cells] == [False, True, True, True]
    assert all(c.m1_fallback for c in report.cells)
    assert "fewer test episodes" in report.to_text()


def test_report_marks_undefined_stderr():
    report = MetricReport.from_runs({("pointmass", "a", 0.0): [[1.0] * 150]})
    assert math.isnan(report.cells[0].m1_stderr)
    assert "n/a" in report.to_text()


# -- overlap ---------------------------------------------------------------------------

def test_overlap_from_accuracy():
    assert f_olap_from_accuracy(1.0) == 0.0
    assert f_olap_from_accuracy(0.5) == 1.0
    assert f_olap_from_accuracy(0.3) == 1.0
    assert f_olap_from_accuracy(0.8) == pytest.approx(0.4)


def test_overlap_same_distribution(rng):
    pool = rng.normal(size=(4000, 4))
    report = train_overlap_classifier(pool[:2000], pool[2000:], seed=1)
    assert report.f_olap >= 0.8
    assert report.class_counts == (2000, 2000)
    assert report.accuracy == max(report.accuracy_history)


def test_overlap_separated_clusters(rng):
    a = rng.normal(size=(1500, 4))
    b = rng.normal(size=(1500, 4)) + np.array([10.0, 0, 0, 0])
    assert train_overlap_classifier(a, b, seed=2).f_olap <= 0.1


def test_overlap_is_symmetric(rng):
    a = rng.normal(size=(1500, 3))
    b = rng.normal(size=(1500, 3)) + 0.5
    f_ab = train_overlap_classifier(a, b, seed=4).f_olap
    f_ba = train_overlap_classifier(b, a, seed=4).f_olap
    assert 0.0 <= f_ab <= 1.0 and abs(f_ab - f_ba) <= 0.1


def test_overlap_balances_classes(rng):
    report = train_overlap_classifier(rng.normal(size=(900, 2)), rng.normal(size=(300, 2)),
                                      OverlapConfig(max_epochs=5), seed=0)
    assert report.class_counts == (300, 300)


def test_overlap_usage_errors(rng):
    with pytest.raises(AnalysisUsageError, match="at least 10"):
        train_overlap_classifier(rng.normal(size=(9, 2)), rng.normal(size=(50, 2)))
    with pytest.raises(AnalysisUsageError):
        train_overlap_classifier(rng.normal(size=(50, 2)), rng.normal(size=(50, 3)))


# -- time predictor and shaping -----------------------------------------------------------

def test_time_predictor_learns_a_linear_index():
    n = 2000
    states = np.zeros((n, 4))
    states[:, 0] = np.arange(n) / n
    pred = train_time_predictor(dataset_from_states(states), TimePredictorConfig(epochs=60), seed=0)
    mse = np.mean((pred(states) - np.arange(n) / n) ** 2)
    assert mse <= 1e-3
    assert pred.loss_history[-1] < pred.loss_history[0]


def test_time_predictor_on_constant_states():
    n = 3000
    pred = train_time_predictor(dataset_from_states(np.ones((n, 4))), seed=1)
    out = pred(np.ones((5, 4)))
    assert np.all(np.abs(out - 0.5) < 0.05)
    assert abs(np.mean((pred(np.ones((n, 4))) - np.arange(n) / n) ** 2) - 1 / 12) <= 0.01


def test_time_predictor_outputs_are_bounded(rng):
    net = init_mlp([4, 8, 1], rng)
    pred = TimePredictor(net, np.zeros(4), np.ones(4))
    out = pred(rng.normal(scale=1e3, size=(500, 4)))
    assert out.min() >= 0.0 and out.max() <= 1.0
    with pytest.raises(AnalysisUsageError):
        pred(np.zeros((2, 3)))
    with pytest.raises(AnalysisUsageError):
        train_time_predictor(dataset_from_states(np.zeros((1, 4))))


def test_zero_alpha_is_bit_identical(rng):
    ds = dataset_from_states(rng.normal(size=(50, 4)), rewards=np.array([-0.0] * 25 + [1.5] * 25),
                             next_states=rng.normal(size=(50, 4)))
    out = shape_rewards_time(ds, Lookup(), 0.0)
    assert out.rewards.tobytes() == ds.rewards.tobytes()
    assert out.provenance == Provenance.reward_shaped
    assert np.array_equal(out.states, ds.states) and np.array_equal(out.actions, ds.actions)
    assert out.metadata["shaping_alpha"] == "0.0" and out.metadata["shaped_from"] == "logged_history"


def test_constant_predictor_leaves_rewards(rng):
    ds = dataset_from_states(rng.normal(size=(40, 4)), rewards=rng.normal(size=40))
    assert shape_rewards_time(ds, Constant(0.37), 5.0).rewards.tobytes() == ds.rewards.tobytes()


def test_hand_shaping_case():
    s = np.array([[0.3, 0, 0, 0]])
    s2 = np.array([[0.8, 0, 0, 0]])
    ds = dataset_from_states(s, rewards=np.array([1.0]), next_states=s2)
    assert shape_rewards_time(ds, Lookup(), 2.0).rewards[0] == pytest.approx(2.0, abs=1e-15)
    assert shape_rewards_time(ds, Lookup(), 2.0, variant="drop_baseline").rewards[0] == \
        pytest.approx(2.6, abs=1e-15)
    assert shape_rewards_time(ds, Lookup(), 2.0, sparse=True).rewards[0] == pytest.approx(1.0)


def test_opposite_alphas_cancel(rng):
    ds = dataset_from_states(rng.uniform(size=(60, 4)), next_states=rng.uniform(size=(60, 4)))
    up = time_shaping_deltas(ds, Lookup(), 0.7)
    down = time_shaping_deltas(ds, Lookup(), -0.7)
    assert np.all(up + down == 0.0)


def test_shaping_telescopes_along_a_trajectory(rng):
    path = rng.uniform(size=(31, 4))
    ds = dataset_from_states(path[:-1], next_states=path[1:])
    deltas = time_shaping_deltas(ds, Lookup(), 1.3)
    assert math.fsum(deltas) == pytest.approx(1.3 * (path[-1, 0] - path[0, 0]), abs=1e-12)


def test_shaping_rejects_mismatched_predictor(rng):
    ds = dataset_from_states(rng.normal(size=(5, 4)))
    with pytest.raises(AnalysisUsageError, match="state_dim"):
        shape_rewards_time(ds, Constant(0.0, state_dim=3), 1.0)
    with pytest.raises(AnalysisUsageError, match="variant"):
        shape_rewards_time(ds, Lookup(), 1.0, variant="half")


# -- Q diagnostics ------------------------------------------------------------------------

def test_q_table_single_log():
    table = q_diagnostic_table([[1.0, 2.5, 0.5]])
    assert [(e, m) for e, m, _ in table] == [(1, 1.0), (2, 2.5), (3, 0.5)]
    assert all(math.isnan(se) for _, _, se in table)


def test_q_table_constant_series():
    assert q_diagnostic_table([[2.0] * 4] * 5) == [(e, 2.0, 0.0) for e in range(1, 5)]


def test_q_table_matches_oracle(rng, tmp_path):
    logs = rng.normal(size=(5, 7))
    table = q_diagnostic_table(list(logs))
    for epoch, mean, se in table:
        m, s = two_pass_stderr(list(logs[:, epoch - 1]))
        assert abs(mean - m) < 1e-10 and abs(se - s) < 1e-10
    path = tmp_path / "q.csv"
    write_q_table_csv(table, path)
    assert path.read_text().splitlines()[0] == "epoch,mean_q,stderr"
    with pytest.raises(AnalysisUsageError, match="epochs"):
        q_diagnostic_table([[1.0, 2.0], [1.0]])
