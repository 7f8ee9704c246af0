"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line through the ``acceptance`` fixture; the
terminal summary lists all of them together. Criterion 10 trains a full-size
PointMass teacher and ten students, so this module takes roughly a quarter of
an hour on one core.
"""

import csv
import math
import time

import numpy as np
import pytest
from scipy import stats

from dcur.analysis import (bold_set, f_olap_from_accuracy, shape_rewards_time,
                           time_shaping_deltas, train_overlap_classifier, train_time_predictor,
                           TimePredictorConfig)
from dcur.cli import main
from dcur.data import (Additive, Batch, DatasetFormatError, OnlineBuffer, Scale, TeacherDataset,
                       dataset_from_bytes, dataset_to_bytes, eligible_window, load_dataset,
                       sample_minibatch, save_dataset)
from dcur.envs import make_env
from dcur.nn import (CheckpointFormatError, backward_cached, forward_cached, init_mlp,
                     mlp_forward, params_from_bytes, params_to_bytes)
from dcur.pipelines import RunConfig, random_policy_returns, read_eval_log, train_student
from dcur.td3 import Td3Agent, Td3Config, load_agent, save_agent
from oracles import central_difference, relative_error, td3_target, window_by_predicate

SPEC = make_env("pointmass").spec


# 1 ----------------------------------------------------------------------------------

def test_curriculum_matches_per_index_oracle(acceptance):
    with acceptance(1, "curriculum windows match the per-index oracle") as out:
        additive = [(None, 0), (None, 5), (None, 60), (3, 0), (10, 5), (0, 7)]
        scales = [0.25, 0.5, 1.0, 1.1, 2.0]
        specs = [(Additive(f=f, p=p), "add", (p, f)) for p, f in additive]
        specs += [(Scale(c), "scale", c) for c in scales]
        grid = [(n, t) for n in range(1, 51) for t in range(61)]
        start = time.perf_counter()
        windows = {(k, n, t): eligible_window(spec, t, n)
                   for k, (spec, _, _) in enumerate(specs) for n, t in grid}
        elapsed = time.perf_counter() - start
        mismatches = 0
        for (k, n, t), (lo, hi) in windows.items():
            _, kind, param = specs[k]
            if list(range(lo, hi)) != window_by_predicate(kind, param, t, n):
                mismatches += 1
        assert mismatches == 0
        assert elapsed < 1.0
        out.detail = f"{len(windows)} cases, 0 mismatches, {elapsed:.3f}s"


# 2 ----------------------------------------------------------------------------------

def test_additive_and_scale_identity(acceptance):
    with acceptance(2, "add(p=inf, f=0) and scale(c=1.0) define the same curriculum") as out:
        rng = np.random.default_rng(2)
        pairs = zip(rng.integers(0, 2_000_000, 10_000), rng.integers(1, 1_000_000, 10_000))
        mismatches = sum(eligible_window(Additive(f=0), int(t), int(n))
                         != eligible_window(Scale(1.0), int(t), int(n)) for t, n in pairs)
        assert mismatches == 0
        out.detail = "10000 pairs, 0 mismatches"


# 3 ----------------------------------------------------------------------------------

HALFCHEETAH_M1 = [(8067.3, 123.6), (7416.2, 540.2), (8028.4, 321.1), (7108.7, 449.6),
                  (7447.3, 187.8), (7650.4, 806.4), (7467.8, 52.3), (7392.6, 235.4),
                  (8305.3, 246.2), (8306.0, 255.1), (7843.8, 150.2)]
WALKER_M2 = list(zip([1712.1, 1810.5, 1651.9, 1183.5, 1096.4, 1521.8, 799.9, 1251.5, 1305.7,
                      1698.1, 1747.4],
                     [148.6, 191.5, 38.3, 81.8, 76.9, 74.7, 111.5, 71.4, 86.6, 59.6, 85.8]))


def test_bolding_reproduces_published_pattern(acceptance):
    with acceptance(3, "standard-error bolding reproduces the published bold cells") as out:
        cheetah = bold_set(HALFCHEETAH_M1)
        walker = bold_set(WALKER_M2)
        assert cheetah == {0, 2, 5, 8, 9}
        assert walker == {0, 1, 2, 9, 10}
        out.detail = f"HalfCheetah M1 {sorted(cheetah)}, Walker2d M2 {sorted(walker)}"


# 4 ----------------------------------------------------------------------------------

TOPOLOGIES = [([4, 64, 64, 2], "relu", "tanh"), ([6, 64, 64, 1], "relu", "identity"),
              ([4, 64, 64, 1], "relu", "sigmoid"), ([3, 8, 8, 1], "tanh", "identity")]


def test_gradients_match_finite_differences(acceptance):
    with acceptance(4, "backprop gradients match central differences") as out:
        start = time.perf_counter()
        worst = 0.0
        for sizes, hidden, output in TOPOLOGIES:
            rng = np.random.default_rng(len(sizes) + sizes[1])
            net = init_mlp(sizes, rng, hidden, output)
            x = rng.normal(size=(5, sizes[0]))
            g_out = rng.normal(size=(5, sizes[-1]))
            _, cache = forward_cached(net, x)
            grad, _ = backward_cached(net, cache, g_out)

            def loss(flat):
                return float(np.sum(g_out * mlp_forward(net.with_flat(flat), x)))

            for i in rng.choice(net.flat.size, size=100, replace=False):
                worst = max(worst, relative_error(grad[i], central_difference(loss, net.flat, i)))
        elapsed = time.perf_counter() - start
        assert worst < 1e-4 and elapsed < 10.0
        out.detail = f"{len(TOPOLOGIES)} topologies x 100 coords, max rel err {worst:.1e}, {elapsed:.2f}s"


# 5 ----------------------------------------------------------------------------------

def test_td3_targets_match_hand_formula(acceptance):
    with acceptance(5, "TD3 target arithmetic matches the hand formula") as out:
        rng = np.random.default_rng(5)
        agent = Td3Agent.create(SPEC, Td3Config(hidden_sizes=(4,)), 0)
        edges = {"done": 0, "zero_discount": 0}
        worst = 0.0
        for case in range(1000):
            r, q1, q2 = rng.normal(scale=10.0, size=3)
            done = case % 4 == 0 or rng.random() < 0.2
            # the config requires gamma > 0; the smallest positive double stands in for 0
            gamma = 5e-324 if case % 5 == 0 else float(rng.choice([1.0, rng.random()]))
            edges["done"] += done
            edges["zero_discount"] += gamma == 5e-324
            agent.config = Td3Config(hidden_sizes=(4,), gamma=gamma)
            for name, q in (("target_critic1", q1), ("target_critic2", q2)):
                net = getattr(agent, name)
                flat = np.zeros_like(net.flat)
                flat[-1] = q
                setattr(agent, name, net.with_flat(flat))
            b = _one_tuple(rng, r, done)
            y = agent.compute_targets(b, rng)[0]
            expect = td3_target(r, 0.0 if gamma == 5e-324 else gamma, done, q1, q2)
            worst = max(worst, abs(y - expect) / max(1.0, abs(expect)))
        assert worst <= 1e-12
        out.detail = (f"1000 cases ({edges['done']} terminal, {edges['zero_discount']} "
                      f"zero-discount), max err {worst:.1e}")


def _one_tuple(rng, r, done):
    return Batch(rng.normal(size=(1, 4)), np.zeros((1, 2)), np.array([r]),
                 rng.normal(size=(1, 4)), np.array([float(done)]))


# 6 ----------------------------------------------------------------------------------

def test_sampling_statistics(acceptance):
    with acceptance(6, "window sampling is uniform and online mixing is proportional") as out:
        rng = np.random.default_rng(6)
        n = 1000
        ds = TeacherDataset(SPEC, rng.normal(size=(n, 4)), rng.uniform(-1, 1, (n, 2)),
                            rng.normal(size=n), rng.normal(size=(n, 4)), np.zeros(n, bool))
        batch = sample_minibatch(ds, (300, 364), None, 100_000, rng)
        counts = np.bincount(batch.indices - 300, minlength=64)
        p_value = stats.chisquare(counts).pvalue
        assert counts.size == 64 and p_value > 0.001

        online = OnlineBuffer(4, 2)
        for _ in range(150):
            online.append(rng.normal(size=4), rng.uniform(-1, 1, 2), 0.0, rng.normal(size=4), False)
        mixed = sample_minibatch(ds, (0, 600), online, 100_000, rng)
        expect = 150 / (600 + 150)
        frac = float(np.mean(mixed.indices >= n))
        assert abs(frac - expect) <= 0.01
        out.detail = f"chi-square p={p_value:.3f}, online share {frac:.4f} vs {expect:.4f}"


# 7 ----------------------------------------------------------------------------------

def test_online_cadence_over_a_long_run(acceptance, small_teacher):
    with acceptance(7, "online steps happen exactly every 100/X updates") as out:
        _, ds, _ = small_teacher
        common = dict(total_updates=100_000, epoch_length=100_000, random_warmup_steps=0,
                      test_episodes_per_epoch=1, seed=90,
                      td3=Td3Config(hidden_sizes=(8,), batch_size=8))
        five = train_student(RunConfig("pointmass", "student", curriculum=Additive(f=10),
                                       online_percent=5, **common), ds)
        assert five.training_env_steps == 5_000
        assert five.online_step_times == list(range(0, 100_000, 20))
        zero = train_student(RunConfig("pointmass", "student", curriculum=Additive(f=10),
                                       online_percent=0, **common), ds)
        assert zero.training_env_steps == 0 and zero.online_step_times == []
        out.detail = "X=5: 5000 steps at t%20==0; X=0: 0 steps"


# 8 ----------------------------------------------------------------------------------

def test_overlap_endpoints(acceptance):
    with acceptance(8, "overlap estimate separates the two extremes") as out:
        rng = np.random.default_rng(8)
        a = rng.normal(size=(2000, 4))
        b = rng.normal(size=(2000, 4)) + np.array([10.0, 0.0, 0.0, 0.0])
        apart = train_overlap_classifier(a, b, seed=1).f_olap
        pool = rng.normal(size=(4000, 4))
        same = train_overlap_classifier(pool[:2000], pool[2000:], seed=1).f_olap
        assert apart <= 0.1 and same >= 0.8
        mapping = {acc: f_olap_from_accuracy(acc) for acc in (1.0, 0.75, 0.5)}
        assert mapping == {1.0: 0.0, 0.75: 0.5, 0.5: 1.0}
        out.detail = f"separated {apart:.3f}, identical {same:.3f}"


# 9 ----------------------------------------------------------------------------------

def test_shaping_identities(acceptance, small_teacher):
    with acceptance(9, "time shaping no-ops are exact and deltas telescope") as out:
        _, ds, _ = small_teacher
        predictor = train_time_predictor(ds, TimePredictorConfig(epochs=3), seed=0)
        assert shape_rewards_time(ds, predictor, 0.0).rewards.tobytes() == ds.rewards.tobytes()

        class Flat:
            state_dim = 4

            def __call__(self, states):
                return np.full(len(states), 0.42)

        assert shape_rewards_time(ds, Flat(), 3.0).rewards.tobytes() == ds.rewards.tobytes()
        # first episode of the teacher log: consecutive tuples chain until it ends
        end = 1
        while end < len(ds) and np.array_equal(ds.next_states[end - 1], ds.states[end]):
            end += 1
        episode = ds.replace(states=ds.states[:end], actions=ds.actions[:end],
                             rewards=ds.rewards[:end], next_states=ds.next_states[:end],
                             dones=ds.dones[:end])
        deltas = time_shaping_deltas(episode, predictor, 1.7)
        h = predictor(np.vstack([episode.states[:1], episode.next_states[-1:]]))
        gap = abs(math.fsum(deltas) - 1.7 * (h[1] - h[0]))
        assert gap <= 1e-12
        out.detail = f"episode of {end} steps telescopes to within {gap:.1e}"


# 10 ---------------------------------------------------------------------------------

EXPERIMENT = """\
[experiment]
name = desk
env = pointmass
dataset = {dataset}
output = {output}

[student]
updates = 60000

[cell scale]
curriculum = scale:c=1.0
online_pct = 0
seeds = 90 91 92 93 94

[cell final]
curriculum = add:f=60000
online_pct = 0
seeds = 90 91 92 93 94
"""


def _cli(*argv):
    return main([str(a) for a in argv])


def test_end_to_end_desk_experiment(acceptance, tmp_path):
    with acceptance(10, "desk experiment completes, beats random and replays bit-identically") as out:
        teacher = tmp_path / "teacher"
        assert _cli("train-teacher", "--env", "pointmass", "--steps", 60_000, "--seed", 40,
                    "--out", teacher) == 0
        teacher_log = read_eval_log(teacher / "eval.csv")
        teacher_final = float(np.mean(teacher_log.returns[-1]))
        random_mean = float(np.mean(random_policy_returns("pointmass", range(100),
                                                          np.random.default_rng(0))))
        assert teacher_final >= random_mean + 5.0

        config = tmp_path / "desk.ini"
        config.write_text(EXPERIMENT.format(dataset=teacher / "data.dcur", output=tmp_path / "runs"))
        start = time.perf_counter()
        assert _cli("run", "--config", config) == 0
        elapsed = time.perf_counter() - start
        assert elapsed < 600.0

        root = tmp_path / "runs" / "desk"
        analysis = root / "analysis"
        assert (analysis / "metrics.csv").is_file() and (analysis / "metrics.txt").is_file()
        assert len(list(analysis.glob("qvalues_*.csv"))) == 2
        rows = {r["curriculum"]: r for r in csv.DictReader(
            (analysis / "metrics.csv").read_text().splitlines())}
        for label in ("scale", "final"):
            for seed in range(90, 95):
                assert read_eval_log(root / label / str(seed) / "eval.csv").gradient_updates == 59_000

        # replays: one seed per curriculum and the teacher
        for label in ("scale", "final"):
            original = root / label / "90"
            replay = tmp_path / f"replay_{label}"
            assert _cli("train-student", "--from-manifest", original / "eval.json", "--out", replay) == 0
            assert (replay / "eval.csv").read_bytes() == (original / "eval.csv").read_bytes()
        again = tmp_path / "teacher_again"
        assert _cli("train-teacher", "--env", "pointmass", "--steps", 60_000, "--seed", 40,
                    "--out", again) == 0
        assert (again / "data.dcur").read_bytes() == (teacher / "data.dcur").read_bytes()
        a, b = load_agent(teacher / "checkpoint"), load_agent(again / "checkpoint")
        assert all(a.networks()[k].flat.tobytes() == b.networks()[k].flat.tobytes()
                   for k in a.networks())

        scale, final = rows[str(Scale(1.0))], rows[str(Additive(f=60_000))]
        order = ">" if float(scale["m1_mean"]) > float(final["m1_mean"]) else "<="
        out.detail = (f"teacher {teacher_final:.1f} vs random {random_mean:.1f}; students "
                      f"{elapsed:.0f}s; M1 scale {float(scale['m1_mean']):.1f} {order} "
                      f"final-buffer {float(final['m1_mean']):.1f} (not gated)")


# 11 ---------------------------------------------------------------------------------

def test_persistence_round_trips_and_rejections(acceptance, small_teacher, tmp_path):
    with acceptance(11, "dataset and checkpoint files round-trip and reject damage") as out:
        agent, ds, _ = small_teacher
        save_dataset(ds, tmp_path / "d.dcur")
        raw = (tmp_path / "d.dcur").read_bytes()
        back = load_dataset(tmp_path / "d.dcur")
        assert back.identical_to(ds) and dataset_to_bytes(back) == raw

        save_agent(agent, tmp_path / "ckpt")
        loaded = load_agent(tmp_path / "ckpt")
        for name, net in agent.networks().items():
            assert loaded.networks()[name].flat.tobytes() == net.flat.tobytes()
        blob = params_to_bytes(agent.actor)
        assert params_to_bytes(params_from_bytes(blob)) == blob

        located = 0
        for cut in (3, 40, len(raw) // 2, len(raw) - 1):
            with pytest.raises(DatasetFormatError) as err:
                dataset_from_bytes(raw[:cut])
            assert err.value.offset <= cut
            located += 1
        damaged = bytearray(raw)
        damaged[0] ^= 0xFF
        with pytest.raises(DatasetFormatError, match="offset 0"):
            dataset_from_bytes(bytes(damaged))
        for bad in (blob[:len(blob) // 2], b"X" + blob[1:]):
            with pytest.raises(CheckpointFormatError, match="offset"):
                params_from_bytes(bad)
        out.detail = f"{len(raw)}-byte dataset and 6 networks bit-identical; {located + 3} damaged files located"
