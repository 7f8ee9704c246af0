"""A small teacher-student run on PointMass, end to end.

Train a teacher online, then two offline students on its log under two
curricula, and print the comparison table and the mean-Q series.
Run with ``python demos/teacher_student.py``; about a minute on one core.
"""

import tempfile
from pathlib import Path

import numpy as np

from dcur import (MetricReport, RunConfig, Scale, Additive, q_diagnostic_table,
                  random_policy_returns, save_dataset, train_student, train_teacher)

out = Path(tempfile.mkdtemp(prefix="dcur-demo-"))

# --- the teacher -------------------------------------------------------------
teacher_cfg = RunConfig("pointmass", "teacher", total_updates=12_000, epoch_length=2000,
                        random_warmup_steps=1000, test_episodes_per_epoch=5, seed=40)
teacher, data, teacher_log = train_teacher(teacher_cfg)
save_dataset(data, out / "data.dcur")

random_baseline = np.mean(random_policy_returns("pointmass", range(20), np.random.default_rng(0)))
print("teacher return per epoch:", np.round(np.mean(teacher_log.returns, axis=1), 1))
print("random policy:           ", round(float(random_baseline), 1))
print("logged tuples:", len(data), "->", out / "data.dcur")

# --- two students, two seeds each -----------------------------------------
curricula = {"scale:c=1.0": Scale(1.0), "add:f=N": Additive(f=len(data))}
runs = {}
for name, curriculum in curricula.items():
    logs = []
    for seed in (90, 91):
        cfg = RunConfig("pointmass", "student", total_updates=12_000, epoch_length=2000,
                        curriculum=curriculum, test_episodes_per_epoch=5, seed=seed)
        logs.append(train_student(cfg, data))
    runs[("pointmass", name, 0.0)] = logs

report = MetricReport.from_runs(runs)
print()
print(report.to_text())

# mean estimated Q per epoch, averaged over seeds
for (_, name, _), logs in runs.items():
    table = q_diagnostic_table(logs)
    print("%-12s mean Q:" % name, " ".join("%.1f" % m for _, m, _ in table))
