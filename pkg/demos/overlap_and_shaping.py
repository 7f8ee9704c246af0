"""How far apart are early and late teacher states, and what does time shaping do?

Run with ``python demos/overlap_and_shaping.py``; a few seconds.
"""

import numpy as np

from dcur import (RunConfig, TimePredictorConfig, shape_rewards_time, train_overlap_classifier,
                  train_teacher, train_time_predictor)

cfg = RunConfig("pointmass", "teacher", total_updates=8000, epoch_length=2000,
                random_warmup_steps=1000, test_episodes_per_epoch=2, seed=40)
_, data, _ = train_teacher(cfg)
n = len(data)

# Overlap: 1 means a classifier cannot tell the two sets apart, 0 means it always can.
early, late = data.states[: n // 4], data.states[-n // 4:]
print("early vs late  f_olap = %.3f" % train_overlap_classifier(early, late, seed=0).f_olap)
half = data.states[np.random.default_rng(0).permutation(n)]
print("random halves  f_olap = %.3f" % train_overlap_classifier(half[: n // 2], half[n // 2:], seed=0).f_olap)

# A regressor that guesses where in the log a state came from.
h = train_time_predictor(data, TimePredictorConfig(epochs=10), seed=0)
print("predicted position of first/middle/last state:",
      np.round(h(data.states[[0, n // 2, n - 1]]), 3))

# Shaping adds alpha * (h(s') - h(s)); with alpha = 0 nothing changes.
shaped = shape_rewards_time(data, h, alpha=5.0)
print("mean reward before %.3f, after %.3f" % (data.rewards.mean(), shaped.rewards.mean()))
print("alpha = 0 leaves rewards untouched:",
      shape_rewards_time(data, h, 0.0).rewards.tobytes() == data.rewards.tobytes())
