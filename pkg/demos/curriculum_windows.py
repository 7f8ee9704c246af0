"""Which teacher tuples can a student sample, and when?

Run with ``python demos/curriculum_windows.py``. Takes well under a second.
"""

import numpy as np

from dcur import Additive, Scale, bold_set, eligible_window, parse_curriculum

n = 1_000_000   # size of the teacher's log

# An additive curriculum opens the first t + f tuples at student step t.
for t in (0, 250_000, 500_000, 1_000_000):
    print("add f=50K    t=%7d ->" % t, eligible_window(Additive(f=50_000), t, n))

# A bounded past keeps only the most recent p tuples behind the cursor.
for t in (500_000, 1_000_000):
    print("add p=800K   t=%7d ->" % t, eligible_window(Additive(f=0, p=800_000), t, n))

# Scale curricula move faster (c > 1) or slower (c < 1) than the student.
for c in (0.5, 1.0, 1.25):
    print("scale c=%-4s t=  200000 ->" % c, eligible_window(Scale(c), 200_000, n))

# add(f=0) and scale(c=1.0) are the same rule written two ways
rng = np.random.default_rng(0)
same = all(eligible_window(Additive(f=0), int(t), n) == eligible_window(Scale(1.0), int(t), n)
           for t in rng.integers(0, 2 * n, 1000))
print("add:f=0 == scale:c=1.0 on 1000 random steps:", same)

# Strings from the command line parse into the same objects.
print(parse_curriculum("add:p=800000,f=0"), parse_curriculum("scale:c=1.1"))

# Comparing cells: an entry is co-best unless best_mean - best_se > mean + se.
column = [(8067.3, 123.6), (7416.2, 540.2), (8028.4, 321.1), (7108.7, 449.6),
          (7447.3, 187.8), (7650.4, 806.4), (7467.8, 52.3), (7392.6, 235.4),
          (8305.3, 246.2), (8306.0, 255.1), (7843.8, 150.2)]
print("co-best cells:", sorted(bold_set(column)))
