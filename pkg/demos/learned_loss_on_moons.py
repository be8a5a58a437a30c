"""Train a small student on two-moons with a learned loss and compare it to plain cross-entropy.

    python3 demos/learned_loss_on_moons.py
"""

import numpy as np

from dynloss import engine
from dynloss.cli import surface_grid, monotone_fraction
from dynloss.data import make_synthetic

full = make_synthetic("moons", 500, noise=0.15, seed=0)
idx = np.arange(len(full))
train, test = full.subset(idx[:400]), full.subset(idx[400:])

cfg = engine.StageConfig(N=5, K=20, epochs=4, train_batch=20, val_batch=50, seed=0)
model = engine.ModelConfig(student_hidden=(16,), teacher_hidden=(16, 1))

# The teacher rewrites the loss network after each student stage.
learned = engine.run_l2t_dln(cfg, train, test, model)
baseline = engine.run_fixed_loss(cfg, train, test, model, loss="ce")
print(f"learned loss:  test accuracy {learned.record.final_test_acc:.3f}")
print(f"cross-entropy: test accuracy {baseline.record.final_test_acc:.3f}  "
      f"(same {baseline.student_steps} SGD steps)")

# Validation error seen by the teacher, one value per outer iteration.
val = [row.val_ce for row in learned.record.rows if row.kind == "teacher"]
print("validation CE after each teacher update:", np.round(val, 3))

# A useful loss should shrink as the correct-class score grows.
_, _, z = surface_grid(learned.phi, -3, 3, 15)
print(f"learned loss decreases in the correct-class score on {monotone_fraction(z):.0%} of slices")
