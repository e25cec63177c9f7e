"""Train a small single-intersection policy and compare it with the rule-based controllers.

Run with ``python demos/03_training.py [iterations]``. The default of 400
iterations at d=32 takes about two minutes on one core. The acceptance harness uses
3000 iterations at d=128.
"""

from __future__ import annotations

import sys

import numpy as np

from attendlight.baselines import make_controller, run_controller, sotl_grid_search
from attendlight.flowgen import SYNTHETIC_PRESETS, generate_synthetic
from attendlight.topology import catalog_lookup
from attendlight.trainer import SINGLE, EnvInstance, RegimeConfig, evaluate, train

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 400
ix = catalog_lookup("int1")
train_env = EnvInstance(ix, generate_synthetic(ix, SYNTHETIC_PRESETS["S1"], 600, seed=1000), name="int1-S1")
held_out = [EnvInstance(ix, generate_synthetic(ix, SYNTHETIC_PRESETS["S1"], 600, seed=s)) for s in range(5000, 5005)]

# keep the snapshot whose greedy policy does best on the training flow, checked every 50 iterations
cfg = RegimeConfig(SINGLE, episodes=iterations, d=32, seed=0, select_every=50)
print(f"training {cfg.regime} for {cfg.episodes} iterations: n={cfg.n}, lr={cfg.lr}, d={cfg.d}")
model, report = train(cfg, [train_env], log_every=max(iterations // 8, 1))
print(f"kept the snapshot from iteration {report.selected}")

print("\ngreedy ATT on five unseen S1 flows")
print(f"  {'attendlight':<13} {np.mean([evaluate(model, e) for e in held_out]):7.2f} s")
for name in ("fixed_time", "max_pressure"):
    print(f"  {name:<13} {np.mean([run_controller(make_controller(name, ix), ix, e.flow) for e in held_out]):7.2f} s")
print(f"  {'sotl (tuned)':<13} {np.mean([sotl_grid_search(ix, e.flow).best_att for e in held_out]):7.2f} s")
