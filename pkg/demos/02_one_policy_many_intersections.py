"""One untrained parameter set scoring phases on every catalog intersection.

The network never sees a lane count or a phase count as a shape parameter:
lanes are pooled per phase by attention and phases are scored one by one,
so the same weights work on a 2-phase T-junction and an 8-phase crossroads.

Run with ``python demos/02_one_policy_many_intersections.py``.
"""

from __future__ import annotations

import numpy as np

from attendlight import simcore
from attendlight import tensorkit as tk
from attendlight.flowgen import SYNTHETIC_PRESETS, generate_synthetic
from attendlight.policy import AttendLight, embed_lane, features, forward
from attendlight.topology import builtin_catalog, participating_lanes

model = AttendLight(d=128, seed=0)
print(f"actor parameters: {sum(p.data.size for _, p in model.actor.items()):,}\n")

for name, ix in sorted(builtin_catalog().items()):
    # let some traffic build up under a fixed phase so the observation is not empty
    state = simcore.reset(ix, generate_synthetic(ix, SYNTHETIC_PRESETS["S5"], 600, seed=1))
    for _ in range(6):
        simcore.advance(state, 0)
    x = features(state.observe_array(), ix)
    probs, _ = forward(x, ix, model.initial_state(), model.actor, state.signal.active_phase)
    print(f"{name:<8} lanes={len(ix.lanes):2d} phases={ix.n_phases}  pi = {np.array2string(probs, precision=3)}")

# look inside the state attention for one phase of the first preset
ix = builtin_catalog()["int1"]
state = simcore.reset(ix, generate_synthetic(ix, SYNTHETIC_PRESETS["S5"], 600, seed=1))
for _ in range(6):
    simcore.advance(state, 0)
x = features(state.observe_array(), ix)
phase = 2
lanes = participating_lanes(ix, phase)
idx = [ix.lane_index[lid] for lid in lanes]
with tk.no_grad():
    g = embed_lane(x, model.actor)
    query = tk.mean(g[idx], axis=0)
    w = tk.attention(g[idx], query, model.actor, "state_attn").data
print(f"\nint1 phase {phase} lane weights (untrained):")
for lid, weight, row in zip(lanes, w, state.observe_array()[idx]):
    print(f"  {lid:<8} counts={row.astype(int).tolist()}  weight={weight:.3f}")
