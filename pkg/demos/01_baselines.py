"""Drive the three-road preset with the classical controllers.

Run with ``python demos/01_baselines.py``. Takes about half a minute, most of
it in the SOTL grid search.
"""

from __future__ import annotations

import numpy as np

from attendlight import simcore
from attendlight.baselines import (
    SotlController,
    make_controller,
    run_controller,
    sotl_grid_search,
)
from attendlight.flowgen import SYNTHETIC_PRESETS, generate_synthetic
from attendlight.topology import catalog_lookup, participating_lanes

ix = catalog_lookup("int1")
print(f"{ix.name}: {ix.n_roads} roads, {len(ix.lanes)} lanes, {ix.n_phases} phases")
for p, phase in enumerate(ix.phases):
    print(f"  phase {p}: movements {', '.join(phase.movement_ids)} touch {len(participating_lanes(ix, p))} lanes")

# ten minutes of demand: one arrival every 4 s on average, 30% chance of a paired vehicle
flow = generate_synthetic(ix, SYNTHETIC_PRESETS["S1"], 600, seed=7)
print(f"\n{len(flow)} vehicles arrive in {flow.horizon_s:.0f} s")

# step the simulator by hand for a minute, always asking for phase 1
state = simcore.reset(ix, flow)
while state.clock < 60:
    simcore.advance(state, 1)
    print(f"  t={state.clock:3.0f}s  green={state.signal.active_phase}  pressure={simcore.pressure(state):.0f}  "
          f"in network={state.in_network}")

print("\naverage travel time per controller")
for name in ("fixed_time", "max_pressure"):
    print(f"  {name:<13} {run_controller(make_controller(name, ix), ix, flow):7.2f} s")

grid = sotl_grid_search(ix, flow)
p = grid.best
print(f"  {'sotl (tuned)':<13} {grid.best_att:7.2f} s  with delta={p.delta_s:g} max_red={p.max_red_count:g} "
      f"min_green={p.min_green_count:g}")

# how the setting tuned on one flow carries over to fresh demand
fresh = [generate_synthetic(ix, SYNTHETIC_PRESETS["S1"], 600, seed=s) for s in range(100, 103)]
print(f"  tuned SOTL on three unseen flows: "
      f"{np.mean([run_controller(SotlController(ix, p), ix, f) for f in fresh]):.2f} s")
