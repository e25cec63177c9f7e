"""Rule-based signal controllers: FixedTime, MaxPressure and SOTL, plus a SOTL grid search."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import simcore
from .simcore import SimState
from .topology import Intersection

FIXED_TIME_HOLD_S = 15.0
SOTL_DELTA_GRID = tuple(range(2, 34, 5))       # 7 values
SOTL_COUNT_GRID = tuple(range(2, 63, 5))       # 13 values


@dataclass(frozen=True)
class SotlParams:
    delta_s: float = 12.0
    max_red_count: float = 10.0
    min_green_count: float = 3.0

    def __post_init__(self):
        if min(self.delta_s, self.max_red_count, self.min_green_count) < 0:
            raise ValueError("SOTL parameters must be non-negative")


@dataclass
class ControllerState:
    kind: str
    n_phases: int
    cursor: int = 0
    elapsed_s: float = 0.0

    def __post_init__(self):
        if not 0 <= self.cursor < self.n_phases:
            raise ValueError("cursor outside the phase range")

    def sync(self, state: SimState) -> None:
        self.cursor = state.signal.active_phase
        self.elapsed_s = state.signal.phase_elapsed_s


def _next(cursor: int, n_phases: int) -> int:
    return (cursor + 1) % n_phases


def fixed_time_decide(cstate: ControllerState, n_phases: int) -> int:
    """Hold the current phase until it has been green for 15 s, then move to the next one."""
    if cstate.elapsed_s >= FIXED_TIME_HOLD_S:
        return _next(cstate.cursor, n_phases)
    return cstate.cursor


def max_pressure_decide(state: SimState, ix: Intersection) -> int:
    pressures = [simcore.phase_pressure(state, p) for p in range(ix.n_phases)]
    return int(np.argmax(pressures))  # first maximum wins ties


def green_red_waiting(state: SimState, ix: Intersection, phase: int) -> tuple[float, float]:
    """``(waiting behind red, waiting behind green)`` over entering lanes for ``phase`` green."""
    waiting = state.waiting_entering()
    entering = [lane.id for lane in ix.entering]
    green = {entering.index(ix.movement(mid).in_lane) for mid in ix.phases[phase].movement_ids}
    beta = float(sum(waiting[i] for i in green))
    return float(waiting.sum()) - beta, beta


def sotl_decide(state: SimState, ix: Intersection, params: SotlParams, cstate: ControllerState) -> int:
    alpha, beta = green_red_waiting(state, ix, cstate.cursor)
    if (cstate.elapsed_s > params.delta_s and alpha > params.max_red_count
            and beta < params.min_green_count):
        return _next(cstate.cursor, ix.n_phases)
    return cstate.cursor


# -- controller objects sharing the reset/decide protocol ---------------------------

class FixedTimeController:
    name = "fixed_time"

    def __init__(self, ix: Intersection):
        self.ix = ix
        self.cstate = ControllerState(self.name, ix.n_phases)

    def reset(self) -> None:
        self.cstate = ControllerState(self.name, self.ix.n_phases)

    def decide(self, state: SimState) -> int:
        self.cstate.sync(state)
        return fixed_time_decide(self.cstate, self.ix.n_phases)


class MaxPressureController:
    name = "max_pressure"

    def __init__(self, ix: Intersection):
        self.ix = ix

    def reset(self) -> None:
        pass

    def decide(self, state: SimState) -> int:
        return max_pressure_decide(state, self.ix)


class SotlController:
    name = "sotl"

    def __init__(self, ix: Intersection, params: SotlParams | None = None):
        self.ix = ix
        self.params = params or SotlParams()
        self.cstate = ControllerState(self.name, ix.n_phases)

    def reset(self) -> None:
        self.cstate = ControllerState(self.name, self.ix.n_phases)

    def decide(self, state: SimState) -> int:
        self.cstate.sync(state)
        return sotl_decide(state, self.ix, self.params, self.cstate)


def make_controller(name: str, ix: Intersection, sotl: SotlParams | None = None):
    if name == "fixed_time":
        return FixedTimeController(ix)
    if name == "max_pressure":
        return MaxPressureController(ix)
    if name == "sotl":
        return SotlController(ix, sotl)
    raise ValueError(f"unknown controller {name!r}")


def run_controller(controller, ix: Intersection, flow, cfg=None, seed: int = 0) -> float:
    """ATT of one full episode driven by ``controller``."""
    state = simcore.reset(ix, flow, cfg, seed)
    controller.reset()
    while not state.done:
        simcore.advance(state, controller.decide(state))
    return simcore.episode_att(state)


def sotl_grid() -> list[SotlParams]:
    return [SotlParams(float(d), float(r), float(g))
            for d, r, g in itertools.product(SOTL_DELTA_GRID, SOTL_COUNT_GRID, SOTL_COUNT_GRID)]


@dataclass
class GridResult:
    best: SotlParams
    best_att: float
    rows: list[tuple[SotlParams, float]]

    def to_csv(self) -> str:
        lines = ["delta,max_red,min_green,att"]
        lines += [f"{p.delta_s:g},{p.max_red_count:g},{p.min_green_count:g},{att:.6f}" for p, att in self.rows]
        return "\n".join(lines) + "\n"


def sotl_grid_search(ix: Intersection, flow, cfg=None, seed: int = 0, grid=None) -> GridResult:
    """One episode per grid point; the lexicographically smallest minimiser wins ties."""
    rows = []
    best, best_att = None, float("inf")
    for params in sorted(grid if grid is not None else sotl_grid(),
                         key=lambda p: (p.delta_s, p.max_red_count, p.min_green_count)):
        att = run_controller(SotlController(ix, params), ix, flow, cfg, seed)
        rows.append((params, att))
        if att < best_att:
            best, best_att = params, att
    if best is None:
        raise ValueError("empty SOTL grid")
    return GridResult(best, best_att, rows)
