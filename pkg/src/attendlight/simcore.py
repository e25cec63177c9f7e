"""Discrete-time (1 s tick) single-intersection traffic simulator.

Dynamics contract
-----------------
* Entering lanes are FIFO queues. Each tick a vehicle advances
  ``min(free_speed * tick, gap to predecessor or stop line)``; queued vehicles
  are packed ``QUEUE_SPACING_M`` apart. A vehicle that did not move this tick
  is *waiting*.
* The head vehicle at the stop line crosses when its movement is green and the
  lane's discharge cooldown (``saturation_headway_s``) has elapsed. It is put
  on a uniformly chosen out-lane of its movement and drives it at free speed,
  leaving the network at the far end.
* Right-turn-always movements may also cross on red (and yellow) when no green
  discharge entered any of their out-lanes in the same tick.
* A decision either holds the active phase for ``min_green_s`` or runs
  ``yellow_s`` of all-red (right turns excepted), switches, then ``min_green_s``
  of green. The last interval of an episode is cut at the horizon.
* Arrivals that find their lane full wait in an unobserved spillback queue and
  keep their original arrival time as entry time.
"""

from __future__ import annotations

import csv
import io
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .flowgen import FlowTrace, check_flow
from .topology import Intersection

QUEUE_SPACING_M = 5.0


class SimError(RuntimeError):
    pass


@dataclass(frozen=True)
class SimConfig:
    tick_s: float = 1.0
    chunk_m: float = 100.0
    observed_m: float = 300.0
    free_speed_mps: float = 10.0
    saturation_headway_s: float = 2.0
    min_green_s: int = 10
    yellow_s: int = 5
    horizon_s: float = 600.0

    def __post_init__(self):
        if self.tick_s != 1.0:
            raise SimError("only a 1 s tick is supported")
        if abs(self.observed_m - 3 * self.chunk_m) > 1e-9:
            raise SimError("observed_m must equal three chunks")
        if self.min_green_s < self.tick_s or self.yellow_s < 0:
            raise SimError("min_green_s >= tick and yellow_s >= 0 required")
        if self.free_speed_mps <= 0 or self.saturation_headway_s <= 0:
            raise SimError("speeds and headways must be positive")


@dataclass
class SignalState:
    active_phase: int = 0
    phase_elapsed_s: float = 0.0
    in_yellow: bool = False
    pending_phase: int | None = None


@dataclass(frozen=True)
class LaneObservation:
    alpha: tuple[int, int, int]
    beta: int

    def as_vector(self) -> list[int]:
        return [*self.alpha, self.beta]


Observation = dict  # lane_id -> LaneObservation


@dataclass
class TravelLog:
    enter: list[float] = field(default_factory=list)
    exit: list[float | None] = field(default_factory=list)


@dataclass
class StepResult:
    reward: float
    observation: Observation
    done: bool
    clock_s: float


class SimState:
    """Mutable episode state. Build with :func:`reset`."""

    def __init__(self, ix: Intersection, flow: FlowTrace, cfg: SimConfig, seed: int):
        check_flow(flow, ix)
        self.ix = ix
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)
        self.clock = 0
        self.signal = SignalState()
        self.trace_rows: list[tuple] | None = None

        lane_index = ix.lane_index
        self._in_ids = [lane.id for lane in ix.entering]
        self._out_ids = [lane.id for lane in ix.leaving]
        in_pos = {lid: i for i, lid in enumerate(self._in_ids)}
        out_pos = {lid: i for i, lid in enumerate(self._out_ids)}
        self._in_len = [ix.lane(lid).length_m for lid in self._in_ids]
        self._out_len = [ix.lane(lid).length_m for lid in self._out_ids]
        # positions of the in/out lanes inside the full lane ordering
        self._in_slot = [lane_index[lid] for lid in self._in_ids]
        self._out_slot = [lane_index[lid] for lid in self._out_ids]

        self._mov_in = [in_pos[m.in_lane] for m in ix.movements]
        self._mov_out = [tuple(out_pos[o] for o in m.out_lanes) for m in ix.movements]
        self._phase_movs = [
            frozenset(ix.movement_index[mid] for mid in p.movement_ids) for p in ix.phases
        ]
        self._rtor = frozenset(ix.movement_index[mid] for mid in ix.right_turn_always)

        n_in, n_out = len(self._in_ids), len(self._out_ids)
        # per entering lane: parallel lists, index 0 nearest the stop line
        self._pos: list[list[float]] = [[] for _ in range(n_in)]
        self._veh: list[list[int]] = [[] for _ in range(n_in)]
        self._stopped: list[list[bool]] = [[] for _ in range(n_in)]
        self._spill: list[deque] = [deque() for _ in range(n_in)]
        self._last_discharge = [-1e9] * n_in
        # per leaving lane: FIFO of (cross time, vehicle id)
        self._out: list[deque] = [deque() for _ in range(n_out)]

        self._veh_mov: list[int] = []
        self.log = TravelLog()
        self._arrivals = [(r.time_s, ix.movement_index[r.movement_id]) for r in flow.records]
        self._next_arrival = 0
        self.n_arrived = 0
        self.n_exited = 0

    # -- public helpers -------------------------------------------------

    @property
    def done(self) -> bool:
        return self.clock >= self.cfg.horizon_s

    @property
    def in_network(self) -> int:
        return (
            sum(len(v) for v in self._veh)
            + sum(len(s) for s in self._spill)
            + sum(len(o) for o in self._out)
        )

    def enable_trace(self) -> None:
        self.trace_rows = []

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["tick", "phase", "in_yellow", "pressure", "arrivals", "exits"])
        w.writerows(self.trace_rows or [])
        return buf.getvalue()

    # -- dynamics -------------------------------------------------------

    def _tick(self) -> None:
        cfg = self.cfg
        c = self.clock
        sig = self.signal
        green = frozenset() if sig.in_yellow else self._phase_movs[sig.active_phase]
        arrived0, exited0 = self.n_arrived, self.n_exited

        # discharge: green movements first, then right turns on red
        used_out: set[int] = set()
        rtor_lanes = []
        for li, pos in enumerate(self._pos):
            if not pos or pos[0] > 0.0 or c - self._last_discharge[li] < cfg.saturation_headway_s:
                continue
            mov = self._veh_mov[self._veh[li][0]]
            if mov in green:
                used_out.add(self._cross(li, mov, c))
            elif mov in self._rtor:
                rtor_lanes.append((li, mov))
        for li, mov in rtor_lanes:
            if used_out.isdisjoint(self._mov_out[mov]):
                self._cross(li, mov, c)

        # car following toward the stop line
        step = cfg.free_speed_mps * cfg.tick_s
        for li, pos in enumerate(self._pos):
            stopped = self._stopped[li]
            limit = 0.0
            for j, p in enumerate(pos):
                q = p - step
                q = max(q, limit)
                stopped[j] = q >= p
                pos[j] = q
                limit = q + QUEUE_SPACING_M

        # arrivals during [c, c + 1)
        arrivals = self._arrivals
        k = self._next_arrival
        while k < len(arrivals) and arrivals[k][0] < c + cfg.tick_s:
            t, mov = arrivals[k]
            vid = len(self._veh_mov)
            self._veh_mov.append(mov)
            self.log.enter.append(t)
            self.log.exit.append(None)
            self._spill[self._mov_in[mov]].append(vid)
            self.n_arrived += 1
            k += 1
        self._next_arrival = k
        for li, spill in enumerate(self._spill):
            pos = self._pos[li]
            length = self._in_len[li]
            while spill and (not pos or pos[-1] <= length - QUEUE_SPACING_M):
                pos.append(length)
                self._veh[li].append(spill.popleft())
                self._stopped[li].append(False)

        # leave the network at the far end of the out-lane
        t_end = c + cfg.tick_s
        for oi, q in enumerate(self._out):
            travel = self._out_len[oi] / cfg.free_speed_mps
            while q and q[0][0] + travel <= t_end:
                cross, vid = q.popleft()
                self.log.exit[vid] = cross + travel
                self.n_exited += 1

        self.clock = c + 1
        if not sig.in_yellow:
            sig.phase_elapsed_s += cfg.tick_s
        if self.trace_rows is not None:
            self.trace_rows.append(
                (c, sig.active_phase, int(sig.in_yellow), pressure(self),
                 self.n_arrived - arrived0, self.n_exited - exited0)
            )

    def _cross(self, li: int, mov: int, c: int) -> int:
        vid = self._veh[li].pop(0)
        self._pos[li].pop(0)
        self._stopped[li].pop(0)
        self._last_discharge[li] = c
        outs = self._mov_out[mov]
        oi = outs[0] if len(outs) == 1 else outs[self.rng.integers(len(outs))]
        self._out[oi].append((float(c), vid))
        return oi

    def _run(self, ticks: int) -> None:
        for _ in range(ticks):
            if self.done:
                return
            self._tick()

    # -- observation ----------------------------------------------------

    def observe_array(self) -> np.ndarray:
        """``(n_lanes, 4)`` features ``[alpha_1, alpha_2, alpha_3, beta]`` in lane order."""
        cfg = self.cfg
        out = np.zeros((len(self.ix.lanes), 4))
        chunk, seen = cfg.chunk_m, cfg.observed_m
        for li, pos in enumerate(self._pos):
            row = out[self._in_slot[li]]
            for p, st in zip(pos, self._stopped[li]):
                if p < seen:
                    if st:
                        row[3] += 1
                    else:
                        row[int(p // chunk)] += 1
        speed = cfg.free_speed_mps
        for oi, q in enumerate(self._out):
            row = out[self._out_slot[oi]]
            for cross, _ in q:
                d = (self.clock - cross) * speed
                if d < seen:
                    row[int(d // chunk)] += 1
        return out

    def waiting_entering(self) -> np.ndarray:
        """Waiting count per entering lane, in ``ix.entering`` order."""
        seen = self.cfg.observed_m
        return np.array(
            [sum(1 for p, st in zip(pos, sts) if st and p < seen)
             for pos, sts in zip(self._pos, self._stopped)],
            dtype=float,
        )

    def occupancy_leaving(self) -> np.ndarray:
        seen, speed = self.cfg.observed_m, self.cfg.free_speed_mps
        return np.array(
            [sum(1 for cross, _ in q if (self.clock - cross) * speed < seen) for q in self._out],
            dtype=float,
        )

    def vehicles_within_observed(self) -> np.ndarray:
        """Vehicle count within ``observed_m`` of the junction, per lane in lane order."""
        counts = np.zeros(len(self.ix.lanes))
        seen = self.cfg.observed_m
        for li, pos in enumerate(self._pos):
            counts[self._in_slot[li]] = sum(1 for p in pos if p < seen)
        counts[self._out_slot] = self.occupancy_leaving()
        return counts


# -- public operations ------------------------------------------------------

def reset(ix: Intersection, flow: FlowTrace, cfg: SimConfig | None = None, seed: int = 0) -> SimState:
    return SimState(ix, flow, cfg or SimConfig(), seed)


def observe(state: SimState) -> Observation:
    arr = state.observe_array()
    return {
        lane.id: LaneObservation((int(r[0]), int(r[1]), int(r[2])), int(r[3]))
        for lane, r in zip(state.ix.lanes, arr)
    }


def pressure(state: SimState) -> float:
    return float(abs(state.waiting_entering().sum() - state.occupancy_leaving().sum()))


def phase_pressure(state: SimState, phase: int) -> float:
    """Sum over the phase's movements of (waiting on in-lane - occupancy of out-lanes)."""
    if not 0 <= phase < len(state.ix.phases):
        raise SimError(f"phase {phase} out of range")
    waiting = state.waiting_entering()
    occupancy = state.occupancy_leaving()
    total = 0.0
    for mov in sorted(state._phase_movs[phase]):
        total += waiting[state._mov_in[mov]] - sum(occupancy[o] for o in state._mov_out[mov])
    return float(total)


def advance(state: SimState, next_phase: int) -> None:
    """Run one decision interval without building an observation."""
    cfg, sig = state.cfg, state.signal
    if not 0 <= next_phase < len(state.ix.phases):
        raise SimError(f"phase {next_phase} out of range")
    if state.done:
        raise SimError("episode already finished")
    if next_phase != sig.active_phase:
        sig.in_yellow, sig.pending_phase = True, next_phase
        state._run(cfg.yellow_s)
        sig.active_phase, sig.pending_phase = next_phase, None
        sig.in_yellow, sig.phase_elapsed_s = False, 0.0
    state._run(cfg.min_green_s)


def apply_decision(state: SimState, next_phase: int) -> StepResult:
    advance(state, next_phase)
    return StepResult(-pressure(state), observe(state), state.done, float(state.clock))


def travel_log(state: SimState) -> TravelLog:
    return state.log


def average_travel_time(log: TravelLog, horizon_s: float) -> float:
    """Mean (exit - enter); vehicles still inside count ``horizon_s - enter``."""
    if not log.enter:
        raise SimError("empty travel log")
    total = 0.0
    for enter, leave in zip(log.enter, log.exit):
        total += (leave if leave is not None else horizon_s) - enter
    return total / len(log.enter)


def episode_att(state: SimState) -> float:
    return average_travel_time(state.log, min(state.clock, state.cfg.horizon_s))
