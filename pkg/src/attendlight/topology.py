"""Single-intersection topology: lanes, traffic movements, phases.

An intersection is static data. Everything here is immutable once built so a
single instance can be shared by many concurrent simulations.
"""

from __future__ import annotations

import json
from collections.abc import Iterable
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

ENTERING = "entering"
LEAVING = "leaving"
KINDS = ("straight", "left", "right")

#: lanes must hold at least one observation chunk
MIN_LANE_LENGTH_M = 100.0


class TopologyError(ValueError):
    """Raised for malformed or inconsistent topology documents."""


@dataclass(frozen=True)
class LaneRef:
    id: str
    direction: str
    length_m: float = 300.0


@dataclass(frozen=True)
class TrafficMovement:
    id: str
    in_lane: str
    out_lanes: tuple[str, ...]
    kind: str = "straight"


@dataclass(frozen=True)
class Phase:
    id: int
    movement_ids: tuple[str, ...]


@dataclass(frozen=True, eq=False)
class Intersection:
    name: str
    lanes: tuple[LaneRef, ...]
    movements: tuple[TrafficMovement, ...]
    phases: tuple[Phase, ...]
    right_turn_always: frozenset[str] = field(default_factory=frozenset)

    # -- lookups (cached; the dataclass is frozen so they never go stale) --

    @cached_property
    def lane_index(self) -> dict[str, int]:
        return {lane.id: i for i, lane in enumerate(self.lanes)}

    @cached_property
    def movement_index(self) -> dict[str, int]:
        return {m.id: i for i, m in enumerate(self.movements)}

    @property
    def lane_ids(self) -> list[str]:
        return [lane.id for lane in self.lanes]

    @property
    def entering(self) -> list[LaneRef]:
        return [lane for lane in self.lanes if lane.direction == ENTERING]

    @property
    def leaving(self) -> list[LaneRef]:
        return [lane for lane in self.lanes if lane.direction == LEAVING]

    @property
    def n_phases(self) -> int:
        return len(self.phases)

    def lane(self, lane_id: str) -> LaneRef:
        return self.lanes[self.lane_index[lane_id]]

    def movement(self, movement_id: str) -> TrafficMovement:
        return self.movements[self.movement_index[movement_id]]

    def movements_of_kind(self, kind: str) -> list[TrafficMovement]:
        return [m for m in self.movements if m.kind == kind]

    @cached_property
    def phase_mask(self) -> np.ndarray:
        """Boolean ``(n_phases, n_lanes)`` membership of participating lanes."""
        mask = np.zeros((len(self.phases), len(self.lanes)), dtype=bool)
        for p in range(len(self.phases)):
            for lane_id in participating_lanes(self, p):
                mask[p, self.lane_index[lane_id]] = True
        return mask

    @property
    def n_roads(self) -> int:
        """Number of approaching roads, taken from the ``<road>_...`` lane id prefix."""
        return len({lane.id.split("_", 1)[0] for lane in self.lanes})

    def __repr__(self) -> str:
        return (
            f"Intersection({self.name!r}, lanes={len(self.lanes)}, "
            f"movements={len(self.movements)}, phases={len(self.phases)})"
        )


def participating_lanes(ix: Intersection, phase_index: int) -> list[str]:
    """Lanes touched by any movement of the phase, in lane declaration order."""
    if not 0 <= phase_index < len(ix.phases):
        raise IndexError(f"phase index {phase_index} out of range for {len(ix.phases)} phases")
    touched: set[str] = set()
    for mid in ix.phases[phase_index].movement_ids:
        m = ix.movement(mid)
        touched.add(m.in_lane)
        touched.update(m.out_lanes)
    return [lane.id for lane in ix.lanes if lane.id in touched]


def validate_topology(ix: Intersection) -> list[str]:
    """Return human-readable diagnostics; an empty list means the intersection is valid."""
    diags: list[str] = []
    lanes: dict[str, LaneRef] = {}
    for lane in ix.lanes:
        if lane.id in lanes:
            diags.append(f"duplicate lane id: {lane.id}")
        lanes[lane.id] = lane
        if lane.direction not in (ENTERING, LEAVING):
            diags.append(f"lane direction must be entering or leaving: {lane.id}")
        if not lane.length_m >= MIN_LANE_LENGTH_M:
            diags.append(f"lane shorter than one chunk: {lane.id}")
    if not any(lane.direction == ENTERING for lane in ix.lanes):
        diags.append("no entering lanes")
    if not any(lane.direction == LEAVING for lane in ix.lanes):
        diags.append("no leaving lanes")

    movements: dict[str, TrafficMovement] = {}
    for m in ix.movements:
        if m.id in movements:
            diags.append(f"duplicate movement id: {m.id}")
        movements[m.id] = m
        if m.kind not in KINDS:
            diags.append(f"unknown movement kind {m.kind!r}: {m.id}")
        src = lanes.get(m.in_lane)
        if src is None:
            diags.append(f"unknown lane {m.in_lane!r} in movement {m.id}")
        elif src.direction != ENTERING:
            diags.append(f"movement source not an entering lane: {m.id}")
        if not m.out_lanes:
            diags.append(f"movement without leaving lanes: {m.id}")
        for out in m.out_lanes:
            dst = lanes.get(out)
            if dst is None:
                diags.append(f"unknown lane {out!r} in movement {m.id}")
            elif dst.direction != LEAVING:
                diags.append(f"movement target not a leaving lane: {m.id}")

    if len(ix.phases) < 2:
        diags.append("fewer than two phases")
    for p in ix.phases:
        if not p.movement_ids:
            diags.append(f"phase with zero movements: {p.id}")
        if len(set(p.movement_ids)) != len(p.movement_ids):
            diags.append(f"duplicate movement in phase: {p.id}")
        for mid in p.movement_ids:
            if mid not in movements:
                diags.append(f"unknown movement {mid!r} in phase {p.id}")
    for mid in sorted(ix.right_turn_always):
        if mid not in movements:
            diags.append(f"unknown movement {mid!r} in right_turn_always")
    return diags


def make_intersection(
    name: str,
    lanes: Iterable[LaneRef],
    movements: Iterable[TrafficMovement],
    phases: Iterable[Iterable[str]],
    right_turn_always: Iterable[str] = (),
) -> Intersection:
    """Build and validate; raises :class:`TopologyError` listing every diagnostic."""
    ix = Intersection(
        name=name,
        lanes=tuple(lanes),
        movements=tuple(movements),
        phases=tuple(Phase(i, tuple(mids)) for i, mids in enumerate(phases)),
        right_turn_always=frozenset(right_turn_always),
    )
    diags = validate_topology(ix)
    if diags:
        raise TopologyError("; ".join(diags))
    return ix


# -- file format -------------------------------------------------------------

_TOP_KEYS = {"name", "lanes", "movements", "phases", "right_turn_always"}
_LANE_KEYS = {"id", "direction", "length_m"}
_MOVEMENT_KEYS = {"id", "in", "out", "kind"}


def _check_keys(obj, allowed: set[str], required: set[str], where: str) -> None:
    if not isinstance(obj, dict):
        raise TopologyError(f"{where}: expected an object")
    unknown = set(obj) - allowed
    if unknown:
        raise TopologyError(f"{where}: unknown keys {sorted(unknown)}")
    missing = required - set(obj)
    if missing:
        raise TopologyError(f"{where}: missing keys {sorted(missing)}")


def parse_topology(text: str) -> Intersection:
    """Parse a JSON topology document into a validated :class:`Intersection`."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise TopologyError(
            f"syntax error at line {exc.lineno} column {exc.colno}: {exc.msg}"
        ) from None
    _check_keys(doc, _TOP_KEYS, {"name", "lanes", "movements", "phases"}, "topology")

    lanes = []
    for i, raw in enumerate(doc["lanes"]):
        _check_keys(raw, _LANE_KEYS, {"id", "direction"}, f"lanes[{i}]")
        lanes.append(LaneRef(str(raw["id"]), raw["direction"], float(raw.get("length_m", 300.0))))
    movements = []
    for i, raw in enumerate(doc["movements"]):
        _check_keys(raw, _MOVEMENT_KEYS, {"id", "in", "out"}, f"movements[{i}]")
        out = raw["out"]
        if isinstance(out, str):
            out = [out]
        movements.append(
            TrafficMovement(str(raw["id"]), str(raw["in"]), tuple(map(str, out)), raw.get("kind", "straight"))
        )
    phases = doc["phases"]
    if not isinstance(phases, list) or not all(isinstance(p, list) for p in phases):
        raise TopologyError("phases: expected an array of arrays of movement ids")
    return make_intersection(
        str(doc["name"]),
        lanes,
        movements,
        [[str(m) for m in p] for p in phases],
        [str(m) for m in doc.get("right_turn_always", [])],
    )


def serialize_topology(ix: Intersection) -> str:
    doc = {
        "name": ix.name,
        "lanes": [{"id": l.id, "direction": l.direction, "length_m": l.length_m} for l in ix.lanes],
        "movements": [
            {"id": m.id, "in": m.in_lane, "out": list(m.out_lanes), "kind": m.kind} for m in ix.movements
        ],
        "phases": [list(p.movement_ids) for p in ix.phases],
        "right_turn_always": sorted(ix.right_turn_always),
    }
    return json.dumps(doc, indent=2)


def load_topology(path) -> Intersection:
    with open(path, encoding="utf-8") as fh:
        return parse_topology(fh.read())


# -- built-in catalog --------------------------------------------------------

# Roads are named by compass side. Heading into the junction from road X,
# a left / straight / right turn leaves by the road listed here.
_TURNS = {
    "n": {"left": "e", "straight": "s", "right": "w"},
    "e": {"left": "s", "straight": "w", "right": "n"},
    "s": {"left": "w", "straight": "n", "right": "e"},
    "w": {"left": "n", "straight": "e", "right": "s"},
}


def _fig1_three_way(name: str, phases: list[list[str]]) -> Intersection:
    # West (l1/l2 in), east (l3/l4 in) and north (l5/l6 in) roads.
    lanes = [LaneRef(f"{road}_l{k}in", ENTERING) for k, road in zip(range(1, 7), "wweenn")]
    lanes += [LaneRef(f"{road}_l{k}out", LEAVING) for k, road in zip(range(1, 7), "wweenn")]
    out = {road: (f"{road}_l{a}out", f"{road}_l{a + 1}out") for road, a in (("w", 1), ("e", 3), ("n", 5))}
    movements = [
        TrafficMovement("v1", "w_l1in", out["n"], "left"),
        TrafficMovement("v2", "w_l2in", out["e"], "straight"),
        TrafficMovement("v3", "e_l3in", out["w"], "straight"),
        TrafficMovement("v4", "e_l4in", out["n"], "right"),
        TrafficMovement("v5", "n_l5in", out["e"], "left"),
        TrafficMovement("v6", "n_l6in", out["w"], "right"),
    ]
    return make_intersection(name, lanes, movements, phases, ["v4", "v6"])


def _int3() -> Intersection:
    # One-way north road (leaving only, one lane); two lanes on east and west.
    lanes = [
        LaneRef("w_in0", ENTERING), LaneRef("w_in1", ENTERING),
        LaneRef("e_in0", ENTERING), LaneRef("e_in1", ENTERING),
        LaneRef("w_out0", LEAVING), LaneRef("w_out1", LEAVING),
        LaneRef("e_out0", LEAVING), LaneRef("e_out1", LEAVING),
        LaneRef("n_out0", LEAVING),
    ]
    movements = [
        TrafficMovement("w_left", "w_in0", ("n_out0",), "left"),
        TrafficMovement("w_straight", "w_in1", ("e_out0", "e_out1"), "straight"),
        TrafficMovement("e_straight0", "e_in0", ("w_out0", "w_out1"), "straight"),
        TrafficMovement("e_straight1", "e_in1", ("w_out0", "w_out1"), "straight"),
        TrafficMovement("e_right", "e_in1", ("n_out0",), "right"),
    ]
    phases = [["w_left", "w_straight"], ["e_straight0", "e_straight1", "w_straight"]]
    return make_intersection("int3", lanes, movements, phases, ["e_right"])


def _four_way(name: str, lanes_per_road: int, n_phases: int) -> Intersection:
    """4-way junction; 2 lanes: (left, straight+right), 3 lanes: (left, straight, right)."""
    roads = "nesw"
    lanes = [LaneRef(f"{r}_in{k}", ENTERING) for r in roads for k in range(lanes_per_road)]
    lanes += [LaneRef(f"{r}_out{k}", LEAVING) for r in roads for k in range(lanes_per_road)]
    lane_for = {"left": 0, "straight": 1, "right": 1 if lanes_per_road == 2 else 2}
    movements = []
    for r in roads:
        for kind in KINDS:
            dst = _TURNS[r][kind]
            outs = tuple(f"{dst}_out{k}" for k in range(lanes_per_road))
            movements.append(TrafficMovement(f"{r}_{kind}", f"{r}_in{lane_for[kind]}", outs, kind))
    phases = [
        ["n_left", "s_left"],
        ["e_left", "w_left"],
        ["n_straight", "s_straight"],
        ["e_straight", "w_straight"],
    ]
    if n_phases == 8:
        phases += [[f"{r}_left", f"{r}_straight"] for r in roads]
    elif n_phases == 3:
        phases = [["n_straight", "s_straight"], ["e_straight", "w_straight"],
                  ["n_left", "s_left", "e_left", "w_left"]]
    return make_intersection(name, lanes, movements, phases, [f"{r}_right" for r in roads])


def builtin_catalog() -> dict[str, Intersection]:
    """Presets spanning 3/4-way roads, 1-3 lanes per road and 2-8 phases."""
    return {
        "int1": _fig1_three_way("int1", [["v5", "v6"], ["v2", "v3", "v4"], ["v1", "v2"]]),
        # same geometry as int1, different phase plan
        "int2": _fig1_three_way("int2", [["v2", "v3"], ["v1", "v5"], ["v4", "v5", "v6"]]),
        "int3": _int3(),
        "int7-4p": _four_way("int7-4p", 2, 4),
        "int7-8p": _four_way("int7-8p", 2, 8),
        "int8": _four_way("int8", 2, 3),
        "int9-4p": _four_way("int9-4p", 3, 4),
        "int9-8p": _four_way("int9-8p", 3, 8),
    }


def catalog_lookup(name: str) -> Intersection | None:
    return builtin_catalog().get(name)
