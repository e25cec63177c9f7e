"""Synthetic Poisson demand, flow-trace files, and retargeting traces between topologies."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .topology import KINDS, Intersection


class FlowError(ValueError):
    pass


@dataclass(frozen=True)
class ArrivalRecord:
    time_s: float
    movement_id: str


@dataclass(frozen=True)
class FlowTrace:
    horizon_s: float
    records: tuple[ArrivalRecord, ...] = ()

    def __len__(self) -> int:
        return len(self.records)

    def times(self) -> np.ndarray:
        return np.array([r.time_s for r in self.records], dtype=float)


@dataclass(frozen=True)
class SyntheticParams:
    """``lambda_s`` is the mean inter-arrival time in seconds, not a rate."""

    lambda_s: float = 4.0
    extra_prob: float = 0.3
    kind_probs: tuple[float, float, float] = (0.70, 0.20, 0.10)
    n_processes: int = 2

    def __post_init__(self):
        if not self.lambda_s > 0:
            raise FlowError("lambda_s must be positive")
        if not 0.0 <= self.extra_prob <= 1.0:
            raise FlowError("extra_prob must lie in [0, 1]")
        if abs(sum(self.kind_probs) - 1.0) > 1e-9 or min(self.kind_probs) < 0:
            raise FlowError("kind_probs must be a probability vector")
        if self.n_processes < 1:
            raise FlowError("n_processes must be positive")


#: named demand levels, (mean inter-arrival, extra-vehicle probability)
SYNTHETIC_PRESETS = {
    "S1": SyntheticParams(4.0, 0.3),
    "S2": SyntheticParams(4.0, 0.1),
    "S3": SyntheticParams(3.0, 0.1),
    "S4": SyntheticParams(3.0, 0.05),
    "S5": SyntheticParams(3.0, 0.3),
    "S6": SyntheticParams(4.0, 0.05),
}


def _kind_sampler(ix: Intersection, kind_probs):
    groups = [[m.id for m in ix.movements_of_kind(k)] for k in KINDS]
    probs = np.array([p if groups[i] else 0.0 for i, p in enumerate(kind_probs)])
    if probs.sum() <= 0:
        raise FlowError(f"intersection {ix.name!r} has no movements of any requested kind")
    return groups, probs / probs.sum()


def generate_synthetic(ix: Intersection, params: SyntheticParams, horizon_s: float, seed: int) -> FlowTrace:
    """Superpose ``n_processes`` Poisson streams of vehicles over ``[0, horizon_s]``.

    Each arrival picks a movement kind with ``kind_probs`` (renormalised over the
    kinds the intersection actually has) and then a movement of that kind
    uniformly. With probability ``extra_prob`` a second vehicle arrives at the
    same instant with an independently drawn movement. Times are rounded to
    milliseconds so traces survive a file round trip unchanged.
    """
    if not horizon_s > 0:
        raise FlowError("horizon must be positive")
    groups, probs = _kind_sampler(ix, params.kind_probs)
    rng = np.random.default_rng(seed)

    def draw() -> str:
        group = groups[rng.choice(len(KINDS), p=probs)]
        return group[rng.integers(len(group))]

    records = []
    for _ in range(params.n_processes):
        t = 0.0
        while True:
            t += rng.exponential(params.lambda_s)
            stamp = round(t, 3)
            if stamp > horizon_s:
                break
            records.append(ArrivalRecord(stamp, draw()))
            if rng.random() < params.extra_prob:
                records.append(ArrivalRecord(stamp, draw()))
    records.sort(key=lambda r: r.time_s)  # stable: process order breaks ties
    return FlowTrace(float(horizon_s), tuple(records))


def adapt_flow(trace: FlowTrace, src: Intersection, dst: Intersection, seed: int) -> FlowTrace:
    """Retarget a trace recorded on ``src`` to ``dst``.

    Movements that exist in ``dst`` (same id) are kept; any other record is
    moved to a uniformly chosen ``dst`` movement of the same kind. Times and
    record count are preserved.
    """
    rng = np.random.default_rng(seed)
    by_kind = {k: [m.id for m in dst.movements_of_kind(k)] for k in KINDS}
    out = []
    for rec in trace.records:
        if rec.movement_id in dst.movement_index:
            out.append(rec)
            continue
        if rec.movement_id not in src.movement_index:
            raise FlowError(f"record movement {rec.movement_id!r} unknown to source topology")
        kind = src.movement(rec.movement_id).kind
        choices = by_kind[kind]
        if not choices:
            raise FlowError(f"no {kind} movement in {dst.name!r} to receive {rec.movement_id!r}")
        out.append(ArrivalRecord(rec.time_s, choices[rng.integers(len(choices))]))
    return FlowTrace(trace.horizon_s, tuple(out))


def check_flow(trace: FlowTrace, ix: Intersection) -> None:
    unknown = sorted({r.movement_id for r in trace.records} - set(ix.movement_index))
    if unknown:
        raise FlowError(f"flow references unknown movement(s) {unknown} for {ix.name!r}")


# -- file format -------------------------------------------------------------

def _fmt_time(t: float) -> str:
    return f"{t:.3f}".rstrip("0").rstrip(".") or "0"


def write_flow(trace: FlowTrace) -> str:
    lines = [f"horizon_s={_fmt_time(trace.horizon_s)}"]
    lines += [f"{_fmt_time(r.time_s)},{r.movement_id}" for r in trace.records]
    return "\n".join(lines) + "\n"


def read_flow(text: str) -> FlowTrace:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("horizon_s="):
        raise FlowError("line 1: expected header 'horizon_s=<number>'")
    try:
        horizon = float(lines[0].split("=", 1)[1])
    except ValueError:
        raise FlowError("line 1: horizon is not a number") from None
    records = []
    last = 0.0
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 2 or not parts[1].strip():
            raise FlowError(f"line {lineno}: expected 'time_s,movement_id'")
        try:
            t = float(parts[0])
        except ValueError:
            raise FlowError(f"line {lineno}: bad time {parts[0]!r}") from None
        if t < 0:
            raise FlowError(f"line {lineno}: negative arrival time")
        if t > horizon:
            raise FlowError(f"line {lineno}: arrival after horizon")
        if t < last:
            raise FlowError(f"line {lineno}: records not sorted by time")
        last = t
        records.append(ArrivalRecord(t, parts[1].strip()))
    return FlowTrace(horizon, tuple(records))


def load_flow(path) -> FlowTrace:
    with open(path, encoding="ascii") as fh:
        return read_flow(fh.read())


def save_flow(trace: FlowTrace, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(write_flow(trace))
