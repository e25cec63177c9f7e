"""Command-line harness: flow generation, training, evaluation, baselines and comparison tables."""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import platform
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__, baselines, trainer
from .flowgen import (
    SYNTHETIC_PRESETS,
    FlowError,
    FlowTrace,
    SyntheticParams,
    check_flow,
    generate_synthetic,
    load_flow,
    save_flow,
)
from .policy import ATTENDLIGHT_NAME, AttendLight
from .simcore import SimConfig
from .tensorkit import CheckpointError
from .topology import Intersection, TopologyError, catalog_lookup, load_topology

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING_FILE = 3
EXIT_SCHEMA = 4
EXIT_UNKNOWN_CASE = 5

RESULT_COLUMNS = ("case", "algorithm", "seed", "att")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def rho(u: float, b: float) -> float:
    """Normalised ATT difference; negative when ``u`` (the model) is faster than ``b``."""
    if not (u > 0 and b > 0):
        raise ValueError("ATT values must be positive")
    return (u - b) / max(u, b)


def att_ratio(multi: float, single: float) -> float:
    if not (multi > 0 and single > 0):
        raise ValueError("ATT values must be positive")
    return multi / single


def summarize(values) -> dict:
    """Mean, sample std and a normal-approximation 95% interval half-width."""
    v = np.asarray(list(values), dtype=float)
    if v.size == 0:
        raise ValueError("nothing to summarise")
    sd = float(v.std(ddof=1)) if v.size > 1 else 0.0
    return {"mean": float(v.mean()), "std": sd, "ci95": 1.96 * sd / math.sqrt(v.size), "k": int(v.size)}


# -- case resolution ---------------------------------------------------------------

@dataclass(frozen=True)
class ResultRow:
    case: str
    algorithm: str
    seed: int
    att: float

    def __post_init__(self):
        if not self.att > 0:
            raise ValueError(f"ATT must be positive, got {self.att}")


@dataclass(frozen=True)
class FlowSource:
    label: str
    path: str | None = None
    params: SyntheticParams | None = None

    def build(self, ix: Intersection, seed: int, horizon_s: float) -> FlowTrace:
        if self.path is not None:
            trace = _guard(lambda: load_flow(self.path), self.path)
            try:
                check_flow(trace, ix)
            except FlowError as exc:
                raise CliError(EXIT_SCHEMA, str(exc)) from None
            return trace
        return generate_synthetic(ix, self.params, horizon_s, seed)

    @property
    def synthetic(self) -> bool:
        return self.path is None


def _guard(fn, path):
    try:
        return fn()
    except FileNotFoundError:
        raise CliError(EXIT_MISSING_FILE, f"no such file: {path}") from None
    except (FlowError, TopologyError, CheckpointError, ValueError, KeyError) as exc:
        raise CliError(EXIT_SCHEMA, f"{path}: {exc}") from None


def resolve_topology(spec: str, phases: int | None = None) -> tuple[str, Intersection]:
    """A catalog preset name (``int1``, ``int7`` + ``--phases 8``) or a topology JSON path."""
    ix = catalog_lookup(spec)
    if ix is None and phases is not None:
        ix = catalog_lookup(f"{spec}-{phases}p")
    if ix is not None:
        label = spec.split("-")[0]
    elif Path(spec).suffix or os.sep in spec:
        ix = _guard(lambda: load_topology(spec), spec)
        label = Path(spec).stem
    else:
        raise CliError(EXIT_UNKNOWN_CASE, f"unknown topology preset {spec!r}")
    if phases is not None and ix.n_phases != phases:
        raise CliError(EXIT_SCHEMA, f"{spec!r} has {ix.n_phases} phases, not {phases}")
    return label, ix


def parse_synthetic(text: str) -> SyntheticParams:
    fields = {}
    for part in text.split(","):
        key, sep, val = part.partition("=")
        if not sep:
            raise CliError(EXIT_USAGE, f"bad --synthetic item {part!r}; expected key=value")
        fields[key.strip()] = val.strip()
    unknown = set(fields) - {"lambda", "extra"}
    if unknown:
        raise CliError(EXIT_USAGE, f"unknown --synthetic key(s) {sorted(unknown)}")
    try:
        return SyntheticParams(float(fields.get("lambda", 4.0)), float(fields.get("extra", 0.3)))
    except (ValueError, FlowError) as exc:
        raise CliError(EXIT_USAGE, f"bad --synthetic value: {exc}") from None


def resolve_flow(flow: str | None, synthetic: str | None) -> FlowSource:
    if synthetic is not None:
        params = parse_synthetic(synthetic)
        return FlowSource(f"L{params.lambda_s:g}E{params.extra_prob:g}", params=params)
    if flow is None:
        return FlowSource("S1", params=SYNTHETIC_PRESETS["S1"])
    if flow in SYNTHETIC_PRESETS:
        return FlowSource(flow, params=SYNTHETIC_PRESETS[flow])
    if not Path(flow).exists():
        raise CliError(EXIT_MISSING_FILE, f"no such flow file: {flow}")
    return FlowSource(Path(flow).stem, path=flow)


def case_id(topology_label: str, flow_label: str, ix: Intersection) -> str:
    return f"{topology_label}-{flow_label}-{ix.n_phases}"


def parse_seeds(text: str | None, default=(0,)) -> list[int]:
    if text is None:
        return list(default)
    try:
        if ":" in text:
            lo, hi = text.split(":")
            return list(range(int(lo), int(hi)))
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise CliError(EXIT_USAGE, f"bad --seeds {text!r}; use '0,1,2' or '0:5'") from None


# -- results files -----------------------------------------------------------------

def write_rows(rows: list[ResultRow], path) -> None:
    """Append rows, writing the header when the file is new."""
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(RESULT_COLUMNS)
        for r in rows:
            w.writerow([r.case, r.algorithm, r.seed, f"{r.att:.6f}"])


def read_rows(path) -> list[ResultRow]:
    def load():
        with open(path, newline="") as fh:
            return list(csv.reader(fh))
    table = _guard(load, path)
    if not table or tuple(table[0]) != RESULT_COLUMNS:
        raise CliError(EXIT_SCHEMA, f"{path}: expected header {','.join(RESULT_COLUMNS)}")
    rows = []
    for lineno, rec in enumerate(table[1:], start=2):
        if not rec:
            continue
        try:
            rows.append(ResultRow(rec[0], rec[1], int(rec[2]), float(rec[3])))
        except (IndexError, ValueError) as exc:
            raise CliError(EXIT_SCHEMA, f"{path}:{lineno}: {exc}") from None
    return rows


def mean_by_case(rows: list[ResultRow]) -> dict[tuple[str, str], float]:
    acc: dict[tuple[str, str], list[float]] = {}
    for r in rows:
        acc.setdefault((r.case, r.algorithm), []).append(r.att)
    return {k: float(np.mean(v)) for k, v in sorted(acc.items())}


def compare_tables(rows: list[ResultRow], model: str, baselines_: list[str],
                   single: str | None = None, cases: list[str] | None = None) -> str:
    """CSV text with one ρ row per (case, baseline), optional ATT ratios, then summaries."""
    means = mean_by_case(rows)
    known = sorted({c for c, _ in means})
    model_cases = sorted(c for c, a in means if a == model)
    if cases:
        missing = [c for c in cases if c not in known]
        if missing:
            raise CliError(EXIT_UNKNOWN_CASE, f"unknown case id(s) {missing}")
        model_cases = [c for c in model_cases if c in cases]
    if not model_cases:
        raise CliError(EXIT_UNKNOWN_CASE, f"no rows for algorithm {model!r}")
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["metric", "case", "model", "reference", "value"])
    per_metric: dict[tuple[str, str], list[float]] = {}
    refs = [("rho", b) for b in baselines_] + ([("att_ratio", single)] if single else [])
    for case in model_cases:
        u = means[(case, model)]
        for metric, ref in refs:
            if (case, ref) not in means:
                raise CliError(EXIT_UNKNOWN_CASE, f"case {case!r} has no rows for {ref!r}")
            b = means[(case, ref)]
            val = rho(u, b) if metric == "rho" else att_ratio(u, b)
            per_metric.setdefault((metric, ref), []).append(val)
            w.writerow([metric, case, model, ref, f"{val:.6f}"])
    w.writerow([])
    w.writerow(["metric", "reference", "mean", "std", "ci95", "k"])
    for (metric, ref), vals in per_metric.items():
        s = summarize(vals)
        w.writerow([metric, ref, f"{s['mean']:.6f}", f"{s['std']:.6f}", f"{s['ci95']:.6f}", s["k"]])
    return out.getvalue()


def write_manifest(path, command: str, args: argparse.Namespace, seeds, extra: dict | None = None) -> dict:
    config = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    blob = json.dumps({"command": command, "config": config}, sort_keys=True, default=str)
    manifest = {
        "command": command,
        "config": config,
        "config_hash": hashlib.sha256(blob.encode()).hexdigest(),
        "seeds": list(seeds),
        "versions": {"attendlight": __version__, "numpy": np.__version__,
                     "python": platform.python_version()},
        **(extra or {}),
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return manifest


# -- subcommands -------------------------------------------------------------------

def _sim_cfg(args) -> SimConfig:
    return SimConfig(horizon_s=args.horizon)


def cmd_gen_flow(args) -> int:
    _, ix = resolve_topology(args.topology, args.phases)
    src = resolve_flow(args.flow[0] if args.flow else None, args.synthetic)
    if not src.synthetic:
        raise CliError(EXIT_USAGE, "gen-flow needs a preset name or --synthetic")
    trace = src.build(ix, args.seed, args.horizon)
    out = args.out or "flow.csv"
    save_flow(trace, out)
    write_manifest(f"{out}.manifest.json", "gen-flow", args, [args.seed], {"records": len(trace)})
    print(f"wrote {len(trace)} arrivals to {out}")
    return EXIT_OK


def _envs(args) -> list[trainer.EnvInstance]:
    tops = args.topology or ["int1"]
    flows = args.flow or [None]
    if args.synthetic is not None:
        flows = [None]
    envs = []
    for t in tops:
        label, ix = resolve_topology(t, args.phases)
        for f in flows:
            src = resolve_flow(f, args.synthetic)
            trace = src.build(ix, args.flow_seed, args.horizon)
            envs.append(trainer.EnvInstance(ix, trace, _sim_cfg(args), case_id(label, src.label, ix)))
    return envs


def cmd_train(args) -> int:
    envs = _envs(args)
    try:
        cfg = trainer.RegimeConfig(args.regime, args.n, args.episodes, args.lr, args.d, args.seed,
                                   args.variant.replace("-", "_"), args.strict_deterministic,
                                   reward_scale=args.reward_scale, entropy_coef=args.entropy_coef,
                                   max_grad_norm=args.max_grad_norm, select_every=args.select_every)
    except trainer.TrainError as exc:
        raise CliError(EXIT_USAGE, str(exc)) from None
    if cfg.regime == trainer.SINGLE and len(envs) != 1:
        raise CliError(EXIT_USAGE, "single regime takes one --topology and one flow")
    if args.checkpoint and Path(args.checkpoint).exists() and args.resume:
        model = _load_model(args.checkpoint)
    else:
        model = AttendLight(cfg.d, cfg.variant, seed=cfg.seed)
    report = trainer.train_model(model, cfg, envs, log_every=args.log_every)
    report.checkpoint_id = trainer.checkpoint_id(model)
    out = Path(args.out or "run")
    out.mkdir(parents=True, exist_ok=True)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "model.atlk"
    model.save(ckpt)
    (out / "curve.csv").write_text(report.to_csv())
    write_manifest(out / "manifest.json", "train", args, [cfg.seed],
                   {"cases": [e.name for e in envs], "checkpoint_id": report.checkpoint_id,
                    "checkpoint": str(ckpt), "selected_iteration": report.selected})
    print(f"checkpoint {report.checkpoint_id} -> {ckpt}")
    return EXIT_OK


def _load_model(path) -> AttendLight:
    if not Path(path).exists():
        raise CliError(EXIT_MISSING_FILE, f"no such checkpoint: {path}")
    return _guard(lambda: AttendLight.load(path), path)


def _eval_cases(args):
    """Yield ``(case, seed, ix, flow)``; synthetic seeds regenerate the flow, file flows keep it."""
    label, ix = resolve_topology(args.topology or "int1", args.phases)
    src = resolve_flow(args.flow[0] if args.flow else None, args.synthetic)
    case = case_id(label, src.label, ix)
    for seed in parse_seeds(args.seeds):
        yield case, seed, ix, src.build(ix, seed, args.horizon)


def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise CliError(EXIT_USAGE, "eval needs --checkpoint")
    model = _load_model(args.checkpoint)
    name = args.name or ATTENDLIGHT_NAME
    rows = []
    for case, seed, ix, flow in _eval_cases(args):
        env = trainer.EnvInstance(ix, flow, _sim_cfg(args))
        att, state = trainer.run_episode(trainer.PolicyController(model, "greedy", seed), env, seed,
                                         trace=args.trace is not None)
        if args.trace is not None:
            Path(f"{args.trace}.{case}.{seed}.csv").write_text(state.trace_csv())
        rows.append(ResultRow(case, name, seed, att))
    _finish_rows(args, "eval", rows)
    return EXIT_OK


def cmd_baseline(args) -> int:
    rows = []
    for case, seed, ix, flow in _eval_cases(args):
        if args.algorithm == "sotl":
            params = _sotl_params(args)
            if params is None:
                result = baselines.sotl_grid_search(ix, flow, _sim_cfg(args), seed)
                att = result.best_att
            else:
                att = baselines.run_controller(baselines.SotlController(ix, params), ix, flow,
                                               _sim_cfg(args), seed)
        else:
            att = baselines.run_controller(baselines.make_controller(args.algorithm, ix), ix, flow,
                                           _sim_cfg(args), seed)
        rows.append(ResultRow(case, args.name or args.algorithm, seed, att))
    _finish_rows(args, "baseline", rows)
    return EXIT_OK


def _sotl_params(args):
    if args.sotl is None:
        return None
    try:
        d, r, g = (float(x) for x in args.sotl.split(","))
        return baselines.SotlParams(d, r, g)
    except ValueError as exc:
        raise CliError(EXIT_USAGE, f"bad --sotl {args.sotl!r}: {exc}") from None


def _finish_rows(args, command, rows) -> None:
    out = args.out or "results.csv"
    write_rows(rows, out)
    write_manifest(f"{out}.manifest.json", command, args, [r.seed for r in rows])
    for r in rows:
        print(f"{r.case},{r.algorithm},{r.seed},{r.att:.3f}")


def cmd_grid_sotl(args) -> int:
    rows = []
    out = Path(args.out or "sotl_grid.csv")
    for case, seed, ix, flow in _eval_cases(args):
        result = baselines.sotl_grid_search(ix, flow, _sim_cfg(args), seed)
        out.with_suffix(f".{case}.{seed}.csv").write_text(result.to_csv())
        p = result.best
        print(f"{case} seed {seed}: best delta={p.delta_s:g} max_red={p.max_red_count:g} "
              f"min_green={p.min_green_count:g} att={result.best_att:.3f}")
        rows.append(ResultRow(case, "sotl", seed, result.best_att))
    write_rows(rows, out)
    write_manifest(f"{out}.manifest.json", "grid-sotl", args, [r.seed for r in rows])
    return EXIT_OK


def cmd_compare(args) -> int:
    rows = [r for path in args.results for r in read_rows(path)]
    text = compare_tables(rows, args.model, args.baseline or [], args.single,
                          args.case or None)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


# -- parser ------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, multi: bool = False) -> None:
    if multi:
        p.add_argument("--topology", action="append", help="preset name or topology JSON; repeatable")
        p.add_argument("--flow", action="append", help="flow file or preset S1..S6; repeatable")
    else:
        p.add_argument("--topology", help="preset name or topology JSON")
        p.add_argument("--flow", action="append", help="flow file or preset S1..S6")
    p.add_argument("--synthetic", help="lambda=<s>,extra=<p>")
    p.add_argument("--phases", type=int, help="phase count, picks e.g. int7-4p from int7")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--horizon", type=float, default=600.0)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="attendlight", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-flow", help="write a synthetic flow file")
    _common(p)
    p.set_defaults(func=cmd_gen_flow)

    p = sub.add_parser("train", help="train a policy and write checkpoint, curve and manifest")
    _common(p, multi=True)
    p.add_argument("--regime", choices=["single", "multi", "stochastic"], default="single")
    p.add_argument("--n", type=int)
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--lr", type=float)
    p.add_argument("--d", type=int)
    p.add_argument("--variant", choices=["attention", "mean-state"], default="attention")
    p.add_argument("--checkpoint")
    p.add_argument("--resume", action="store_true", help="continue from an existing --checkpoint")
    p.add_argument("--flow-seed", type=int, default=0, help="seed for synthetic training flows")
    p.add_argument("--strict-deterministic", action="store_true")
    p.add_argument("--log-every", type=int, default=0)
    p.add_argument("--reward-scale", type=float, default=trainer.REWARD_SCALE,
                   help="multiplier on pressure rewards before returns are formed")
    p.add_argument("--entropy-coef", type=float, default=trainer.RegimeConfig.entropy_coef)
    p.add_argument("--max-grad-norm", type=float, default=trainer.RegimeConfig.max_grad_norm)
    p.add_argument("--select-every", type=int, default=0,
                   help="keep the snapshot with the best greedy ATT on the training instances, checked this often")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--seeds", help="'0,1,2' or '0:5'; synthetic flows are regenerated per seed")
    p.add_argument("--name", help="algorithm label in the results file")
    p.add_argument("--trace", help="prefix for per-tick trace CSVs")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("baseline", help="run a rule-based controller")
    _common(p)
    p.add_argument("--algorithm", choices=["fixed_time", "max_pressure", "sotl"], required=True)
    p.add_argument("--sotl", help="delta,max_red,min_green; omitted means grid search per flow")
    p.add_argument("--seeds")
    p.add_argument("--name")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("grid-sotl", help="SOTL grid search with the full results grid")
    _common(p)
    p.add_argument("--seeds")
    p.set_defaults(func=cmd_grid_sotl)

    p = sub.add_parser("compare", help="rho and ATT-ratio tables from result files")
    p.add_argument("results", nargs="+")
    p.add_argument("--model", default=ATTENDLIGHT_NAME)
    p.add_argument("--baseline", action="append", help="reference algorithm for rho; repeatable")
    p.add_argument("--single", help="single-env algorithm label for the ATT ratio")
    p.add_argument("--case", action="append", help="restrict to these case ids")
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
