"""End-to-end acceptance checks, one test per numbered criterion.

Each test records a one-line verdict that the terminal summary prints, then
asserts. The learning criteria (6 to 9) train real models and dominate the
runtime; their shared artifacts are cached per session.
"""

from __future__ import annotations

import json
import time
from functools import cache

import numpy as np
import pytest
from conftest import ACCEPTANCE
from test_simcore import run_with_checks
from test_tensorkit import OP_CASES, store_with, weighted

from attendlight import tensorkit as tk
from attendlight.baselines import (
    FixedTimeController,
    MaxPressureController,
    run_controller,
    sotl_grid_search,
)
from attendlight.benchcli import att_ratio, main, rho
from attendlight.flowgen import SYNTHETIC_PRESETS, generate_synthetic
from attendlight.policy import (
    AttendLight,
    features,
    forward,
    sequence_log_probs,
    sequence_values,
)
from attendlight.topology import builtin_catalog, make_intersection
from attendlight.trainer import (
    MULTI,
    SINGLE,
    BanditInstance,
    EnvInstance,
    RegimeConfig,
    evaluate,
    finetune,
    train,
    train_model,
)

CAT = builtin_catalog()
TRAIN_FLOW_SEED = 1000
EVAL_FLOW_SEEDS = tuple(range(5000, 5005))
# snapshot selection looks at separate draws of the training preset, never at EVAL_FLOW_SEEDS
VALIDATION_FLOW_SEEDS = (2000, 2001, 2002)
SELECT_EVERY = 50
SINGLE_EPISODES = 3000
MULTI_EPISODES = 3000
FINETUNE_EPISODES = 200
ABLATION_EPISODES = SINGLE_EPISODES


def record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


# -- shared artifacts ------------------------------------------------------------

def instance(topology: str, preset: str, seed: int = TRAIN_FLOW_SEED) -> EnvInstance:
    ix = CAT[topology]
    return EnvInstance(ix, generate_synthetic(ix, SYNTHETIC_PRESETS[preset], 600, seed), name=f"{topology}-{preset}")


def held_out(topology: str, preset: str) -> list[EnvInstance]:
    return [instance(topology, preset, s) for s in EVAL_FLOW_SEEDS]


def validation(cases) -> list[EnvInstance]:
    return [instance(t, f, s) for t, f in cases for s in VALIDATION_FLOW_SEEDS]


def greedy_att(model: AttendLight, topology: str, preset: str) -> float:
    return float(np.mean([evaluate(model, env) for env in held_out(topology, preset)]))


@cache
def single_model(topology: str, preset: str, seed: int = 0, episodes: int = SINGLE_EPISODES,
                 variant: str = "attention") -> AttendLight:
    cfg = RegimeConfig(SINGLE, episodes=episodes, seed=seed, variant=variant, select_every=SELECT_EVERY)
    model, _ = train(cfg, [instance(topology, preset)], validation=validation([(topology, preset)]))
    return model


# the multi-env split: two topologies times two flows for training, then one
# unseen flow on a seen topology and one unseen topology on a seen flow
MULTI_TRAIN = (("int1", "S2"), ("int1", "S3"), ("int2", "S2"), ("int2", "S3"))
MULTI_HELD_OUT = (("int1", "S1"), ("int3", "S2"))


@cache
def multi_model() -> AttendLight:
    cfg = RegimeConfig(MULTI, episodes=MULTI_EPISODES, seed=0, select_every=SELECT_EVERY)
    model, _ = train(cfg, [instance(t, f) for t, f in MULTI_TRAIN], validation=validation(MULTI_TRAIN))
    return model


# -- 1. gradient fidelity --------------------------------------------------------

def test_criterion_1_gradient_fidelity():
    start = time.perf_counter()
    worst, where = 0.0, ""
    for name, build, arrays in OP_CASES:
        err = tk.finite_diff_check(lambda s, b=build: weighted(b(s)), store_with(**arrays))
        if err > worst:
            worst, where = err, name
    ix = CAT["int3"]
    rng = np.random.default_rng(0)
    xs = np.stack([features(rng.integers(0, 9, size=(len(ix.lanes), 4)), ix, np.float64) for _ in range(3)])
    active, actions = np.array([0, 1, 0]), np.array([1, 0, 0])
    model = AttendLight(4, seed=0, dtype=np.float64)
    for label, fn, store in (
        ("actor log-prob", lambda s: tk.sum(sequence_log_probs(xs, active, actions, ix, s)), model.actor),
        ("critic value", lambda s: tk.sum(sequence_values(xs, ix, s)), model.critic),
    ):
        err = tk.finite_diff_check(fn, store)
        if err > worst:
            worst, where = err, label
    elapsed = time.perf_counter() - start
    ok = worst < 1e-4 and elapsed < 60
    record(1, ok, f"max rel err {worst:.2e} ({where}), {len(OP_CASES)} ops + actor + critic, {elapsed:.1f}s")
    assert ok


# -- 2. attention properties -----------------------------------------------------

def test_criterion_2_attention_properties():
    failures = []
    for d in (4, 8):
        for k in range(1, 9):
            for trial in range(5):
                rng = np.random.default_rng(1000 * d + 10 * k + trial)
                s = tk.ParamStore(np.float64)
                tk.init_attention(s, "att", d, rng)
                refs, q = rng.normal(size=(k, d)), rng.normal(size=d)
                w = tk.attention(refs, q, s, "att").data
                if abs(w.sum() - 1) > 1e-6 or (w < 0).any():
                    failures.append(("normalisation", k, d))
                if k == 1 and abs(w[0] - 1) > 1e-12:
                    failures.append(("singleton", k, d))
                same = tk.attention(np.tile(refs[0], (k, 1)), q, s, "att").data
                if not np.allclose(same, 1 / k, atol=1e-12):
                    failures.append(("identical refs", k, d))
                perm = rng.permutation(k)
                if not np.allclose(tk.attention(refs[perm], q, s, "att").data, w[perm], atol=1e-12):
                    failures.append(("permutation", k, d))
    record(2, not failures, f"80 draws over k=1..8, d=4,8; failures {failures[:3]}")
    assert not failures


# -- 3. universality -------------------------------------------------------------

def _relabel(ix, lane_perm=None, phase_perm=None):
    lanes = list(ix.lanes) if lane_perm is None else [ix.lanes[i] for i in lane_perm]
    phases = [list(p.movement_ids) for p in ix.phases]
    if phase_perm is not None:
        phases = [phases[i] for i in phase_perm]
    return make_intersection(ix.name, lanes, ix.movements, phases, ix.right_turn_always)


def test_criterion_3_universality():
    model = AttendLight(128, seed=0)
    worst_lane = worst_phase = 0.0
    sizes_ok = True
    phase_counts = set()
    for name, ix in sorted(CAT.items()):
        phase_counts.add(ix.n_phases)
        for trial in range(3):
            rng = np.random.default_rng(trial)
            x = features(rng.integers(0, 15, size=(len(ix.lanes), 4)), ix)
            active = int(rng.integers(ix.n_phases))
            probs, state = forward(x, ix, model.initial_state(), model.actor, active)
            sizes_ok &= probs.shape == (ix.n_phases,) and bool(np.all(probs >= 0)) \
                and abs(float(probs.sum()) - 1) < 1e-6 and state.h.shape == (128,)
            lp = rng.permutation(len(ix.lanes))
            p_lane, _ = forward(x[lp], _relabel(ix, lane_perm=lp), model.initial_state(), model.actor, active)
            worst_lane = max(worst_lane, float(np.abs(p_lane - probs).max()))
            pp = rng.permutation(ix.n_phases)
            new_active = int(np.where(pp == active)[0][0])
            p_phase, _ = forward(x, _relabel(ix, phase_perm=pp), model.initial_state(), model.actor, new_active)
            worst_phase = max(worst_phase, float(np.abs(p_phase - probs[pp]).max()))
    ok = sizes_ok and worst_lane < 1e-6 and worst_phase < 1e-6 and phase_counts == {2, 3, 4, 8}
    record(3, ok, f"{len(CAT)} presets, phases {sorted(phase_counts)}; lane-perm dev {worst_lane:.1e}, "
                  f"phase-perm dev {worst_phase:.1e}")
    assert ok


# -- 4. simulator conservation ---------------------------------------------------

def test_criterion_4_conservation():
    start = time.perf_counter()
    names, presets = sorted(CAT), sorted(SYNTHETIC_PRESETS)
    rng = np.random.default_rng(2024)
    bad = []
    for case in range(50):
        ix = CAT[names[int(rng.integers(len(names)))]]
        flow = generate_synthetic(ix, SYNTHETIC_PRESETS[presets[int(rng.integers(6))]], 600, int(rng.integers(1e6)))
        _, violations = run_with_checks(ix, flow, int(rng.integers(1e6)), case)
        if violations:
            bad.append((case, violations[0]))
    elapsed = time.perf_counter() - start
    ok = not bad and elapsed < 120
    record(4, ok, f"50 triples checked every tick, {len(bad)} with violations, {elapsed:.1f}s")
    assert ok


# -- 5. REINFORCE sanity ---------------------------------------------------------

def test_criterion_5_bandit():
    # payoffs 1 and 0 are fed to the learner unscaled
    start = time.perf_counter()
    ix = CAT["int3"]
    inst = BanditInstance(ix, payoffs=(1.0, 0.0))
    reached = []
    for seed in range(5):
        model = AttendLight(128, seed=seed)
        x = features(inst.make(0).obs, ix, model.actor.dtype)
        hit = None
        for block in range(20):
            cfg = RegimeConfig(SINGLE, episodes=25, seed=100 * seed + block, reward_scale=1.0)
            train_model(model, cfg, [inst])
            if float(forward(x, ix, model.initial_state(), model.actor, 0)[0][0]) > 0.95:
                hit = 25 * (block + 1)
                break
        reached.append(hit)
    elapsed = time.perf_counter() - start
    ok = all(h is not None for h in reached) and elapsed < 60
    record(5, ok, f"iterations to pi(best) > 0.95 per seed: {reached}, {elapsed:.1f}s")
    assert ok


# -- 6. single-env learning ------------------------------------------------------

@cache
def int1_baselines() -> dict:
    flows = [env.flow for env in held_out("int1", "S1")]
    ix = CAT["int1"]
    ft = float(np.mean([run_controller(FixedTimeController(ix), ix, f) for f in flows]))
    mp = float(np.mean([run_controller(MaxPressureController(ix), ix, f) for f in flows]))
    sotl = float(np.mean([sotl_grid_search(ix, f).best_att for f in flows]))
    return {"fixed_time": ft, "max_pressure": mp, "sotl": sotl}


def test_criterion_6_single_env_learning():
    start = time.perf_counter()
    model = single_model("int1", "S1")
    att = greedy_att(model, "int1", "S1")
    base = int1_baselines()
    best = min(base["max_pressure"], base["sotl"])
    ok_a = att <= 0.85 * base["fixed_time"]
    ok_b = att <= 1.10 * best
    elapsed = time.perf_counter() - start
    record(6, ok_a and ok_b,
           f"AttendLight {att:.2f} | FixedTime {base['fixed_time']:.2f} (a: <= {0.85 * base['fixed_time']:.2f} "
           f"{'ok' if ok_a else 'no'}) | MaxPressure {base['max_pressure']:.2f}, SOTL {base['sotl']:.2f} "
           f"(b: <= {1.10 * best:.2f} {'ok' if ok_b else 'no'}), {elapsed / 60:.1f} min")
    assert ok_a and ok_b


# -- 7. multi-env generalisation -------------------------------------------------

def test_criterion_7_multi_env_generalisation():
    multi = multi_model()
    ratios = []
    parts = []
    for topology, preset in MULTI_HELD_OUT:
        u = greedy_att(multi, topology, preset)
        s = greedy_att(single_model(topology, preset), topology, preset)
        ratios.append(att_ratio(u, s))
        parts.append(f"{topology}-{preset}: multi {u:.2f} / single {s:.2f} = {ratios[-1]:.3f}")
    mean = float(np.mean(ratios))
    ok = mean <= 1.35
    record(7, ok, f"mean ATT ratio {mean:.3f} (<= 1.35); " + "; ".join(parts))
    assert ok


# -- 8. fine-tuning --------------------------------------------------------------

def test_criterion_8_finetune():
    topology, preset = MULTI_HELD_OUT[1]
    multi = multi_model()
    single = greedy_att(single_model(topology, preset), topology, preset)
    before = greedy_att(multi, topology, preset)
    tuned = finetune(multi, instance(topology, preset), FINETUNE_EPISODES)
    after = greedy_att(tuned, topology, preset)
    gap0, gap1 = before - single, after - single
    already = gap0 <= 0.05 * single
    closed = (gap0 - gap1) / gap0 if gap0 > 0 else None
    ok = already or closed >= 0.30
    how = "already within 5% before fine-tuning" if already else f"{100 * closed:.0f}% of the gap closed"
    record(8, ok, f"{topology}-{preset}: single {single:.2f}, multi {before:.2f} -> tuned {after:.2f}; "
                  f"gap {gap0:+.2f} -> {gap1:+.2f} ({how})")
    assert ok


# -- 9. mean-state ablation ------------------------------------------------------

ABLATION_RUNS = (("int1", "S1", 1), ("int1", "S2", 0), ("int2", "S1", 0),
                 ("int2", "S3", 0), ("int3", "S1", 0), ("int3", "S2", 1))


def test_criterion_9_mean_state_ablation():
    rhos = []
    for topology, preset, seed in ABLATION_RUNS:
        att_attn = greedy_att(single_model(topology, preset, seed, ABLATION_EPISODES), topology, preset)
        att_mean = greedy_att(single_model(topology, preset, seed, ABLATION_EPISODES, "mean_state"),
                              topology, preset)
        rhos.append(rho(att_mean, att_attn))
    mean = float(np.mean(rhos))
    ok = len(rhos) >= 6 and mean >= 0
    record(9, ok, f"mean rho(mean-state vs attention) {mean:+.4f} over {len(rhos)} runs: "
                  + ", ".join(f"{r:+.3f}" for r in rhos))
    assert ok


# -- 10. metric arithmetic -------------------------------------------------------

def test_criterion_10_metric_arithmetic():
    r, q = rho(122.61, 141.44), att_ratio(122.61, 108.47)
    ok = abs(r + 0.1331) <= 5e-4 and abs(q - 1.1304) <= 5e-4
    record(10, ok, f"rho {r:.4f} (-0.1331), att_ratio {q:.4f} (1.1304)")
    assert ok


# -- 11. determinism -------------------------------------------------------------

def test_criterion_11_strict_determinism(tmp_path, monkeypatch, capsys):
    argv = ["train", "--regime", "single", "--episodes", "5", "--d", "16", "--flow", "S1", "--seed", "3",
            "--strict-deterministic", "--out", "run"]
    outputs = []
    for name in ("first", "second"):
        (tmp_path / name).mkdir()
        monkeypatch.chdir(tmp_path / name)
        assert main(argv) == 0
        run = tmp_path / name / "run"
        outputs.append({f: (run / f).read_bytes() for f in ("model.atlk", "curve.csv", "manifest.json")})
    same_manifest = json.loads(outputs[0]["manifest.json"]) == json.loads(outputs[1]["manifest.json"])
    ok = same_manifest and all(outputs[0][f] == outputs[1][f] for f in ("model.atlk", "curve.csv"))
    record(11, ok, f"manifests equal {same_manifest}; checkpoint and curve byte-identical "
                   f"{outputs[0]['model.atlk'] == outputs[1]['model.atlk']}/"
                   f"{outputs[0]['curve.csv'] == outputs[1]['curve.csv']}")
    assert ok


@pytest.fixture(autouse=True, scope="module")
def _clear_caches():
    yield
    single_model.cache_clear()
    multi_model.cache_clear()
    int1_baselines.cache_clear()
