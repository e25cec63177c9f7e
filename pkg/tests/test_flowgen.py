from __future__ import annotations

from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from attendlight.flowgen import (
    SYNTHETIC_PRESETS,
    ArrivalRecord,
    FlowError,
    FlowTrace,
    SyntheticParams,
    adapt_flow,
    check_flow,
    generate_synthetic,
    read_flow,
    write_flow,
)
from attendlight.topology import builtin_catalog

CAT = builtin_catalog()


def test_presets():
    assert SYNTHETIC_PRESETS["S1"] == SyntheticParams(4.0, 0.3)
    assert SyntheticParams().kind_probs == (0.70, 0.20, 0.10)


def test_mean_count_matches_poisson_expectation():
    ix = CAT["int1"]
    params = SyntheticParams(3.0, 0.0, n_processes=1)
    counts = [len(generate_synthetic(ix, params, 600, seed)) for seed in range(1000)]
    assert abs(np.mean(counts) - 200.0) <= 5.0


def test_counts_pass_chi_square():
    ix = CAT["int1"]
    params = SyntheticParams(4.0, 0.0, n_processes=1)
    counts = np.array([len(generate_synthetic(ix, params, 600, seed)) for seed in range(600)])
    mu = 600 / 4.0
    # width-5 bins within two standard deviations, tails pooled into the end bins
    edges = np.arange(int(mu - 2 * np.sqrt(mu)), int(mu + 2 * np.sqrt(mu)), 5)
    cdf = stats.poisson.cdf(edges - 1, mu)
    probs = np.diff(np.concatenate([[0.0], cdf, [1.0]]))
    observed = np.bincount(np.searchsorted(edges, counts, side="right"), minlength=len(probs))
    expected = probs * len(counts)
    assert expected.min() >= 5
    chi2 = float(((observed - expected) ** 2 / expected).sum())
    assert chi2 < stats.chi2.ppf(0.99, len(probs) - 1)


def test_straight_only_splits_evenly():
    ix = CAT["int1"]
    params = SyntheticParams(4.0, 0.0, kind_probs=(1.0, 0.0, 0.0))
    tally = Counter()
    for seed in range(200):
        tally.update(r.movement_id for r in generate_synthetic(ix, params, 600, seed).records)
    assert set(tally) == {"v2", "v3"}
    share = tally["v2"] / sum(tally.values())
    assert abs(share - 0.5) < 0.02


def test_extra_vehicle_shares_timestamp():
    ix = CAT["int1"]
    params = SyntheticParams(4.0, 1.0, n_processes=1)
    trace = generate_synthetic(ix, params, 600, 3)
    times = trace.times()
    assert len(times) % 2 == 0
    assert np.all(times[0::2] == times[1::2])


def test_deterministic_and_sorted():
    ix = CAT["int7-4p"]
    a = generate_synthetic(ix, SYNTHETIC_PRESETS["S5"], 600, 11)
    b = generate_synthetic(ix, SYNTHETIC_PRESETS["S5"], 600, 11)
    assert a == b
    assert np.all(np.diff(a.times()) >= 0)
    assert a.times().max() <= 600
    check_flow(a, ix)


def test_kinds_restricted_to_present():
    # every draw must land on a movement int3 actually declares
    ix = CAT["int3"]
    trace = generate_synthetic(ix, SYNTHETIC_PRESETS["S1"], 600, 0)
    check_flow(trace, ix)


@pytest.mark.parametrize("bad", [dict(lambda_s=0), dict(extra_prob=1.5), dict(kind_probs=(0.5, 0.5, 0.5)),
                                 dict(n_processes=0)])
def test_param_validation(bad):
    with pytest.raises(FlowError):
        SyntheticParams(**bad)


def test_adapt_identity():
    ix = CAT["int1"]
    trace = generate_synthetic(ix, SYNTHETIC_PRESETS["S1"], 600, 5)
    assert adapt_flow(trace, ix, ix, seed=99) == trace


def test_adapt_four_way_to_three_way():
    src, dst = CAT["int7-4p"], CAT["int1"]
    records = tuple(ArrivalRecord(float(t), "n_straight") for t in range(2000))
    out = adapt_flow(FlowTrace(2000.0, records), src, dst, seed=1)
    assert len(out) == 2000
    assert [r.time_s for r in out.records] == [r.time_s for r in records]
    tally = Counter(r.movement_id for r in out.records)
    assert set(tally) == {"v2", "v3"}
    assert abs(tally["v2"] / 2000 - 0.5) < 0.04


def test_adapt_conserves_records():
    src, dst = CAT["int9-8p"], CAT["int3"]
    trace = generate_synthetic(src, SYNTHETIC_PRESETS["S2"], 600, 2)
    out = adapt_flow(trace, src, dst, seed=3)
    assert len(out) == len(trace)
    assert sorted(out.times()) == sorted(trace.times())
    check_flow(out, dst)


def test_check_flow_unknown_movement():
    trace = FlowTrace(600.0, (ArrivalRecord(1.0, "zz"),))
    with pytest.raises(FlowError, match="zz"):
        check_flow(trace, CAT["int1"])


def test_empty_trace_round_trip():
    trace = FlowTrace(600.0, ())
    text = write_flow(trace)
    assert text.strip() == "horizon_s=600"
    assert read_flow(text) == trace


def test_three_records_round_trip():
    trace = FlowTrace(600.0, (ArrivalRecord(0.0, "v1"), ArrivalRecord(1.125, "v2"), ArrivalRecord(599.999, "v6")))
    assert read_flow(write_flow(trace)) == trace


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(sorted(SYNTHETIC_PRESETS)))
def test_generated_traces_round_trip(seed, preset):
    trace = generate_synthetic(CAT["int1"], SYNTHETIC_PRESETS[preset], 600, seed)
    assert read_flow(write_flow(trace)) == trace


@pytest.mark.parametrize("body,msg", [
    ("horizon_s=600\n-1,v1\n", "negative arrival time"),
    ("horizon_s=600\n5,v1\n2,v1\n", "not sorted"),
    ("horizon_s=600\n700,v1\n", "after horizon"),
    ("horizon_s=600\nabc,v1\n", "line 2"),
    ("600\n", "line 1"),
])
def test_read_errors(body, msg):
    with pytest.raises(FlowError, match=msg):
        read_flow(body)
