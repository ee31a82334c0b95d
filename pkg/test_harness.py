#!/usr/bin/env python3
"""
Tests for mvfbm.harness: probability estimates, replica batching, LDP slope report, convergence experiments.
Run from project root: python test_harness.py   (or: pytest test_harness.py)
"""
import argparse
import math
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))

import numpy as np
import pandas as pd

from mvfbm.coefficients import builtin_family
from mvfbm.errors import DomainError
from mvfbm.fractional import CMControl, Density, TimeGrid
from mvfbm.harness import (
    CI_BASIS,
    LadderSpec,
    auxiliary_error_experiment,
    averaging_convergence_experiment,
    controlled_convergence_experiment,
    estimate_probability,
    increment_scaling_experiment,
    ldp_slope_report,
    mc_exit_probability,
    moment_bound_experiment,
    replica_batches,
    trend_decreasing,
    wilson_interval,
)
from mvfbm.multiscale import ScaleParams, SimConfig


def _raises(exc, fn, *args, **kwargs) -> bool:
    try:
        fn(*args, **kwargs)
    except exc:
        return True
    return False


def _planted(deltas, rate, correction=lambda d: 0.0):
    return pd.DataFrame({"delta": deltas, "p_hat": [math.exp(-(rate + correction(d)) / d) for d in deltas]})


def test_wilson_interval_covers():
    rng = np.random.default_rng(0)
    p, n = 0.3, 200
    hits = rng.binomial(n, p, size=2000)
    covered = 0
    for k in hits:
        lo, hi = wilson_interval(int(k), n)
        covered += lo <= p <= hi
    assert covered / hits.size >= 0.93
    lo, hi = wilson_interval(5, 5)
    assert hi == 1.0 and 0.0 < lo < 1.0
    assert _raises(DomainError, wilson_interval, 3, 2)


def test_zero_hits_use_rare_floor():
    est = estimate_probability(0, 100)
    assert est.p_hat == 0.0 and est.rare_floor
    assert math.isclose(est.ci_high, 1.0 - 0.05**0.01)
    some = estimate_probability(10, 100)
    assert not some.rare_floor and some.ci_low < 0.1 < some.ci_high


def test_ladder_validation():
    assert LadderSpec().eps_values() == tuple(d**1.5 for d in (0.5, 0.25, 0.125))
    err = None
    try:
        LadderSpec(deltas=(0.25, 0.5))
    except DomainError as e:
        err = str(e)
    assert err is not None and "scale parameters" in err
    assert _raises(DomainError, LadderSpec, (0.5, 0.25), 1.0)
    assert _raises(DomainError, LadderSpec, (0.5, 0.25), 1.5, (0.1, 0.1))
    assert _raises(DomainError, LadderSpec, (0.5, 0.25), 1.5, (0.1,))
    assert _raises(DomainError, LadderSpec, replicas=0)
    explicit = LadderSpec((0.5, 0.25), eps=(0.2, 0.05))
    assert [s.eps for s in explicit.scales()] == [0.2, 0.05]


def test_replica_batches_are_deterministic():
    cfg = SimConfig(TimeGrid(1.0, 4), particles=30, seed=3)
    a = replica_batches(cfg, 100)
    b = replica_batches(cfg, 100)
    assert len(a) == 4
    assert [x.seed.entropy for x in a] == [y.seed.entropy for y in b]
    assert [x.seed.spawn_key for x in a] == [y.seed.spawn_key for y in b]
    assert len({x.seed.spawn_key for x in a}) == 4
    assert len(replica_batches(cfg, 1)) == 1


def test_trend_decreasing():
    assert trend_decreasing([3.0, 2.0, 1.0], [0.1, 0.1, 0.1]) == (True, True)
    assert trend_decreasing([1.0, 1.05, 0.5], [0.1, 0.1, 0.1]) == (True, False)
    assert trend_decreasing([1.0, 3.0], [0.1, 0.1]) == (False, False)


def test_planted_rate_is_recovered():
    deltas = [0.5, 0.35, 0.25, 0.1]
    df, summary = ldp_slope_report(_planted(deltas, 0.8), 0.8)
    assert summary["conclusive"] and summary["decreasing"]
    assert np.all(np.abs(df["gap"].to_numpy()) <= 1e-12)
    assert abs(summary["recovered_rate"] - 0.8) <= 1e-10
    assert set(df.columns) >= {"log_p", "delta_log_p", "delta2H_log_p", "gap"}


def test_sqrt_correction_gap_shrinks():
    deltas = [0.5, 0.25, 0.125, 0.0625]
    df, summary = ldp_slope_report(_planted(deltas, 0.5, math.sqrt), 0.5)
    gaps = np.abs(df["gap"].to_numpy())
    assert np.all(np.diff(gaps) < 0)
    assert math.isclose(summary["gap_at_smallest"], -0.25, rel_tol=1e-9)


def test_slope_report_with_few_rungs_is_inconclusive():
    probs = pd.DataFrame({"delta": [0.5, 0.25, 0.125], "p_hat": [0.1, 0.0, 0.0]})
    df, summary = ldp_slope_report(probs, 1.0)
    assert len(df) == 1 and not summary["conclusive"]
    _, empty = ldp_slope_report(pd.DataFrame({"delta": [0.5], "p_hat": [0.0]}), 1.0)
    assert empty["rungs"] == 0 and empty["recovered_rate"] is None


def test_exit_probability_extremes():
    c = builtin_family("gaussian_decoupled")
    cfg = SimConfig(TimeGrid(1.0, 8), particles=20, seed=1)
    ladder = LadderSpec((0.5, 0.25), replicas=40)
    sure = mc_exit_probability(c, ladder, 0.0, cfg)
    assert np.all(sure["p_hat"] == 1.0) and np.all(sure["replicas"] == 40)
    never = mc_exit_probability(c, ladder, 1e6, cfg)
    assert np.all(never["rare_floor"]) and np.all(never["low_hits"])
    assert np.allclose(never["ci_high"], 1.0 - 0.05 ** (1.0 / 40))
    assert np.all(sure["ci_basis"] == CI_BASIS) and "independent" in CI_BASIS
    assert _raises(DomainError, mc_exit_probability, c, ladder, -1.0, cfg)


def test_exit_probability_independent_of_workers():
    c = builtin_family("linear_meanfield")
    cfg = SimConfig(TimeGrid(1.0, 8), particles=25, seed=7)
    ladder = LadderSpec((0.5, 0.25), replicas=100)
    serial = mc_exit_probability(c, ladder, 0.3, cfg, workers=1)
    threaded = mc_exit_probability(c, ladder, 0.3, cfg, workers=3)
    pd.testing.assert_frame_equal(serial, threaded)


def test_increment_scaling_follows_fbm_exponent():
    c = builtin_family("gaussian_decoupled")
    grid = TimeGrid(1.0, 64)
    cfg = SimConfig(grid, particles=200, seed=2)
    blocks = [grid.dt * 2**k for k in range(1, 5)]
    df, summary = increment_scaling_experiment(c, ScaleParams(1.0, 0.5), cfg, blocks, replicas=400)
    assert list(df["steps"]) == [2, 4, 8, 16]
    assert abs(summary["slope"] - 1.5) <= 0.15
    assert summary["replicas"] == 400
    assert _raises(DomainError, increment_scaling_experiment, c, ScaleParams(1.0, 0.5), cfg, blocks[:1])


def test_averaging_gap_vanishes_without_fast_coupling():
    c = builtin_family("gaussian_decoupled")
    cfg = SimConfig(TimeGrid(1.0, 8), particles=10, seed=4)
    df, summary = averaging_convergence_experiment(c, LadderSpec(replicas=20), cfg, "averaged", 0.5, (0.1, 0.05))
    assert np.allclose(df["gap"], 0.0, atol=1e-20)
    assert not summary["strictly_decreasing"]
    assert _raises(DomainError, averaging_convergence_experiment, c, LadderSpec(replicas=20), cfg, "neither")


def test_controlled_experiment_gate_and_columns():
    c = builtin_family("linear_meanfield")
    grid = TimeGrid(1.0, 16)
    cfg = SimConfig(grid, particles=10, seed=5)
    h = CMControl(Density.constant(grid, 0.5), Density.zeros(grid))
    ladder = LadderSpec((0.25, 0.0625), replicas=10)
    df, summary = controlled_convergence_experiment(c, ladder, cfg, h, M=0.5)
    assert list(df.columns) == ["delta", "eps", "block", "energy", "gap", "stderr", "aux_error", "aux_stderr"]
    assert np.allclose(df["block"], [0.5, 0.25])
    assert summary["energy_gate"] and math.isclose(summary["max_energy"], 0.125)
    assert _raises(DomainError, controlled_convergence_experiment, c, ladder, cfg, h, 0.1)


def test_auxiliary_error_with_unit_block_is_zero():
    c = builtin_family("linear_meanfield")
    grid = TimeGrid(1.0, 16)
    cfg = SimConfig(grid, particles=10, seed=6)
    df, summary = auxiliary_error_experiment(c, LadderSpec((0.5, 0.25), replicas=10), [grid.dt], cfg)
    assert np.all(df["error"] == 0.0)
    assert summary["monotone_in_ratio"]


def test_moment_bound_of_frozen_dynamics():
    c = builtin_family("zero")
    cfg = SimConfig(TimeGrid(1.0, 8), particles=5, seed=0, x0=2.0, y0=1.0)
    df, summary = moment_bound_experiment(c, LadderSpec((0.5, 0.25), replicas=5), cfg)
    assert np.allclose(df["sup_slow_sq"], 4.0) and np.allclose(df["fast_occupation"], 1.0)
    assert summary["bounded"] and summary["slow_ratio"] == 1.0
    assert math.isclose(summary["envelope_constant"], 4.0 / 6.0)


def main():
    parser = argparse.ArgumentParser(description="Tests for mvfbm.harness")
    parser.parse_args()
    tests = [(name, fn) for name, fn in sorted(globals().items()) if name.startswith("test_") and callable(fn)]
    failed = 0
    for name, fn in tests:
        try:
            fn()
            print(f"{name}: OK")
        except Exception as e:
            failed += 1
            print(f"{name}: FAIL {type(e).__name__} {e}")
    print(f"{len(tests) - failed}/{len(tests)} passed.")
    return 0 if failed == 0 else 1


if __name__ == "__main__":
    sys.exit(main())
