#!/usr/bin/env python3
"""
Tests for mvfbm.ldp: skeleton solves, energies, path and exit rates, adjoint gradients, probes.
Run from project root: python test_ldp.py   (or: pytest test_ldp.py)
"""
import argparse
import math
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))

import numpy as np

from mvfbm.coefficients import builtin_family
from mvfbm.errors import DomainError
from mvfbm.fractional import CMControl, Density, Path as GridPath, TimeGrid, apply_K
from mvfbm.ldp import (
    RateConfig,
    SkeletonProblem,
    energy,
    penalized_objective,
    rate_of_event,
    rate_of_path,
    skeleton_bound_probe,
    skeleton_solve,
    weak_convergence_probe,
)
from mvfbm.multiscale import SimConfig, solve_limit_ode


def _raises(exc, fn, *args, **kwargs) -> bool:
    try:
        fn(*args, **kwargs)
    except exc:
        return True
    return False


def _control(grid, values):
    return CMControl(Density(grid, np.asarray(values, dtype=float).reshape(grid.N, 1)), Density.zeros(grid))


def test_zero_control_skeleton_is_limit_ode():
    c = builtin_family("linear_meanfield", a4=0.3)
    grid = TimeGrid(1.0, 32)
    p = SkeletonProblem.build(c, grid, 0.2)
    skel = skeleton_solve(p, CMControl.zero(grid))
    ode = solve_limit_ode(c, SimConfig(grid, x0=0.2))
    assert np.allclose(skel.values, ode.values, atol=1e-12)
    assert np.allclose(p.limit.values, ode.values, atol=1e-12)


def test_decoupled_skeleton_is_K_of_control():
    c = builtin_family("gaussian_decoupled")
    grid = TimeGrid(1.0, 32)
    p = SkeletonProblem.build(c, grid, 0.5, 0.75)
    u = Density.from_function(grid, lambda s: np.cos(3.0 * s)[:, None])
    skel = skeleton_solve(p, CMControl(u))
    assert np.allclose(skel.values, 0.5 + apply_K(u, 0.75).values, atol=1e-12)


def test_drift_free_skeleton_superposes():
    c = builtin_family("gaussian_decoupled")
    grid = TimeGrid(1.0, 16)
    p = SkeletonProblem.build(c, grid, 0.4, 0.7)
    rng = np.random.default_rng(3)
    u1, u2 = (rng.standard_normal(16) for _ in range(2))
    s1, s2 = skeleton_solve(p, _control(grid, u1)).values, skeleton_solve(p, _control(grid, u2)).values
    both = skeleton_solve(p, _control(grid, u1 + u2)).values
    assert np.allclose(both, s1 + s2 - 0.4, atol=1e-12)


def test_energy_of_constant_control():
    grid = TimeGrid(1.0, 16)
    assert math.isclose(energy(_control(grid, np.ones(16))), 0.5)
    assert energy(CMControl.zero(grid)) == 0.0
    h = CMControl(Density.from_function(grid, lambda s: np.sin(s)[:, None]), Density.constant(grid, 0.5))
    assert math.isclose(energy(h.scaled(3.0)), 9.0 * energy(h), rel_tol=1e-12)


def test_rate_oracles():
    c = builtin_family("gaussian_decoupled")
    grid = TimeGrid(1.0, 64)
    p = SkeletonProblem.build(c, grid, 0.0, 0.75)
    for fn, exact in (
        (lambda s: np.ones_like(s), 0.5),
        (lambda s: s, 1.0 / 6.0),
        (lambda s: np.sin(2.0 * math.pi * s), 0.25),
    ):
        target = apply_K(Density.from_function(grid, lambda s: fn(s)[:, None]), 0.75)
        res = rate_of_path(p, target)
        assert res.converged, res.to_dict()
        assert abs(res.value - exact) <= 1e-3 * exact, (res.value, exact)


def test_rate_of_limit_is_zero_and_wrong_start_is_infinite():
    c = builtin_family("linear_meanfield")
    grid = TimeGrid(1.0, 16)
    p = SkeletonProblem.build(c, grid, 0.3)
    res = rate_of_path(p, p.limit)
    assert res.value == 0.0 and res.converged
    shifted = GridPath(grid, p.limit.values + 1.0)
    bad = rate_of_path(p, shifted)
    assert bad.value == math.inf and not bad.converged
    assert set(bad.to_dict()) == {"value", "residual", "converged", "iterations", "energy", "mode"}
    assert _raises(DomainError, rate_of_path, p, GridPath(TimeGrid(1.0, 8), np.zeros(9)))


def test_exit_rate_of_brownian_tube():
    # H = 1/2: the cheapest exit of the r-tube is the straight line to r at T, costing r^2 / (2T)
    c = builtin_family("gaussian_decoupled")
    grid = TimeGrid(1.0, 32)
    p = SkeletonProblem.build(c, grid, 0.0, 0.5)
    res = rate_of_event(p, 0.5, RateConfig(exit_candidates=4))
    assert res.converged and res.mode == "event"
    assert abs(res.value - 0.125) <= 1e-3 * 0.125, res.value


def test_path_rate_ignores_penalty_schedule():
    c = builtin_family("gaussian_decoupled")
    grid = TimeGrid(1.0, 32)
    p = SkeletonProblem.build(c, grid, 0.0, 0.75)
    target = apply_K(Density.constant(grid, 1.0), 0.75)
    a = rate_of_path(p, target)
    b = rate_of_path(p, target, RateConfig(penalties=(1e3, 1e4, 1e5, 1e6, 1e7)))
    assert a.converged and b.converged
    assert abs(a.value - b.value) <= 1e-3 * a.value


def test_exit_rate_grows_with_radius():
    c = builtin_family("gaussian_decoupled")
    p = SkeletonProblem.build(c, TimeGrid(1.0, 16), 0.0, 0.5)
    values = [rate_of_event(p, r, RateConfig(exit_candidates=2)).value for r in (0.5, 1.0, 1.5)]
    assert values[0] <= values[1] <= values[2]
    assert np.allclose(values, [0.125, 0.5, 1.125], rtol=1e-3)


def test_exit_rate_edge_cases():
    c = builtin_family("gaussian_decoupled")
    p = SkeletonProblem.build(c, TimeGrid(1.0, 8), 0.0, 0.75)
    zero = rate_of_event(p, 0.0)
    assert zero.value == 0.0 and zero.converged
    assert _raises(DomainError, rate_of_event, p, -0.1)
    assert _raises(DomainError, RateConfig, penalties=())


def test_penalized_objective_gradient_matches_finite_differences():
    grid = TimeGrid(1.0, 32)
    p = SkeletonProblem.build(builtin_family("linear_meanfield"), grid, 0.3, 0.75)
    rng = np.random.default_rng(0)
    target = GridPath(grid, p.limit.values + 0.1 * np.sin(np.pi * grid.nodes)[:, None])
    uhat = Density(grid, rng.standard_normal((32, 1)))
    lam, step = 10.0, 1e-6
    _, grad = penalized_objective(p, target, uhat, lam)
    for j in rng.choice(32, size=8, replace=False):
        bump = np.zeros((32, 1))
        bump[j, 0] = step
        up, _ = penalized_objective(p, target, Density(grid, uhat.values + bump), lam)
        down, _ = penalized_objective(p, target, Density(grid, uhat.values - bump), lam)
        fd = (up - down) / (2.0 * step)
        assert abs(fd - grad.values[j, 0]) <= 1e-5 * max(abs(fd), 1e-8), (j, fd, grad.values[j, 0])


def test_weak_convergence_probe():
    c = builtin_family("gaussian_decoupled")
    grid = TimeGrid(1.0, 16)
    p = SkeletonProblem.build(c, grid, 0.0, 0.75)
    limit = _control(grid, np.ones(16))
    seq = [_control(grid, np.full(16, 1.0 + 10.0**-k)) for k in range(1, 5)]
    report = weak_convergence_probe(p, seq, limit)
    assert report["decreasing"] and report["pass"]
    assert report["final_gap"] <= 1e-3
    assert _raises(DomainError, weak_convergence_probe, p, seq, limit, 1e-3, 0.1)
    same = weak_convergence_probe(p, [limit, limit], limit)
    assert same["gaps"] == [0.0, 0.0]


def test_oscillating_controls_are_smoothed_away():
    c = builtin_family("gaussian_decoupled")
    grid = TimeGrid(1.0, 256)
    p = SkeletonProblem.build(c, grid, 0.0, 0.75)
    seq = [CMControl(Density.from_function(grid, lambda s, k=k: np.sin(2.0 * math.pi * k * s)[:, None]))
           for k in (1, 4, 16, 64)]
    report = weak_convergence_probe(p, seq, CMControl.zero(grid), tol=0.05)
    assert report["decreasing"] and report["pass"]


def test_skeleton_bound_probe():
    c = builtin_family("gaussian_decoupled")
    p = SkeletonProblem.build(c, TimeGrid(1.0, 16), 0.0, 0.75)
    a = skeleton_bound_probe(p, 0.5, samples=8, seed=1)
    b = skeleton_bound_probe(p, 0.5, samples=8, seed=1)
    assert a == b
    assert a["max_sup"] >= a["mean_sup"] > 0.0
    still = skeleton_bound_probe(p, 0.0, samples=2)
    assert still["max_sup"] == still["limit_sup"] == 0.0
    assert _raises(DomainError, skeleton_bound_probe, p, -1.0)


def main():
    parser = argparse.ArgumentParser(description="Tests for mvfbm.ldp")
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
