#!/usr/bin/env python3
"""
Tests for mvfbm.multiscale: coupled and controlled simulation, frozen equation, averaged drift, limit ODE.
Run from project root: python test_multiscale.py   (or: pytest test_multiscale.py)
"""
import argparse
import math
import sys
from dataclasses import replace
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))

import numpy as np

from mvfbm.coefficients import EmpiricalMeasure, builtin_family
from mvfbm.errors import BlowUpError, DomainError
from mvfbm.fractional import CMControl, Density, Path as GridPath, TimeGrid, fbm_paths
from mvfbm.multiscale import (
    AveragedDrift,
    BbarLattice,
    FrozenConfig,
    PathEnsemble,
    ScaleParams,
    SimConfig,
    estimate_bbar,
    frozen_simulate,
    khasminskii_auxiliary,
    simulate_controlled,
    simulate_coupled,
    simulate_with_auxiliary,
    solve_averaged,
    solve_limit_ode,
    stable_substeps,
)


def _raises(exc, fn, *args, **kwargs) -> bool:
    try:
        fn(*args, **kwargs)
    except exc:
        return True
    return False


def _cfg(N=32, particles=50, seed=1, **kw):
    return SimConfig(TimeGrid(1.0, N), particles=particles, seed=seed, **kw)


def test_scale_params_and_substeps():
    assert _raises(DomainError, ScaleParams, 0.0, 0.1)
    assert _raises(DomainError, ScaleParams, 0.5, -1.0)
    assert ScaleParams(0.5, 0.25).ratio == 0.5
    grid = TimeGrid(1.0, 10)
    assert stable_substeps(grid, 1.0) == 1
    assert stable_substeps(grid, 0.01) == 100
    cfg = SimConfig(grid, substeps=2)
    assert _raises(DomainError, cfg.resolve_substeps, 0.01)
    assert cfg.resolve_substeps(1.0) == 2
    assert _raises(DomainError, SimConfig, grid, particles=0)
    assert _raises(DomainError, SimConfig, grid, method="bogus")


def test_zero_dynamics_stay_put():
    c = builtin_family("zero")
    slow, fast = simulate_coupled(c, ScaleParams(0.5, 0.1), _cfg(x0=1.5, y0=-2.0))
    assert np.all(slow.values == 1.5) and np.all(fast.values == -2.0)


def test_coupled_is_deterministic_with_right_shapes():
    c = builtin_family("linear_meanfield")
    sp, cfg = ScaleParams(0.5, 0.05), _cfg(x0=0.3)
    a, fa = simulate_coupled(c, sp, cfg)
    b, fb = simulate_coupled(c, sp, cfg)
    assert a.values.shape == (50, 33, 1) and fa.values.shape == (50, 33, 1)
    assert np.array_equal(a.values, b.values) and np.array_equal(fa.values, fb.values)
    assert np.all(a.values[:, 0] == 0.3)
    c_other = simulate_coupled(c, sp, replace(cfg, seed=2))[0]
    assert not np.array_equal(a.values, c_other.values)


def test_decoupled_slow_path_is_scaled_fbm():
    c = builtin_family("gaussian_decoupled", sigma0=2.0)
    cfg = _cfg(N=16, particles=8, seed=5, x0=1.0)
    delta = 0.25
    slow, _ = simulate_coupled(c, ScaleParams(delta, 0.1), cfg)
    paths = fbm_paths(cfg.grid, cfg.H, 8, 1, 5)
    assert np.allclose(slow.values, 1.0 + delta**cfg.H * 2.0 * paths, atol=1e-12)


def test_zero_control_reproduces_coupled():
    c = builtin_family("linear_meanfield")
    sp, cfg = ScaleParams(0.5, 0.05), _cfg()
    slow, fast = simulate_coupled(c, sp, cfg)
    cs, cf = simulate_controlled(c, sp, cfg, CMControl.zero(cfg.grid))
    assert np.array_equal(slow.values, cs.values) and np.array_equal(fast.values, cf.values)


def test_control_shifts_decoupled_slow_path_by_K_uhat():
    from mvfbm.fractional import apply_K

    c = builtin_family("gaussian_decoupled")
    sp, cfg = ScaleParams(0.5, 0.1), _cfg(N=32, particles=4)
    h = CMControl(Density.constant(cfg.grid, 1.0), Density.zeros(cfg.grid))
    free, _ = simulate_coupled(c, sp, cfg)
    controlled, _ = simulate_controlled(c, sp, cfg, h)
    shift = apply_K(h.uhat, cfg.H).values
    assert np.allclose(controlled.values - free.values, shift[None, :, :], atol=1e-10)


def test_energy_gate():
    c = builtin_family("linear_meanfield")
    cfg = _cfg(N=8, particles=4)
    h = CMControl(Density.constant(cfg.grid, 2.0), Density.zeros(cfg.grid))
    assert _raises(DomainError, simulate_controlled, c, ScaleParams(0.5, 0.1), cfg, h, 1.0)
    simulate_controlled(c, ScaleParams(0.5, 0.1), cfg, h, 2.0)


def test_auxiliary_with_unit_block_is_fast_path():
    c = builtin_family("linear_meanfield")
    cfg = _cfg(N=16, particles=10)
    sp = ScaleParams(0.5, 0.05)
    slow, fast, aux = simulate_with_auxiliary(c, sp, cfg, cfg.grid.dt)
    assert np.array_equal(fast.values, aux.values)
    wide = khasminskii_auxiliary(c, sp, cfg, 0.25)
    assert np.all(wide.values[:, 0] == fast.values[:, 0])
    assert _raises(DomainError, simulate_with_auxiliary, c, sp, cfg, 0.3)


def test_auxiliary_ignores_fast_control():
    c = builtin_family("gaussian_decoupled", drift=0.3)
    cfg = _cfg(N=16, particles=8, seed=4)
    grid = cfg.grid
    sp = ScaleParams(0.5, 0.05)
    still = CMControl(Density.zeros(grid), Density.zeros(grid))
    pushed = CMControl(Density.zeros(grid), Density.constant(grid, 0.8))
    _, fast0, aux0 = simulate_with_auxiliary(c, sp, cfg, 0.25, still)
    _, fast1, aux1 = simulate_with_auxiliary(c, sp, cfg, 0.25, pushed)
    assert np.array_equal(aux0.values, aux1.values)
    assert not np.allclose(fast0.values, fast1.values)


def test_blow_up_is_reported():
    c = builtin_family("zero")
    exploding = replace(c, b=lambda t, x, mu, y: 1e3 * x**2)
    with np.errstate(all="ignore"):
        assert _raises(BlowUpError, simulate_coupled, exploding, ScaleParams(0.5, 0.5), _cfg(N=64, particles=2, x0=1.0))


def test_ensemble_helpers():
    grid = TimeGrid(1.0, 2)
    ens = PathEnsemble(grid, np.array([[[0.0], [1.0], [-2.0]], [[0.0], [0.5], [0.5]]]))
    assert np.allclose(ens.sup_sq(), [4.0, 0.25])
    ref = GridPath(grid, np.array([0.0, 1.0, 0.0]))
    assert np.allclose(ens.sup_distance_sq(ref), [4.0, 0.25])
    frame = ens.summary_frame()
    assert list(frame.columns) == ["t", "mean_x_1", "second_moment"]
    assert math.isclose(frame["second_moment"].iloc[2], 2.125)
    assert ens.measure_at(1).size == 2
    assert _raises(DomainError, PathEnsemble, grid, np.zeros((2, 4, 1)))


def test_frozen_chain_matches_stationary_variance():
    c = builtin_family("ou_frozen_gaussian", beta=1.0, gamma0=0.5)
    cfg = FrozenConfig(horizon=40.0, dt=0.01, chains=64, burn_in=0.25, seed=3)
    ens = frozen_simulate(c, 0.0, [0.0], EmpiricalMeasure.dirac([0.0]), cfg)
    tail = ens.values[:, ens.grid.N // 4 :, 0]
    dt, beta = cfg.dt, 1.0
    want = 0.25 / (2.0 * beta - beta * beta * dt)
    assert abs(float(tail.var()) - want) <= 0.15 * want
    assert _raises(DomainError, FrozenConfig, chains=1)
    assert _raises(DomainError, FrozenConfig, burn_in=1.0)


def test_estimate_bbar_matches_exact_formula():
    c = builtin_family("linear_meanfield")
    mu = EmpiricalMeasure(np.array([0.4, -0.2, 1.0]))
    x = np.array([0.7])
    est, se = estimate_bbar(c, 0.0, x, mu, FrozenConfig(horizon=10.0, dt=0.01, chains=32, seed=4), return_stderr=True)
    exact = c.bbar(0.0, x[None, :], mu)[0]
    assert np.all(np.abs(est - exact) <= 5.0 * se + 1e-3)


def test_frozen_lattice_interpolates_affine_drift():
    c = builtin_family("linear_meanfield")
    no_exact = replace(c, bbar=None)
    lattice = BbarLattice(t_points=(0.0, 1.0), x_points=(-2.0, -1.0, 0.0, 1.0, 2.0), m_points=(-1.0, 0.0, 1.0))
    drift = AveragedDrift.for_coefficients(no_exact, FrozenConfig(horizon=5.0, dt=0.01, chains=16, burn_in=0.4), lattice)
    assert drift.source == "lattice"
    x = np.array([[-1.5], [0.25], [1.8]])
    mu = EmpiricalMeasure.dirac([0.5])
    assert np.allclose(drift(0.5, x, mu), c.bbar(0.5, x, mu), atol=0.1)
    assert AveragedDrift.for_coefficients(c).source == "exact"
    assert _raises(DomainError, AveragedDrift.exact, no_exact)


def test_averaged_drift_jacobian():
    c = builtin_family("linear_meanfield", a1=-1.0, a3=0.5, c1=2.0)
    drift = AveragedDrift.exact(c)
    jac = drift.jacobian(0.0, np.array([0.3]), EmpiricalMeasure.dirac([0.3]))
    assert np.allclose(jac, [[-1.0 + 0.5 * 2.0]], atol=1e-6)


def test_limit_ode_solves_linear_decay():
    c = builtin_family("linear_meanfield", a1=-1.0, a2=0.0, a3=0.0)
    path = solve_limit_ode(c, _cfg(N=64, x0=1.0))
    assert math.isclose(path.values[-1, 0], math.exp(-1.0), rel_tol=1e-8)
    assert path.values[0, 0] == 1.0


def test_solve_averaged_without_noise_is_euler():
    c = builtin_family("linear_meanfield", a1=-1.0, a2=0.0, a3=0.0, s0=0.0, s1=0.0)
    ens = solve_averaged(c, _cfg(N=1000, particles=3, x0=1.0))
    assert np.allclose(ens.terminal(), (1.0 - 1e-3) ** 1000, atol=1e-12)
    assert abs(float(ens.terminal()[0, 0]) - math.exp(-1.0)) <= 1e-3
    assert _raises(DomainError, solve_averaged, c, _cfg(), None, 0.0)


def test_averaged_shares_fbm_with_coupled():
    c = builtin_family("gaussian_decoupled")
    cfg = _cfg(N=16, particles=5, seed=9)
    slow, _ = simulate_coupled(c, ScaleParams(0.3, 0.1), cfg)
    avg = solve_averaged(c, cfg, delta=0.3)
    assert np.allclose(slow.values, avg.values, atol=1e-12)


def main():
    parser = argparse.ArgumentParser(description="Tests for mvfbm.multiscale")
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
