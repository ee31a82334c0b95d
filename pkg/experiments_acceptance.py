#!/usr/bin/env python3
"""
Acceptance experiments: each numbered check runs at desk scale and writes one CSV.
- 1) kernel-covariance identity, 2) fBm sampler covariance, 3) K_H operator consistency
- 4) frozen-chain averaging oracle, 5) rate-function oracle and adjoint gradient
- 6) increment scaling, 7) averaging / controlled trends, 8) LDP scaling, 9) auxiliary surface

Usage:
  python3 experiments_acceptance.py                 # full scale (slow: criterion 8 uses 1e5 replicas)
  python3 experiments_acceptance.py --quick         # smoke run, minutes
  python3 experiments_acceptance.py --only 1,5 --out results/
"""
import argparse
import logging
import math
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))

import numpy as np
import pandas as pd
from scipy import integrate, special

from mvfbm.coefficients import EmpiricalMeasure, builtin_family
from mvfbm.fractional import (
    CMControl,
    Density,
    Path as GridPath,
    TimeGrid,
    apply_K,
    apply_Kdot,
    covariance_R,
    fbm_paths,
    kernel_constants,
    kernel_covariance,
    kernel_K,
)
from mvfbm.harness import (
    LadderSpec,
    auxiliary_error_experiment,
    averaging_convergence_experiment,
    controlled_convergence_experiment,
    increment_scaling_experiment,
    ldp_slope_report,
    mc_exit_probability,
)
from mvfbm.ldp import RateConfig, SkeletonProblem, penalized_objective, rate_of_event, rate_of_path
from mvfbm.multiscale import FrozenConfig, ScaleParams, SimConfig, frozen_simulate
from mvfbm.storage import FLOAT_FORMAT

HURSTS = (0.6, 0.75, 0.9)
PROBE_TIMES = np.linspace(0.2, 1.0, 5)
SAMPLER_PAIRS = ((0.25, 0.25), (0.25, 0.75), (0.5, 1.0), (1.0, 1.0))
RATE_TARGETS = {
    "const": (lambda s: np.ones_like(s), 0.5),
    "linear": (lambda s: s, 1.0 / 6.0),
    "sine": (lambda s: np.sin(2.0 * math.pi * s), 0.25),
}
LDP_LADDER = (0.5, 0.35, 0.25)
TREND_LADDER = (0.5, 0.25, 0.125)
AVERAGING_EPS = (0.1, 0.05, 0.025)


def _scale(quick: bool, full, small):
    return small if quick else full


def experiment_kernel_identity(quick: bool) -> pd.DataFrame:
    rows = []
    for H in HURSTS:
        worst = 0.0
        for t in PROBE_TIMES:
            for s in PROBE_TIMES:
                worst = max(worst, abs(kernel_covariance(t, s, H) - covariance_R(t, s, H)))
        rows.append({"H": H, "max_abs_error": worst, "tol": 1e-4, "pass": worst <= 1e-4})
    return pd.DataFrame(rows)


def experiment_sampler_covariance(quick: bool, seed: int) -> pd.DataFrame:
    N, samples = 256, _scale(quick, 100_000, 10_000)
    grid = TimeGrid(1.0, N)
    rows = []
    for H in HURSTS:
        paths = fbm_paths(grid, H, samples, 1, seed)[:, :, 0]
        for t, s in SAMPLER_PAIRS:
            prod = paths[:, int(round(t * N))] * paths[:, int(round(s * N))]
            se = float(prod.std(ddof=1) / math.sqrt(samples))
            exact = covariance_R(t, s, H)
            err = float(prod.mean()) - exact
            rows.append({"H": H, "t": t, "s": s, "empirical": float(prod.mean()), "exact": exact,
                         "stderr": se, "z": err / se, "pass": abs(err) <= 3.0 * se})
    return pd.DataFrame(rows)


def _direct_K(uhat: Density, t: float, H: float) -> float:
    # int_0^t K_H(t,s) u-hat(s) ds cell by cell
    total, dt = 0.0, uhat.grid.dt
    for k in range(uhat.grid.N):
        lo, hi = k * dt, min((k + 1) * dt, t)
        if lo >= t:
            break
        val, _ = integrate.quad(lambda s: kernel_K(t, s, H), lo, hi, limit=100)
        total += uhat.values[k, 0] * val
    return total


def _constant_rate_gap(grid: TimeGrid, c: float, H: float) -> float:
    # K_H applied to the constant c is c C_H B(1-a, a) t^(a+1) / (a+1): compare both discrete rates to its cell means
    a = H - 0.5
    t = grid.nodes
    exact = c * kernel_constants(H).C_H * special.beta(1.0 - a, a) * np.diff(t ** (a + 1)) / ((a + 1) * grid.dt)
    const = Density.constant(grid, c)
    from_path = np.diff(apply_K(const, H).values[:, 0]) / grid.dt
    from_rates = apply_Kdot(const, H).values[:, 0]
    gap = np.maximum(np.abs(from_path - exact), np.abs(from_rates - exact))
    return float(np.sqrt(grid.dt * np.sum(gap**2)))


def experiment_operator_consistency(quick: bool, seed: int) -> pd.DataFrame:
    N = _scale(quick, 32, 16)
    grid = TimeGrid(1.0, N)
    rng = np.random.default_rng(seed)
    probes = (N // 4, N // 2, N)
    rows = []
    for i in range(_scale(quick, 10, 3)):
        uhat = Density(grid, rng.standard_normal((N, 1)))
        level = float(rng.standard_normal())
        for H in HURSTS:
            fast = apply_K(uhat, H).values[:, 0]
            direct = np.array([_direct_K(uhat, grid.nodes[k], H) for k in probes])
            sup = float(np.max(np.abs(fast[list(probes)] - direct)))
            l2 = _constant_rate_gap(grid, level, H)
            rows.append({"sample": i, "H": H, "sup_vs_quadrature": sup, "l2_derivative_gap": l2,
                         "pass": sup <= 1e-4 and l2 <= 1e-8})
        half = apply_K(uhat, 0.5).values[1:, 0]
        exact_half = np.cumsum(grid.dt * uhat.values[:, 0])
        rows.append({"sample": i, "H": 0.5, "sup_vs_quadrature": float(np.max(np.abs(half - exact_half))),
                     "l2_derivative_gap": 0.0, "pass": bool(np.array_equal(half, exact_half))})
    return pd.DataFrame(rows)


def experiment_frozen_oracle(quick: bool, seed: int) -> pd.DataFrame:
    beta, c1, c2, gamma0 = 1.0, 1.0, 0.5, 0.5
    c = builtin_family("ou_frozen_gaussian", beta=beta, c1=c1, c2=c2, gamma0=gamma0)
    chains = _scale(quick, 256, 64)
    cfg = FrozenConfig(horizon=_scale(quick, 40.0, 20.0), dt=0.005, chains=chains, seed=seed)
    rows = []
    for x, m in ((0.0, 0.0), (1.0, -0.5), (-0.7, 1.2)):
        mu = EmpiricalMeasure.dirac([m])
        ens = frozen_simulate(c, 0.0, [x], mu, cfg)
        start = int(math.floor(cfg.burn_in * ens.grid.N)) + 1
        ys = ens.values[:, start:, 0]
        mean_exact = c1 * x + c2 * m
        # Euler-Maruyama stationary variance of the OU chain
        var_exact = gamma0**2 / (2.0 * beta - beta * beta * cfg.dt)
        for stat, per_chain, exact in (
            ("mean", ys.mean(axis=1), mean_exact),
            ("second_moment", (ys**2).mean(axis=1), mean_exact**2 + var_exact),
        ):
            est = float(per_chain.mean())
            se = float(per_chain.std(ddof=1) / math.sqrt(chains))
            rows.append({"x": x, "mean_mu": m, "statistic": stat, "estimate": est, "exact": exact,
                         "stderr": se, "samples": ys.size, "pass": abs(est - exact) <= 3.0 * se})
    return pd.DataFrame(rows)


def experiment_rate_oracle(quick: bool, seed: int) -> pd.DataFrame:
    c = builtin_family("gaussian_decoupled")
    H = 0.75
    rows = []
    grid = TimeGrid(1.0, _scale(quick, 128, 64))
    p = SkeletonProblem.build(c, grid, 0.0, H)
    for name, (fn, exact) in RATE_TARGETS.items():
        target = apply_K(Density.from_function(grid, lambda s: fn(s)[:, None]), H)
        res = rate_of_path(p, target, RateConfig())
        rel = abs(res.value - exact) / exact
        rows.append({"check": f"rate_{name}", "value": res.value, "exact": exact, "rel_error": rel,
                     "converged": res.converged, "pass": bool(res.converged and rel <= 1e-3)})

    small = TimeGrid(1.0, 32)
    ps = SkeletonProblem.build(builtin_family("linear_meanfield"), small, 0.3, H)
    rng = np.random.default_rng(seed)
    target = GridPath(small, ps.limit.values + 0.1 * np.sin(np.pi * small.nodes)[:, None])
    uhat = Density(small, rng.standard_normal((32, 1)))
    lam, step = 10.0, 1e-6
    _, grad = penalized_objective(ps, target, uhat, lam)
    worst = 0.0
    for j in rng.choice(32, size=_scale(quick, 32, 8), replace=False):
        bump = np.zeros((32, 1))
        bump[j, 0] = step
        up, _ = penalized_objective(ps, target, Density(small, uhat.values + bump), lam)
        down, _ = penalized_objective(ps, target, Density(small, uhat.values - bump), lam)
        fd = (up - down) / (2.0 * step)
        worst = max(worst, abs(fd - grad.values[j, 0]) / max(abs(fd), 1e-8))
    rows.append({"check": "adjoint_vs_fd", "value": worst, "exact": 0.0, "rel_error": worst,
                 "converged": True, "pass": worst <= 1e-5})
    return pd.DataFrame(rows)


def experiment_increment_scaling(quick: bool, seed: int) -> pd.DataFrame:
    N = 256
    grid = TimeGrid(1.0, N)
    blocks = [grid.dt * 2**k for k in range(1, 6)]
    replicas = _scale(quick, 4000, 500)
    cases = (
        ("noise", builtin_family("gaussian_decoupled"), 0.0, (2 * 0.75 - 0.3, 2 * 0.75 + 0.3)),
        ("drift", builtin_family("linear_meanfield", a3=0.0, s0=0.0, s1=0.0), 1.0, (1.8, 2.2)),
    )
    rows = []
    for name, c, x0, (lo, hi) in cases:
        cfg = SimConfig(grid, H=0.75, particles=min(500, replicas), seed=seed, x0=x0)
        _, summary = increment_scaling_experiment(c, ScaleParams(1.0, 0.5), cfg, blocks, replicas)
        rows.append({"case": name, "slope": summary["slope"], "low": lo, "high": hi,
                     "pass": lo <= summary["slope"] <= hi})
    return pd.DataFrame(rows)


def experiment_trends(quick: bool, seed: int) -> pd.DataFrame:
    c = builtin_family("linear_meanfield")
    grid = TimeGrid(1.0, _scale(quick, 64, 32))
    P, R = _scale(quick, 1000, 100), _scale(quick, 2000, 200)
    ladder = LadderSpec(TREND_LADDER, 1.5, None, R)
    rows = []
    for particles in (P, 2 * P):
        cfg = SimConfig(grid, particles=particles, seed=seed, x0=0.5)
        df, summary = averaging_convergence_experiment(c, ladder, cfg, "averaged", 1.0, AVERAGING_EPS)
        rows.append({"experiment": "averaging", "particles": particles, "gaps": df["gap"].tolist(),
                     "pass": summary["decreasing_within_ci"] and summary["strictly_decreasing"]})
    a, b = np.asarray(rows[0]["gaps"]), np.asarray(rows[1]["gaps"])
    rel = float(np.max(np.abs(b - a) / a))
    rows.append({"experiment": "particle_doubling", "particles": 2 * P, "gaps": [rel], "pass": rel < 0.10})

    M = 0.5
    uhat = Density.constant(grid, 0.5, c.n)
    h = CMControl(uhat, Density.zeros(grid, c.m))
    cfg = SimConfig(grid, particles=P, seed=seed, x0=0.5)
    df, summary = controlled_convergence_experiment(c, ladder, cfg, h, M)
    rows.append({"experiment": "controlled", "particles": P, "gaps": df["gap"].tolist(),
                 "pass": summary["decreasing_within_ci"] and summary["strictly_decreasing"] and summary["energy_gate"]})
    return pd.DataFrame(rows)


def experiment_ldp_scaling(quick: bool, seed: int) -> tuple[pd.DataFrame, dict]:
    c = builtin_family("gaussian_decoupled")
    H, r = 0.75, 1.0
    grid = TimeGrid(1.0, _scale(quick, 64, 32))
    R = _scale(quick, 100_000, 5_000)
    cfg = SimConfig(grid, H=H, particles=min(R, 5000), seed=seed)
    probs = mc_exit_probability(c, LadderSpec(LDP_LADDER, 1.5, None, R), r, cfg)
    rate = rate_of_event(SkeletonProblem.build(c, grid, 0.0, H), r)
    table, summary = ldp_slope_report(probs, rate, H)
    rel = summary.get("relative_gap")
    summary["pass"] = bool(summary.get("decreasing") and rel is not None and rel <= 0.15)
    return table, summary


def experiment_auxiliary_surface(quick: bool, seed: int) -> tuple[pd.DataFrame, dict]:
    c = builtin_family("linear_meanfield")
    grid = TimeGrid(1.0, _scale(quick, 64, 32))
    R = _scale(quick, 2000, 200)
    cfg = SimConfig(grid, particles=min(R, 1000), seed=seed, x0=0.5)
    blocks = [grid.dt * 8, grid.dt * 4, grid.dt * 2]
    table, summary = auxiliary_error_experiment(c, LadderSpec(TREND_LADDER, 1.5, None, R), blocks, cfg)
    summary["pass"] = summary["monotone_in_ratio"] and summary["monotone_in_block"]
    return table, summary


def _save(df: pd.DataFrame, out: Path, name: str) -> None:
    df.to_csv(out / name, index=False, float_format=FLOAT_FORMAT)


def main():
    parser = argparse.ArgumentParser(description="Acceptance experiments for the fBm multi-scale toolkit")
    parser.add_argument("--quick", action="store_true", help="Desk-scale smoke sizes")
    parser.add_argument("--only", default="", help="Comma-separated criterion numbers (default: all)")
    parser.add_argument("--seed", type=int, default=20240601, help="Base seed")
    parser.add_argument("--out", default="acceptance", help="Output directory")
    parser.add_argument("--verbose", "-v", action="store_true", help="Verbose logging")
    args = parser.parse_args()

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    only = {int(v) for v in args.only.split(",") if v.strip()}
    q, seed = args.quick, args.seed
    summary_rows = []

    def record(n: int, title: str, passed: bool, started: float):
        summary_rows.append({"criterion": n, "title": title, "pass": bool(passed),
                             "seconds": round(time.perf_counter() - started, 1)})

    tabular = (
        (1, "Kernel-covariance identity", "kernel_identity.csv", lambda: experiment_kernel_identity(q)),
        (2, "fBm sampler covariance", "sampler_covariance.csv", lambda: experiment_sampler_covariance(q, seed)),
        (3, "Operator consistency", "operator_consistency.csv", lambda: experiment_operator_consistency(q, seed)),
        (4, "Frozen-chain averaging oracle", "frozen_oracle.csv", lambda: experiment_frozen_oracle(q, seed)),
        (5, "Rate-function oracle", "rate_oracle.csv", lambda: experiment_rate_oracle(q, seed)),
        (6, "Increment scaling", "increment_scaling.csv", lambda: experiment_increment_scaling(q, seed)),
        (7, "Averaging and controlled trends", "trends.csv", lambda: experiment_trends(q, seed)),
    )
    for n, title, fname, fn in tabular:
        if only and n not in only:
            continue
        print(f"\n=== {n}) {title} ===\n")
        started = time.perf_counter()
        df = fn()
        print(df.to_string(index=False))
        _save(df, out, fname)
        record(n, title, bool(df["pass"].all()), started)

    for n, title, fname, fn in (
        (8, "LDP scaling", "ldp_scaling.csv", lambda: experiment_ldp_scaling(q, seed)),
        (9, "Khasminskii auxiliary surface", "auxiliary_surface.csv", lambda: experiment_auxiliary_surface(q, seed)),
    ):
        if only and n not in only:
            continue
        print(f"\n=== {n}) {title} ===\n")
        started = time.perf_counter()
        df, summary = fn()
        print(df.to_string(index=False))
        print("  " + ", ".join(f"{k}={v}" for k, v in summary.items()))
        _save(df, out, fname)
        record(n, title, summary["pass"], started)

    summary_df = pd.DataFrame(summary_rows)
    if summary_df.empty:
        print(f"No criteria selected by --only {args.only!r}.")
        return 1
    print("\n=== Summary ===\n")
    print(summary_df.to_string(index=False))
    _save(summary_df, out, "summary.csv")
    print(f"\nDone. CSVs in {out}/")
    return 0 if summary_df["pass"].all() else 1


if __name__ == "__main__":
    sys.exit(main())
