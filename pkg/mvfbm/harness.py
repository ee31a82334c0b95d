"""
Monte Carlo and scaling experiments. Each experiment is a pure function of (config, seed) and returns
(table, summary): a pandas DataFrame with one row per rung and a JSON-ready dict.

Replicas are particles. R replicas are simulated as ceil(R / P) independent interacting ensembles of
P = cfg.particles members, seeded from SeedSequence(cfg.seed).spawn; batches may run on a thread pool
and are always reduced in batch order.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy import stats

from mvfbm.coefficients import CoefficientSet
from mvfbm.errors import DomainError
from mvfbm.fractional import CMControl
from mvfbm.ldp import RateResult, SkeletonProblem, energy, skeleton_solve
from mvfbm.multiscale import (
    AveragedDrift,
    ScaleParams,
    SimConfig,
    simulate_controlled,
    simulate_coupled,
    simulate_with_auxiliary,
    solve_averaged,
    solve_limit_ode,
)

_log = logging.getLogger(__name__)

Z95 = float(stats.norm.ppf(0.975))
LOW_HITS = 20
CI_BASIS = "particles treated as independent; mean-field interaction correlates them, so intervals are nominal"


@dataclass(frozen=True)
class LadderSpec:
    """delta rungs with eps = eps_power-th power of delta unless explicit eps values are given."""

    deltas: tuple = (0.5, 0.25, 0.125)
    eps_power: float = 1.5
    eps: Optional[tuple] = None
    replicas: int = 2000
    blocks: tuple = ()

    def __post_init__(self):
        d = np.asarray(self.deltas, dtype=float)
        if d.size < 1 or np.any(d <= 0):
            raise DomainError("ladder needs at least one positive delta")
        if self.eps is not None and len(self.eps) != d.size:
            raise DomainError(f"ladder has {d.size} deltas but {len(self.eps)} eps values")
        if np.any(np.diff(d) >= 0):
            raise DomainError("scale parameters: delta must be strictly decreasing along the ladder")
        ratios = np.asarray(self.eps_values(), dtype=float) / d
        if np.any(ratios <= 0) or np.any(np.diff(ratios) >= 0):
            raise DomainError("scale parameters: eps/delta must be strictly decreasing along the ladder")
        if self.replicas < 1:
            raise DomainError(f"replicas must be positive, got {self.replicas}")

    def eps_values(self) -> tuple:
        if self.eps is not None:
            return tuple(float(e) for e in self.eps)
        return tuple(float(delta) ** self.eps_power for delta in self.deltas)

    def scales(self) -> list[ScaleParams]:
        return [ScaleParams(float(d), e) for d, e in zip(self.deltas, self.eps_values())]


@dataclass(frozen=True)
class ProbabilityEstimate:
    p_hat: float
    ci_low: float
    ci_high: float
    replicas: int
    hits: int
    rare_floor: bool = False


def wilson_interval(hits: int, trials: int, z: float = Z95) -> tuple[float, float]:
    if trials < 1 or not 0 <= hits <= trials:
        raise DomainError(f"need 0 <= hits <= trials and trials >= 1, got {hits}/{trials}")
    p = hits / trials
    denom = 1.0 + z * z / trials
    centre = (p + z * z / (2 * trials)) / denom
    half = z * math.sqrt(p * (1 - p) / trials + z * z / (4 * trials * trials)) / denom
    return max(0.0, centre - half), min(1.0, centre + half)


def estimate_probability(hits: int, trials: int) -> ProbabilityEstimate:
    """Wilson 95% interval; zero hits get the one-sided bound 1 - 0.05^(1/R) and the rare-event flag."""
    if hits == 0:
        return ProbabilityEstimate(0.0, 0.0, 1.0 - 0.05 ** (1.0 / trials), trials, 0, True)
    lo, hi = wilson_interval(hits, trials)
    return ProbabilityEstimate(hits / trials, lo, hi, trials, hits)


def _seed_sequence(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    if isinstance(seed, np.random.Generator):
        raise DomainError("experiments need an integer seed or SeedSequence, not a Generator")
    return np.random.SeedSequence(seed)


def replica_batches(cfg: SimConfig, replicas: int) -> list[SimConfig]:
    """Per-batch configs: ceil(R / P) ensembles of P particles with spawned seeds."""
    count = max(1, math.ceil(replicas / cfg.particles))
    children = _seed_sequence(cfg.seed).spawn(count)
    return [replace(cfg, seed=child) for child in children]


def _map_batches(fn: Callable[[SimConfig], np.ndarray], batches: list[SimConfig], workers: int) -> np.ndarray:
    if workers > 1 and len(batches) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(fn, batches))
    else:
        parts = [fn(b) for b in batches]
    return np.concatenate(parts, axis=0)


def _mean_se(samples: np.ndarray) -> tuple[float, float]:
    n = samples.size
    mean = float(np.mean(samples))
    se = float(np.std(samples, ddof=1) / math.sqrt(n)) if n > 1 else math.inf
    return mean, se


def trend_decreasing(means: Sequence[float], ses: Sequence[float], z: float = Z95) -> tuple[bool, bool]:
    """(non-increasing within overlapping CIs, strictly decreasing point estimates) along the sequence."""
    within = all(b <= a + z * math.hypot(sa, sb) for a, b, sa, sb in zip(means, means[1:], ses, ses[1:]))
    strict = all(b < a for a, b in zip(means, means[1:]))
    return bool(within), bool(strict)


# --- exit probabilities and LDP scaling ------------------------------------------------------


def mc_exit_probability(
    c: CoefficientSet, ladder: LadderSpec, r: float, cfg: SimConfig, workers: int = 1
) -> pd.DataFrame:
    """
    P(sup_t |X_t - X0_t| >= r) per rung, counted over particles, with Wilson CIs.
    Every particle of every batch counts as one replica, so the intervals assume independence; the
    ci_basis column says so in the output.
    """
    if r < 0:
        raise DomainError(f"exit radius must be non-negative, got {r}")
    limit = solve_limit_ode(c, cfg)
    rows = []
    for sp in ladder.scales():

        def exits(batch_cfg, sp=sp):
            slow, _ = simulate_coupled(c, sp, batch_cfg)
            return np.sqrt(slow.sup_distance_sq(limit)) >= r

        hits_arr = _map_batches(exits, replica_batches(cfg, ladder.replicas), workers)
        est = estimate_probability(int(hits_arr.sum()), int(hits_arr.size))
        if est.rare_floor:
            _log.warning("delta=%g: no exits in %d replicas (rare-event floor)", sp.delta, est.replicas)
        rows.append({
            "delta": sp.delta,
            "eps": sp.eps,
            "replicas": est.replicas,
            "hits": est.hits,
            "p_hat": est.p_hat,
            "ci_low": est.ci_low,
            "ci_high": est.ci_high,
            "rare_floor": est.rare_floor,
            "low_hits": est.hits < LOW_HITS,
            "ci_basis": CI_BASIS,
        })
        _log.debug("delta=%g: %d/%d exits", sp.delta, est.hits, est.replicas)
    return pd.DataFrame(rows)


def ldp_slope_report(probabilities: pd.DataFrame, rate: Union[RateResult, float], H: float = 0.75) -> tuple[pd.DataFrame, dict]:
    """
    delta log p-hat per rung against -I. The gap is delta log p-hat + I; the rate is also recovered
    by regressing log p-hat on 1/delta. delta^(2H) log p-hat is reported for comparison.
    """
    I = float(rate.value if isinstance(rate, RateResult) else rate)
    df = probabilities[probabilities["p_hat"] > 0].sort_values("delta", ascending=False).reset_index(drop=True)
    df = df.assign(
        log_p=np.log(df["p_hat"].to_numpy(dtype=float)),
    )
    df = df.assign(
        delta_log_p=df["delta"] * df["log_p"],
        delta2H_log_p=df["delta"] ** (2.0 * H) * df["log_p"],
    )
    df = df.assign(gap=df["delta_log_p"] + I)
    summary = {"rate": I, "rungs": int(len(df)), "conclusive": bool(len(df) >= 3 and np.isfinite(I))}
    if len(df) == 0:
        summary.update(decreasing=False, gap_at_smallest=None, relative_gap=None, recovered_rate=None)
        return df, summary
    scaled = df["delta_log_p"].to_numpy()
    tol = 1e-12 * max(1.0, float(np.max(np.abs(scaled))))
    gap = float(df["gap"].iloc[-1])
    summary["decreasing"] = bool(np.all(np.diff(scaled) <= tol))
    summary["gap_at_smallest"] = gap
    summary["relative_gap"] = abs(gap) / I if I > 0 and np.isfinite(I) else None
    if len(df) >= 2:
        slope, _ = np.polyfit(1.0 / df["delta"].to_numpy(), df["log_p"].to_numpy(), 1)
        summary["recovered_rate"] = float(-slope)
    else:
        summary["recovered_rate"] = float(-scaled[-1])
    if not summary["conclusive"]:
        _log.info("ldp slope report inconclusive: %d usable rungs", len(df))
    return df, summary


# --- convergence experiments -----------------------------------------------------------------


def _slope(x: Sequence[float], y: Sequence[float]) -> float:
    slope, _ = np.polyfit(np.log(np.asarray(x, dtype=float)), np.log(np.asarray(y, dtype=float)), 1)
    return float(slope)


def increment_scaling_experiment(
    c: CoefficientSet, sp: ScaleParams, cfg: SimConfig, blocks: Sequence[float], replicas: int = 2000, workers: int = 1
) -> tuple[pd.DataFrame, dict]:
    """
    E|X_{(k+1)D} - X_{kD}|^2 averaged over whole blocks and particles, for each block length D,
    and the log-log slope in D.
    """
    if len(blocks) < 2:
        raise DomainError("increment scaling needs at least two block lengths")
    steps = [cfg.grid.steps_in(b) for b in blocks]

    def run(batch_cfg):
        slow, _ = simulate_coupled(c, sp, batch_cfg)
        return slow.values

    values = _map_batches(run, replica_batches(cfg, replicas), workers)
    rows = []
    for block, k in zip(blocks, steps):
        ends = values[:, k::k, :]
        starts = values[:, : ends.shape[1] * k : k, :]
        sq = np.sum((ends - starts) ** 2, axis=2).ravel()
        mean, se = _mean_se(sq)
        rows.append({"block": float(block), "steps": k, "mean_sq_increment": mean, "stderr": se})
    df = pd.DataFrame(rows)
    slope = _slope(df["block"], df["mean_sq_increment"])
    summary = {"slope": slope, "noise_exponent": 2.0 * cfg.H, "drift_exponent": 2.0, "replicas": int(values.shape[0])}
    return df, summary


def averaging_convergence_experiment(
    c: CoefficientSet,
    ladder: LadderSpec,
    cfg: SimConfig,
    reference: str = "averaged",
    delta: float = 1.0,
    eps_ladder: Sequence[float] = (0.1, 0.05, 0.025),
    bbar: Optional[AveragedDrift] = None,
    workers: int = 1,
) -> tuple[pd.DataFrame, dict]:
    """
    reference="averaged": E sup_t |X - Xbar|^2 at fixed delta along eps_ladder, Xbar the averaged
    equation driven by the same fBm. reference="limit": E sup_t |X - X0|^2 along the delta ladder with
    eps = eps(delta), X0 the limit ODE path.
    """
    bbar = bbar or AveragedDrift.for_coefficients(c)
    batches = replica_batches(cfg, ladder.replicas)
    if reference == "averaged":
        scales = [ScaleParams(delta, float(e)) for e in eps_ladder]
    elif reference == "limit":
        scales = ladder.scales()
        limit = solve_limit_ode(c, cfg, bbar)
    else:
        raise DomainError(f"reference must be 'averaged' or 'limit', got {reference!r}")

    rows = []
    for sp in scales:

        def gap(batch_cfg, sp=sp):
            slow, _ = simulate_coupled(c, sp, batch_cfg)
            if reference == "averaged":
                return slow.sup_distance_sq(solve_averaged(c, batch_cfg, bbar, delta=sp.delta))
            return slow.sup_distance_sq(limit)

        mean, se = _mean_se(_map_batches(gap, batches, workers))
        rows.append({"delta": sp.delta, "eps": sp.eps, "gap": mean, "stderr": se,
                     "ci_low": mean - Z95 * se, "ci_high": mean + Z95 * se})
        _log.debug("averaging gap delta=%g eps=%g: %.4g +- %.2g", sp.delta, sp.eps, mean, se)
    df = pd.DataFrame(rows)
    within, strict = trend_decreasing(df["gap"].tolist(), df["stderr"].tolist())
    return df, {"reference": reference, "decreasing_within_ci": within, "strictly_decreasing": strict}


def _block_for(delta: float, cfg: SimConfig) -> float:
    k = max(1, int(round(math.sqrt(delta) / cfg.grid.dt)))
    return k * cfg.grid.dt


ControlFamily = Union[CMControl, Callable[[float], CMControl]]


def controlled_convergence_experiment(
    c: CoefficientSet,
    ladder: LadderSpec,
    cfg: SimConfig,
    controls: ControlFamily,
    M: Optional[float] = None,
    workers: int = 1,
) -> tuple[pd.DataFrame, dict]:
    """
    E sup_t |X^{delta,eps,h} - Xbar^h|^2 along the ladder, Xbar^h the skeleton path. The block
    D = delta^(1/2) (rounded to the grid) drives the auxiliary column int E|Y - Ybar|^2 dt.
    """
    problem = SkeletonProblem.build(c, cfg.grid, cfg.x0, cfg.H)
    batches = replica_batches(cfg, ladder.replicas)
    weights = cfg.grid.trapezoid_weights()
    rows = []
    for sp in ladder.scales():
        h = controls(sp.delta) if callable(controls) else controls
        spent = energy(h)
        if M is not None and spent > M:
            raise DomainError(f"control at delta={sp.delta} has energy {spent:.4g} > M={M}")
        skeleton = skeleton_solve(problem, h)
        block = _block_for(sp.delta, cfg)

        def run(batch_cfg, sp=sp, h=h, block=block):
            slow, fast, aux = simulate_with_auxiliary(c, sp, batch_cfg, block, h)
            gap = slow.sup_distance_sq(skeleton)
            aux_err = np.sum(weights[None, :] * np.sum((fast.values - aux.values) ** 2, axis=2), axis=1)
            return np.column_stack([gap, aux_err])

        out = _map_batches(run, batches, workers)
        mean, se = _mean_se(out[:, 0])
        aux_mean, aux_se = _mean_se(out[:, 1])
        rows.append({"delta": sp.delta, "eps": sp.eps, "block": block, "energy": spent, "gap": mean,
                     "stderr": se, "aux_error": aux_mean, "aux_stderr": aux_se})
    df = pd.DataFrame(rows)
    within, strict = trend_decreasing(df["gap"].tolist(), df["stderr"].tolist())
    summary = {
        "decreasing_within_ci": within,
        "strictly_decreasing": strict,
        "max_energy": float(df["energy"].max()),
        "energy_gate": None if M is None else bool(df["energy"].max() <= M),
    }
    return df, summary


def auxiliary_error_experiment(
    c: CoefficientSet,
    ladder: LadderSpec,
    blocks: Sequence[float],
    cfg: SimConfig,
    h: Optional[CMControl] = None,
    workers: int = 1,
) -> tuple[pd.DataFrame, dict]:
    """
    int_0^T E|Y - Ybar|^2 dt on the (eps/delta, block) grid. Every cell reuses the same batch seeds.
    """
    batches = replica_batches(cfg, ladder.replicas)
    weights = cfg.grid.trapezoid_weights()
    rows = []
    for sp in ladder.scales():
        for block in blocks:

            def run(batch_cfg, sp=sp, block=block):
                _, fast, aux = simulate_with_auxiliary(c, sp, batch_cfg, block, h)
                return np.sum(weights[None, :] * np.sum((fast.values - aux.values) ** 2, axis=2), axis=1)

            mean, se = _mean_se(_map_batches(run, batches, workers))
            rows.append({"delta": sp.delta, "eps": sp.eps, "ratio": sp.ratio, "block": float(block),
                         "error": mean, "stderr": se})
    df = pd.DataFrame(rows)
    along_ratio = all(
        trend_decreasing(g.sort_values("ratio", ascending=False)["error"].tolist(),
                         g.sort_values("ratio", ascending=False)["stderr"].tolist())[0]
        for _, g in df.groupby("block")
    )
    along_block = all(
        trend_decreasing(g.sort_values("block", ascending=False)["error"].tolist(),
                         g.sort_values("block", ascending=False)["stderr"].tolist())[0]
        for _, g in df.groupby("ratio")
    )
    return df, {"monotone_in_ratio": bool(along_ratio), "monotone_in_block": bool(along_block)}


def moment_bound_experiment(
    c: CoefficientSet,
    ladder: LadderSpec,
    cfg: SimConfig,
    h: Optional[CMControl] = None,
    workers: int = 1,
) -> tuple[pd.DataFrame, dict]:
    """E sup_t |X|^2 and E int |Y|^2 dt of the (controlled) system along the ladder."""
    batches = replica_batches(cfg, ladder.replicas)
    weights = cfg.grid.trapezoid_weights()
    x0 = float(np.sum(np.asarray(cfg.x0, dtype=float) ** 2))
    y0 = float(np.sum(np.asarray(cfg.y0, dtype=float) ** 2))
    scale = 1.0 + x0 + y0
    rows = []
    for sp in ladder.scales():

        def run(batch_cfg, sp=sp):
            if h is None:
                slow, fast = simulate_coupled(c, sp, batch_cfg)
            else:
                slow, fast = simulate_controlled(c, sp, batch_cfg, h)
            occupation = np.sum(weights[None, :] * np.sum(fast.values**2, axis=2), axis=1)
            return np.column_stack([slow.sup_sq(), occupation])

        out = _map_batches(run, batches, workers)
        sx, sx_se = _mean_se(out[:, 0])
        sy, sy_se = _mean_se(out[:, 1])
        rows.append({"delta": sp.delta, "eps": sp.eps, "sup_slow_sq": sx, "sup_slow_stderr": sx_se,
                     "fast_occupation": sy, "fast_stderr": sy_se})
    df = pd.DataFrame(rows)
    summary = {
        "slow_ratio": float(df["sup_slow_sq"].max() / max(df["sup_slow_sq"].min(), 1e-300)),
        "fast_ratio": float(df["fast_occupation"].max() / max(df["fast_occupation"].min(), 1e-300)),
        "envelope_constant": float(max(df["sup_slow_sq"].max(), df["fast_occupation"].max()) / scale),
        "bounded": bool(np.all(np.isfinite(df[["sup_slow_sq", "fast_occupation"]].to_numpy()))),
    }
    return df, summary
