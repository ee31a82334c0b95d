"""
Slow-fast particle simulation: the coupled system, its controlled version, the frozen fast equation and
the averaged drift, the averaged equation, the deterministic limit ODE, and the Khasminskii block-frozen
fast process.

Slow:  dX = b(t, X, mu, Y) dt + sigma(t, mu) udot dt + delta^H sigma(t, mu) dB^H
Fast:  dY = f(t, X, mu, Y) / eps dt + g(t, X, mu, Y) vhat / sqrt(delta eps) dt + g(t, X, mu, Y) / sqrt(eps) dW
mu is the equal-weight empirical law of the (uncontrolled) slow particles at the start of each step.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Literal, Optional

import numpy as np
import pandas as pd
from scipy.interpolate import RegularGridInterpolator

from mvfbm.coefficients import CoefficientSet, EmpiricalMeasure
from mvfbm.errors import BlowUpError, DomainError
from mvfbm.fractional import (
    FBM_METHODS,
    CMControl,
    Path,
    SeedLike,
    TimeGrid,
    apply_Kdot,
    as_rng,
    check_hurst,
    fbm_increments,
    cm_norm,
    in_level_set,
)

_log = logging.getLogger(__name__)

Companion = Literal["shared", "independent"]
STABILITY_FACTOR = 10.0


@dataclass(frozen=True)
class ScaleParams:
    delta: float
    eps: float

    def __post_init__(self):
        if not (self.delta > 0 and self.eps > 0):
            raise DomainError(f"scale parameters must be positive, got delta={self.delta}, eps={self.eps}")

    @property
    def ratio(self) -> float:
        return self.eps / self.delta


def stable_substeps(grid: TimeGrid, eps: float) -> int:
    """Smallest S with dt / S <= eps / 10."""
    return max(1, math.ceil(STABILITY_FACTOR * grid.dt / eps - 1e-9))


@dataclass(frozen=True)
class SimConfig:
    grid: TimeGrid
    H: float = 0.75
    particles: int = 1000
    substeps: Optional[int] = None
    seed: SeedLike = 0
    x0: float | tuple = 0.0
    y0: float | tuple = 0.0
    method: str = "cholesky"

    def __post_init__(self):
        check_hurst(self.H, allow_half=True)
        if self.particles < 1:
            raise DomainError(f"need at least one particle, got {self.particles}")
        if self.method not in FBM_METHODS:
            raise DomainError(f"unknown fBm method {self.method!r}; choose from {FBM_METHODS}")
        if self.substeps is not None and self.substeps < 1:
            raise DomainError(f"substeps must be positive, got {self.substeps}")

    def resolve_substeps(self, eps: float) -> int:
        if self.substeps is None:
            return stable_substeps(self.grid, eps)
        if self.grid.dt / self.substeps > eps / STABILITY_FACTOR * (1 + 1e-9):
            raise DomainError(
                f"fast step dt/S = {self.grid.dt / self.substeps:.3g} exceeds eps/{STABILITY_FACTOR:g} = "
                f"{eps / STABILITY_FACTOR:.3g}; use at least {stable_substeps(self.grid, eps)} substeps"
            )
        return self.substeps

    def initial(self, value, dim: int) -> np.ndarray:
        arr = np.broadcast_to(np.asarray(value, dtype=float), (dim,))
        return np.tile(arr, (self.particles, 1))


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """values[p, k] is particle p at node t_k."""

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 3 or self.values.shape[1] != self.grid.N + 1:
            raise DomainError(f"ensemble needs shape (P, {self.grid.N + 1}, d), got {self.values.shape}")

    @property
    def count(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[2]

    def path(self, i: int) -> Path:
        return Path(self.grid, self.values[i])

    def mean_path(self) -> Path:
        return Path(self.grid, self.values.mean(axis=0))

    def terminal(self) -> np.ndarray:
        return self.values[:, -1, :]

    def measure_at(self, k: int) -> EmpiricalMeasure:
        return EmpiricalMeasure(self.values[:, k, :])

    def sup_sq(self) -> np.ndarray:
        """sup_t |X_t|^2 per particle."""
        return np.max(np.sum(self.values**2, axis=2), axis=1)

    def sup_distance_sq(self, other) -> np.ndarray:
        """sup_t |X_t - Z_t|^2 per particle; other is an ensemble or a single Path."""
        ref = other.values if isinstance(other, PathEnsemble) else other.values[None, :, :]
        return np.max(np.sum((self.values - ref) ** 2, axis=2), axis=1)

    def summary_frame(self, prefix: str = "x") -> pd.DataFrame:
        """Empirical-law summaries per node: mean per coordinate and second moment."""
        means = self.values.mean(axis=0)
        df = pd.DataFrame(means, columns=[f"mean_{prefix}_{i + 1}" for i in range(self.dim)])
        df.insert(0, "t", self.grid.nodes)
        df["second_moment"] = np.mean(np.sum(self.values**2, axis=2), axis=0)
        return df


# --- coupled / controlled engine --------------------------------------------------------------


def _fast_substeps(
    c: CoefficientSet,
    t: float,
    x: np.ndarray,
    mu: EmpiricalMeasure,
    y: np.ndarray,
    dW: np.ndarray,
    eps: float,
    ds: float,
    v: Optional[np.ndarray] = None,
    v_scale: float = 0.0,
) -> np.ndarray:
    """Explicit Euler over the S rows of dW with (t, x, mu) held fixed."""
    noise_scale = 1.0 / math.sqrt(eps)
    for dw in dW:
        gy = c.g(t, x, mu, y)
        incr = c.f(t, x, mu, y) * (ds / eps)
        if v is not None:
            incr = incr + np.einsum("pij,j->pi", gy, v) * (ds * v_scale)
        y = y + incr + np.einsum("pij,pj->pi", gy, dw) * noise_scale
    return y


def _slow_step(c, t, x, mu, y, sig, dB, dt, noise_scale) -> np.ndarray:
    return x + c.b(t, x, mu, y) * dt + noise_scale * (dB @ sig.T)


@dataclass
class _Run:
    slow: np.ndarray
    fast: np.ndarray
    aux: Optional[np.ndarray] = None


def _check_finite(k: int, t: float, **arrays) -> None:
    for name, arr in arrays.items():
        if not np.all(np.isfinite(arr)):
            raise BlowUpError(step=k, time=t, what=name)


def _integrate(
    c: CoefficientSet,
    sp: ScaleParams,
    cfg: SimConfig,
    control: Optional[CMControl] = None,
    block: Optional[float] = None,
    companion: Companion = "shared",
) -> _Run:
    c.check_shapes()
    grid = cfg.grid
    N, dt, P, n, m = grid.N, grid.dt, cfg.particles, c.n, c.m
    S = cfg.resolve_substeps(sp.eps)
    ds = dt / S
    rng = as_rng(cfg.seed)
    dB = fbm_increments(grid, cfg.H, P, n, rng, cfg.method)
    noise_scale = sp.delta**cfg.H

    X, Y = cfg.initial(cfg.x0, n), cfg.initial(cfg.y0, m)
    slow = np.empty((P, N + 1, n))
    fast = np.empty((P, N + 1, m))
    slow[:, 0], fast[:, 0] = X, Y

    udot = vhat = None
    v_scale = 0.0
    Xc, Yc, comp_rng, dBc = X, Y, None, dB
    if control is not None:
        if control.grid != grid:
            raise DomainError("control must live on the simulation grid")
        if control.uhat.dim != n or (control.vhat is not None and control.vhat.dim != m):
            raise DomainError(f"control dimensions must be (n={n}, m={m})")
        udot = apply_Kdot(control.uhat, cfg.H).values
        if control.vhat is not None:
            vhat = control.vhat.values
            v_scale = 1.0 / math.sqrt(sp.delta * sp.eps)
        Xc, Yc = X.copy(), Y.copy()
        if companion == "independent":
            comp_rng = rng.spawn(1)[0]
            dBc = fbm_increments(grid, cfg.H, P, n, comp_rng, cfg.method)
        elif companion != "shared":
            raise DomainError(f"companion must be 'shared' or 'independent', got {companion!r}")

    aux = None
    if block is not None:
        block_steps = grid.steps_in(block)
        Ybar = Y.copy()
        aux = np.empty((P, N + 1, m))
        aux[:, 0] = Ybar

    nodes = grid.nodes
    for k in range(N):
        t = nodes[k]
        mu = EmpiricalMeasure(Xc if control is not None else X)
        sig = c.sigma(t, mu)
        dW = rng.standard_normal((S, P, m)) * math.sqrt(ds)
        v = None if vhat is None else vhat[k]

        if block is not None and k % block_steps == 0:
            frozen = (t, X, mu)
        Y_next = _fast_substeps(c, t, X, mu, Y, dW, sp.eps, ds, v, v_scale)
        if block is not None:
            # Ybar carries no v-hat drift: only (t, X, mu) enter it, frozen at the block start
            Ybar = _fast_substeps(c, frozen[0], frozen[1], frozen[2], Ybar, dW, sp.eps, ds)
        X_next = _slow_step(c, t, X, mu, Y, sig, dB[:, k], dt, noise_scale)
        if udot is not None:
            X_next = X_next + (udot[k] @ sig.T) * dt

        if control is not None:
            dWc = dW if comp_rng is None else comp_rng.standard_normal((S, P, m)) * math.sqrt(ds)
            Yc_next = _fast_substeps(c, t, Xc, mu, Yc, dWc, sp.eps, ds)
            Xc = _slow_step(c, t, Xc, mu, Yc, sig, dBc[:, k], dt, noise_scale)
            Yc = Yc_next

        X, Y = X_next, Y_next
        _check_finite(k + 1, nodes[k + 1], slow=X, fast=Y)
        slow[:, k + 1], fast[:, k + 1] = X, Y
        if block is not None:
            _check_finite(k + 1, nodes[k + 1], auxiliary=Ybar)
            aux[:, k + 1] = Ybar
    _log.debug("integrated %d particles over %d steps (S=%d, delta=%g, eps=%g)", P, N, S, sp.delta, sp.eps)
    return _Run(slow, fast, aux)


def simulate_coupled(c: CoefficientSet, sp: ScaleParams, cfg: SimConfig) -> tuple[PathEnsemble, PathEnsemble]:
    """Euler-Maruyama for the interacting slow-fast system; deterministic in cfg.seed."""
    run = _integrate(c, sp, cfg)
    return PathEnsemble(cfg.grid, run.slow), PathEnsemble(cfg.grid, run.fast)


def _gate(h: CMControl, energy_bound: Optional[float]) -> None:
    if energy_bound is not None and not in_level_set(h, energy_bound):
        raise DomainError(f"control energy {0.5 * cm_norm(h):.6g} exceeds the level-set bound M={energy_bound:g}")


def simulate_controlled(
    c: CoefficientSet,
    sp: ScaleParams,
    cfg: SimConfig,
    h: CMControl,
    energy_bound: Optional[float] = None,
    companion: Companion = "shared",
) -> tuple[PathEnsemble, PathEnsemble]:
    """
    The controlled system, with its measure argument taken from an uncontrolled companion ensemble.
    companion="shared" drives the companion with the same noise, so h = 0 reproduces simulate_coupled.
    """
    _gate(h, energy_bound)
    run = _integrate(c, sp, cfg, control=h, companion=companion)
    return PathEnsemble(cfg.grid, run.slow), PathEnsemble(cfg.grid, run.fast)


def simulate_with_auxiliary(
    c: CoefficientSet,
    sp: ScaleParams,
    cfg: SimConfig,
    block: float,
    h: Optional[CMControl] = None,
    energy_bound: Optional[float] = None,
) -> tuple[PathEnsemble, PathEnsemble, PathEnsemble]:
    """(slow, fast, block-frozen fast) driven by one set of noises."""
    if h is not None:
        _gate(h, energy_bound)
    run = _integrate(c, sp, cfg, control=h, block=block)
    grid = cfg.grid
    return PathEnsemble(grid, run.slow), PathEnsemble(grid, run.fast), PathEnsemble(grid, run.aux)


def khasminskii_auxiliary(
    c: CoefficientSet,
    sp: ScaleParams,
    cfg: SimConfig,
    block: float,
    h: Optional[CMControl] = None,
) -> PathEnsemble:
    """
    Fast process with (t, X, mu) frozen at block starts floor(t / block) * block and no v-hat drift.
    With block equal to the grid step and no control this is the Euler fast path itself.
    """
    return simulate_with_auxiliary(c, sp, cfg, block, h)[2]


# --- frozen equation and averaged drift ------------------------------------------------------


@dataclass(frozen=True)
class FrozenConfig:
    horizon: float = 20.0
    dt: float = 0.005
    chains: int = 64
    burn_in: float = 0.25
    seed: SeedLike = 0
    y0: Optional[float | tuple] = None

    def __post_init__(self):
        if not (self.horizon > 0 and self.dt > 0 and self.chains >= 2):
            raise DomainError("frozen run needs horizon > 0, dt > 0 and at least two chains")
        if not 0.0 <= self.burn_in < 1.0:
            raise DomainError(f"burn_in must lie in [0, 1), got {self.burn_in}")

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.horizon, max(1, int(round(self.horizon / self.dt))))


def frozen_simulate(
    c: CoefficientSet, t: float, x, mu: EmpiricalMeasure, cfg: FrozenConfig = FrozenConfig()
) -> PathEnsemble:
    """Independent chains of dY = f(t,x,mu,Y) ds + g(t,x,mu,Y) dW with (t, x, mu) frozen."""
    grid = cfg.grid
    P, m = cfg.chains, c.m
    xs = np.tile(np.broadcast_to(np.asarray(x, dtype=float), (c.n,)), (P, 1))
    y = np.tile(np.broadcast_to(np.asarray(0.0 if cfg.y0 is None else cfg.y0, dtype=float), (m,)), (P, 1))
    rng = as_rng(cfg.seed)
    out = np.empty((P, grid.N + 1, m))
    out[:, 0] = y
    sq = math.sqrt(grid.dt)
    for k in range(grid.N):
        dW = rng.standard_normal((1, P, m)) * sq
        y = _fast_substeps(c, t, xs, mu, y, dW, 1.0, grid.dt)
        _check_finite(k + 1, grid.nodes[k + 1], frozen=y)
        out[:, k + 1] = y
    return PathEnsemble(grid, out)


def estimate_bbar(
    c: CoefficientSet,
    t: float,
    x,
    mu: EmpiricalMeasure,
    cfg: FrozenConfig = FrozenConfig(),
    burn_in: Optional[float] = None,
    return_stderr: bool = False,
):
    """
    Ergodic average of b(t, x, mu, Y_s) over the frozen chains after the burn-in prefix.
    With return_stderr, also returns the standard error across chain means.
    """
    burn_in = cfg.burn_in if burn_in is None else burn_in
    if not 0.0 <= burn_in < 1.0:
        raise DomainError(f"burn_in must lie in [0, 1), got {burn_in}")
    ens = frozen_simulate(c, t, x, mu, cfg)
    start = int(math.floor(burn_in * ens.grid.N))
    ys = ens.values[:, start + 1 :, :]
    P, L, m = ys.shape
    xs = np.tile(np.broadcast_to(np.asarray(x, dtype=float), (c.n,)), (P * L, 1))
    vals = c.b(t, xs, mu, ys.reshape(P * L, m)).reshape(P, L, c.n)
    chain_means = vals.mean(axis=1)
    estimate = chain_means.mean(axis=0)
    if not return_stderr:
        return estimate
    return estimate, chain_means.std(axis=0, ddof=1) / math.sqrt(P)


@dataclass(frozen=True)
class BbarLattice:
    """Interpolation lattice in (t, x, mean(mu)) for scalar slow states."""

    t_points: tuple = (0.0, 1.0)
    x_points: tuple = tuple(np.linspace(-3.0, 3.0, 13))
    m_points: tuple = tuple(np.linspace(-3.0, 3.0, 7))

    def __post_init__(self):
        for name in ("t_points", "x_points", "m_points"):
            pts = np.asarray(getattr(self, name), dtype=float)
            if pts.size < 2 or np.any(np.diff(pts) <= 0):
                raise DomainError(f"{name} needs at least two strictly increasing points")


class AveragedDrift:
    """
    bbar(t, x[P,n], mu) -> [P,n], with a Jacobian in x at fixed (t, mu).
    Built from an exact family formula, a memoized frozen-chain lattice (n = 1), or per-call estimation.
    """

    FD_STEP = 1e-6

    def __init__(self, fn: Callable, jac: Optional[Callable] = None, source: str = "exact"):
        self._fn = fn
        self._jac = jac
        self.source = source

    def __call__(self, t: float, x: np.ndarray, mu: EmpiricalMeasure) -> np.ndarray:
        return self._fn(t, x, mu)

    def jacobian(self, t: float, x: np.ndarray, mu: EmpiricalMeasure) -> np.ndarray:
        """d bbar / dx at a single state x[n]; central differences unless an exact Jacobian was given."""
        x = np.asarray(x, dtype=float)
        if self._jac is not None:
            return self._jac(t, x, mu)
        n = x.size
        step = self.FD_STEP * max(1.0, float(np.max(np.abs(x))))
        probes = np.vstack([x + step * np.eye(n), x - step * np.eye(n)])
        vals = self._fn(t, probes, mu)
        return ((vals[:n] - vals[n:]) / (2.0 * step)).T

    @classmethod
    def exact(cls, c: CoefficientSet, jac: Optional[Callable] = None) -> "AveragedDrift":
        if c.bbar is None:
            raise DomainError(f"family {c.name} declares no exact averaged drift")
        return cls(c.bbar, jac, "exact")

    @classmethod
    def from_frozen(
        cls, c: CoefficientSet, cfg: FrozenConfig = FrozenConfig(), lattice: Optional[BbarLattice] = None
    ) -> "AveragedDrift":
        if c.n != 1:
            _log.info("slow dimension %d: averaged drift re-estimated on every call", c.n)

            def per_call(t, x, mu):
                return np.vstack([estimate_bbar(c, t, row, mu, cfg) for row in np.atleast_2d(x)])

            return cls(per_call, None, "frozen")
        lattice = lattice or BbarLattice()
        ts, xs, ms = (np.asarray(p, dtype=float) for p in (lattice.t_points, lattice.x_points, lattice.m_points))
        table = np.empty((ts.size, xs.size, ms.size))
        for i, t in enumerate(ts):
            for j, x in enumerate(xs):
                for l, mean in enumerate(ms):
                    table[i, j, l] = estimate_bbar(c, t, [x], EmpiricalMeasure.dirac([mean]), cfg)[0]
        _log.info("averaged drift tabulated on a %dx%dx%d lattice", ts.size, xs.size, ms.size)
        interp = RegularGridInterpolator((ts, xs, ms), table, bounds_error=False, fill_value=None)

        def lookup(t, x, mu):
            x = np.atleast_2d(x)
            pts = np.column_stack([np.full(x.shape[0], t), x[:, 0], np.full(x.shape[0], mu.mean()[0])])
            return interp(pts)[:, None]

        return cls(lookup, None, "lattice")

    @classmethod
    def for_coefficients(
        cls, c: CoefficientSet, cfg: Optional[FrozenConfig] = None, lattice: Optional[BbarLattice] = None
    ) -> "AveragedDrift":
        if c.bbar is not None:
            return cls.exact(c)
        return cls.from_frozen(c, cfg or FrozenConfig(), lattice)


# --- averaged equation and limit ODE ---------------------------------------------------------


def solve_averaged(
    c: CoefficientSet, cfg: SimConfig, bbar: Optional[AveragedDrift] = None, delta: float = 1.0
) -> PathEnsemble:
    """
    Euler for dXbar = bbar(t, Xbar, mu) dt + delta^H sigma(t, mu) dB^H. The fBm increments are drawn
    first from cfg.seed, so the same seed drives simulate_coupled with the same fBm.
    """
    if delta <= 0:
        raise DomainError(f"delta must be positive, got {delta}")
    bbar = bbar or AveragedDrift.for_coefficients(c)
    grid = cfg.grid
    rng = as_rng(cfg.seed)
    dB = fbm_increments(grid, cfg.H, cfg.particles, c.n, rng, cfg.method)
    noise_scale = delta**cfg.H
    X = cfg.initial(cfg.x0, c.n)
    out = np.empty((cfg.particles, grid.N + 1, c.n))
    out[:, 0] = X
    nodes = grid.nodes
    for k in range(grid.N):
        t = nodes[k]
        mu = EmpiricalMeasure(X)
        X = X + bbar(t, X, mu) * grid.dt + noise_scale * (dB[:, k] @ c.sigma(t, mu).T)
        _check_finite(k + 1, nodes[k + 1], averaged=X)
        out[:, k + 1] = X
    return PathEnsemble(grid, out)


RK4_NODES = (0.0, 0.5, 0.5, 1.0)
RK4_WEIGHTS = (1.0, 2.0, 2.0, 1.0)

StageRhs = Callable[[int, int, float, np.ndarray], np.ndarray]


def rk4_solve(grid: TimeGrid, x0: np.ndarray, rhs: StageRhs) -> tuple[np.ndarray, np.ndarray]:
    """
    Classical RK4 where rhs(k, j, t, state) is the derivative at stage j of step k.
    Returns node values [N+1, n] and stage states [N, 4, n].
    """
    x = np.asarray(x0, dtype=float).copy()
    N, h = grid.N, grid.dt
    values = np.empty((N + 1, x.size))
    stages = np.empty((N, 4, x.size))
    values[0] = x
    nodes = grid.nodes
    for k in range(N):
        t = nodes[k]
        s1 = x
        k1 = rhs(k, 0, t, s1)
        s2 = x + 0.5 * h * k1
        k2 = rhs(k, 1, t + 0.5 * h, s2)
        s3 = x + 0.5 * h * k2
        k3 = rhs(k, 2, t + 0.5 * h, s3)
        s4 = x + h * k3
        k4 = rhs(k, 3, t + h, s4)
        stages[k] = (s1, s2, s3, s4)
        x = x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        _check_finite(k + 1, nodes[k + 1], ode=x)
        values[k + 1] = x
    return values, stages


def limit_ode_stages(
    c: CoefficientSet, grid: TimeGrid, x0, bbar: Optional[AveragedDrift] = None
) -> tuple[Path, np.ndarray]:
    """The limit path and its RK4 stage states (each stage sees the Dirac law at its own state)."""
    bbar = bbar or AveragedDrift.for_coefficients(c)
    x0 = np.broadcast_to(np.asarray(x0, dtype=float), (c.n,))

    def rhs(k, j, t, s):
        return bbar(t, s[None, :], EmpiricalMeasure.dirac(s))[0]

    values, stages = rk4_solve(grid, x0, rhs)
    return Path(grid, values), stages


def solve_limit_ode(c: CoefficientSet, cfg: SimConfig, bbar: Optional[AveragedDrift] = None) -> Path:
    """RK4 for dX0 = bbar(t, X0, delta_{X0}) dt from cfg.x0."""
    return limit_ode_stages(c, cfg.grid, cfg.x0, bbar)[0]
