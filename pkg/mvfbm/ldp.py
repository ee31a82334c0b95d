"""
Skeleton dynamics, Cameron-Martin energies and variational evaluation of the rate function.

The skeleton is dX = bbar(t, X, delta_{X0_t}) dt + sigma(t, delta_{X0_t}) udot dt with udot = K_H-dot u-hat,
solved by the same RK4 as the limit ODE X0; stage j of step k sees the Dirac law at X0's own stage state.
Rates are minima of energy(h) = 1/2 ||h||^2 over controls whose skeleton hits a target path or leaves a tube
around X0. The optimizer works in z = sqrt(dt) u-hat, where the energy is 1/2 |z|^2, and uses an augmented
Lagrangian with L-BFGS-B; gradients are the discrete RK4 adjoint composed with the transpose of K_H-dot.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence

import numpy as np
from scipy import optimize, special

from mvfbm.coefficients import CoefficientSet, EmpiricalMeasure
from mvfbm.errors import DomainError
from mvfbm.fractional import (
    CMControl,
    Density,
    Path,
    SeedLike,
    TimeGrid,
    apply_Kdot,
    apply_Kstar,
    as_rng,
    check_hurst,
    cm_norm,
    in_level_set,
)
from mvfbm.multiscale import RK4_NODES, AveragedDrift, limit_ode_stages, rk4_solve

_log = logging.getLogger(__name__)

RK4_STAGE_WEIGHTS = np.array([1.0, 2.0, 2.0, 1.0]) / 6.0


@dataclass(frozen=True, eq=False)
class SkeletonProblem:
    coefficients: CoefficientSet
    grid: TimeGrid
    x0: np.ndarray
    H: float
    bbar: AveragedDrift
    limit: Path
    limit_stages: np.ndarray
    measures: tuple = field(repr=False)
    sigmas: np.ndarray = field(repr=False)

    @classmethod
    def build(
        cls, c: CoefficientSet, grid: TimeGrid, x0=0.0, H: float = 0.75, bbar: Optional[AveragedDrift] = None
    ) -> "SkeletonProblem":
        H = check_hurst(H, allow_half=True)
        bbar = bbar or AveragedDrift.for_coefficients(c)
        x0 = np.broadcast_to(np.asarray(x0, dtype=float), (c.n,)).copy()
        limit, stages = limit_ode_stages(c, grid, x0, bbar)
        nodes = grid.nodes
        measures = tuple(tuple(EmpiricalMeasure.dirac(stages[k, j]) for j in range(4)) for k in range(grid.N))
        sigmas = np.empty((grid.N, 4, c.n, c.n))
        for k in range(grid.N):
            for j in range(4):
                sigmas[k, j] = c.sigma(nodes[k] + RK4_NODES[j] * grid.dt, measures[k][j])
        return cls(c, grid, x0, H, bbar, limit, stages, measures, sigmas)

    @property
    def n(self) -> int:
        return self.coefficients.n

    def control_rates(self, uhat: Density) -> np.ndarray:
        if uhat.grid != self.grid or uhat.dim != self.n:
            raise DomainError(f"control must be an {self.n}-dimensional density on the problem grid")
        return apply_Kdot(uhat, self.H).values


def skeleton_solve(p: SkeletonProblem, h: CMControl) -> Path:
    """G0 applied to the control: the skeleton path. vhat does not enter."""
    udot = p.control_rates(h.uhat)

    def rhs(k, j, t, s):
        return p.bbar(t, s[None, :], p.measures[k][j])[0] + p.sigmas[k, j] @ udot[k]

    values, _ = rk4_solve(p.grid, p.x0, rhs)
    return Path(p.grid, values)


def energy(h: CMControl) -> float:
    return 0.5 * cm_norm(h)


# --- adjoint machinery -----------------------------------------------------------------------


def _forward(p: SkeletonProblem, udot: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Skeleton node values and the bbar Jacobians at every RK4 stage."""
    jacs = np.empty((p.grid.N, 4, p.n, p.n))

    def rhs(k, j, t, s):
        mu = p.measures[k][j]
        jacs[k, j] = p.bbar.jacobian(t, s, mu)
        return p.bbar(t, s[None, :], mu)[0] + p.sigmas[k, j] @ udot[k]

    values, _ = rk4_solve(p.grid, p.x0, rhs)
    return values, jacs


def _adjoint(p: SkeletonProblem, jacs: np.ndarray, dJdX: np.ndarray) -> np.ndarray:
    """Reverse sweep of the RK4 recursion: dJ/d udot per cell given dJ/dX at the nodes."""
    h = p.grid.dt
    w = h * RK4_STAGE_WEIGHTS
    S = p.sigmas
    g_udot = np.empty((p.grid.N, p.n))
    lam = dJdX[-1].copy()
    for k in range(p.grid.N - 1, -1, -1):
        J = jacs[k]
        a4 = w[3] * lam
        gs = J[3].T @ a4
        gw = S[k, 3].T @ a4
        gx = gs.copy()
        a3 = w[2] * lam + h * gs
        gs = J[2].T @ a3
        gw += S[k, 2].T @ a3
        gx += gs
        a2 = w[1] * lam + 0.5 * h * gs
        gs = J[1].T @ a2
        gw += S[k, 1].T @ a2
        gx += gs
        a1 = w[0] * lam + 0.5 * h * gs
        gs = J[0].T @ a1
        gw += S[k, 0].T @ a1
        gx += gs
        g_udot[k] = gw
        lam = lam + gx + dJdX[k]
    return g_udot


class _Constraint(Protocol):
    def loss(self, X: np.ndarray, lam: float, nu) -> tuple[float, np.ndarray]: ...

    def residual(self, X: np.ndarray) -> float: ...

    def update(self, X: np.ndarray, lam: float, nu): ...

    def initial_multiplier(self): ...


def _objective(p: SkeletonProblem, uhat_vals: np.ndarray, constraint: _Constraint, lam: float, nu):
    """energy + constraint loss, and its gradient in u-hat."""
    uhat = Density(p.grid, uhat_vals)
    X, jacs = _forward(p, p.control_rates(uhat))
    loss, dJdX = constraint.loss(X, lam, nu)
    g_udot = _adjoint(p, jacs, dJdX)
    grad = p.grid.dt * uhat.values + apply_Kstar(Density(p.grid, g_udot), p.H).values
    return 0.5 * uhat.l2_squared() + loss, grad


@dataclass
class _PathConstraint:
    target: np.ndarray
    weights: np.ndarray

    def loss(self, X, lam, nu):
        e = X - self.target
        w = self.weights[:, None]
        value = float(np.sum(w * (nu * e + lam * e * e)))
        return value, w * (nu + 2.0 * lam * e)

    def residual(self, X):
        return float(np.max(np.abs(X - self.target)))

    def update(self, X, lam, nu):
        return nu + 2.0 * lam * (X - self.target)

    def initial_multiplier(self):
        return np.zeros_like(self.target)


@dataclass
class _NodeConstraint:
    """X_j - X0_j = r d at one exit node."""

    node: int
    goal: np.ndarray
    rows: int

    def loss(self, X, lam, nu):
        e = X[self.node] - self.goal
        dJdX = np.zeros((self.rows, e.size))
        dJdX[self.node] = nu + 2.0 * lam * e
        return float(nu @ e + lam * e @ e), dJdX

    def residual(self, X):
        return float(np.linalg.norm(X[self.node] - self.goal))

    def update(self, X, lam, nu):
        return nu + 2.0 * lam * (X[self.node] - self.goal)

    def initial_multiplier(self):
        return np.zeros_like(self.goal)


@dataclass
class _SoftExitConstraint:
    """
    tau log sum_k exp(|X_k - X0_k|^2 / tau) >= r^2 + tau log(N+1). The shift makes any feasible point
    satisfy sup_k |X_k - X0_k| >= r.
    """

    center: np.ndarray
    r: float
    tau: float

    def _smax(self, X):
        D = np.sum((X - self.center) ** 2, axis=1)
        smax = self.tau * special.logsumexp(D / self.tau)
        weights = special.softmax(D / self.tau)
        return smax, weights

    def _psi(self, smax):
        return self.r**2 + self.tau * math.log(self.center.shape[0]) - smax

    def loss(self, X, lam, nu):
        smax, weights = self._smax(X)
        active = max(0.0, nu + 2.0 * lam * self._psi(smax))
        value = (active**2 - nu**2) / (4.0 * lam)
        dJdX = -active * (2.0 * weights[:, None] * (X - self.center))
        return float(value), dJdX

    def residual(self, X):
        sup = float(np.max(np.linalg.norm(X - self.center, axis=1)))
        return max(0.0, self.r - sup)

    def update(self, X, lam, nu):
        smax, _ = self._smax(X)
        return max(0.0, nu + 2.0 * lam * self._psi(smax))

    def initial_multiplier(self):
        return 0.0


# --- rate optimization -----------------------------------------------------------------------


@dataclass(frozen=True)
class RateConfig:
    max_iter: int = 4000
    grad_tol: float = 1e-3
    path_tol: float = 1e-5
    penalties: tuple = (1e2, 1e3, 1e4, 1e5, 1e6)
    rounds: int = 6
    exit_candidates: int = 8
    refine_top: int = 2
    temperatures: tuple = (1e-1, 1e-2, 1e-3)
    workers: int = 1

    def __post_init__(self):
        if not self.penalties or min(self.penalties) <= 0:
            raise DomainError("penalty schedule must be a non-empty sequence of positive weights")
        if self.max_iter < 1 or self.rounds < 1 or self.exit_candidates < 1:
            raise DomainError("max_iter, rounds and exit_candidates must be positive")


@dataclass(frozen=True, eq=False)
class RateResult:
    value: float
    argmin: CMControl
    residual: float
    converged: bool
    iterations: int
    energy: float
    mode: str = "path"

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "residual": self.residual,
            "converged": self.converged,
            "iterations": self.iterations,
            "energy": self.energy,
            "mode": self.mode,
        }


def penalized_objective(
    p: SkeletonProblem, target: Path, uhat: Density, lam: float, nu: Optional[np.ndarray] = None
) -> tuple[float, Density]:
    """energy + sum_k w_k (<nu_k, e_k> + lam |e_k|^2), e = skeleton - target, with its u-hat gradient."""
    constraint = _PathConstraint(target.values, p.grid.trapezoid_weights())
    nu = constraint.initial_multiplier() if nu is None else np.asarray(nu, dtype=float).reshape(target.values.shape)
    value, grad = _objective(p, uhat.values, constraint, lam, nu)
    return value, Density(p.grid, grad)


def _solve_alm(
    p: SkeletonProblem, constraint: _Constraint, cfg: RateConfig, z0: Optional[np.ndarray] = None, mode: str = "path"
) -> RateResult:
    N, n, h = p.grid.N, p.n, p.grid.dt
    root_h = math.sqrt(h)
    z = np.zeros(N * n) if z0 is None else z0.copy()
    nu = constraint.initial_multiplier()
    iterations, resid, grad_norm = 0, math.inf, math.inf

    def fun(zv, lam, nu_):
        value, grad = _objective(p, zv.reshape(N, n) / root_h, constraint, lam, nu_)
        return value, grad.ravel() / root_h

    done = False
    for lam in cfg.penalties:
        for _ in range(cfg.rounds):
            res = optimize.minimize(
                fun,
                z,
                args=(lam, nu),
                jac=True,
                method="L-BFGS-B",
                options={"maxiter": cfg.max_iter, "ftol": 1e-15, "gtol": 1e-2 * cfg.grad_tol, "maxcor": 30},
            )
            z = res.x
            iterations += int(res.nit)
            grad_norm = float(np.max(np.abs(res.jac)))
            X, _ = _forward(p, p.control_rates(Density(p.grid, z.reshape(N, n) / root_h)))
            resid = constraint.residual(X)
            nu = constraint.update(X, lam, nu)
            _log.debug("penalty %.0e: residual %.3e, |grad| %.3e, nit %d", lam, resid, grad_norm, res.nit)
            if resid <= cfg.path_tol:
                done = True
                break
        if done:
            break

    uhat = Density(p.grid, z.reshape(N, n) / root_h)
    control = CMControl(uhat, Density.zeros(p.grid, p.coefficients.m))
    spent = energy(control)
    converged = bool(resid <= cfg.path_tol and grad_norm <= cfg.grad_tol and np.isfinite(spent))
    if not converged:
        _log.info("%s rate did not converge: residual %.3e, |grad| %.3e", mode, resid, grad_norm)
    return RateResult(
        value=spent if converged else math.inf,
        argmin=control,
        residual=resid,
        converged=converged,
        iterations=iterations,
        energy=spent,
        mode=mode,
    )


def rate_of_path(p: SkeletonProblem, target: Path, cfg: RateConfig = RateConfig()) -> RateResult:
    """
    inf { energy(h) : skeleton(h) = target }. A target that cannot be reached (including a wrong
    starting point) is reported as non-converged with value +inf.
    """
    if target.grid != p.grid or target.dim != p.n:
        raise DomainError("target must be an n-dimensional path on the problem grid")
    zero = CMControl(Density.zeros(p.grid, p.n), Density.zeros(p.grid, p.coefficients.m))
    start_gap = float(np.max(np.abs(target.values[0] - p.x0)))
    if start_gap > cfg.path_tol:
        _log.info("target starts %.3g away from x0: unreachable", start_gap)
        return RateResult(math.inf, zero, start_gap, False, 0, 0.0, "path")
    if float(np.max(np.abs(target.values - p.limit.values))) <= cfg.path_tol:
        return RateResult(0.0, zero, 0.0, True, 0, 0.0, "path")
    constraint = _PathConstraint(target.values, p.grid.trapezoid_weights())
    return _solve_alm(p, constraint, cfg, mode="path")


def _exit_starts(p: SkeletonProblem, cfg: RateConfig) -> list[tuple[int, np.ndarray]]:
    N, n = p.grid.N, p.n
    nodes = np.unique(np.round(np.linspace(1, N, min(cfg.exit_candidates, N))).astype(int))
    directions = [s * np.eye(n)[i] for i in range(n) for s in (1.0, -1.0)]
    return [(int(j), d) for j in nodes[::-1] for d in directions]


def rate_of_event(p: SkeletonProblem, r: float, cfg: RateConfig = RateConfig()) -> RateResult:
    """
    inf { energy(h) : sup_t |skeleton(h)_t - X0_t| >= r }. Single exit-node problems give the starts;
    the best ones are refined under the log-sum-exp relaxation of the sup at decreasing temperature.
    """
    if r < 0:
        raise DomainError(f"exit radius must be non-negative, got {r}")
    zero = CMControl(Density.zeros(p.grid, p.n), Density.zeros(p.grid, p.coefficients.m))
    if r == 0:
        return RateResult(0.0, zero, 0.0, True, 0, 0.0, "event")
    center = p.limit.values

    def run_start(start):
        j, d = start
        return _solve_alm(p, _NodeConstraint(j, center[j] + r * d, p.grid.N + 1), cfg, mode="event")

    starts = _exit_starts(p, cfg)
    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(run_start, starts))
    else:
        results = [run_start(s) for s in starts]
    converged = sorted((res for res in results if res.converged), key=lambda res: res.value)
    if not converged:
        _log.warning("rate_of_event: none of %d starts converged (r=%g)", len(starts), r)
        return RateResult(math.inf, zero, min(res.residual for res in results), False,
                          sum(res.iterations for res in results), 0.0, "event")

    best = converged[0]
    iterations = sum(res.iterations for res in results)
    for start in converged[: cfg.refine_top]:
        z = start.argmin.uhat.values.ravel() * math.sqrt(p.grid.dt)
        for tau in cfg.temperatures:
            refined = _solve_alm(p, _SoftExitConstraint(center, r, tau * r * r), cfg, z0=z, mode="event")
            iterations += refined.iterations
            if not refined.converged:
                break
            z = refined.argmin.uhat.values.ravel() * math.sqrt(p.grid.dt)
            if refined.value < best.value:
                best = refined
    _log.debug("rate_of_event r=%g: %.6g after %d starts", r, best.value, len(starts))
    return RateResult(best.value, best.argmin, best.residual, True, iterations, best.energy, "event")


# --- probes ---------------------------------------------------------------------------------


def weak_convergence_probe(
    p: SkeletonProblem,
    sequence: Sequence[CMControl],
    limit_control: CMControl,
    tol: float = 1e-3,
    M: Optional[float] = None,
) -> dict:
    """sup_t |skeleton(h_k) - skeleton(h)| along a control sequence; passes when the gaps fall below tol."""
    if M is not None:
        outside = [i for i, hk in enumerate(sequence) if not in_level_set(hk, M)]
        if outside or not in_level_set(limit_control, M):
            raise DomainError(f"controls outside the level set M={M}: indices {outside}")
    reference = skeleton_solve(p, limit_control)
    gaps = [skeleton_solve(p, hk).sup_distance(reference) for hk in sequence]
    decreasing = all(b <= a + 1e-12 for a, b in zip(gaps, gaps[1:]))
    final = gaps[-1] if gaps else 0.0
    return {
        "gaps": gaps,
        "decreasing": bool(decreasing),
        "final_gap": float(final),
        "tol": tol,
        "pass": bool(final <= tol),
    }


def skeleton_bound_probe(p: SkeletonProblem, M: float, samples: int = 64, seed: SeedLike = 0) -> dict:
    """sup_t |skeleton(h)_t| over random controls on the sphere energy(h) = M."""
    if M < 0 or samples < 1:
        raise DomainError("skeleton_bound_probe needs M >= 0 and at least one sample")
    rng = as_rng(seed)
    grid = p.grid
    sups = []
    for _ in range(samples):
        raw = rng.standard_normal((grid.N, p.n))
        norm = math.sqrt(0.5 * grid.dt * float(np.sum(raw**2)))
        uhat = Density(grid, raw * (math.sqrt(M) / norm if norm > 0 else 0.0))
        path = skeleton_solve(p, CMControl(uhat))
        sups.append(float(np.max(np.linalg.norm(path.values, axis=1))))
    return {
        "M": M,
        "samples": samples,
        "max_sup": max(sups),
        "mean_sup": float(np.mean(sups)),
        "limit_sup": float(np.max(np.linalg.norm(p.limit.values, axis=1))),
    }
