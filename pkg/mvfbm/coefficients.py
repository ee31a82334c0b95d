"""
Coefficient quadruples (b, sigma, f, g), concave moduli, Wasserstein distances and assumption probes.

Shapes, for a batch of B particles with slow dimension n and fast dimension m:
    b(t, x[B,n], mu, y[B,m])  -> [B,n]
    sigma(t, mu)              -> [n,n]
    f(t, x[B,n], mu, y[B,m])  -> [B,m]
    g(t, x[B,n], mu, y[B,m])  -> [B,m,m]
mu is always an EmpiricalMeasure over R^n.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import integrate
from scipy.optimize import linear_sum_assignment

from mvfbm.errors import DomainError, UnsupportedInstanceError
from mvfbm.fractional import as_rng

_log = logging.getLogger(__name__)

DriftFn = Callable[[float, np.ndarray, "EmpiricalMeasure", np.ndarray], np.ndarray]
SigmaFn = Callable[[float, "EmpiricalMeasure"], np.ndarray]
BbarFn = Callable[[float, np.ndarray, "EmpiricalMeasure"], np.ndarray]

MODULUS_FAMILIES = ("linear", "xlog", "xloglog")
PROBE_POWERS = (1, 2)
RATIO_TOL = 1e-9
ORIGIN_MARGIN = 1.25


# --- measures ------------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    """Equal-weight particle cloud on R^n."""

    atoms: np.ndarray

    def __post_init__(self):
        atoms = np.asarray(self.atoms, dtype=float)
        if atoms.ndim == 1:
            atoms = atoms[:, None]
        if atoms.ndim != 2 or atoms.shape[0] < 1:
            raise DomainError(f"an empirical measure needs at least one atom, got shape {atoms.shape}")
        object.__setattr__(self, "atoms", atoms)

    @classmethod
    def dirac(cls, x) -> "EmpiricalMeasure":
        return cls(np.atleast_1d(np.asarray(x, dtype=float))[None, :])

    @property
    def size(self) -> int:
        return self.atoms.shape[0]

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    def mean(self) -> np.ndarray:
        return self.atoms.mean(axis=0)

    def second_moment(self) -> float:
        """mu(|.|^2)."""
        return float(np.mean(np.sum(self.atoms**2, axis=1)))


def _quantile_distance(a: np.ndarray, b: np.ndarray, theta: float) -> float:
    # both quantile functions are step functions; integrate |F^-1 - G^-1|^theta over merged breakpoints
    a, b = np.sort(a), np.sort(b)
    cuts = np.union1d(np.arange(1, a.size) / a.size, np.arange(1, b.size) / b.size)
    edges = np.concatenate([[0.0], cuts, [1.0]])
    mids = 0.5 * (edges[:-1] + edges[1:])
    ia = np.minimum((mids * a.size).astype(int), a.size - 1)
    ib = np.minimum((mids * b.size).astype(int), b.size - 1)
    return float(np.sum(np.diff(edges) * np.abs(a[ia] - b[ib]) ** theta))


def wasserstein2(mu: EmpiricalMeasure, nu: EmpiricalMeasure, theta: float = 2.0) -> float:
    """
    W_theta between empirical measures (theta = 2 by default).
    Exact in 1-D for any atom counts; in higher dimension only for equal counts, via optimal assignment.
    """
    if theta < 1:
        raise DomainError(f"Wasserstein order must be >= 1, got {theta}")
    if mu.dim != nu.dim:
        raise DomainError(f"dimension mismatch: {mu.dim} vs {nu.dim}")
    if mu.dim == 1:
        cost = _quantile_distance(mu.atoms[:, 0], nu.atoms[:, 0], theta)
    else:
        if mu.size != nu.size:
            raise UnsupportedInstanceError(
                f"W2 in dimension {mu.dim} needs equal atom counts, got {mu.size} and {nu.size}"
            )
        d = np.linalg.norm(mu.atoms[:, None, :] - nu.atoms[None, :, :], axis=2) ** theta
        rows, cols = linear_sum_assignment(d)
        cost = float(d[rows, cols].mean())
    return cost ** (1.0 / theta)


# --- moduli --------------------------------------------------------------------------------


def _base_modulus(family: str, u: np.ndarray) -> np.ndarray:
    if family == "linear":
        return u
    safe = np.where(u > 0, u, 1.0)
    L = np.log(1.0 / safe)
    if family == "xlog":
        return np.where(u > 0, u * L, 0.0)
    return np.where(u > 0, u * L * np.log(np.where(u > 0, L, np.e)), 0.0)


def _base_slope(family: str, u: float) -> float:
    """Left derivative of the unspliced branch at u."""
    if family == "linear":
        return 1.0
    L = np.log(1.0 / u)
    if family == "xlog":
        return float(L - 1.0)
    ell = np.log(L)
    return float(L * ell - ell - 1.0)


@dataclass(frozen=True)
class ModulusSpec:
    """
    kappa_1(u) = K u; kappa_2, kappa_3 are K times u log(1/u) and u log(1/u) log log(1/u) on [0, gamma],
    continued linearly beyond gamma with the left derivative at gamma. `a` is the linear envelope
    kappa(u) <= a (1 + u).
    """

    family: str = "linear"
    K: float = 1.0
    gamma: float = 0.01
    a: float = field(init=False)

    def __post_init__(self):
        if self.family not in MODULUS_FAMILIES:
            raise DomainError(f"Unknown modulus family: {self.family}. Choose from {list(MODULUS_FAMILIES)}")
        if not self.K > 0:
            raise DomainError(f"modulus constant K must be positive, got {self.K}")
        upper = 1.0 / np.e if self.family == "xlog" else np.exp(-np.e)
        if self.family != "linear" and not 0.0 < self.gamma < upper:
            # concavity and monotonicity on [0, gamma] need gamma below this bound
            raise DomainError(f"{self.family} modulus needs 0 < gamma < {upper:.4f}, got {self.gamma}")
        if self.family == "linear":
            a = self.K
        else:
            a = self.K * max(float(_base_modulus(self.family, np.array(self.gamma))), _base_slope(self.family, self.gamma))
        object.__setattr__(self, "a", float(a))

    def __call__(self, u):
        return modulus_eval(self, u)


def modulus_eval(kappa: ModulusSpec, u):
    """Evaluate kappa at u >= 0 (scalar or array)."""
    u_arr = np.asarray(u, dtype=float)
    if np.any(u_arr < 0) or np.any(np.isnan(u_arr)):
        raise DomainError("modulus argument must be non-negative")
    if kappa.family == "linear":
        out = kappa.K * u_arr
    else:
        g = kappa.gamma
        head = _base_modulus(kappa.family, np.minimum(u_arr, g))
        tail = float(_base_modulus(kappa.family, np.array(g))) + _base_slope(kappa.family, g) * (u_arr - g)
        out = kappa.K * np.where(u_arr <= g, head, tail)
    return float(out) if out.ndim == 0 else out


def osgood_integral(kappa: ModulusSpec, lower: float, upper: float) -> float:
    """int_lower^upper du / kappa(u); diverges as lower -> 0 for every admissible modulus."""
    if not 0.0 < lower < upper:
        raise DomainError(f"need 0 < lower < upper, got ({lower}, {upper})")
    points = [kappa.gamma] if kappa.family != "linear" and lower < kappa.gamma < upper else None
    # integrate in log u: the integrand u / kappa(u) is bounded on both ends
    lo, hi = np.log(lower), np.log(upper)
    pts = None if points is None else [np.log(p) for p in points]
    value, _ = integrate.quad(lambda s: np.exp(s) / modulus_eval(kappa, np.exp(s)), lo, hi, points=pts, limit=200)
    return value


# --- coefficient sets ----------------------------------------------------------------------


@dataclass(frozen=True)
class AssumptionParams:
    """Constants claimed for a coefficient set. K(u) = k0 + k_slope * u is the time envelope."""

    kappa: ModulusSpec = field(default_factory=ModulusSpec)
    k0: float = 1.0
    k_slope: float = 0.0
    beta1: float = 1.0
    beta2: float = 1.0
    C_T: float = 1.0
    theta: float = 2.0

    def __post_init__(self):
        if not (self.beta1 > 0 and self.beta2 > 0):
            raise DomainError(f"dissipativity rates must be positive, got beta1={self.beta1}, beta2={self.beta2}")
        if self.theta < 2:
            raise DomainError(f"moment order theta must be >= 2, got {self.theta}")
        if not self.k0 > 0:
            raise DomainError(f"K envelope needs k0 > 0, got {self.k0}")
        if self.k_slope < 0:
            raise DomainError("K envelope must be non-decreasing")

    @property
    def a(self) -> float:
        return self.kappa.a

    def K(self, u):
        return self.k0 + self.k_slope * np.asarray(u, dtype=float)


def origin_level(*norms: float) -> float:
    """k0 with room for |b|^p + |sigma|^p + |f|^p + |g|^p at the origin, p in PROBE_POWERS."""
    worst = max(sum(abs(v) ** q for v in norms) for q in PROBE_POWERS)
    return max(1.0, ORIGIN_MARGIN * worst)


@dataclass(frozen=True)
class CoefficientSet:
    name: str
    n: int
    m: int
    b: DriftFn
    sigma: SigmaFn
    f: DriftFn
    g: DriftFn
    params: AssumptionParams = field(default_factory=AssumptionParams)
    bbar: Optional[BbarFn] = None
    settings: dict = field(default_factory=dict)

    def check_shapes(self, batch: int = 3) -> None:
        """Evaluate every map once at the origin and verify output shapes."""
        x = np.zeros((batch, self.n))
        y = np.zeros((batch, self.m))
        mu = EmpiricalMeasure(np.zeros((2, self.n)))
        expected = {
            "b": (self.b(0.0, x, mu, y), (batch, self.n)),
            "sigma": (self.sigma(0.0, mu), (self.n, self.n)),
            "f": (self.f(0.0, x, mu, y), (batch, self.m)),
            "g": (self.g(0.0, x, mu, y), (batch, self.m, self.m)),
        }
        for name, (value, shape) in expected.items():
            if np.shape(value) != shape:
                raise DomainError(f"{self.name}: {name} returned shape {np.shape(value)}, expected {shape}")
        if self.bbar is not None and np.shape(self.bbar(0.0, x, mu)) != (batch, self.n):
            raise DomainError(f"{self.name}: bbar returned shape {np.shape(self.bbar(0.0, x, mu))}")


def _eye_batch(B: int, m: int, scale: float) -> np.ndarray:
    return np.broadcast_to(scale * np.eye(m), (B, m, m)).copy()


def linear_meanfield(
    a1: float = -1.0,
    a2: float = 0.5,
    a3: float = 0.5,
    a4: float = 0.0,
    s0: float = 0.5,
    s1: float = 0.1,
    beta: float = 2.0,
    c1: float = 1.0,
    c2: float = 0.0,
    gamma0: float = 0.5,
    dim: int = 1,
) -> CoefficientSet:
    """
    b = a1 x + a2 mean(mu) + a3 y + a4, sigma = diag(s0 + s1 mean(mu)),
    f = -beta (y - c1 x - c2 mean(mu)), g = gamma0 I; n = m = dim.
    """
    if beta <= 0:
        raise DomainError(f"linear_meanfield needs beta > 0, got {beta}")
    d = int(dim)

    def b(t, x, mu, y):
        return a1 * x + a2 * mu.mean() + a3 * y + a4

    def sigma(t, mu):
        return np.diag(s0 + s1 * mu.mean())

    def f(t, x, mu, y):
        return -beta * (y - c1 * x - c2 * mu.mean())

    def g(t, x, mu, y):
        return _eye_batch(x.shape[0], d, gamma0)

    def bbar(t, x, mu):
        # b is affine in y, so averaging against the frozen OU law evaluates it at the stationary mean
        return b(t, x, mu, c1 * x + c2 * mu.mean())

    c_sq = max(1.0, c1 * c1, c2 * c2)
    A = max(abs(a1), abs(a2), abs(a3))
    lip = max(A, 3.0 * A * A, abs(s1), s1 * s1, beta * np.sqrt(c_sq), 3.0 * beta * beta * c_sq)
    contraction = 4.0 * beta * max(c1 * c1, c2 * c2)
    params = AssumptionParams(
        kappa=ModulusSpec("linear", K=max(lip, contraction, 1e-12)),
        k0=origin_level(abs(a4) * np.sqrt(d), abs(s0) * np.sqrt(d), 0.0, abs(gamma0) * np.sqrt(d)),
        beta1=1.5 * beta,
        beta2=1.5 * beta,
        C_T=max(d * gamma0 * gamma0, 4.0 * beta * max(c1 * c1, c2 * c2), gamma0 * np.sqrt(d), 1e-12),
    )
    settings = dict(a1=a1, a2=a2, a3=a3, a4=a4, s0=s0, s1=s1, beta=beta, c1=c1, c2=c2, gamma0=gamma0, dim=d)
    return CoefficientSet("linear_meanfield", d, d, b, sigma, f, g, params, bbar, settings)


def ou_frozen_gaussian(
    beta: float = 1.0,
    c1: float = 1.0,
    c2: float = 0.5,
    gamma0: float = 0.5,
    s0: float = 0.5,
) -> CoefficientSet:
    """
    Scalar slow drift b = y over a frozen OU fast process f = -beta (y - c1 x - c2 mean(mu)), g = gamma0.
    The invariant law is N(c1 x + c2 mean(mu), gamma0^2 / (2 beta)), so bbar = c1 x + c2 mean(mu).
    """
    if beta <= 0:
        raise DomainError(f"ou_frozen_gaussian needs beta > 0, got {beta}")

    def b(t, x, mu, y):
        return y.copy()

    def sigma(t, mu):
        return np.array([[s0]])

    def f(t, x, mu, y):
        return -beta * (y - c1 * x - c2 * mu.mean())

    def g(t, x, mu, y):
        return _eye_batch(x.shape[0], 1, gamma0)

    def bbar(t, x, mu):
        return c1 * x + c2 * mu.mean()

    c_sq = max(1.0, c1 * c1, c2 * c2)
    params = AssumptionParams(
        kappa=ModulusSpec("linear", K=max(3.0, 3.0 * beta * beta * c_sq, beta * np.sqrt(c_sq))),
        k0=origin_level(0.0, s0, 0.0, gamma0),
        beta1=1.5 * beta,
        beta2=1.5 * beta,
        C_T=max(gamma0 * gamma0, 4.0 * beta * max(c1 * c1, c2 * c2), gamma0, 1e-12),
    )
    settings = dict(beta=beta, c1=c1, c2=c2, gamma0=gamma0, s0=s0)
    return CoefficientSet("ou_frozen_gaussian", 1, 1, b, sigma, f, g, params, bbar, settings)


def gaussian_decoupled(
    drift: float = 0.0,
    sigma0: float = 1.0,
    beta: float = 1.0,
    gamma0: float = 1.0,
    dim: int = 1,
) -> CoefficientSet:
    """
    Slow equation dX = drift X dt + sigma0 dB^H that never sees the fast variable; fast OU f = -beta y,
    g = gamma0 I independent of the slow state. With drift = 0 the slow path is x + delta^H sigma0 B^H.
    """
    if beta <= 0:
        raise DomainError(f"gaussian_decoupled needs beta > 0, got {beta}")
    d = int(dim)

    def b(t, x, mu, y):
        return drift * x

    def sigma(t, mu):
        return sigma0 * np.eye(d)

    def f(t, x, mu, y):
        return -beta * y

    def g(t, x, mu, y):
        return _eye_batch(x.shape[0], d, gamma0)

    def bbar(t, x, mu):
        return drift * x

    params = AssumptionParams(
        kappa=ModulusSpec("linear", K=max(abs(drift), drift * drift * 3.0, 3.0 * beta * beta, beta, 1e-12)),
        k0=origin_level(0.0, sigma0 * np.sqrt(d), 0.0, gamma0 * np.sqrt(d)),
        beta1=1.5 * beta,
        beta2=1.5 * beta,
        C_T=max(d * gamma0 * gamma0, gamma0 * np.sqrt(d), 1e-12),
    )
    settings = dict(drift=drift, sigma0=sigma0, beta=beta, gamma0=gamma0, dim=d)
    return CoefficientSet("gaussian_decoupled", d, d, b, sigma, f, g, params, bbar, settings)


def zero_dynamics(dim: int = 1) -> CoefficientSet:
    """b = sigma = f = g = 0: every simulator returns constant paths."""
    d = int(dim)

    def zeros_b(t, x, mu, y):
        return np.zeros_like(x)

    def zeros_f(t, x, mu, y):
        return np.zeros_like(y)

    def zeros_g(t, x, mu, y):
        return np.zeros((x.shape[0], d, d))

    def zeros_bbar(t, x, mu):
        return np.zeros_like(x)

    return CoefficientSet(
        "zero", d, d, zeros_b, lambda t, mu: np.zeros((d, d)), zeros_f, zeros_g, AssumptionParams(), zeros_bbar, {"dim": d}
    )


FAMILIES = {
    "linear_meanfield": linear_meanfield,
    "ou_frozen_gaussian": ou_frozen_gaussian,
    "gaussian_decoupled": gaussian_decoupled,
    "zero": zero_dynamics,
}


def builtin_family(name: str, **params) -> CoefficientSet:
    if name not in FAMILIES:
        raise DomainError(f"Unknown family: {name}. Choose from {list(FAMILIES)}")
    try:
        return FAMILIES[name](**params)
    except TypeError as e:
        raise DomainError(f"bad parameters for family {name}: {e}") from e


# --- assumption probes ---------------------------------------------------------------------


@dataclass(frozen=True)
class ProbeSampler:
    """
    Seeded heavy-tailed probe generator. Each batch shares one pair of times and measures and draws
    `batch` pairs of (x, y) points from a Student-t law with `df` degrees of freedom.
    """

    seed: int = 0
    T: float = 1.0
    scale: float = 2.0
    df: float = 3.0
    atoms: int = 8
    batch: int = 32

    def batches(self, trials: int, n: int, m: int):
        rng = as_rng(self.seed)
        done = 0
        while done < trials:
            B = min(self.batch, trials - done)
            t1, t2 = rng.uniform(0.0, self.T, size=2)
            mu1 = EmpiricalMeasure(self.scale * rng.standard_t(self.df, size=(self.atoms, n)))
            mu2 = EmpiricalMeasure(self.scale * rng.standard_t(self.df, size=(self.atoms, n)))
            x1, x2 = (self.scale * rng.standard_t(self.df, size=(B, n)) for _ in range(2))
            y1, y2 = (self.scale * rng.standard_t(self.df, size=(B, m)) for _ in range(2))
            yield float(t1), float(t2), mu1, mu2, x1, x2, y1, y2
            done += B


def _ratio(lhs: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    lhs, rhs = np.broadcast_arrays(np.asarray(lhs, dtype=float), np.asarray(rhs, dtype=float))
    out = np.zeros_like(lhs)
    pos = rhs > 0
    out[pos] = lhs[pos] / rhs[pos]
    out[~pos & (lhs > RATIO_TOL)] = np.inf
    return out


def _vnorm(v: np.ndarray) -> np.ndarray:
    return np.linalg.norm(v.reshape(v.shape[0], -1), axis=1)


def _report(name: str, trials: int, worst: dict[str, float], extra: Optional[dict] = None) -> dict:
    if trials == 0:
        return {"assumption": name, "trials": 0, "worst_ratio": 0.0, "pass": True, "evidence": "no evidence"}
    worst_key = max(worst, key=worst.get)
    ratio = float(worst[worst_key])
    report = {
        "assumption": name,
        "trials": int(trials),
        "worst_ratio": ratio,
        "worst_case": worst_key,
        "by_inequality": {k: float(v) for k, v in worst.items()},
        "pass": bool(ratio <= 1.0 + RATIO_TOL),
        "evidence": "probed",
    }
    if extra:
        report.update(extra)
    if not report["pass"]:
        _log.info("%s probe failed: %s ratio %.3g", name, worst_key, ratio)
    return report


def _check_trials(trials: int) -> int:
    if trials < 0:
        raise DomainError(f"trials must be >= 0, got {trials}")
    return int(trials)


def probe_H1(c: CoefficientSet, p: AssumptionParams, sampler: Optional[ProbeSampler] = None, trials: int = 512) -> dict:
    """Increment bounds for b, sigma, f, g and the origin bound, at p in {1, 2}; ratio lhs / rhs."""
    trials = _check_trials(trials)
    sampler = sampler or ProbeSampler()
    worst = {k: 0.0 for k in ("b", "sigma", "f", "g", "origin")}
    if trials == 0:
        return _report("H1", 0, worst)
    kappa = p.kappa
    for t1, t2, mu1, mu2, x1, x2, y1, y2 in sampler.batches(trials, c.n, c.m):
        W = wasserstein2(mu1, mu2, p.theta)
        dx, dy = _vnorm(x1 - x2), _vnorm(y1 - y2)
        diffs = {
            "b": _vnorm(c.b(t1, x1, mu1, y1) - c.b(t2, x2, mu2, y2)),
            "f": _vnorm(c.f(t1, x1, mu1, y1) - c.f(t2, x2, mu2, y2)),
            "g": _vnorm(c.g(t1, x1, mu1, y1) - c.g(t2, x2, mu2, y2)),
        }
        dsigma = float(np.linalg.norm(c.sigma(t1, mu1) - c.sigma(t1, mu2)))
        origin = {
            "b": float(np.linalg.norm(c.b(t1, np.zeros((1, c.n)), EmpiricalMeasure.dirac(np.zeros(c.n)), np.zeros((1, c.m))))),
            "sigma": float(np.linalg.norm(c.sigma(t1, EmpiricalMeasure.dirac(np.zeros(c.n))))),
            "f": float(np.linalg.norm(c.f(t1, np.zeros((1, c.n)), EmpiricalMeasure.dirac(np.zeros(c.n)), np.zeros((1, c.m))))),
            "g": float(np.linalg.norm(c.g(t1, np.zeros((1, c.n)), EmpiricalMeasure.dirac(np.zeros(c.n)), np.zeros((1, c.m))))),
        }
        for q in PROBE_POWERS:
            env = p.K(abs(t1 - t2) ** q) * kappa(dx**q + dy**q + W**q)
            for key in ("b", "f", "g"):
                worst[key] = max(worst[key], float(np.max(_ratio(diffs[key] ** q, env))))
            sig_rhs = p.K(t1**q) * kappa(W**q)
            worst["sigma"] = max(worst["sigma"], float(_ratio(dsigma**q, sig_rhs)))
            lhs = sum(v**q for v in origin.values())
            worst["origin"] = max(worst["origin"], float(_ratio(lhs, p.K(t1**q))))
    return _report("H1", trials, worst, {"p": list(PROBE_POWERS)})


def probe_H2(c: CoefficientSet, p: AssumptionParams, sampler: Optional[ProbeSampler] = None, trials: int = 512) -> dict:
    """
    Contraction and one-point dissipativity of the fast coefficients. Each display is rearranged so
    both sides are non-negative candidates: (lhs + beta |y|^2) / rhs, and the worst margin lhs - rhs.
    """
    trials = _check_trials(trials)
    sampler = sampler or ProbeSampler()
    worst = {"contraction": 0.0, "dissipativity": 0.0}
    margins = {"contraction": -np.inf, "dissipativity": -np.inf}
    if trials == 0:
        return _report("H2", 0, worst)
    for t1, t2, mu1, mu2, x1, x2, y1, y2 in sampler.batches(trials, c.n, c.m):
        W = wasserstein2(mu1, mu2, 2.0)
        dy = y1 - y2
        dfv = c.f(t1, x1, mu1, y1) - c.f(t2, x2, mu2, y2)
        dg = _vnorm(c.g(t1, x1, mu1, y1) - c.g(t2, x2, mu2, y2))
        lhs = 2.0 * np.sum(dy * dfv, axis=1) + dg**2
        bound = p.K(abs(t1 - t2) ** 2) * p.kappa(_vnorm(x1 - x2) ** 2 + W**2)
        shifted = lhs + p.beta1 * np.sum(dy**2, axis=1)
        worst["contraction"] = max(worst["contraction"], float(np.max(_ratio(shifted, bound))))
        margins["contraction"] = max(margins["contraction"], float(np.max(shifted - bound)))

        lhs1 = 2.0 * np.sum(y1 * c.f(t1, x1, mu1, y1), axis=1) + _vnorm(c.g(t1, x1, mu1, y1)) ** 2
        growth = p.C_T * (1.0 + np.sum(x1**2, axis=1) + mu1.second_moment())
        shifted1 = lhs1 + p.beta2 * np.sum(y1**2, axis=1)
        worst["dissipativity"] = max(worst["dissipativity"], float(np.max(_ratio(shifted1, growth))))
        margins["dissipativity"] = max(margins["dissipativity"], float(np.max(shifted1 - growth)))
    return _report("H2", trials, worst, {"worst_margin": {k: float(v) for k, v in margins.items()}})


def probe_growth_g(
    c: CoefficientSet, p: AssumptionParams, sampler: Optional[ProbeSampler] = None, trials: int = 512
) -> dict:
    """sup_y ||g(t,x,mu,y)|| <= C_T (1 + |x| + mu(|.|^2)^(1/2)), with y heavy-tailed to stress the sup."""
    trials = _check_trials(trials)
    sampler = sampler or ProbeSampler()
    worst = {"growth": 0.0}
    if trials == 0:
        return _report("growth_g", 0, worst)
    for t1, _, mu1, _, x1, _, y1, y2 in sampler.batches(trials, c.n, c.m):
        rhs = p.C_T * (1.0 + _vnorm(x1) + np.sqrt(mu1.second_moment()))
        for y in (y1, 10.0 * y2):
            worst["growth"] = max(worst["growth"], float(np.max(_ratio(_vnorm(c.g(t1, x1, mu1, y)), rhs))))
    return _report("growth_g", trials, worst)
