"""
Fractional Brownian motion, Riemann-Liouville operators and Cameron-Martin arithmetic.

Two grid representations are used throughout:
  Path    - values at the N+1 nodes of a TimeGrid (sample paths, states, K_H images).
  Density - one value per cell [t_k, t_{k+1}), read as a piecewise-constant L2 function
            (controls u-hat / v-hat, integrands of the fBm inner product).
K_H maps a Density to a Path, K_H-dot maps a Density to the Density of its cell rates.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Literal, Optional, Union

import numpy as np
from scipy import integrate, linalg, special

from mvfbm.errors import DomainError, FactorizationError

_log = logging.getLogger(__name__)

Side = Literal["left", "right"]
SeedLike = Union[int, np.random.Generator, np.random.SeedSequence, None]

FBM_METHODS = ("cholesky", "circulant")
JITTER_START = 1e-14
JITTER_CAP = 1e-10
BOUNDARY_ZERO_TOL = 1e-12


def as_rng(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def check_hurst(H: float, allow_half: bool = False) -> float:
    H = float(H)
    if allow_half and H == 0.5:
        return H
    if not 0.5 < H < 1.0:
        bound = "[1/2, 1)" if allow_half else "(1/2, 1)"
        raise DomainError(f"Hurst index must lie in {bound}, got H={H}")
    return H


@dataclass(frozen=True)
class TimeGrid:
    """Uniform partition t_k = kT/N of [0, T]."""

    T: float
    N: int

    def __post_init__(self):
        if not (np.isfinite(self.T) and self.T > 0):
            raise DomainError(f"time horizon must be positive, got T={self.T}")
        if int(self.N) != self.N or self.N < 1:
            raise DomainError(f"step count must be a positive integer, got N={self.N}")
        object.__setattr__(self, "T", float(self.T))
        object.__setattr__(self, "N", int(self.N))

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.N + 1)

    @property
    def midpoints(self) -> np.ndarray:
        return (np.arange(self.N) + 0.5) * self.dt

    def steps_in(self, length: float) -> int:
        """Number of grid steps in `length`; raises unless it is a positive multiple of dt."""
        k = int(round(length / self.dt))
        if k < 1 or not np.isclose(k * self.dt, length, rtol=1e-9, atol=1e-12):
            raise DomainError(f"length {length} is not a positive multiple of the grid step {self.dt}")
        return k

    def trapezoid_weights(self) -> np.ndarray:
        w = np.full(self.N + 1, self.dt)
        w[0] = w[-1] = 0.5 * self.dt
        return w


def _as_columns(values, rows: int, what: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[0] != rows:
        raise DomainError(f"{what} needs {rows} rows, got shape {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class Path:
    """Grid-sampled vector function: values[k] is the value at node t_k."""

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _as_columns(self.values, self.grid.N + 1, "Path"))

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @classmethod
    def zeros(cls, grid: TimeGrid, dim: int = 1) -> "Path":
        return cls(grid, np.zeros((grid.N + 1, dim)))

    @classmethod
    def from_function(cls, grid: TimeGrid, fn: Callable[[np.ndarray], np.ndarray]) -> "Path":
        return cls(grid, fn(grid.nodes))

    def sup_distance(self, other: "Path") -> float:
        return float(np.max(np.linalg.norm(self.values - other.values, axis=1)))


@dataclass(frozen=True, eq=False)
class Density:
    """Piecewise-constant L2 function: values[k] holds on the cell [t_k, t_{k+1})."""

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _as_columns(self.values, self.grid.N, "Density"))

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @classmethod
    def zeros(cls, grid: TimeGrid, dim: int = 1) -> "Density":
        return cls(grid, np.zeros((grid.N, dim)))

    @classmethod
    def constant(cls, grid: TimeGrid, c: float, dim: int = 1) -> "Density":
        return cls(grid, np.full((grid.N, dim), float(c)))

    @classmethod
    def from_function(cls, grid: TimeGrid, fn: Callable[[np.ndarray], np.ndarray]) -> "Density":
        """Sample fn at cell midpoints."""
        return cls(grid, fn(grid.midpoints))

    def l2_squared(self) -> float:
        return float(self.grid.dt * np.sum(self.values**2))

    def scaled(self, c: float) -> "Density":
        return Density(self.grid, c * self.values)


@dataclass(frozen=True, eq=False)
class CMControl:
    """Cameron-Martin element h = (K_H u-hat, integral of v-hat), kept as its two densities."""

    uhat: Density
    vhat: Optional[Density] = None

    def __post_init__(self):
        if self.vhat is not None and self.vhat.grid != self.uhat.grid:
            raise DomainError("uhat and vhat must share one grid")

    @property
    def grid(self) -> TimeGrid:
        return self.uhat.grid

    @classmethod
    def zero(cls, grid: TimeGrid, n: int = 1, m: int = 1) -> "CMControl":
        return cls(Density.zeros(grid, n), Density.zeros(grid, m))

    def scaled(self, c: float) -> "CMControl":
        v = None if self.vhat is None else self.vhat.scaled(c)
        return CMControl(self.uhat.scaled(c), v)


@dataclass(frozen=True)
class KernelConstants:
    H: float
    C_H: float
    beta_norm: float
    gamma_shift: float


@lru_cache(maxsize=64)
def kernel_constants(H: float) -> KernelConstants:
    """C_H = sqrt(H(2H-1) / B(2-2H, H-1/2)) together with the special-function values behind it."""
    H = check_hurst(H)
    beta_norm = float(special.beta(2.0 - 2.0 * H, H - 0.5))
    C_H = float(np.sqrt(H * (2.0 * H - 1.0) / beta_norm))
    return KernelConstants(H=H, C_H=C_H, beta_norm=beta_norm, gamma_shift=float(special.gamma(H - 0.5)))


# --- covariance and kernel ---------------------------------------------------------------


def covariance_R(t, s, H: float):
    """R_H(t,s) = (t^2H + s^2H - |t-s|^2H) / 2. Broadcasts over array arguments."""
    H = check_hurst(H, allow_half=True)
    t_arr = np.asarray(t, dtype=float)
    s_arr = np.asarray(s, dtype=float)
    if np.any(t_arr < 0) or np.any(s_arr < 0):
        raise DomainError("covariance_R needs non-negative times")
    two_h = 2.0 * H
    r = 0.5 * (t_arr**two_h + s_arr**two_h - np.abs(t_arr - s_arr) ** two_h)
    return float(r) if r.ndim == 0 else r


def fgn_autocovariance(k, H: float, dt: float = 1.0):
    """Autocovariance of fBm increments over steps of length dt at lag k."""
    H = check_hurst(H, allow_half=True)
    k = np.abs(np.asarray(k, dtype=float))
    two_h = 2.0 * H
    g = 0.5 * dt**two_h * (np.abs(k + 1) ** two_h - 2.0 * k**two_h + np.abs(k - 1) ** two_h)
    return float(g) if g.ndim == 0 else g


def _kernel_profile(t: float, s: float, H: float) -> float:
    # int_0^1 (s + (t-s) w^(1/a))^a dw: the kernel integral after u = s + (t-s) w^(1/a)
    a = H - 0.5
    value, _ = integrate.quad(lambda w: (s + (t - s) * w ** (1.0 / a)) ** a, 0.0, 1.0, epsabs=1e-13, epsrel=1e-12)
    return value


def kernel_K(t: float, s: float, H: float) -> float:
    """K_H(t,s) = C_H s^(1/2-H) int_s^t (u-s)^(H-3/2) u^(H-1/2) du, zero for t <= s."""
    H = check_hurst(H)
    t, s = float(t), float(s)
    if t < 0 or s < 0:
        raise DomainError("kernel_K needs non-negative times")
    if t <= s:
        return 0.0
    if s == 0.0:
        raise DomainError("kernel_K is singular at s = 0")
    a = H - 0.5
    c = kernel_constants(H).C_H
    return c * s ** (-a) * (t - s) ** a / a * _kernel_profile(t, s, H)


def kernel_covariance(t: float, s: float, H: float) -> float:
    """int_0^(t^s) K_H(t,r) K_H(s,r) dr by algebraic-weight adaptive quadrature."""
    H = check_hurst(H)
    lo, hi = sorted((float(t), float(s)))
    if lo < 0:
        raise DomainError("kernel_covariance needs non-negative times")
    if lo == 0.0:
        return 0.0
    a = H - 0.5
    c = kernel_constants(H).C_H

    # K(hi,r) K(lo,r) = c^2 r^(-2a) (lo-r)^a * [(hi-r)^a P(hi,r) P(lo,r) / a^2]; the weight carries the singular parts
    def smooth_part(r: float) -> float:
        return (hi - r) ** a * _kernel_profile(hi, r, H) * _kernel_profile(lo, r, H)

    value, _ = integrate.quad(
        smooth_part, 0.0, lo, weight="alg", wvar=(-2.0 * a, a), epsabs=1e-12, epsrel=1e-10, limit=200
    )
    return c * c / (a * a) * value


# --- fBm sampling ------------------------------------------------------------------------


def _jittered_cholesky(cov: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    scale = float(np.max(np.diag(cov)))
    lam = JITTER_START * scale
    eye = np.eye(cov.shape[0])
    while lam <= JITTER_CAP * scale * (1 + 1e-9):
        try:
            L = np.linalg.cholesky(cov + lam * eye)
            _log.warning("covariance factorized with jitter %.1e (max diagonal %.3g)", lam, scale)
            return L
        except np.linalg.LinAlgError:
            lam *= 10.0
    raise FactorizationError(f"covariance not positive definite with jitter up to {JITTER_CAP:g} x max diagonal")


@lru_cache(maxsize=16)
def _path_cholesky(T: float, N: int, H: float) -> np.ndarray:
    t = np.linspace(0.0, T, N + 1)[1:]
    L = _jittered_cholesky(covariance_R(t[:, None], t[None, :], H))
    L.setflags(write=False)
    return L


@lru_cache(maxsize=16)
def _circulant_spectrum(N: int, H: float) -> Optional[np.ndarray]:
    gam = fgn_autocovariance(np.arange(N + 1), H)
    row = np.concatenate([gam, gam[-2:0:-1]])
    eig = np.fft.fft(row).real
    if eig.min() < -1e-10 * eig.max():
        return None
    eig = np.sqrt(np.clip(eig, 0.0, None) / row.size)
    eig.setflags(write=False)
    return eig


def fbm_paths(
    grid: TimeGrid,
    H: float,
    count: int = 1,
    dim: int = 1,
    seed: SeedLike = None,
    method: str = "cholesky",
) -> np.ndarray:
    """Independent fBm paths on the grid, shape (count, N+1, dim), each starting at 0."""
    H = check_hurst(H, allow_half=True)
    if method not in FBM_METHODS:
        raise DomainError(f"unknown fBm method {method!r}; choose from {FBM_METHODS}")
    rng = as_rng(seed)
    N, width = grid.N, count * dim
    out = np.zeros((count, N + 1, dim))
    if width == 0:
        return out
    spectrum = _circulant_spectrum(N, H) if method == "circulant" else None
    if method == "circulant" and spectrum is None:
        _log.warning("circulant embedding not PSD for N=%d H=%.3f, falling back to Cholesky", N, H)
    if spectrum is not None:
        z = rng.standard_normal((width, spectrum.size)) + 1j * rng.standard_normal((width, spectrum.size))
        incr = np.fft.fft(spectrum * z, axis=1).real[:, :N] * grid.dt**H
        paths = np.cumsum(incr, axis=1)
    else:
        L = _path_cholesky(grid.T, N, H)
        paths = (L @ rng.standard_normal((N, width))).T
    out[:, 1:, :] = paths.reshape(count, dim, N).transpose(0, 2, 1)
    return out


def fbm_increments(
    grid: TimeGrid, H: float, count: int, dim: int = 1, seed: SeedLike = None, method: str = "cholesky"
) -> np.ndarray:
    """Increments B(t_{k+1}) - B(t_k), shape (count, N, dim)."""
    return np.diff(fbm_paths(grid, H, count, dim, seed, method), axis=1)


def sample_fbm(grid: TimeGrid, H: float, dim: int = 1, seed: SeedLike = None, method: str = "cholesky") -> Path:
    """One fBm path with independent components; exact Cholesky by default, deterministic in seed."""
    return Path(grid, fbm_paths(grid, H, 1, dim, seed, method)[0])


# --- Riemann-Liouville operators ------------------------------------------------------------


def _check_alpha(alpha: float) -> float:
    alpha = float(alpha)
    if not 0.0 < alpha < 1.0:
        raise DomainError(f"fractional order must lie in (0, 1), got {alpha}")
    return alpha


def _check_side(side: str) -> None:
    if side not in ("left", "right"):
        raise DomainError(f"side must be 'left' or 'right', got {side!r}")


@lru_cache(maxsize=32)
def _integral_weights(N: int, alpha: float) -> np.ndarray:
    # product trapezoid: (x-y)^(alpha-1) integrated exactly against the piecewise-linear interpolant
    k = np.arange(N + 1, dtype=float)[:, None]
    j = np.arange(N + 1, dtype=float)[None, :]
    d = k - j
    p = alpha + 1.0

    def pw(x):
        return np.where(x > 0, np.abs(x) ** p, 0.0)

    w = pw(d + 1.0) - 2.0 * pw(d) + pw(d - 1.0)
    w[:, 0] = (pw(k - 1.0) - (k - 1.0 - alpha) * k**alpha)[:, 0]
    w[d == 0] = 1.0
    w[d < 0] = 0.0
    w[0, :] = 0.0
    w /= special.gamma(alpha + 2.0)
    w.setflags(write=False)
    return w


def _left_integral(values: np.ndarray, h: float, alpha: float) -> np.ndarray:
    return h**alpha * (_integral_weights(values.shape[0] - 1, alpha) @ values)


def _left_derivative(values: np.ndarray, h: float, alpha: float) -> np.ndarray:
    # Marchaud form: [f(x)/x^a + a int_0^x (f(x)-f(y))/(x-y)^(a+1) dy] / Gamma(1-a), f piecewise linear
    N = values.shape[0] - 1
    out = np.empty_like(values)
    # f(0) within rounding of zero counts as zero; otherwise the x^-a boundary term is infinite at 0
    tiny = np.abs(values[0]) <= BOUNDARY_ZERO_TOL * np.max(np.abs(values), axis=0)
    out[0] = np.where(tiny, 0.0, np.copysign(np.inf, values[0]))
    for k in range(1, N + 1):
        d = k - np.arange(k, dtype=float)
        e0 = d ** (-alpha)
        e1 = np.zeros_like(d)
        e1[d > 1] = (d[d > 1] - 1.0) ** (-alpha)
        dm1 = d - 1.0
        jump_w = alpha * (d ** (1.0 - alpha) - dm1 ** (1.0 - alpha)) / (1.0 - alpha) - dm1 ** (1.0 - alpha) + dm1 * e0
        level = (values[k] - values[1 : k + 1]) * (e1 - e0)[:, None]
        slope = (values[1 : k + 1] - values[:k]) * jump_w[:, None]
        out[k] = values[k] * k ** (-alpha) + (level + slope).sum(axis=0)
    return out * h ** (-alpha) / special.gamma(1.0 - alpha)


def frac_integral(f: Path, alpha: float, side: Side = "left") -> Path:
    """I^alpha_{0+} f or I^alpha_{T-} f at the nodes."""
    alpha = _check_alpha(alpha)
    _check_side(side)
    h = f.grid.dt
    if side == "left":
        return Path(f.grid, _left_integral(f.values, h, alpha))
    return Path(f.grid, _left_integral(f.values[::-1], h, alpha)[::-1])


def frac_derivative(f: Path, alpha: float, side: Side = "left") -> Path:
    """D^alpha_{0+} f or D^alpha_{T-} f at the nodes (boundary term plus singular integral)."""
    alpha = _check_alpha(alpha)
    _check_side(side)
    h = f.grid.dt
    if side == "left":
        return Path(f.grid, _left_derivative(f.values, h, alpha))
    return Path(f.grid, _left_derivative(f.values[::-1], h, alpha)[::-1])


# --- K_H, K_H-dot and the Cameron-Martin space ----------------------------------------------


def kernel_primitive(t, x, H: float):
    """
    int_0^(min(x, t)) K_H(t, s) ds in closed form; broadcasts over array arguments.
    Swapping the order of integration leaves incomplete betas: with z = x / t < 1 and a = H - 1/2,
    (a + 1) / C_H times the value is B(1-a, a) t^(a+1) I_z(1-a, a) + x^(a+1) L(z),
    L(z) = z^(-2a) (1-z)^a / (2a) + B(1-2a, a) (1 - I_z(1-2a, a)) / 2.
    """
    H = check_hurst(H)
    a = H - 0.5
    t_arr, x_arr = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(x, dtype=float))
    if np.any(t_arr < 0) or np.any(x_arr < 0):
        raise DomainError("kernel_primitive needs non-negative times")
    x_arr = np.minimum(x_arr, t_arr)
    inside = (x_arr > 0) & (x_arr < t_arr)
    z = np.where(inside, x_arr / np.where(t_arr > 0, t_arr, 1.0), 0.5)
    full = special.beta(1.0 - a, a) * t_arr ** (a + 1.0)
    b2 = 1.0 - 2.0 * a
    tail = z ** (-2.0 * a) * (1.0 - z) ** a / (2.0 * a) + 0.5 * special.beta(b2, a) * special.betaincc(b2, a, z)
    partial = full * special.betainc(1.0 - a, a, z) + x_arr ** (a + 1.0) * tail
    out = np.where(inside, partial, np.where(x_arr > 0, full, 0.0)) * kernel_constants(H).C_H / (a + 1.0)
    return float(out) if out.ndim == 0 else out


@lru_cache(maxsize=32)
def kdot_matrix(T: float, N: int, H: float) -> np.ndarray:
    """
    Matrix M with (K_H-dot u)_k = sum_j M[k, j] u_j for cell densities: row k is the exact mean of
    udot over cell k. W[k, j] integrates K_H(t_k, .) over cell j and M = (W[k+1] - W[k]) / dt, so
    cumulating M reproduces K_H u-hat at the nodes.
    """
    H = check_hurst(H)
    t = np.linspace(0.0, T, N + 1)
    W = np.diff(kernel_primitive(t[:, None], t[None, :], H), axis=1)
    M = np.diff(W, axis=0) / (T / N)
    M.setflags(write=False)
    return M


def apply_Kdot(uhat: Density, H: float) -> Density:
    """Cell rates of u = K_H u-hat; the identity when H = 1/2."""
    H = check_hurst(H, allow_half=True)
    if H == 0.5:
        return uhat
    M = kdot_matrix(uhat.grid.T, uhat.grid.N, H)
    return Density(uhat.grid, M @ uhat.values)


def apply_K(uhat: Density, H: float) -> Path:
    """u = K_H u-hat at the nodes by cumulating the cell means of udot; exact for cell-constant u-hat."""
    rates = apply_Kdot(uhat, H).values
    out = np.zeros((uhat.grid.N + 1, uhat.dim))
    out[1:] = np.cumsum(uhat.grid.dt * rates, axis=0)
    return Path(uhat.grid, out)


def apply_Kstar(phi: Density, H: float) -> Density:
    """(K*_H phi)(s) = int_s^T phi(t) dK_H(t,s)/dt dt, the L2 adjoint of K_H-dot on cells."""
    H = check_hurst(H, allow_half=True)
    if H == 0.5:
        return phi
    M = kdot_matrix(phi.grid.T, phi.grid.N, H)
    return Density(phi.grid, M.T @ phi.values)


def cm_norm(h: CMControl) -> float:
    """||h||^2 = int_0^T |u-hat|^2 + |v-hat|^2 ds."""
    total = h.uhat.l2_squared()
    if h.vhat is not None:
        total += h.vhat.l2_squared()
    return total


def in_level_set(h: CMControl, M: float) -> bool:
    """Membership in S_M = {h : ||h||^2 / 2 <= M}."""
    return 0.5 * cm_norm(h) <= M


def cm_inner_double(f: Density, g: Density, H: float) -> float:
    """
    H(2H-1) int int |t-s|^(2H-2) <f(s), g(t)> ds dt for cell densities.
    The weight integrates exactly over each pair of cells, leaving the fGn autocovariance.
    """
    H = check_hurst(H, allow_half=True)
    if f.grid != g.grid or f.dim != g.dim:
        raise DomainError("cm_inner_double needs densities on one grid with equal dimension")
    gram = linalg.toeplitz(fgn_autocovariance(np.arange(f.grid.N), H, f.grid.dt))
    return float(np.sum(f.values * (gram @ g.values)))
