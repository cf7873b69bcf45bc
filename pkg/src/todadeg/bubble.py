"""Explicit blow-up ansatz for the first Toda component and its laws.

A bubble site is a point p with weight alpha >= 0 (0 for a free point), a
height lambda and an amplitude a. Around each site the ansatz is the
singular Liouville profile

    U(x) = lambda - 2 log(1 + c e^lambda |x - p|^{2(1+alpha)}),
    c = rho1 h_p(p) / (4 (1+alpha)^2),

corrected by a small radial/angular term eta and glued to the Green
function 8 pi (1+alpha) G(x, p) by a smooth cutoff between r0 and 2 r0.

Radial problems are posed on a log-spaced grid and discretized with the
Numerov scheme; each angular mode is one sparse linear solve. Integrals of
the concentrated density combine a polar Gauss-Legendre rule around every
site with the periodic trapezoid rule elsewhere, glued by a smooth partition
of unity.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.optimize import brentq
from scipy.sparse import diags
from scipy.sparse.linalg import spsolve

from . import torus
from .errors import (GeometryError, InvalidArgument, MatchingFailure, NoRootError, ResolutionError,
                     SolvabilityError)
from .torus import R_DIAG, TorusField, TorusGrid

TWO_PI = 2.0 * math.pi
FOUR_PI = 4.0 * math.pi
EIGHT_PI = 8.0 * math.pi

LAMBDA_MIN = 5.0
AMPLITUDE_SLACK = 0.1
ZETA_RANGE = (1e-4, 1e5)
ZETA_NODES = 4001
ETA_R_MIN = 1e-5
ETA_NODES = 2401
N_THETA_MODES = 32


# -- rate laws ---------------------------------------------------------------

def rate_function(lam, alpha: float = 0.0):
    """lambda * exp(-lambda / (1 + alpha))."""
    return lam * np.exp(-np.asarray(lam) / (1.0 + alpha))


def lambda_of_rho(delta_rho: float, c: float, alpha: float = 0.0) -> float:
    """Large root lambda > 1 + alpha of c * lambda e^{-lambda/(1+alpha)} = delta_rho."""
    if delta_rho == 0 or c == 0:
        raise InvalidArgument("delta_rho and c must be nonzero")
    if (delta_rho > 0) != (c > 0):
        raise SolvabilityError("delta_rho and the rate coefficient have opposite signs: no blow-up branch")
    target = delta_rho / c
    beta = 1.0 + alpha
    peak = beta / math.e
    if target > peak:
        raise NoRootError(f"|delta_rho/c| = {target:.3e} exceeds the maximum {peak:.3e} of the rate function")
    lo, hi = beta, 2.0 * beta
    while rate_function(hi, alpha) > target:
        hi *= 2.0
    return brentq(lambda x: float(rate_function(x, alpha)) - target, lo, hi, xtol=1e-13, rtol=1e-15, maxiter=500)


def lambda_of_P(delta_rho: float, prefactor: float, alpha: float) -> float:
    """Solve delta_rho = prefactor * e^{-lambda/(1+alpha)} for lambda (singular-site law)."""
    if delta_rho == 0 or prefactor == 0:
        raise InvalidArgument("delta_rho and the prefactor must be nonzero")
    if (delta_rho > 0) != (prefactor > 0):
        raise SolvabilityError("delta_rho and the prefactor have opposite signs: no blow-up branch")
    return -(1.0 + alpha) * math.log(delta_rho / prefactor)


def lambda_ceiling(n: int) -> float:
    """Largest height resolved on an n-grid: 16 at n = 256, +2 log 2 per doubling."""
    return 16.0 + 2.0 * math.log(n / 256.0)


# -- radial profiles ---------------------------------------------------------

@dataclass
class RadialProfile:
    """Values of one angular mode on log-spaced radii."""

    nodes: np.ndarray
    values: np.ndarray
    mode: int = 0
    decay: str = ""
    residual: float = 0.0
    scale: float = 1.0
    companions: dict = field(default_factory=dict)
    flux: float = float("nan")

    def __post_init__(self):
        self._spline = CubicSpline(np.log(self.nodes), self.values)

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        out = np.zeros_like(r)
        inside = r >= self.nodes[0]
        if np.any(r[inside] > self.nodes[-1] * (1 + 1e-12)):
            raise InvalidArgument("radial profile evaluated beyond its outer node")
        out[inside] = self._spline(np.log(np.minimum(r[inside], self.nodes[-1])))
        return out

    def derivative(self, r):
        """d/dr of the profile."""
        r = np.asarray(r, dtype=float)
        return self._spline(np.log(r), 1) / r

    def log_slope(self, lo: float, hi: float) -> float:
        """Fitted exponent p in |value| ~ r^p over [lo, hi]."""
        sel = (self.nodes >= lo) & (self.nodes <= hi)
        return float(np.polyfit(np.log(self.nodes[sel]), np.log(np.abs(self.values[sel])), 1)[0])

    def log_coefficient(self, lo: float, hi: float) -> float:
        """Fitted a in value ~ a log r + b over [lo, hi]."""
        sel = (self.nodes >= lo) & (self.nodes <= hi)
        return float(np.polyfit(np.log(self.nodes[sel]), self.values[sel], 1)[0])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["r", "value"])
            for r, v in zip(self.nodes, self.values):
                wr.writerow([repr(float(r)), repr(float(v))])


def solve_radial(t: np.ndarray, k: int, V: np.ndarray, F: np.ndarray, left, right):
    """Numerov solve of y'' - k^2 y + V (y + F) = 0 in t = log r.

    ``left``/``right`` are ('robin', kappa, g) boundary rows y' = kappa * y + g,
    discretized by one-sided second-order differences.
    Returns (y, residual) where the residual is the largest Numerov row
    defect relative to the forcing size.
    """
    n = len(t)
    h = t[1] - t[0]
    q = k * k - V
    rhs_src = -V * F
    a = 1.0 - h * h * q / 12.0
    b = -2.0 * (1.0 + 5.0 * h * h * q / 12.0)
    lower = np.zeros(n - 1)
    main = np.zeros(n)
    upper = np.zeros(n - 1)
    rhs = np.zeros(n)
    lower[: n - 2] = a[: n - 2]
    main[1: n - 1] = b[1: n - 1]
    upper[1: n - 1] = a[2:]
    rhs[1: n - 1] = h * h / 12.0 * (rhs_src[2:] + 10.0 * rhs_src[1:-1] + rhs_src[:-2])
    extra_rows = {}
    _, kappa, g = left
    extra_rows[0] = ({0: -3.0 / (2 * h) - kappa, 1: 4.0 / (2 * h), 2: -1.0 / (2 * h)}, g)
    _, kappa, g = right
    extra_rows[n - 1] = ({n - 1: 3.0 / (2 * h) - kappa, n - 2: -4.0 / (2 * h), n - 3: 1.0 / (2 * h)}, g)
    A = diags([lower, main, upper], [-1, 0, 1], shape=(n, n), format="lil")
    for row, (coefs, g) in extra_rows.items():
        A[row, :] = 0.0
        for col, val in coefs.items():
            A[row, col] = val
        rhs[row] = g
    A = A.tocsr()
    y = spsolve(A, rhs)
    defect = A @ y - rhs
    size = max(float(np.max(np.abs(rhs_src))), float(np.max(np.abs(q * y))), 1e-300)
    return y, float(np.max(np.abs(defect[1:-1]))) / (h * h * size)


def liouville_potential(s, alpha: float, c: float):
    """s^2 * 2 rho1 h |y|^{2 alpha} e^{U'} written through c = rho1 h / (4 (1+alpha)^2)."""
    beta = 1.0 + alpha
    s = np.asarray(s, dtype=float)
    return 8.0 * beta * beta * c * s ** (2.0 * beta) / (1.0 + c * s ** (2.0 * beta)) ** 2


def zeta1_closed_form(s, alpha: float, c: float, e: float):
    """Decaying mode-1 solution; regular kernel is s(alpha c s^{2b} - (alpha + 2))/(1 + c s^{2b})."""
    beta = 1.0 + alpha
    s = np.asarray(s, dtype=float)
    return -(2.0 * beta / alpha) * e * s / (1.0 + c * s ** (2.0 * beta))


def d_closed_form(alpha: float, rho1: float, h_at: float, bracket: float) -> float:
    beta = 1.0 + alpha
    return math.pi / (beta * math.sin(math.pi / beta)) * (4.0 * beta * beta / (rho1 * h_at)) ** (1.0 / beta) * bracket


def solve_zeta(alpha: float, mode: str, *, c: float, e: float = 0.0, hess=None, zeta1: RadialProfile | None = None,
               s_range=ZETA_RANGE, nodes: int = ZETA_NODES) -> RadialProfile:
    """Correction profiles around a singular site in the scaled variable s = |y|.

    mode='zeta1': mode-1 (cos) profile f with zeta_1 = f(s) cos(theta), forced by e*y_1.
    mode='zeta2': mode-0 profile forced by Q + (e y_1 + zeta_1)^2 / 2, with the
    mode-2 cos/sin parts in ``companions``. ``hess`` is the Hessian of the
    log-weight at the site in the rotated frame.
    """
    if alpha < 0:
        raise InvalidArgument("alpha must be nonnegative")
    if alpha == 0:
        raise InvalidArgument("the decaying correction profiles need alpha > 0")
    if abs(alpha - round(alpha)) < 1e-12:
        raise InvalidArgument("integer alpha is excluded for singular sites")
    beta = 1.0 + alpha
    t = np.linspace(math.log(s_range[0]), math.log(s_range[1]), nodes)
    s = np.exp(t)
    V = liouville_potential(s, alpha, c)
    if mode == "zeta1":
        F = e * s
        if e == 0.0:
            y, res = np.zeros_like(s), 0.0
        else:
            # decay s^{-2 alpha - 1}: (y' + y) matches the tail integral of the forcing
            y, res = _solve_zeta1(t, V, F, alpha)
        prof = RadialProfile(s, y, 1, f"r^-{2 * alpha + 1:g}", res)
        if e != 0.0 and prof.values[-1] != 0 and abs(prof.values[-1]) > abs(prof.values).max() * 1e-2:
            raise MatchingFailure("mode-1 correction does not decay")
        return prof
    if mode != "zeta2":
        raise InvalidArgument(f"unknown profile mode {mode!r}")
    hess = np.zeros((2, 2)) if hess is None else np.asarray(hess, dtype=float)
    f1 = np.zeros_like(s) if zeta1 is None else zeta1(s)
    sq = (e * s + f1) ** 2
    F0 = np.trace(hess) / 4.0 * s * s + 0.25 * sq
    F2c = (hess[0, 0] - hess[1, 1]) / 4.0 * s * s + 0.25 * sq
    F2s = hess[0, 1] / 2.0 * s * s
    # mode 0 is an initial value problem: regular and vanishing at the origin
    y0, res0 = _march_mode0(t, V, F0)
    companions = {}
    for key, F2 in (("cos2", F2c), ("sin2", F2s)):
        if np.max(np.abs(F2)) == 0.0:
            y2, r2 = np.zeros_like(s), 0.0
        else:
            g_tail = V[-1] * F2[-1] / (2.0 + 2.0 * alpha)
            y2, r2 = solve_radial(t, 2, V, F2, ("robin", 2.0, 0.0), ("robin", -2.0 + V[-1] / (2.0 + 2.0 * alpha), g_tail))
        companions[key] = RadialProfile(s, y2, 2, "bounded", r2)
    prof = RadialProfile(s, y0, 0, "log", res0, companions=companions)
    # flux limit: slope at node i plus the s^{-2 alpha} tail of the forcing beyond it
    h = t[1] - t[0]

    def limit(i):
        slope = (3 * y0[i] - 4 * y0[i - 1] + y0[i - 2]) / (2 * h)
        return slope - V[i] * (y0[i] + F0[i]) / (2.0 * alpha)

    far, mid = limit(len(t) - 1), limit(int(np.searchsorted(t, t[-1] - math.log(100.0))))
    if abs(far - mid) > 0.05 * max(abs(far), float(np.max(np.abs(y0))) / (t[-1] - t[0])):
        raise MatchingFailure("mode-0 correction does not settle to logarithmic growth")
    prof.flux = -far
    return prof


def _solve_zeta1(t, V, F, alpha):
    beta = 1.0 + alpha
    # right: y' + y = V (y + F)/(2 beta); left: regular, y' = y
    kappa_r = -1.0 + V[-1] / (2.0 * beta)
    g_r = V[-1] * F[-1] / (2.0 * beta)
    return solve_radial(t, 1, V, F, ("robin", 1.0, 0.0), ("robin", kappa_r, g_r))


def _march_mode0(t, V, F):
    """Mode-0 Numerov recursion from vanishing data at the inner node."""
    return _march_general(t, 0, V, F)


def d_from_flux(zeta2: RadialProfile) -> float:
    """d = -(limit of s * d zeta2_0 / ds), with the power-law tail added back."""
    return zeta2.flux


# -- problem data around the sites ---------------------------------------------

def _wrap(d):
    return d - np.round(d)


@dataclass(frozen=True)
class BubbleSite:
    point: tuple
    alpha: float = 0.0
    lam: float = 10.0
    a: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "point", tuple(float(v) % 1.0 for v in self.point))
        object.__setattr__(self, "alpha", float(self.alpha))
        object.__setattr__(self, "lam", float(self.lam))
        object.__setattr__(self, "a", float(self.a))

    @property
    def beta(self) -> float:
        return 1.0 + self.alpha


@dataclass(frozen=True)
class BubbleParams:
    sites: tuple
    rho1: float
    r0: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "sites", tuple(self.sites))
        if not self.sites:
            raise InvalidArgument("at least one bubble site is required")
        for s in self.sites:
            if s.lam < LAMBDA_MIN:
                raise InvalidArgument(f"bubble height {s.lam} below {LAMBDA_MIN}")
            if abs(s.a - 1.0) > AMPLITUDE_SLACK:
                raise InvalidArgument(f"amplitude {s.a} too far from 1")
        if not 0 < self.r0 < 0.25:
            raise InvalidArgument("cutoff radius must lie in (0, 1/4)")
        for i, si in enumerate(self.sites):
            for sj in self.sites[i + 1:]:
                if float(np.hypot(*_wrap(np.subtract(si.point, sj.point)))) < 2 * self.r0:
                    raise GeometryError("bubble sites closer than 2 r0")

    @property
    def rho_star(self) -> float:
        return FOUR_PI * sum(s.beta for s in self.sites)

    @property
    def J1(self) -> list[int]:
        return [i for i, s in enumerate(self.sites) if s.alpha == 0.0]

    @property
    def J2(self) -> list[int]:
        sing = [i for i, s in enumerate(self.sites) if s.alpha > 0.0]
        if not sing:
            return []
        top = max(self.sites[i].alpha for i in sing)
        return [i for i in sing if self.sites[i].alpha == top]

    @property
    def has_singular(self) -> bool:
        return any(s.alpha > 0 for s in self.sites)

    def with_heights(self, lams=None, amps=None, rho1=None, r0=None) -> BubbleParams:
        sites = list(self.sites)
        if lams is not None:
            sites = [BubbleSite(s.point, s.alpha, l, s.a) for s, l in zip(sites, lams)]
        if amps is not None:
            sites = [BubbleSite(s.point, s.alpha, s.lam, a) for s, a in zip(sites, amps)]
        return BubbleParams(tuple(sites), self.rho1 if rho1 is None else rho1, self.r0 if r0 is None else r0)


class BubbleContext:
    """The smooth data h = h1 e^{-w/2} and the Green-function weights at the sites.

    ``vortex`` lists (q, alpha_q) with h1 = h1* prod e^{-4 pi alpha_q G(., q)}.
    """

    def __init__(self, h1, w: TorusField, vortex=(), rho2: float | None = None):
        from .weights import as_smooth

        self.h1 = as_smooth(h1)
        self.w = w
        self.grid = w.grid
        self.vortex = tuple((tuple(map(float, q)), float(a)) for q, a in vortex)
        self.rho2 = rho2
        self._cache: dict = {}

    @classmethod
    def from_shadow(cls, problem, state) -> BubbleContext:
        return cls(problem.h1, state.w, problem.vortex, problem.rho2)

    @property
    def n_star(self) -> float:
        return FOUR_PI * sum(a for _, a in self.vortex)

    # log h(x) for points of shape (M, 2)
    def log_h(self, x, exclude=None) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.log(self.h1.value(x)) - 0.5 * self.w.eval_at(x)
        for q, a in self.vortex:
            if exclude is not None and np.allclose(q, exclude):
                continue
            with np.errstate(divide="ignore"):
                logd = torus.log_theta_distance(q, x)
            out = out + 2.0 * a * logd - FOUR_PI * a * R_DIAG
        return out

    def log_h_grid(self) -> np.ndarray:
        if "grid" not in self._cache:
            x1, x2 = self.grid.coords()
            pts = np.stack([x1.ravel(), x2.ravel()], -1)
            self._cache["grid"] = self.log_h(pts).reshape(self.grid.n, self.grid.n)
        return self._cache["grid"]

    def delta_log_h1_star(self, p) -> float:
        return float(self.h1.log_laplacian(np.asarray(p, dtype=float)))

    def laplacian_w(self, p) -> float:
        p = np.atleast_2d(p)
        return float(self.w.eval_at(p, (2, 0))[0] + self.w.eval_at(p, (0, 2))[0])


@dataclass
class SiteData:
    index: int
    site: BubbleSite
    log_hp: float          # log h_{p_j}(p_j)
    g_star: float          # G*_j(p_j)
    grad: np.ndarray       # gradient of log(H_j + 1) at p_j
    hess: np.ndarray       # Hessian of log(H_j + 1) at p_j
    c: float = 0.0
    s: float = 0.0
    d: float = 0.0
    delta_H: float = 0.0
    eta: object = None
    mean: float = 0.0
    t: float = 0.0

    @property
    def epsilon(self) -> float:
        return math.exp(-self.site.lam / (2.0 * self.site.beta))


def _site_log_weight(ctx: BubbleContext, params: BubbleParams, j: int, x) -> np.ndarray:
    """log h_{p_j}(x) + G*_j(x) at points x near p_j."""
    sj = params.sites[j]
    x = np.atleast_2d(np.asarray(x, dtype=float))
    out = ctx.log_h(x, exclude=sj.point if sj.alpha > 0 else None)
    if sj.alpha > 0:
        out = out - FOUR_PI * sj.alpha * torus.green_regular(sj.point, x)
    out = out + EIGHT_PI * sj.beta * torus.green_regular(sj.point, x)
    for i, si in enumerate(params.sites):
        if i != j:
            out = out + EIGHT_PI * si.beta * torus.green_eval(si.point, x)
    return out


def site_data(ctx: BubbleContext, params: BubbleParams, j: int) -> SiteData:
    sj = params.sites[j]
    p = np.asarray(sj.point)
    p2 = p[None, :]
    log_hp = float(ctx.log_h(p2, exclude=sj.point if sj.alpha > 0 else None)[0]) - FOUR_PI * sj.alpha * R_DIAG
    g_star = EIGHT_PI * sj.beta * R_DIAG
    grad = ctx.h1.log_grad(p) - 0.5 * np.array([ctx.w.eval_at(p2, (1, 0))[0], ctx.w.eval_at(p2, (0, 1))[0]])
    wxx, wxy, wyy = (ctx.w.eval_at(p2, d)[0] for d in ((2, 0), (1, 1), (0, 2)))
    hess = ctx.h1.log_hess(p) - 0.5 * np.array([[wxx, wxy], [wxy, wyy]])
    for q, a in ctx.vortex:
        if np.allclose(q, sj.point):
            hess = hess - FOUR_PI * a * torus.green_regular_hessian(q, p)
            continue
        grad = grad - FOUR_PI * a * torus.green_grad(q, p)
        hess = hess - FOUR_PI * a * torus.green_hessian(q, p)
    hess = hess + EIGHT_PI * sj.beta * torus.green_regular_hessian(sj.point, p)
    for i, si in enumerate(params.sites):
        if i != j:
            g_star += EIGHT_PI * si.beta * float(torus.green_eval(si.point, p))
            grad = grad + EIGHT_PI * si.beta * torus.green_grad(si.point, p)
            hess = hess + EIGHT_PI * si.beta * torus.green_hessian(si.point, p)
    return SiteData(j, sj, log_hp, g_star, np.asarray(grad, float), np.asarray(hess, float))


# -- quadrature --------------------------------------------------------------

def _gauss_log_panels(r_lo: float, r_hi: float, width: float = 0.25, order: int = 8):
    nodes, weights = np.polynomial.legendre.leggauss(order)
    a, b = math.log(r_lo), math.log(r_hi)
    n_pan = max(1, int(math.ceil((b - a) / width)))
    edges = np.linspace(a, b, n_pan + 1)
    t = ((edges[:-1, None] + edges[1:, None]) / 2 + (edges[1:, None] - edges[:-1, None]) / 2 * nodes[None, :]).ravel()
    wt = ((edges[1:, None] - edges[:-1, None]) / 2 * weights[None, :]).ravel()
    return np.exp(t), wt


@dataclass
class PolarRule:
    center: np.ndarray
    radii: np.ndarray
    angles: np.ndarray
    points: np.ndarray     # (n_r * n_theta, 2), wrapped into the unit cell
    offsets: np.ndarray    # displacement from the center
    weights: np.ndarray    # area weights


def polar_rule(center, r_hi: float, r_lo: float = 1e-11, n_theta: int = 64) -> PolarRule:
    r, wt = _gauss_log_panels(r_lo, r_hi)
    th = TWO_PI * np.arange(n_theta) / n_theta
    rr, tt = np.meshgrid(r, th, indexing="ij")
    off = np.stack([rr * np.cos(tt), rr * np.sin(tt)], -1).reshape(-1, 2)
    w = (wt[:, None] * r[:, None] ** 2 * (TWO_PI / n_theta)).repeat(n_theta, 1).ravel()
    pts = (np.asarray(center)[None, :] + off) % 1.0
    return PolarRule(np.asarray(center, float), r, th, pts, off, w)


# -- the eta correction for free points ----------------------------------------

class EtaModes:
    """Angular modes of the correction eta around a free point.

    Solves Delta eta + 2 rho1 h(q) e^U (eta + J) = 0 with eta(q) = 0,
    grad eta(q) = 0, mode by mode in log r.
    """

    def __init__(self, r, modes: dict):
        self.r = r
        self.modes = modes  # (k, 'cos'|'sin') -> RadialProfile in r

    def __call__(self, offsets) -> np.ndarray:
        off = np.atleast_2d(offsets)
        r = np.hypot(off[:, 0], off[:, 1])
        th = np.arctan2(off[:, 1], off[:, 0])
        out = np.zeros(len(off))
        for (k, kind), prof in self.modes.items():
            ang = np.cos(k * th) if kind == "cos" else np.sin(k * th)
            out += prof(r) * ang
        return out

    def radial(self, k=0, kind="cos") -> RadialProfile:
        return self.modes[(k, kind)]

    def sup(self) -> float:
        return float(max(np.max(np.abs(p.values)) for p in self.modes.values()))

    def grad_sup(self) -> float:
        """Upper estimate of sup |grad eta| from the mode profiles."""
        total = np.zeros_like(self.r)
        for (k, _), prof in self.modes.items():
            dr = prof.derivative(self.r)
            total += np.hypot(dr, k * prof.values / self.r)
        return float(np.max(total))


def _forcing_modes(ctx, params, sd: SiteData, r, n_theta=N_THETA_MODES):
    """Angular Fourier modes of J = (H - grad H . x) sigma on radii r."""
    sj = sd.site
    th = TWO_PI * np.arange(n_theta) / n_theta
    rr, tt = np.meshgrid(r, th, indexing="ij")
    off = np.stack([rr * np.cos(tt), rr * np.sin(tt)], -1).reshape(-1, 2)
    pts = (np.asarray(sj.point)[None, :] + off) % 1.0
    L = _site_log_weight(ctx, params, sd.index, pts) - (sd.log_hp + sd.g_star)
    H = np.expm1(L)
    sig = torus.cutoff(np.hypot(off[:, 0], off[:, 1]), params.r0, 2 * params.r0)
    J = ((H - off @ sd.grad) * sig).reshape(len(r), n_theta)
    # Taylor form below the smallest sampled radius keeps cancellation out of the inner nodes
    tay = 0.5 * np.einsum("ni,ij,nj->n", off, sd.hess + np.outer(sd.grad, sd.grad), off).reshape(len(r), n_theta)
    small = r < ETA_R_MIN
    J[small] = tay[small]
    coef = np.fft.rfft(J, axis=1) / n_theta
    modes = {}
    scale = np.max(np.abs(coef))
    for k in range(coef.shape[1]):
        ck = coef[:, k]
        if k == 0:
            modes[(0, "cos")] = ck.real
            continue
        if k == n_theta // 2:
            continue
        if np.max(np.abs(ck.real)) > 1e-12 * scale:
            modes[(k, "cos")] = 2 * ck.real
        if np.max(np.abs(ck.imag)) > 1e-12 * scale:
            modes[(k, "sin")] = -2 * ck.imag
    return modes


def solve_eta(ctx, params, sd: SiteData, n_nodes=ETA_NODES, r_min=1e-11) -> EtaModes:
    key = ("J", sd.index, params.r0, n_nodes, r_min, params.sites)
    r = np.exp(np.linspace(math.log(r_min), math.log(2 * params.r0), n_nodes))
    if key not in ctx._cache:
        ctx._cache[key] = _forcing_modes(ctx, params, sd, r)
    forcing = ctx._cache[key]
    t = np.log(r)
    # s = R r with R^2 = c e^lambda; potential 8 s^2 / (1 + s^2)^2
    s = math.sqrt(sd.c * math.exp(sd.site.lam)) * r
    V = liouville_potential(s, 0.0, 1.0)

    def one(item):
        (k, kind), F = item
        if k <= 1:
            # eta(q) = 0 and grad eta(q) = 0 fix modes 0 and 1 completely
            y, res = _march_general(t, k, V, F)
        else:
            # higher modes: regular at q and free of r^k growth at the outer radius
            y, res = solve_radial(t, k, V, F, ("robin", float(k), 0.0), ("robin", -float(k), 0.0))
        return (k, kind), RadialProfile(r, y, k, "log^2" if k == 0 else f"r^{k}", res)

    with ThreadPoolExecutor(max_workers=_workers()) as ex:
        modes = dict(ex.map(one, forcing.items()))
    return EtaModes(r, modes)


def _march_general(t, k, V, F):
    """Numerov recursion y'' = (k^2 - V) y - V F from vanishing data."""
    h = t[1] - t[0]
    q = k * k - V
    src = -V * F
    a = 1.0 - h * h * q / 12.0
    b = 2.0 * (1.0 + 5.0 * h * h * q / 12.0)
    y = np.zeros_like(t)
    for i in range(1, len(t) - 1):
        y[i + 1] = (b[i] * y[i] - a[i - 1] * y[i - 1] + h * h / 12.0 * (src[i + 1] + 10 * src[i] + src[i - 1])) / a[i + 1]
    defect = a[2:] * y[2:] - b[1:-1] * y[1:-1] + a[:-2] * y[:-2] - h * h / 12.0 * (src[2:] + 10 * src[1:-1] + src[:-2])
    size = max(float(np.max(np.abs(src))), float(np.max(np.abs(q * y))), 1e-300)
    return y, float(np.max(np.abs(defect))) / (h * h * size)


def _workers() -> int:
    import os

    try:
        return max(1, int(os.environ.get("TODA_DEGREE_THREADS", "1")))
    except ValueError:
        return 1


class SingularEta:
    """eta_j = eps zeta_1(y) + eps^2 zeta_2(y), y = rotated (x - p)/eps."""

    def __init__(self, eps, angle, zeta1: RadialProfile, zeta2: RadialProfile):
        self.eps = eps
        self.angle = angle
        self.zeta1 = zeta1
        self.zeta2 = zeta2

    def __call__(self, offsets):
        off = np.atleast_2d(offsets)
        r = np.hypot(off[:, 0], off[:, 1]) / self.eps
        th = np.arctan2(off[:, 1], off[:, 0]) - self.angle
        out = self.eps * self.zeta1(r) * np.cos(th) + self.eps**2 * self.zeta2(r)
        comp = self.zeta2.companions
        if comp:
            out += self.eps**2 * (comp["cos2"](r) * np.cos(2 * th) + comp["sin2"](r) * np.sin(2 * th))
        return out


def _rotation(grad):
    ang = math.atan2(grad[1], grad[0]) if np.hypot(*grad) > 0 else 0.0
    return ang, float(np.hypot(*grad))


# -- the assembled ansatz ------------------------------------------------------

class Bubble:
    """The ansatz v_{P,Lambda,A} = sum a_j (v_{p_j} - mean) with all constants."""

    def __init__(self, ctx: BubbleContext, params: BubbleParams):
        self.ctx = ctx
        self.params = params
        grid = ctx.grid
        self._check_geometry()
        max_lam = max(s.lam for s in params.sites)
        if max_lam > lambda_ceiling(grid.n):
            raise ResolutionError(f"height {max_lam} exceeds the resolved ceiling {lambda_ceiling(grid.n):.2f} at n={grid.n}")
        self.sites = [site_data(ctx, params, j) for j in range(len(params.sites))]
        rho1 = params.rho1
        singular = params.has_singular
        for sd in self.sites:
            sj = sd.site
            beta = sj.beta
            sd.c = rho1 * math.exp(sd.log_hp) / (4.0 * beta * beta)
            h_at = math.exp(sd.log_hp)
            sd.delta_H = float(np.trace(sd.hess) + sd.grad @ sd.grad)
            if sj.alpha > 0:
                sd.d = d_closed_form(sj.alpha, rho1, h_at, float(np.trace(sd.hess)))
            base = sj.lam + 2.0 * math.log(sd.c) + EIGHT_PI * beta * R_DIAG
            if not singular:
                # free points alone: the log^2 correction is matched by a lambda^2 e^{-lambda} shift
                sd.s = base + sd.delta_H / (rho1 * h_at) * sj.lam**2 * math.exp(-sj.lam)
                sd.eta = solve_eta(ctx, params, sd)
            elif sj.alpha == 0:
                sd.s = base
                sd.eta = None
            else:
                sd.s = base + sd.d / (2.0 * beta) * sj.lam * math.exp(-sj.lam / beta)
                ang, e = _rotation(sd.grad)
                rot = np.array([[math.cos(ang), -math.sin(ang)], [math.sin(ang), math.cos(ang)]])
                hess_rot = rot.T @ sd.hess @ rot
                z1 = solve_zeta(sj.alpha, "zeta1", c=sd.c, e=e)
                z2 = solve_zeta(sj.alpha, "zeta2", c=sd.c, e=e, hess=hess_rot, zeta1=z1)
                sd.eta = SingularEta(sd.epsilon, ang, z1, z2)
        self._polar = [polar_rule(sd.site.point, 2 * params.r0) for sd in self.sites]
        self._polar_logh = [ctx.log_h(rule.points) for rule in self._polar]
        for sd in self.sites:
            sd.mean = self._site_mean(sd.index)
        total_mean = sum(sd.mean for sd in self.sites)
        for sd in self.sites:
            # G*_j(p_j) carries 8 pi beta_j R(p_j, p_j) plus the other sites' Green terms
            sd.t = sd.s - EIGHT_PI * sd.site.beta * R_DIAG + sd.g_star - total_mean

    def _check_geometry(self):
        r0 = self.params.r0
        pts = [s.point for s in self.params.sites]
        for i in range(len(pts)):
            for j in range(i + 1, len(pts)):
                if float(np.hypot(*_wrap(np.subtract(pts[i], pts[j])))) < 4 * r0:
                    raise GeometryError("cutoff discs of two sites overlap; reduce r0")
        if 2 * r0 >= 0.5:
            raise GeometryError("cutoff disc wraps around the torus")

    # one-site profile v_{p_j} at points given by offsets from p_j (and absolute points)
    def site_value(self, j: int, points, offsets=None) -> np.ndarray:
        sd = self.sites[j]
        sj = sd.site
        r0 = self.params.r0
        pts = np.atleast_2d(points)
        off = _wrap(pts - np.asarray(sj.point)) if offsets is None else np.atleast_2d(offsets)
        r = np.hypot(off[:, 0], off[:, 1])
        sig = torus.cutoff(r, r0, 2 * r0)
        out = np.zeros(len(pts))
        inner = sig > 0
        if np.any(inner):
            ri = r[inner]
            U = sj.lam - 2.0 * np.log1p(sd.c * math.exp(sj.lam) * ri ** (2 * sj.beta))
            val = U + EIGHT_PI * sj.beta * (torus.green_regular(sj.point, pts[inner]) - R_DIAG) + sd.s
            if sd.eta is not None:
                val = val + sd.eta(off[inner])
            out[inner] = sig[inner] * val
        outer = sig < 1
        if np.any(outer):
            out[outer] += (1 - sig[outer]) * EIGHT_PI * sj.beta * torus.green_eval(sj.point, pts[outer])
        return out

    def _partition(self, j, r):
        return torus.cutoff(r, self.params.r0, 2 * self.params.r0)

    def _site_mean(self, j: int) -> float:
        """Mean of v_{p_j} with the core handled by the polar rule."""
        rule = self._polar[j]
        r = np.hypot(rule.offsets[:, 0], rule.offsets[:, 1])
        chi = self._partition(j, r)
        core = float(np.sum(rule.weights * chi * self.site_value(j, rule.points, rule.offsets)))
        grid = self.ctx.grid
        x1, x2 = grid.coords()
        pts = np.stack([x1.ravel(), x2.ravel()], -1)
        off = _wrap(pts - np.asarray(self.sites[j].site.point))
        rg = np.hypot(off[:, 0], off[:, 1])
        keep = self._partition(j, rg) < 1
        vals = np.zeros(len(pts))
        vals[keep] = (1 - self._partition(j, rg[keep])) * self.site_value(j, pts[keep], off[keep])
        return core + float(np.sum(vals)) * grid.cell_area

    def value(self, points, offsets_for=None) -> np.ndarray:
        pts = np.atleast_2d(points)
        out = np.zeros(len(pts))
        for sd in self.sites:
            off = None
            if offsets_for is not None and offsets_for[0] == sd.index:
                off = offsets_for[1]
            out += sd.site.a * (self.site_value(sd.index, pts, off) - sd.mean)
        return out

    def field(self, grid: TorusGrid | None = None) -> TorusField:
        grid = grid or self.ctx.grid
        x1, x2 = grid.coords()
        pts = np.stack([x1.ravel(), x2.ravel()], -1)
        return TorusField(grid, self.value(pts).reshape(grid.n, grid.n))

    # -- integrals of the density rho1 h1 e^{2 v1 - v2} ------------------------
    def mass(self, psi: TorusField | None = None, rho1: float | None = None) -> float:
        """Quadrature of rho1 h e^{v - psi} over the torus."""
        rho1 = self.params.rho1 if rho1 is None else rho1
        total = 0.0
        for sd, rule, logh in zip(self.sites, self._polar, self._polar_logh):
            r = np.hypot(rule.offsets[:, 0], rule.offsets[:, 1])
            chi = self._partition(sd.index, r)
            logd = logh + self.value(rule.points, (sd.index, rule.offsets))
            if psi is not None:
                logd = logd - psi.eval_at(rule.points)
            total += float(np.sum(rule.weights * chi * np.exp(logd)))
        grid = self.ctx.grid
        x1, x2 = grid.coords()
        pts = np.stack([x1.ravel(), x2.ravel()], -1)
        rest = np.ones(len(pts))
        for sd in self.sites:
            off = _wrap(pts - np.asarray(sd.site.point))
            rest -= self._partition(sd.index, np.hypot(off[:, 0], off[:, 1]))
        keep = rest > 0
        logd = self.ctx.log_h_grid().ravel()[keep] + self.value(pts[keep])
        if psi is not None:
            logd = logd - psi.values.ravel()[keep]
        with np.errstate(under="ignore"):
            total += float(np.sum(rest[keep] * np.exp(logd))) * grid.cell_area
        return rho1 * total

    def main_terms(self, psi: TorusField | None = None) -> dict:
        psi_at = [0.0 if psi is None else float(psi.eval_at(np.atleast_2d(sd.site.point))[0]) for sd in self.sites]
        base = sum(FOUR_PI * sd.site.beta * math.exp(sd.t) * (1 - pv) for sd, pv in zip(self.sites, psi_at))
        dterm = sum(math.pi * self.sites[j].d * math.exp(self.sites[j].t) * math.exp(-self.sites[j].site.lam / self.sites[j].site.beta)
                    for j in self.params.J2)
        aterm = sum(EIGHT_PI * sd.site.beta * sd.site.lam * (sd.site.a - 1) * math.exp(sd.t) for sd in self.sites)
        return {"base": base, "d_term": dterm, "a_term": aterm, "total": base + dterm + aterm}

    def bracket_integral(self, j: int) -> float:
        """Quadrature over B_{r0}(p_j) of rho1 h_j |y|^{2 alpha} e^{U_j + t_j} (eta + grad H.y + Q + (eta + grad H.y)^2/2)."""
        sd = self.sites[j]
        sj = sd.site
        rule = polar_rule(sj.point, self.params.r0)
        off = rule.offsets
        r = np.hypot(off[:, 0], off[:, 1])
        U = sj.lam - 2.0 * np.log1p(sd.c * math.exp(sj.lam) * r ** (2 * sj.beta))
        eta = sd.eta(off) if sd.eta is not None else 0.0
        lin = off @ sd.grad
        quad = 0.5 * np.einsum("ni,ij,nj->n", off, sd.hess, off)
        br = eta + lin + quad + 0.5 * (eta + lin) ** 2
        dens = self.params.rho1 * math.exp(sd.log_hp) * r ** (2 * sj.alpha) * np.exp(U + sd.t)
        return float(np.sum(rule.weights * dens * br))

    def report(self) -> dict:
        return {
            "rho1": self.params.rho1,
            "rho_star": self.params.rho_star,
            "r0": self.params.r0,
            "sites": [
                {"point": list(sd.site.point), "alpha": sd.site.alpha, "lambda": sd.site.lam, "a": sd.site.a,
                 "s": sd.s, "t": sd.t, "d": sd.d, "mean": sd.mean, "g_star": sd.g_star,
                 "delta_H": sd.delta_H}
                for sd in self.sites
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.report(), indent=2)


def build_bubble(params: BubbleParams, shadow_state, problem) -> Bubble:
    if not shadow_state.converged:
        raise InvalidArgument("bubble assembly requires a converged shadow state")
    ctx = BubbleContext.from_shadow(problem, shadow_state)
    return Bubble(ctx, params)


def assemble_bubble(params: BubbleParams, shadow_state, problem) -> TorusField:
    return build_bubble(params, shadow_state, problem).field()


# -- derived quantities --------------------------------------------------------

def l_Q_eval(ctx: BubbleContext, params: BubbleParams, rho_star: float | None = None) -> float:
    """The gate coefficient l(Q); with no singular site the free points play the maximal block."""
    rho_star = params.rho_star if rho_star is None else rho_star
    block = params.J2 or params.J1
    total = 0.0
    for j in block:
        sd = site_data(ctx, params, j)
        beta = sd.site.beta
        p = sd.site.point
        bracket = ctx.delta_log_h1_star(p) - 0.5 * ctx.laplacian_w(p) + 2.0 * rho_star - ctx.n_star
        pref = (math.exp(sd.log_hp) * rho_star / (4 * beta * beta)) ** (1 / beta) * math.exp(sd.g_star / beta)
        total += pref * bracket
    return total


def theta_eval(bubble: Bubble, rho1: float | None = None, psi_at=None) -> list[float]:
    params = bubble.params
    rho1 = params.rho1 if rho1 is None else rho1
    rs = params.rho_star
    sites = bubble.sites
    psi_at = psi_at or [0.0] * len(sites)
    dsum = sum(math.pi * sd.d * math.exp(-sd.site.lam / sd.site.beta) for sd in sites)
    asum = sum(EIGHT_PI * sd.site.beta * sd.site.lam * (sd.site.a - 1) for sd in sites)
    out = []
    for sj in sites:
        tsum = sum(FOUR_PI * si.site.beta * (si.t - sj.t - pv) for si, pv in zip(sites, psi_at))
        out.append(((rho1 - rs) - dsum - tsum - asum) / rs)
    return out


def mass_expansion_check(bubble: Bubble, psi: TorusField | None = None) -> dict:
    lhs = bubble.mass(psi)
    terms = bubble.main_terms(psi)
    scale = math.exp(bubble.sites[0].t)
    return {"lhs": lhs, "main_terms": terms, "discrepancy": lhs - terms["total"],
            "relative": (lhs - terms["total"]) / scale, "lambda": [sd.site.lam for sd in bubble.sites]}


def rate_coefficient(ctx: BubbleContext, point) -> float:
    """(Delta log h(p) + 8 pi) / h(p) for h = h1 e^{-w/2} on the flat torus."""
    p = np.asarray(point, dtype=float)
    logh = float(ctx.log_h(p[None, :])[0])
    lap = ctx.delta_log_h1_star(p) - 0.5 * ctx.laplacian_w(p)
    return (lap + EIGHT_PI) / math.exp(logh)


def rho1_of_lambda(ctx: BubbleContext, point, lam: float, r0: float = 0.1, tol: float = 1e-14, max_iter: int = 50):
    """rho1 at which the single free-point ansatz of height lam carries mass rho1 e^t.

    Fixed point of rho1 -> rho1 * int h e^{v_q - s}; the map is nearly
    constant in rho1, so a few sweeps suffice. Returns (rho1, bubble).
    """
    rho1 = FOUR_PI
    bub = None
    for _ in range(max_iter):
        params = BubbleParams((BubbleSite(point, 0.0, lam),), rho1, r0)
        bub = Bubble(ctx, params)
        new = bub.mass() / math.exp(bub.sites[0].t)
        if abs(new - rho1) <= tol * rho1:
            return new, bub
        rho1 = new
    raise MatchingFailure("mass fixed point for rho1 did not converge")


def rate_law_fit(ctx: BubbleContext, point, lams=(10.0, 11.0, 12.0, 13.0, 14.0), r0: float = 0.1) -> dict:
    """Fit (rho1 - 4 pi) e^lambda = A lambda + B and compare A with the analytic coefficient."""
    lams = list(map(float, lams))
    rhos = [rho1_of_lambda(ctx, point, lam, r0)[0] for lam in lams]
    y = [(r - FOUR_PI) * math.exp(l) for r, l in zip(rhos, lams)]
    A, B = np.polyfit(lams, y, 1)
    pred = rate_coefficient(ctx, point)
    return {"lambda": lams, "rho1": rhos, "rho1_minus_4pi": [r - FOUR_PI for r in rhos],
            "predicted": [pred * l * math.exp(-l) for l in lams], "A": float(A), "B": float(B),
            "analytic": pred, "relative_error": abs(A - pred) / abs(pred)}


def eta_leading_term(bubble: Bubble, j: int, r) -> np.ndarray:
    """-(4 Delta H / (rho1 h)) e^{-lambda} [log(R r + 2)]^2 with R^2 = rho1 h e^lambda / 4."""
    sd = bubble.sites[j]
    rho1 = bubble.params.rho1
    h_at = math.exp(sd.log_hp)
    R = math.sqrt(rho1 * h_at * math.exp(sd.site.lam) / 4.0)
    return -(4.0 * sd.delta_H / (rho1 * h_at)) * math.exp(-sd.site.lam) * np.log(R * np.asarray(r) + 2.0) ** 2
