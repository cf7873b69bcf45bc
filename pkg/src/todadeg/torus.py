"""Flat unit torus: grids, spectral Laplacian, Green function, quadrature.

The torus is [0,1)^2 with the flat metric. Fields are sampled at the nodes
x = (i/n, j/n), array index [i, j] <-> (x1, x2).

The Green function solves -Delta G(., p) = delta_p - 1 with zero mean. Point
values come from the Jacobi theta product for the square lattice (nome
q = e^{-pi}); field-level quantities come from FFTs. The two routes are kept
separate so they can check each other.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import integrate as sp_integrate

from .errors import InvalidArgument, PoleError, SolvabilityError

TWO_PI = 2.0 * math.pi
NOME = math.exp(-math.pi)
_N_PRODUCT = 10
_Q2N = NOME ** (2 * np.arange(1, _N_PRODUCT + 1))
# sum_n log(1 - q^{2n}), enters the zero-mean constant
_LOG_EULER = float(np.sum(np.log1p(-_Q2N)))
# coefficients of the log-derivative series of theta_1
_DLOG_COEF = 4.0 * _Q2N / (1.0 - _Q2N)
_NS = np.arange(1, _N_PRODUCT + 1)


@dataclass(frozen=True)
class TorusGrid:
    n: int

    def __post_init__(self):
        n = self.n
        if not isinstance(n, (int, np.integer)) or n < 16 or n & (n - 1):
            raise InvalidArgument(f"grid size must be a power of two >= 16, got {n!r}")

    @property
    def spacing(self) -> float:
        return 1.0 / self.n

    @property
    def cell_area(self) -> float:
        return 1.0 / self.n**2

    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        s = np.arange(self.n) / self.n
        return np.meshgrid(s, s, indexing="ij")

    def wavenumbers(self) -> tuple[np.ndarray, np.ndarray]:
        k = np.fft.fftfreq(self.n, d=1.0 / self.n)
        return np.meshgrid(k, k, indexing="ij")

    def laplace_symbol(self) -> np.ndarray:
        k1, k2 = self.wavenumbers()
        return -(TWO_PI**2) * (k1**2 + k2**2)

    def nearest_node(self, p) -> tuple[int, int]:
        i = int(np.floor(p[0] * self.n + 0.5)) % self.n
        j = int(np.floor(p[1] * self.n + 0.5)) % self.n
        return i, j


@dataclass
class TorusField:
    grid: TorusGrid
    values: np.ndarray
    _coef: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.grid.n, self.grid.n):
            raise InvalidArgument(f"field shape {v.shape} does not match grid n={self.grid.n}")
        if not np.all(np.isfinite(v)):
            raise InvalidArgument("field has non-finite values")
        self.values = v

    @classmethod
    def zeros(cls, grid: TorusGrid) -> TorusField:
        return cls(grid, np.zeros((grid.n, grid.n)))

    @classmethod
    def from_function(cls, grid: TorusGrid, func) -> TorusField:
        x1, x2 = grid.coords()
        return cls(grid, np.broadcast_to(func(x1, x2), x1.shape).copy())

    def coefficients(self) -> np.ndarray:
        """Fourier coefficients c_k with f(x) = sum_k c_k e^{2 pi i k.x}."""
        if self._coef is None:
            self._coef = np.fft.fft2(self.values) / self.grid.n**2
        return self._coef

    def mean(self) -> float:
        return float(np.mean(self.values))

    def sup(self) -> float:
        return float(np.max(np.abs(self.values)))

    def demeaned(self) -> TorusField:
        return TorusField(self.grid, self.values - self.values.mean())

    def laplacian(self) -> TorusField:
        return TorusField(self.grid, laplacian(self.values))

    def gradient(self) -> tuple[np.ndarray, np.ndarray]:
        k1, k2 = self.grid.wavenumbers()
        c = self.coefficients() * self.grid.n**2
        nyq = _nyquist_mask(self.grid.n)
        g1 = np.fft.ifft2(np.where(nyq, 0.0, 2j * np.pi * k1 * c)).real
        g2 = np.fft.ifft2(np.where(nyq, 0.0, 2j * np.pi * k2 * c)).real
        return g1, g2

    def eval_at(self, points, deriv=(0, 0), tol: float = 1e-15) -> np.ndarray:
        """Trigonometric interpolant (or a derivative of it) at arbitrary points.

        Modes whose coefficients fall below ``tol`` times the largest one are
        skipped, which keeps evaluation cheap for smooth fields.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        n = self.grid.n
        c = self.coefficients()
        if deriv != (0, 0):
            c = np.where(_nyquist_mask(n), 0.0, c)
        cmax = np.max(np.abs(c))
        k = np.fft.fftfreq(n, d=1.0 / n)
        if cmax == 0.0:
            return np.zeros(len(pts))
        big = np.abs(c) > tol * cmax
        kmax = int(max(np.max(np.abs(k[np.any(big, axis=1)])), np.max(np.abs(k[np.any(big, axis=0)]))))
        sel = np.abs(k) <= kmax
        ks = k[sel]
        sub = c[np.ix_(sel, sel)]
        a, b = deriv
        ex = np.exp(2j * np.pi * pts[:, :1] * ks[None, :]) * (2j * np.pi * ks[None, :]) ** a
        ey = np.exp(2j * np.pi * pts[:, 1:2] * ks[None, :]) * (2j * np.pi * ks[None, :]) ** b
        return np.real(np.sum((ex @ sub) * ey, axis=1))

    # -- serialization -------------------------------------------------
    def to_csv(self, path) -> None:
        path = Path(path)
        rows = [f"# n={self.grid.n}"]
        rows += [",".join(repr(float(v)) for v in row) for row in self.values]
        path.write_text("\n".join(rows) + "\n")

    @classmethod
    def from_csv(cls, path) -> TorusField:
        lines = Path(path).read_text().splitlines()
        head = lines[0].strip()
        if not head.startswith("# n="):
            raise InvalidArgument("missing '# n=' header in field CSV")
        n = int(head[4:])
        vals = np.array([[float(t) for t in ln.split(",")] for ln in lines[1:] if ln.strip()])
        return cls(TorusGrid(n), vals)

    def to_binary(self, path) -> None:
        # int64 n, then n*n float64, all little-endian, row-major
        n = self.grid.n
        with open(path, "wb") as fh:
            fh.write(struct.pack("<q", n))
            fh.write(np.ascontiguousarray(self.values, dtype="<f8").tobytes())

    @classmethod
    def from_binary(cls, path) -> TorusField:
        data = Path(path).read_bytes()
        (n,) = struct.unpack("<q", data[:8])
        vals = np.frombuffer(data[8:], dtype="<f8")
        if vals.size != n * n:
            raise InvalidArgument("binary field size does not match header")
        return cls(TorusGrid(int(n)), vals.reshape(n, n).copy())


def _nyquist_mask(n: int) -> np.ndarray:
    k = np.fft.fftfreq(n, d=1.0 / n)
    m = np.abs(k) == n // 2
    return m[:, None] | m[None, :]


# -- spectral Laplacian ---------------------------------------------------

_SYMBOLS: dict[int, np.ndarray] = {}


def _symbol(n: int) -> np.ndarray:
    if n not in _SYMBOLS:
        _SYMBOLS[n] = TorusGrid(n).laplace_symbol()
    return _SYMBOLS[n]


def laplacian(values: np.ndarray) -> np.ndarray:
    n = values.shape[0]
    return np.fft.ifft2(_symbol(n) * np.fft.fft2(values)).real


def inverse_laplacian(values: np.ndarray) -> np.ndarray:
    """Mean-zero solution of Delta u = values - mean(values) (no checks)."""
    n = values.shape[0]
    sym = _symbol(n).copy()
    sym[0, 0] = 1.0
    c = np.fft.fft2(values) / sym
    c[0, 0] = 0.0
    return np.fft.ifft2(c).real


def solve_poisson(rhs: TorusField) -> TorusField:
    """Mean-zero u with Delta u = rhs.

    Raises SolvabilityError when the mean of ``rhs`` is not negligible.
    """
    vals = rhs.values
    scale = float(np.max(np.abs(vals)))
    if abs(vals.mean()) > 1e-10 * max(scale, 1e-300) and scale > 0.0:
        raise SolvabilityError(f"rhs mean {vals.mean():.3e} is not zero; Poisson problem unsolvable")
    return TorusField(rhs.grid, inverse_laplacian(vals))


def integrate(f: TorusField) -> float:
    """Cell-area weighted sum (periodic trapezoid rule)."""
    return float(np.sum(f.values) * f.grid.cell_area)


# -- Green function ------------------------------------------------------

def _wrap(d):
    return d - np.floor(d + 0.5)


def _displacement(x, p):
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    d = _wrap(x - p)
    return d[..., 0], d[..., 1]


def _log_theta_part(dx, dy):
    """log|sin(pi z)| + sum_n log|1 - q^{2n} e^{+-2 pi i z}|, z = dx + i dy."""
    with np.errstate(divide="ignore"):
        s = 0.5 * np.log(np.sin(np.pi * dx) ** 2 + np.sinh(np.pi * dy) ** 2)
    c = np.cos(TWO_PI * dx)
    for a in _Q2N:
        for sgn in (1.0, -1.0):
            r = a * np.exp(-sgn * TWO_PI * dy)
            s = s + 0.5 * np.log1p(-2.0 * r * c + r * r)
    return s


# G = -(1/2pi)(log|theta_1(pi z)| - L) + y^2/2 - 1/24 with L the Euler sum,
# which makes the cell average vanish.
_G_CONST = -(math.log(2.0) - math.pi / 4.0) / TWO_PI - 1.0 / 24.0
# value of the regular part on the diagonal
R_DIAG = -(math.log(TWO_PI) - math.pi / 4.0 + 2.0 * _LOG_EULER) / TWO_PI - 1.0 / 24.0


def green_eval(p, x) -> np.ndarray | float:
    """G(x, p); broadcasts over leading axes of ``x``."""
    dx, dy = _displacement(x, p)
    if np.any((dx == 0.0) & (dy == 0.0)):
        raise PoleError("Green function evaluated at its pole")
    g = -_log_theta_part(dx, dy) / TWO_PI + 0.5 * dy**2 + _G_CONST
    return g if np.ndim(g) else float(g)


def log_theta_distance(p, x):
    """log d(x,p) for the smooth periodic distance d = exp(-2 pi (G - R(p,p))).

    d agrees with |x - p| to second order at the pole, is positive elsewhere,
    and is smooth across the cell boundary. Equals -inf at the pole.
    """
    dx, dy = _displacement(x, p)
    g_reg = -_log_theta_part(dx, dy) / TWO_PI + 0.5 * dy**2 + _G_CONST
    return -TWO_PI * (g_reg - R_DIAG)


def euclid_distance(p, x):
    dx, dy = _displacement(x, p)
    return np.hypot(dx, dy)


def green_regular(p, x):
    """R(x,p) = G(x,p) + (1/2pi) log|x - p| in the local flat chart.

    The log uses the minimum-image Euclidean distance, so Delta_x R = 1 on the
    disc |x - p| < 1/2. At x = p the limit R(p,p) is returned.
    """
    dx, dy = _displacement(x, p)
    r2 = dx**2 + dy**2
    on_pole = r2 == 0.0
    safe_dx = np.where(on_pole, 0.25, dx)
    safe_dy = np.where(on_pole, 0.25, dy)
    g = -_log_theta_part(safe_dx, safe_dy) / TWO_PI + 0.5 * safe_dy**2 + _G_CONST
    r = g + np.log(safe_dx**2 + safe_dy**2) / (2.0 * TWO_PI)
    r = np.where(on_pole, R_DIAG, r)
    return r if np.ndim(r) else float(r)


def _dlog_theta(u):
    """theta_1'/theta_1 at complex u, and its derivative."""
    u = np.asarray(u, dtype=complex)
    s = np.sin(u)
    f = np.cos(u) / s
    df = -1.0 / s**2
    for n, a in zip(_NS, _DLOG_COEF):
        f = f + a * np.sin(2 * n * u)
        df = df + 2 * n * a * np.cos(2 * n * u)
    return f, df


def _dlog_theta_smooth(u):
    """theta_1'/theta_1 - 1/u and its derivative + 1/u^2; finite at u = 0."""
    u = np.asarray(u, dtype=complex)
    small = np.abs(u) < 1e-3
    us = np.where(small, 0.5, u)
    f, df = _dlog_theta(us)
    f = f - 1.0 / us
    df = df + 1.0 / us**2
    # cot u - 1/u = -u/3 - u^3/45, (cot u - 1/u)' = -1/3 - u^2/15 near 0
    fs = -u / 3.0 - u**3 / 45.0
    dfs = -1.0 / 3.0 - u**2 / 15.0
    for n, a in zip(_NS, _DLOG_COEF):
        fs = fs + a * np.sin(2 * n * u)
        dfs = dfs + 2 * n * a * np.cos(2 * n * u)
    return np.where(small, fs, f), np.where(small, dfs, df)


def green_grad(p, x) -> np.ndarray:
    """Gradient of G(., p) at x; shape (..., 2)."""
    dx, dy = _displacement(x, p)
    if np.any((dx == 0.0) & (dy == 0.0)):
        raise PoleError("Green gradient evaluated at its pole")
    f, _ = _dlog_theta(np.pi * (dx + 1j * dy))
    return np.stack([-0.5 * f.real, 0.5 * f.imag + dy], axis=-1)


def green_hessian(p, x) -> np.ndarray:
    """Hessian of G(., p) at x; shape (..., 2, 2)."""
    dx, dy = _displacement(x, p)
    if np.any((dx == 0.0) & (dy == 0.0)):
        raise PoleError("Green Hessian evaluated at its pole")
    _, df = _dlog_theta(np.pi * (dx + 1j * dy))
    hxx = -0.5 * np.pi * df.real
    hxy = 0.5 * np.pi * df.imag
    hyy = 0.5 * np.pi * df.real + 1.0
    return np.stack([np.stack([hxx, hxy], -1), np.stack([hxy, hyy], -1)], -2)


def green_regular_grad(p, x) -> np.ndarray:
    """Gradient in x of R(x, p); finite at x = p."""
    dx, dy = _displacement(x, p)
    f, _ = _dlog_theta_smooth(np.pi * (dx + 1j * dy))
    return np.stack([-0.5 * f.real, 0.5 * f.imag + dy], axis=-1)


def green_regular_hessian(p, x) -> np.ndarray:
    dx, dy = _displacement(x, p)
    _, df = _dlog_theta_smooth(np.pi * (dx + 1j * dy))
    hxx = -0.5 * np.pi * df.real
    hxy = 0.5 * np.pi * df.imag
    hyy = 0.5 * np.pi * df.real + 1.0
    return np.stack([np.stack([hxx, hxy], -1), np.stack([hxy, hyy], -1)], -2)


def green_regular_grad_diag(p) -> np.ndarray:
    """Gradient of x -> R(x, x) at x = p.

    R(x, p) depends only on x - p, so the derivative in the second slot is the
    negative of the first and the two cancel.
    """
    first = green_regular_grad(p, p)
    second = -green_regular_grad(p, p)
    return np.asarray(first + second, dtype=float)


@dataclass(frozen=True)
class GreenKernel:
    """G(., p) and R(., p) with their derivatives for a fixed pole."""

    pole: tuple[float, float]
    mean_offset: float = _G_CONST

    def G(self, x):
        return green_eval(self.pole, x)

    def R(self, x):
        return green_regular(self.pole, x)

    def grad_G(self, x):
        return green_grad(self.pole, x)

    def grad_R(self, x):
        return green_regular_grad(self.pole, x)

    def hess_G(self, x):
        return green_hessian(self.pole, x)

    def field(self, grid: TorusGrid) -> TorusField:
        x1, x2 = grid.coords()
        return TorusField(grid, green_eval(self.pole, np.stack([x1, x2], -1)))


def spectral_green(p, grid: TorusGrid) -> TorusField:
    """Solve -Delta G = delta_p - 1 with delta_p the nearest-node spike."""
    i, j = grid.nearest_node(p)
    rhs = -np.ones((grid.n, grid.n))
    rhs[i, j] += grid.n**2
    return TorusField(grid, -inverse_laplacian(rhs))


def singular_weight(p, c: float, grid: TorusGrid) -> TorusField:
    """Field x -> e^{-c G(x,p)} written as d^{c/2pi} e^{-c R(p,p)}.

    d is the smooth theta distance, so the only place the weight vanishes is
    the pole itself (exactly zero when the pole is a node).
    """
    if not c > 0:
        raise InvalidArgument(f"singular weight coefficient must be positive, got {c}")
    x1, x2 = grid.coords()
    logd = log_theta_distance(p, np.stack([x1, x2], -1))
    with np.errstate(invalid="ignore"):
        vals = np.exp((c / TWO_PI) * logd - c * R_DIAG)
    return TorusField(grid, vals)


def singular_weight_log_grad(p, grid: TorusGrid) -> np.ndarray:
    """grad_p of -G(x,p) on the grid, i.e. grad_x G(x,p); zero on the pole node.

    Multiplied by a weight that vanishes at the pole this is the p-derivative
    of log e^{-G}, used by the shadow linearization.
    """
    x1, x2 = grid.coords()
    dx, dy = _displacement(np.stack([x1, x2], -1), p)
    on_pole = (dx == 0.0) & (dy == 0.0)
    u = np.pi * (np.where(on_pole, 0.25, dx) + 1j * np.where(on_pole, 0.25, dy))
    f, _ = _dlog_theta(u)
    gx = np.where(on_pole, 0.0, -0.5 * f.real)
    gy = np.where(on_pole, 0.0, 0.5 * f.imag + dy)
    return np.stack([gx, gy], 0)


# -- singularity-subtracted quadrature ------------------------------------

def _smooth_step(t):
    """C-infinity step: 0 for t <= 0, 1 for t >= 1."""
    t = np.clip(t, 0.0, 1.0)
    with np.errstate(divide="ignore", over="ignore"):
        a = np.where(t > 0, np.exp(-1.0 / np.where(t > 0, t, 1.0)), 0.0)
        b = np.where(t < 1, np.exp(-1.0 / np.where(t < 1, 1.0 - t, 1.0)), 0.0)
    return a / (a + b)


def cutoff(r, inner: float, outer: float):
    """Smooth radial cutoff: 1 for r <= inner, 0 for r >= outer."""
    return 1.0 - _smooth_step((np.asarray(r) - inner) / (outer - inner))


def integrate_against_green(g, p, grid: TorusGrid, inner=0.1, outer=0.4, n_theta=64) -> complex:
    """Integral of g(x) G(x, p) over the torus for a smooth callable g.

    The log singularity is cut out with a smooth radial cutoff and integrated
    in polar coordinates with a logarithmic quadrature weight; the remainder is
    smooth and handled by the grid trapezoid rule.
    """
    x1, x2 = grid.coords()
    pts = np.stack([x1, x2], -1)
    r = euclid_distance(p, pts)
    gv = g(x1, x2)
    reg = green_regular(p, pts) - (np.log(np.where(r > 0, r, 1.0)) / TWO_PI) * (1 - cutoff(r, inner, outer))
    # reg = G + (1/2pi) log r * chi, smooth everywhere
    grid_part = np.sum(gv * reg) * grid.cell_area
    theta = np.arange(n_theta) * (TWO_PI / n_theta)

    def ring(rr, part):
        xs = p[0] + rr * np.cos(theta)
        ys = p[1] + rr * np.sin(theta)
        val = np.mean(g(xs, ys)) * TWO_PI
        val = val.real if part == 0 else val.imag
        return -rr * float(cutoff(rr, inner, outer)) * val / TWO_PI

    polar = []
    for part in (0, 1):
        v, _ = sp_integrate.quad(ring, 0.0, outer, args=(part,), weight="alg-loga",
                                 wvar=(0.0, 0.0), epsabs=1e-14, epsrel=1e-13, limit=200)
        polar.append(v)
    return complex(grid_part + polar[0] + 1j * polar[1])
