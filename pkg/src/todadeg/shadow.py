"""Shadow system: the w-equation coupled to critical points of f_Q.

Unknowns are a mean-zero field w and m movable points. For fixed singular
points S (with weights alpha_q) and vortex data of h_1,

    Delta w + 2 rho2 (hbar2 e^{w - 4pi sum_j G(x,p_j)} / int(...) - 1) = 0,
    grad_{x_i} f_Q(p_1, ..., p_m) = 0,

    f_Q = sum_j [log(h1* e^{-w/2})(x_j) - 4pi sum_{S_1} alpha_q G(x_j,q)
                 + 4pi R(x_j,x_j)] + 4pi sum_{i != j} G(x_i,x_j)
          + 8pi sum_S (1+alpha_q) sum_j G(x_j,q).

The linearization is the exact derivative of this residual. Its eigenvalues
(with the mu-convention: L[phi,nu] + mu [phi,nu] = 0) are computed on a
Fourier Galerkin space for phi plus the 2m point directions.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import mfsolve, torus
from .errors import CollisionError, DegeneracyError, GeometryError, InvalidArgument
from .mfsolve import NewtonReport, damped_newton, krylov_solve
from .torus import TorusField, TorusGrid, inverse_laplacian, laplacian
from .weights import as_smooth, sample

log = logging.getLogger(__name__)

FOUR_PI = 4.0 * math.pi
EIGEN_MODES = 8
DEGENERACY_RATIO = 1e-6


@dataclass(frozen=True)
class ShadowProblem:
    rho2: float
    h1: object
    h2: object
    grid: TorusGrid
    m: int = 1
    fixed_singular: tuple = ()
    vortex: tuple | None = None
    h2_vortex: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "h1", as_smooth(self.h1))
        object.__setattr__(self, "h2", as_smooth(self.h2))
        fixed = tuple((tuple(map(float, q)), float(a)) for q, a in self.fixed_singular)
        object.__setattr__(self, "fixed_singular", fixed)
        vort = fixed if self.vortex is None else tuple((tuple(map(float, q)), float(a)) for q, a in self.vortex)
        object.__setattr__(self, "vortex", vort)
        object.__setattr__(self, "h2_vortex", tuple((tuple(map(float, q)), float(b)) for q, b in self.h2_vortex))
        if self.m < 0:
            raise InvalidArgument("number of free points must be >= 0")

    @property
    def s_alphas(self) -> list[float]:
        return [a for _, a in self.fixed_singular] + [b for _, b in self.h2_vortex]

    def check_gate(self):
        mfsolve.check_sigma2(self.rho2, self.s_alphas)

    def hbar2(self) -> np.ndarray:
        vals = sample(self.h2, self.grid).values.copy()
        for q, a in self.fixed_singular:
            vals *= torus.singular_weight(q, FOUR_PI * (1 + a), self.grid).values
        for q, b in self.h2_vortex:
            if b > 0:
                vals *= torus.singular_weight(q, FOUR_PI * b, self.grid).values
        return vals

    def log_h1_star(self):
        return self.h1


@dataclass
class ShadowState:
    points: np.ndarray
    w: TorusField
    residual_field_sup: float = math.inf
    grad_fQ_norms: list = field(default_factory=list)
    morse_index: int | None = None
    min_singular_value: float | None = None
    eigenvalues: list | None = None
    converged: bool = False
    report: NewtonReport | None = None

    def to_dict(self) -> dict:
        return {
            "points": np.asarray(self.points).tolist(),
            "residual_field_sup": self.residual_field_sup,
            "grad_fQ_norms": list(map(float, self.grad_fQ_norms)),
            "morse_index": self.morse_index,
            "min_singular_value": self.min_singular_value,
            "eigenvalues": None if self.eigenvalues is None else [[float(np.real(e)), float(np.imag(e))] for e in self.eigenvalues],
            "converged": self.converged,
            "grid": self.w.grid.n,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


# -- assembly helpers ------------------------------------------------------

def _points(P) -> np.ndarray:
    return np.asarray(P, dtype=float).reshape(-1, 2)


def _wrap_unit(P):
    P = np.mod(P, 1.0)
    return np.where(P >= 1.0, 0.0, P)


def _check_distinct(P, prob: ShadowProblem, min_sep: float = 0.0):
    pts = [tuple(p) for p in _points(P)] + [q for q, _ in prob.fixed_singular]
    for i in range(len(pts)):
        for j in range(i + 1, len(pts)):
            d = float(torus.euclid_distance(pts[i], np.asarray(pts[j])))
            if d <= max(min_sep, 1e-12):
                raise CollisionError(f"points {pts[i]} and {pts[j]} collide (distance {d:.3e})")


def _spectral(w: np.ndarray, grid: TorusGrid) -> TorusField:
    return TorusField(grid, w)


def field_density(w: np.ndarray, P, prob: ShadowProblem, hbar2=None):
    """Normalized density e = hbar2 e^{w} prod e^{-4pi G(.,p_j)} / mean."""
    grid = prob.grid
    vals = prob.hbar2() if hbar2 is None else hbar2.copy()
    for p in _points(P):
        vals = vals * torus.singular_weight(p, FOUR_PI, grid).values
    ew = vals * np.exp(w - np.max(w))
    return ew / ew.mean()


def f_Q_value(P, w: TorusField, prob: ShadowProblem, homotopy_t: float = 0.0) -> float:
    """Scalar f_Q at the points P with w held fixed."""
    P = _points(P)
    _check_distinct(P, prob)
    wi = w.eval_at(P) if len(P) else np.zeros(0)
    total = 0.0
    for i, p in enumerate(P):
        total += math.log(float(prob.h1.value(p))) - 0.5 * (1 - homotopy_t) * wi[i]
        total += FOUR_PI * torus.green_regular(p, p)
        for q, a in prob.vortex:
            total -= FOUR_PI * a * torus.green_eval(q, p)
        for q, a in prob.fixed_singular:
            total += 2 * FOUR_PI * (1 + a) * torus.green_eval(q, p)
        for j, pj in enumerate(P):
            if j != i:
                total += FOUR_PI * torus.green_eval(pj, p)
    return total


def f_Q_grad_all(P, w: TorusField, prob: ShadowProblem, homotopy_t: float = 0.0) -> np.ndarray:
    P = _points(P)
    _check_distinct(P, prob)
    out = np.zeros_like(P)
    if len(P) == 0:
        return out
    gw = np.stack([w.eval_at(P, (1, 0)), w.eval_at(P, (0, 1))], -1)
    for i, p in enumerate(P):
        g = prob.h1.log_grad(p) - 0.5 * (1 - homotopy_t) * gw[i]
        g = g + FOUR_PI * torus.green_regular_grad_diag(p)
        for q, a in prob.vortex:
            g = g - FOUR_PI * a * torus.green_grad(q, p)
        for q, a in prob.fixed_singular:
            g = g + 2 * FOUR_PI * (1 + a) * torus.green_grad(q, p)
        for j, pj in enumerate(P):
            if j != i:
                g = g + 2 * FOUR_PI * torus.green_grad(pj, p)
        out[i] = g
    return out


def f_Q_grad(state: ShadowState, prob: ShadowProblem, i: int) -> np.ndarray:
    return f_Q_grad_all(state.points, state.w, prob)[i]


def f_Q_hessian(P, w: TorusField, prob: ShadowProblem, homotopy_t: float = 0.0) -> np.ndarray:
    """Full (2m x 2m) Hessian of f_Q with w fixed, including cross blocks."""
    P = _points(P)
    m = len(P)
    H = np.zeros((2 * m, 2 * m))
    for i, p in enumerate(P):
        hw = np.array([[w.eval_at(p, (2, 0))[0], w.eval_at(p, (1, 1))[0]],
                       [w.eval_at(p, (1, 1))[0], w.eval_at(p, (0, 2))[0]]])
        b = prob.h1.log_hess(p) - 0.5 * (1 - homotopy_t) * hw
        for q, a in prob.vortex:
            b = b - FOUR_PI * a * torus.green_hessian(q, p)
        for q, a in prob.fixed_singular:
            b = b + 2 * FOUR_PI * (1 + a) * torus.green_hessian(q, p)
        for j, pj in enumerate(P):
            if j != i:
                hij = torus.green_hessian(pj, p)
                b = b + 2 * FOUR_PI * hij
                # d/dx_j of grad_{x_i} G(x_i, x_j) is minus the Hessian of the kernel
                H[2 * i:2 * i + 2, 2 * j:2 * j + 2] = -2 * FOUR_PI * hij
        H[2 * i:2 * i + 2, 2 * i:2 * i + 2] = b
    return H


# -- residual and linearization -------------------------------------------

class _Assembly:
    """Cached grid quantities for one (w, P)."""

    def __init__(self, w: np.ndarray, P, prob: ShadowProblem, hbar2=None):
        self.prob = prob
        self.grid = prob.grid
        self.P = _points(P)
        self.w = w
        self.hbar2 = prob.hbar2() if hbar2 is None else hbar2
        self.e = field_density(w, self.P, prob, self.hbar2)
        # grad_x G(x, p_j) on the grid, shape (m, 2, n, n)
        self.gradG = np.array([torus.singular_weight_log_grad(p, self.grid) for p in self.P]).reshape(len(self.P), 2, self.grid.n, self.grid.n)

    def field_residual(self):
        return laplacian(self.w) + 2 * self.prob.rho2 * (self.e - 1.0)

    def apply_phi_phi(self, phi):
        e = self.e
        return laplacian(phi) + 2 * self.prob.rho2 * e * (phi - np.mean(e * phi))

    def apply_phi_nu(self, nu):
        if len(self.P) == 0:
            return np.zeros_like(self.w)
        nu = np.asarray(nu).reshape(-1, 2)
        g = FOUR_PI * np.einsum("jk,jkab->ab", nu, self.gradG)
        e = self.e
        return 2 * self.prob.rho2 * e * (g - np.mean(e * g))


def shadow_residual(w: np.ndarray, P, prob: ShadowProblem, hbar2=None, homotopy_t=0.0):
    a = _Assembly(w, P, prob, hbar2)
    grads = f_Q_grad_all(P, TorusField(prob.grid, w), prob, homotopy_t)
    return a.field_residual(), grads


def _grad_phi_at(phi: np.ndarray, P, grid: TorusGrid) -> np.ndarray:
    f = TorusField(grid, phi)
    P = _points(P)
    return np.stack([f.eval_at(P, (1, 0)), f.eval_at(P, (0, 1))], -1)


def linearized_apply(state: ShadowState, prob: ShadowProblem, direction, homotopy_t: float = 0.0, require_converged=True):
    """Apply the linearized shadow operator to (phi, nu).

    Returns (field, list of 2-vectors). ``homotopy_t`` scales the w-dependence
    of the point equations by (1 - t); t = 1 decouples them from w.
    """
    if require_converged and not state.converged:
        raise InvalidArgument("linearization requires a converged state")
    phi, nu = direction
    phi = phi.values if isinstance(phi, TorusField) else np.asarray(phi, dtype=float)
    nu = np.asarray(nu, dtype=float).reshape(-1, 2)
    a = _Assembly(state.w.values, state.points, prob)
    out_phi = a.apply_phi_phi(phi) + a.apply_phi_nu(nu)
    H = f_Q_hessian(state.points, state.w, prob, homotopy_t)
    out_nu = (H @ nu.ravel()).reshape(-1, 2)
    if len(nu):
        out_nu = out_nu - 0.5 * (1 - homotopy_t) * _grad_phi_at(phi, state.points, prob.grid)
    return TorusField(prob.grid, out_phi), [v for v in out_nu]


# -- Galerkin matrix and Morse index ----------------------------------------

def _fourier_basis(grid: TorusGrid, K: int):
    """Orthonormal real Fourier functions with 0 < |k|_inf <= K (half plane)."""
    x1, x2 = grid.coords()
    funcs, modes = [], []
    for k1 in range(0, K + 1):
        for k2 in range(-K, K + 1):
            if k1 == 0 and k2 <= 0:
                continue
            arg = 2 * math.pi * (k1 * x1 + k2 * x2)
            funcs.append(math.sqrt(2) * np.cos(arg))
            modes.append((k1, k2, "cos"))
            funcs.append(math.sqrt(2) * np.sin(arg))
            modes.append((k1, k2, "sin"))
    return np.array(funcs), modes


def _basis_grad_at(modes, P):
    P = _points(P)
    out = np.zeros((len(P), 2, len(modes)))
    for c, (k1, k2, kind) in enumerate(modes):
        arg = 2 * math.pi * (k1 * P[:, 0] + k2 * P[:, 1])
        d = -np.sin(arg) if kind == "cos" else np.cos(arg)
        for i in range(len(P)):
            out[i, :, c] = math.sqrt(2) * 2 * math.pi * np.array([k1, k2]) * d[i]
    return out


def galerkin_matrix(state: ShadowState, prob: ShadowProblem, modes_k: int = EIGEN_MODES, homotopy_t: float = 0.0) -> np.ndarray:
    """Matrix of the linearization on span(Fourier modes |k| <= K) x R^{2m}."""
    grid = prob.grid
    B, modes = _fourier_basis(grid, modes_k)
    nb = len(B)
    m = len(_points(state.points))
    a = _Assembly(state.w.values, state.points, prob)
    A = np.zeros((nb + 2 * m, nb + 2 * m))
    area = grid.cell_area
    flat = B.reshape(nb, -1)
    for c in range(nb):
        A[:nb, c] = flat @ a.apply_phi_phi(B[c]).ravel() * area
    for c in range(2 * m):
        nu = np.zeros(2 * m)
        nu[c] = 1.0
        A[:nb, nb + c] = flat @ a.apply_phi_nu(nu).ravel() * area
    if m:
        A[nb:, nb:] = f_Q_hessian(state.points, state.w, prob, homotopy_t)
        A[nb:, :nb] = -0.5 * (1 - homotopy_t) * _basis_grad_at(modes, state.points).reshape(2 * m, nb)
    return A


def morse_index(state: ShadowState, prob: ShadowProblem, n_eigs: int = 40, modes_k: int = EIGEN_MODES, homotopy_t: float = 0.0):
    """Count eigenvalues mu < 0 of L[phi,nu] + mu[phi,nu] = 0.

    Returns (index, eigenvalues sorted by magnitude, first n_eigs). Complex
    pairs are counted by their real part, which keeps the parity equal to the
    sign of the determinant.
    """
    A = galerkin_matrix(state, prob, modes_k, homotopy_t)
    sv = np.linalg.svd(A, compute_uv=False)
    state.min_singular_value = float(sv[-1])
    if sv[-1] < DEGENERACY_RATIO * sv[0]:
        raise DegeneracyError(f"linearization degenerate: min singular value {sv[-1]:.3e} vs norm {sv[0]:.3e}")
    mu = np.linalg.eigvals(-A)
    order = np.argsort(np.abs(mu))
    mu = mu[order][:n_eigs]
    full = np.linalg.eigvals(-A)
    index = int(np.sum(full.real < 0))
    state.morse_index = index
    state.eigenvalues = list(mu)
    return index, list(mu)


def symmetrized_eigenvalues(state: ShadowState, prob: ShadowProblem, modes_k: int = EIGEN_MODES) -> np.ndarray:
    A = galerkin_matrix(state, prob, modes_k)
    return np.linalg.eigvals(0.5 * (A + A.T))


def degree_signs(state: ShadowState, prob: ShadowProblem, l_Q: float | None = None) -> tuple[int, int]:
    """Contributions (d_S, d_T) of one shadow solution.

    ``l_Q`` is the bubbling coefficient; a vanishing value is refused.
    """
    if l_Q is not None and l_Q == 0:
        raise InvalidArgument("l(Q) = 0: the bubbling construction does not apply")
    if state.morse_index is None:
        morse_index(state, prob)
    d_s = (-1) ** state.morse_index
    q_size = len(_points(state.points)) + len(prob.fixed_singular)
    return d_s, (-1) ** q_size * d_s


# -- Newton solvers ---------------------------------------------------------

def _clamp_points(d_points, max_move):
    d = d_points.reshape(-1, 2)
    norms = np.linalg.norm(d, axis=1)
    big = norms.max(initial=0.0)
    if big > max_move:
        return d * (max_move / big)
    return d


def newton_shadow(prob: ShadowProblem, init: ShadowState, tol: float = 1e-9, method: str = "coupled", max_iter: int = 60) -> ShadowState:
    """Solve the shadow system from ``init``.

    method='coupled' runs Newton on (w, P) jointly with GMRES;
    method='alternating' solves the w-equation for fixed points and updates
    the points with the reduced (implicitly differentiated) Jacobian.
    """
    prob.check_gate()
    grid = prob.grid
    n = grid.n
    m = prob.m
    P0 = _points(init.points)
    if len(P0) != m:
        raise InvalidArgument(f"expected {m} initial points, got {len(P0)}")
    _check_distinct(P0, prob, min_sep=4 * grid.spacing)
    hbar2 = prob.hbar2()
    max_move = 2 * grid.spacing

    if method == "alternating":
        return _newton_alternating(prob, init, tol, hbar2, max_iter)
    if method != "coupled":
        raise InvalidArgument(f"unknown method {method!r}")

    def split(x):
        return x[: n * n].reshape(n, n), _wrap_unit(x[n * n:].reshape(-1, 2))

    def residual(x):
        w, P = split(x)
        fr, g = shadow_residual(w, P, prob, hbar2)
        return np.concatenate([fr.ravel(), g.ravel()])

    def project(x):
        w, P = split(x)
        return np.concatenate([(w - w.mean()).ravel(), P.ravel()])

    def solve_linear(x, r, rtol):
        w, P = split(x)
        a = _Assembly(w, P, prob, hbar2)
        wf = TorusField(grid, w)
        H = f_Q_hessian(P, wf, prob)
        try:
            Hinv = np.linalg.inv(H) if m else H
        except np.linalg.LinAlgError:
            Hinv = np.eye(2 * m)

        def apply(v):
            phi = v[: n * n].reshape(n, n)
            nu = v[n * n:]
            top = inverse_laplacian(a.apply_phi_phi(phi) + a.apply_phi_nu(nu)) + phi.mean()
            if m:
                bottom = H @ nu - 0.5 * _grad_phi_at(phi, P, grid).ravel()
                bottom = Hinv @ bottom
            else:
                bottom = np.zeros(0)
            return np.concatenate([top.ravel(), bottom])

        rf = r[: n * n].reshape(n, n)
        rhs_top = -inverse_laplacian(rf)
        rhs_bot = -(Hinv @ r[n * n:]) if m else np.zeros(0)
        d = krylov_solve(apply, np.concatenate([rhs_top.ravel(), rhs_bot]), rtol)
        dp = _clamp_points(d[n * n:], max_move)
        return np.concatenate([d[: n * n], dp.ravel()])

    w0 = init.w.values if init.w is not None else np.zeros((n, n))
    x0 = np.concatenate([w0.ravel(), P0.ravel()])
    x, report = damped_newton(x0, residual, solve_linear, tol, max_iter=max_iter, project=project)
    w, P = split(x)
    return _finish(prob, w, P, report, hbar2)


def _finish(prob, w, P, report, hbar2):
    fr, g = shadow_residual(w, P, prob, hbar2)
    state = ShadowState(points=np.asarray(P), w=TorusField(prob.grid, w), residual_field_sup=float(np.max(np.abs(fr))),
                        grad_fQ_norms=[float(np.linalg.norm(v)) for v in g], converged=report.converged, report=report)
    return state


def _newton_alternating(prob, init, tol, hbar2, max_iter):
    grid = prob.grid
    n = grid.n
    m = prob.m
    P = _points(init.points).copy()
    w = init.w.values.copy() if init.w is not None else np.zeros((n, n))
    report = NewtonReport()
    points_c = [(tuple(q), FOUR_PI * (1 + a)) for q, a in prob.fixed_singular] + [(tuple(q), FOUR_PI * b) for q, b in prob.h2_vortex if b > 0]
    h2f = sample(prob.h2, grid)

    def inner(P, w):
        wf, _ = mfsolve.solve_w(points_c + [(tuple(p), FOUR_PI) for p in P], prob.rho2, h2f, TorusField(grid, w), tol=0.1 * tol, s_alphas=prob.s_alphas)
        return wf.values

    w = inner(P, w)
    g = f_Q_grad_all(P, TorusField(grid, w), prob).ravel()
    gn = float(np.max(np.abs(g), initial=0.0))
    report.residual_history.append(gn)
    while gn > tol:
        if report.iterations >= max_iter:
            from .errors import DivergenceError
            raise DivergenceError("alternating shadow iteration did not converge", report)
        a = _Assembly(w, P, prob, hbar2)
        wf = TorusField(grid, w)
        H = f_Q_hessian(P, wf, prob)
        # reduced Jacobian: H + C dw/dP with J_ww dw/dP = -J_wP
        cols = []
        for c in range(2 * m):
            nu = np.zeros(2 * m)
            nu[c] = 1.0
            rhs = -a.apply_phi_nu(nu)

            def apply(v):
                v2 = v.reshape(n, n)
                return (inverse_laplacian(a.apply_phi_phi(v2)) + v2.mean()).ravel()

            dw = krylov_solve(apply, inverse_laplacian(rhs).ravel(), 1e-10).reshape(n, n)
            cols.append(-0.5 * _grad_phi_at(dw, P, grid).ravel())
        Jred = H + np.array(cols).T
        d = _clamp_points(np.linalg.solve(Jred, -g), 2 * grid.spacing)
        step = 1.0
        for _ in range(mfsolve.MAX_HALVINGS + 1):
            Pt = _wrap_unit(P + step * d)
            wt = inner(Pt, w)
            gt = f_Q_grad_all(Pt, TorusField(grid, wt), prob).ravel()
            gtn = float(np.max(np.abs(gt)))
            if gtn < gn:
                break
            step *= 0.5
        else:
            from .errors import DivergenceError
            raise DivergenceError("alternating line search failed", report)
        P, w, g, gn = Pt, wt, gt, gtn
        report.iterations += 1
        report.damping_history.append(step)
        report.residual_history.append(gn)
    report.final_residual_sup = gn
    report.converged = True
    return _finish(prob, w, P, report, hbar2)


def shadow_residual_of(state: ShadowState, prob: ShadowProblem):
    return shadow_residual(state.w.values, state.points, prob)


def candidate_points(prob: ShadowProblem, lattice: int = 32) -> list[tuple[float, float]]:
    """Lattice nodes where |grad log h1| is a local minimum (single-point starts)."""
    s = np.arange(lattice) / lattice
    x1, x2 = np.meshgrid(s, s, indexing="ij")
    g = prob.h1.log_grad(np.stack([x1, x2], -1))
    mag = np.sum(g**2, -1)
    out = []
    for i in range(lattice):
        for j in range(lattice):
            nb = [mag[(i + a) % lattice, (j + b) % lattice] for a in (-1, 0, 1) for b in (-1, 0, 1) if (a, b) != (0, 0)]
            if mag[i, j] <= min(nb):
                out.append((float(s[i]), float(s[j])))
    return out


def multi_start(prob: ShadowProblem, starts=None, tol: float = 1e-9, workers: int = 1, with_index: bool = True) -> list[ShadowState]:
    """Solve from several single-point starts and keep distinct converged states."""
    if prob.m != 1:
        raise InvalidArgument("multi-start lattice is implemented for one free point")
    starts = candidate_points(prob) if starts is None else starts

    def run(p):
        try:
            st = newton_shadow(prob, ShadowState(points=np.array([p]), w=TorusField.zeros(prob.grid)), tol)
            if with_index:
                morse_index(st, prob)
            return st
        except Exception as exc:  # a failed start is not fatal for the sweep
            log.info("start %s failed: %s", p, exc)
            return None

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(run, starts))
    else:
        results = [run(p) for p in starts]
    found: list[ShadowState] = []
    for st in results:
        if st is None or not st.converged:
            continue
        p = st.points[0]
        if all(float(torus.euclid_distance(tuple(p), f.points[0])) > 1e-4 for f in found):
            found.append(st)
    return found
