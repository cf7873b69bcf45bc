"""Damped inexact Newton for mean field equations on the torus.

Solves  Delta u + rho (h e^u / int h e^u - 1) = 0  with u normalized to mean
zero. The same engine drives the w-equation of the shadow system and the
coupled Toda solver.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np
from scipy.sparse.linalg import LinearOperator, gmres

from . import genfun
from .errors import CriticalParameter, DegenerateWeight, DivergenceError, InvalidArgument
from .torus import TorusField, TorusGrid, inverse_laplacian, laplacian, singular_weight

log = logging.getLogger(__name__)

MAX_HALVINGS = 20
KRYLOV_FACTOR = 1e-3


@dataclass
class NewtonReport:
    iterations: int = 0
    final_residual_sup: float = math.inf
    converged: bool = False
    damping_history: list[float] = field(default_factory=list)
    residual_history: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def damped_newton(x0, residual, solve_linear, tol, max_iter=60, project=None, norm=None):
    """Generic damped Newton loop.

    ``residual(x)`` returns the residual vector, ``solve_linear(x, r, rtol)``
    an approximate correction d with J d = -r. A step is accepted only when
    the residual norm strictly decreases; each trial halves the step.
    """
    norm = norm or (lambda r: float(np.max(np.abs(r))))
    project = project or (lambda x: x)
    x = project(np.array(x0, dtype=float))
    r = residual(x)
    rn = norm(r)
    report = NewtonReport(final_residual_sup=rn, residual_history=[rn])
    while rn > tol:
        if report.iterations >= max_iter:
            raise DivergenceError(f"Newton did not converge in {max_iter} iterations (residual {rn:.3e})", report)
        d = solve_linear(x, r, KRYLOV_FACTOR)
        step = 1.0
        for _ in range(MAX_HALVINGS + 1):
            trial = project(x + step * d)
            rt = residual(trial)
            rtn = norm(rt)
            if np.isfinite(rtn) and rtn < rn:
                break
            step *= 0.5
        else:
            raise DivergenceError(f"line search failed at residual {rn:.3e}", report)
        x, r, rn = trial, rt, rtn
        report.iterations += 1
        report.damping_history.append(step)
        report.residual_history.append(rn)
        report.final_residual_sup = rn
        log.debug("newton it=%d step=%g residual=%.3e", report.iterations, step, rn)
    report.converged = True
    return x, report


def krylov_solve(apply, rhs, rtol, restart=60, maxiter=20):
    """GMRES on a flat vector; ``apply`` is already preconditioned."""
    n = rhs.size
    op = LinearOperator((n, n), matvec=apply, dtype=float)
    bnorm = np.linalg.norm(rhs)
    if bnorm == 0.0:
        return np.zeros_like(rhs)
    sol, _ = gmres(op, rhs, rtol=rtol, atol=0.0, restart=restart, maxiter=maxiter)
    return sol


def pi_units(rho: float) -> float:
    return rho / math.pi


def near_critical(rho: float, values, rel=1e-9) -> bool:
    x = pi_units(rho)
    return any(abs(x - float(v)) <= rel * max(1.0, abs(x)) for v in values)


@dataclass(frozen=True)
class MeanFieldProblem:
    """Mean field equation with parameter ``rho`` and weight ``weight``.

    ``singular`` declares the vortex data of the weight; rho is refused when it
    lies in the corresponding critical set. ``None`` skips the gate (the caller
    has gated with a different set, e.g. the w-equation).
    """

    rho: float
    weight: TorusField
    singular: genfun.SingularData | None = genfun.SingularData(0)

    def __post_init__(self):
        if not self.rho > 0:
            raise InvalidArgument("rho must be positive")
        w = self.weight.values
        if np.any(w < 0) or not np.any(w > 0):
            raise DegenerateWeight("weight must be nonnegative and not identically zero")

    def check_gate(self):
        if self.singular is None:
            return
        sigma, _, _ = genfun.critical_sets(self.singular, Fraction(math.ceil(pi_units(self.rho)) + 8))
        if near_critical(self.rho, sigma):
            raise CriticalParameter(f"critical parameter: rho = {pi_units(self.rho):.12g}*pi lies in Sigma")


def _density(u: np.ndarray, h: np.ndarray) -> np.ndarray:
    shift = np.max(u)
    eu = h * np.exp(u - shift)
    total = eu.mean()
    if not total > 0:
        raise DegenerateWeight("normalization integral vanishes")
    return eu / total


def residual_mf(u: TorusField, prob: MeanFieldProblem) -> TorusField:
    return TorusField(u.grid, _residual(u.values, prob.rho, prob.weight.values))


def _residual(u, rho, h):
    return laplacian(u) + rho * (_density(u, h) - 1.0)


def _jacobian(u, rho, h):
    e = _density(u, h)

    def apply(phi):
        return laplacian(phi) + rho * e * (phi - np.mean(e * phi))

    return apply


def jacobian_apply(u: TorusField, prob: MeanFieldProblem, phi: TorusField) -> TorusField:
    return TorusField(u.grid, _jacobian(u.values, prob.rho, prob.weight.values)(phi.values))


def _demean(x):
    return x - x.mean()


def newton_mf(u0: TorusField | None, prob: MeanFieldProblem, tol: float = 1e-10, max_iter=60):
    """Solve the mean field equation from ``u0`` (zero when None)."""
    prob.check_gate()
    grid = prob.weight.grid
    n = grid.n
    h = prob.weight.values
    x0 = np.zeros(n * n) if u0 is None else u0.values.ravel()

    def residual(x):
        return _residual(x.reshape(n, n), prob.rho, h).ravel()

    def solve_linear(x, r, rtol):
        jac = _jacobian(x.reshape(n, n), prob.rho, h)

        def apply(v):
            v2 = v.reshape(n, n)
            return (inverse_laplacian(jac(v2)) + v2.mean()).ravel()

        rhs = -inverse_laplacian(r.reshape(n, n)).ravel()
        return krylov_solve(apply, rhs, rtol)

    x, report = damped_newton(x0, residual, solve_linear, tol, max_iter=max_iter, project=_demean)
    return TorusField(grid, x.reshape(n, n)), report


def effective_weight(points, h2: TorusField) -> TorusField:
    vals = h2.values.copy()
    for p, c in points:
        vals = vals * singular_weight(p, c, h2.grid).values
    return TorusField(h2.grid, vals)


def check_sigma2(rho2: float, s_alphas=()):
    bound = Fraction(math.ceil(pi_units(rho2)) + 8)
    _, _, sigma2 = genfun.critical_sets(genfun.SingularData(0), bound, s_alphas=[Fraction(a).limit_denominator(10**6) for a in s_alphas])
    if near_critical(rho2, sigma2):
        raise CriticalParameter(f"critical parameter: rho2 = {pi_units(rho2):.12g}*pi lies in Sigma_2")


def solve_w(points, rho2: float, h2: TorusField, w0: TorusField | None = None, tol: float = 1e-10, s_alphas=()):
    """Solve Delta w + 2 rho2 (hbar e^w / int hbar e^w - 1) = 0.

    ``points`` is a list of (p, c) with c the coefficient of G(x,p) in the
    exponent (4 pi for a free point, 4 pi (1 + alpha) for a fixed one).
    Returns (w, report).
    """
    check_sigma2(rho2, s_alphas)
    for _, c in points:
        if not c > 0:
            raise InvalidArgument("singular coefficients must be positive")
    prob = MeanFieldProblem(2.0 * rho2, effective_weight(points, h2), singular=None)
    return newton_mf(w0, prob, tol)


def constant_weight(grid: TorusGrid, value: float = 1.0) -> TorusField:
    return TorusField(grid, np.full((grid.n, grid.n), float(value)))
