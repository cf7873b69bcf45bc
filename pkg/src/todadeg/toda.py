"""The coupled SU(3) Toda system on the torus: solver, continuation, blow-up diagnostics.

u-form:  Delta u1 + 2 rho1 (E1 - 1) - rho2 (E2 - 1) = 0
         Delta u2 - rho1 (E1 - 1) + 2 rho2 (E2 - 1) = 0
with E_i = h_i e^{u_i} / int h_i e^{u_i}. The v-form uses v1 = (2u1 + u2)/3,
v2 = (u1 + 2u2)/3 and reads Delta v_i + rho_i (E_i - 1) = 0 with
u1 = 2v1 - v2, u2 = 2v2 - v1. The solver works in v-form.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import mfsolve
from .errors import CriticalParameter, DegenerateWeight, DivergenceError, InvalidArgument
from .mfsolve import NewtonReport, damped_newton, krylov_solve
from .torus import TorusField, TorusGrid, inverse_laplacian, laplacian
from .weights import sample

log = logging.getLogger(__name__)

FOUR_PI = 4.0 * math.pi
BLOWUP_MAX = 12.0
CORE_CELLS = 8
PEAK_OFFSET = 5.0
PEAK_MERGE = 0.05
MASS_RADII = (0.05, 0.1, 0.2)
CONCENTRATION_RADIUS = 0.1
# local mass pairs (sigma_1, sigma_2) in units of 2 pi; the last two are partial blow-up
MASS_CLASSES = ((2, 4), (4, 2), (4, 4), (2, 0), (0, 2))


@dataclass(frozen=True)
class TodaProblem:
    grid: TorusGrid
    h1: object
    h2: object

    def weights(self) -> tuple[np.ndarray, np.ndarray]:
        return sample(self.h1, self.grid).values, sample(self.h2, self.grid).values


@dataclass
class TodaState:
    form: str                    # "u" or "v"
    f1: TorusField
    f2: TorusField
    rho: tuple

    def __post_init__(self):
        if self.form not in ("u", "v"):
            raise InvalidArgument("form must be 'u' or 'v'")
        self.rho = (float(self.rho[0]), float(self.rho[1]))

    @classmethod
    def zeros(cls, grid: TorusGrid, rho, form: str = "v") -> TodaState:
        return cls(form, TorusField.zeros(grid), TorusField.zeros(grid), rho)

    def sup(self) -> tuple[float, float]:
        return float(np.max(self.f1.values)), float(np.max(self.f2.values))


def transform_uv(state: TodaState) -> TodaState:
    """Switch between u-form and v-form; both results re-gauged to mean zero."""
    a, b = state.f1.values, state.f2.values
    if state.form == "u":
        x, y, form = (2 * a + b) / 3.0, (a + 2 * b) / 3.0, "v"
    else:
        x, y, form = 2 * a - b, 2 * b - a, "u"
    g = state.f1.grid
    return TodaState(form, TorusField(g, x - x.mean()), TorusField(g, y - y.mean()), state.rho)


def _normalized(u: np.ndarray, h: np.ndarray) -> np.ndarray:
    shift = np.max(u)
    e = h * np.exp(u - shift)
    total = e.mean()
    if not total > 0:
        raise DegenerateWeight("normalization integral vanishes")
    return e / total


def _exponents(v1, v2):
    return 2 * v1 - v2, 2 * v2 - v1


def residual_toda(state: TodaState, problem: TodaProblem) -> tuple[TorusField, TorusField]:
    """Both residual fields in the form of ``state``."""
    h1, h2 = problem.weights()
    rho1, rho2 = state.rho
    g = state.f1.grid
    a, b = state.f1.values, state.f2.values
    if state.form == "v":
        u1, u2 = _exponents(a, b)
        e1, e2 = _normalized(u1, h1) - 1.0, _normalized(u2, h2) - 1.0
        r1 = laplacian(a) + rho1 * e1
        r2 = laplacian(b) + rho2 * e2
    else:
        e1, e2 = _normalized(a, h1) - 1.0, _normalized(b, h2) - 1.0
        r1 = laplacian(a) + 2 * rho1 * e1 - rho2 * e2
        r2 = laplacian(b) - rho1 * e1 + 2 * rho2 * e2
    return TorusField(g, r1), TorusField(g, r2)


def check_parameters(rho) -> None:
    """rho1 in (0, 4pi) U (4pi, 8pi) and rho2 > 0 away from 4 pi N."""
    rho1, rho2 = map(float, rho)
    x1, x2 = rho1 / math.pi, rho2 / math.pi
    if not 0 < x1 < 8 or abs(x1 - 4) <= 1e-9 * 4:
        raise CriticalParameter(f"critical parameter: rho1 = {x1:.12g}*pi outside (0,4pi) U (4pi,8pi)")
    if not x2 > 0:
        raise InvalidArgument("rho2 must be positive")
    if abs(x2 / 4 - round(x2 / 4)) * 4 <= 1e-9 * max(1.0, x2):
        raise CriticalParameter(f"critical parameter: rho2 = {x2:.12g}*pi is a multiple of 4pi")


class _System:
    def __init__(self, problem: TodaProblem, rho):
        self.n = problem.grid.n
        self.h1, self.h2 = problem.weights()
        self.rho1, self.rho2 = map(float, rho)

    def split(self, x):
        n = self.n
        return x[: n * n].reshape(n, n), x[n * n:].reshape(n, n)

    def residual(self, x):
        v1, v2 = self.split(x)
        u1, u2 = _exponents(v1, v2)
        r1 = laplacian(v1) + self.rho1 * (_normalized(u1, self.h1) - 1.0)
        r2 = laplacian(v2) + self.rho2 * (_normalized(u2, self.h2) - 1.0)
        return np.concatenate([r1.ravel(), r2.ravel()])

    def jacobian(self, x):
        v1, v2 = self.split(x)
        u1, u2 = _exponents(v1, v2)
        e1, e2 = _normalized(u1, self.h1), _normalized(u2, self.h2)

        def apply(p1, p2):
            d1, d2 = _exponents(p1, p2)
            j1 = laplacian(p1) + self.rho1 * e1 * (d1 - np.mean(e1 * d1))
            j2 = laplacian(p2) + self.rho2 * e2 * (d2 - np.mean(e2 * d2))
            return j1, j2

        return apply


def jacobian_apply(state: TodaState, problem: TodaProblem, direction) -> tuple[np.ndarray, np.ndarray]:
    """Linearization of the v-form residual at ``state`` applied to (phi1, phi2)."""
    if state.form != "v":
        state = transform_uv(state)
    sys = _System(problem, state.rho)
    x = np.concatenate([state.f1.values.ravel(), state.f2.values.ravel()])
    return sys.jacobian(x)(np.asarray(direction[0]), np.asarray(direction[1]))


def _demean_pair(n):
    def project(x):
        a, b = x[: n * n], x[n * n:]
        return np.concatenate([a - a.mean(), b - b.mean()])

    return project


def newton_toda(state0: TodaState, problem: TodaProblem, rho=None, tol: float = 1e-10, max_iter: int = 60):
    """Damped Newton-GMRES in v-form, preconditioned by the inverse Laplacian."""
    rho = state0.rho if rho is None else tuple(map(float, rho))
    check_parameters(rho)
    if state0.form != "v":
        state0 = transform_uv(state0)
    sys = _System(problem, rho)
    n = sys.n

    def solve_linear(x, r, rtol):
        jac = sys.jacobian(x)

        def apply(v):
            p1, p2 = sys.split(v)
            j1, j2 = jac(p1, p2)
            return np.concatenate([(inverse_laplacian(j1) + p1.mean()).ravel(), (inverse_laplacian(j2) + p2.mean()).ravel()])

        r1, r2 = sys.split(r)
        rhs = -np.concatenate([inverse_laplacian(r1).ravel(), inverse_laplacian(r2).ravel()])
        return krylov_solve(apply, rhs, rtol)

    x0 = np.concatenate([state0.f1.values.ravel(), state0.f2.values.ravel()])
    x, report = damped_newton(x0, sys.residual, solve_linear, tol, max_iter=max_iter, project=_demean_pair(n))
    v1, v2 = sys.split(x)
    g = problem.grid
    return TodaState("v", TorusField(g, v1.copy()), TorusField(g, v2.copy()), rho), report


# -- diagnostics ---------------------------------------------------------------

def _min_image(d):
    return d - np.round(d)


def _distance_to(grid: TorusGrid, p) -> np.ndarray:
    x1, x2 = grid.coords()
    return np.hypot(_min_image(x1 - p[0]), _min_image(x2 - p[1]))


def find_peaks(f: TorusField, offset: float = PEAK_OFFSET, merge: float = PEAK_MERGE) -> list[tuple[float, float]]:
    """Local maxima above mean + offset, merged within ``merge``; highest first."""
    v = f.values
    thr = v.mean() + offset
    is_max = v > thr
    for s0 in (-1, 0, 1):
        for s1 in (-1, 0, 1):
            if s0 or s1:
                is_max &= v >= np.roll(np.roll(v, s0, 0), s1, 1)
    idx = np.argwhere(is_max)
    order = np.argsort(-v[is_max])
    h = f.grid.spacing
    peaks: list[tuple[float, float]] = []
    for i, j in idx[order]:
        p = (i * h, j * h)
        if all(math.hypot(*_min_image(np.subtract(p, q))) > merge for q in peaks):
            peaks.append(p)
    return peaks


def _densities(state: TodaState, problem: TodaProblem):
    """Normalized densities rho_i h_i e^{u_i} / int h_i e^{u_i} on the grid."""
    st = state if state.form == "v" else transform_uv(state)
    h1, h2 = problem.weights()
    u1, u2 = _exponents(st.f1.values, st.f2.values)
    return st.rho[0] * _normalized(u1, h1), st.rho[1] * _normalized(u2, h2), st


def half_mass_diameter(density: np.ndarray, grid: TorusGrid, p, total: float) -> float:
    """Diameter of the smallest disc about p holding half of ``total`` (grid quadrature)."""
    d = _distance_to(grid, p).ravel()
    order = np.argsort(d)
    cum = np.cumsum(density.ravel()[order]) * grid.cell_area
    k = int(np.searchsorted(cum, 0.5 * total))
    return 2.0 * float(d[order][min(k, len(d) - 1)])


@dataclass
class BlowupDiagnostics:
    peaks: list = field(default_factory=list)
    local_masses: list = field(default_factory=list)      # per peak: {delta: (sigma1, sigma2)}
    labels: list = field(default_factory=list)
    concentration: float = 0.0
    lam: float = float("nan")
    core_width: float = float("nan")
    shadow_sup: float | None = None
    shadow_distance: float | None = None

    @property
    def empty(self) -> bool:
        return not self.peaks

    def to_dict(self) -> dict:
        return {
            "peaks": [list(p) for p in self.peaks],
            "local_masses": [{str(k): list(v) for k, v in m.items()} for m in self.local_masses],
            "labels": self.labels,
            "concentration": self.concentration,
            "lambda": self.lam,
            "core_width": self.core_width,
            "shadow_sup": self.shadow_sup,
            "shadow_distance": self.shadow_distance,
        }


def classify(sig1: float, sig2: float, tol: float = 0.5) -> str | None:
    best = min(MASS_CLASSES, key=lambda c: math.hypot(sig1 - c[0], sig2 - c[1]))
    return f"({best[0]},{best[1]})" if math.hypot(sig1 - best[0], sig2 - best[1]) <= tol else None


def blowup_diagnostics(state: TodaState, problem: TodaProblem, shadow_ref=None, offset: float = PEAK_OFFSET) -> BlowupDiagnostics:
    """Peaks of v1, local masses (1/2pi) int_{B_delta} rho_i h_i e^{u~_i}, concentration, shadow distance."""
    dens1, dens2, st = _densities(state, problem)
    grid = problem.grid
    out = BlowupDiagnostics(lam=blowup_height(st, problem))
    if shadow_ref is not None:
        w = shadow_ref.w.values
        out.shadow_sup = float(np.max(np.abs(st.f2.values - 0.5 * (w - w.mean()))))
    area = grid.cell_area
    peaks = find_peaks(st.f1, offset)
    # below the peak threshold the concentration is still measured about the maximum of v1
    i, j = np.unravel_index(int(np.argmax(st.f1.values)), st.f1.values.shape)
    p0 = peaks[0] if peaks else (i * grid.spacing, j * grid.spacing)
    near = _distance_to(grid, p0) <= CONCENTRATION_RADIUS
    out.concentration = float(dens1[near].sum() * area / st.rho[0])
    if not peaks:
        return out
    out.peaks = peaks
    for p in peaks:
        d = _distance_to(grid, p)
        masses = {}
        for delta in MASS_RADII:
            inside = d <= delta
            masses[delta] = (float(dens1[inside].sum() * area / (2 * math.pi)), float(dens2[inside].sum() * area / (2 * math.pi)))
        out.local_masses.append(masses)
        out.labels.append(classify(*masses[min(MASS_RADII)]))
    core = float(dens1[near].sum() * area)
    out.core_width = half_mass_diameter(dens1 * near, grid, p0, core)
    if shadow_ref is not None:
        q = np.asarray(shadow_ref.points)[0]
        out.shadow_distance = float(math.hypot(*_min_image(np.subtract(p0, q))))
    return out


def blowup_height(state: TodaState, problem: TodaProblem) -> float:
    """max 2 v1~ with v1~ = v1 - (1/2) log int h1 e^{2 v1 - v2}."""
    st = state if state.form == "v" else transform_uv(state)
    h1, _ = problem.weights()
    u1 = 2 * st.f1.values - st.f2.values
    shift = np.max(u1)
    log_int = shift + math.log(float(np.mean(h1 * np.exp(u1 - shift))))
    return float(np.max(2 * st.f1.values) - log_int)


# -- continuation --------------------------------------------------------------

@dataclass
class StepController:
    step: float = 0.1 * math.pi
    min_step: float = 1e-4 * math.pi
    max_step: float = 0.2 * math.pi
    grow: float = 1.3
    grow_after: int = 3
    successes: int = 0

    def __post_init__(self):
        self.step = min(max(self.step, self.min_step), self.max_step)

    def failed(self) -> bool:
        """Halve the step; False once it underflows."""
        self.step *= 0.5
        self.successes = 0
        return self.step >= self.min_step

    def succeeded(self) -> None:
        self.successes += 1
        if self.successes >= self.grow_after:
            self.step = min(self.step * self.grow, self.max_step)
            self.successes = 0


@dataclass
class ContinuationRun:
    states: list = field(default_factory=list)
    reports: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)
    reason: str = ""

    def rho1(self) -> list[float]:
        return [s.rho[0] for s in self.states]

    def rows(self) -> list[dict]:
        rows = []
        for st, rep, dg in zip(self.states, self.reports, self.diagnostics):
            m1, m2 = st.sup()
            peak = dg.peaks[0] if dg.peaks else (float("nan"), float("nan"))
            rows.append({"rho1": st.rho[0], "rho2": st.rho[1], "max_v1": m1, "max_v2": m2,
                         "residual": rep.final_residual_sup, "peak_x": peak[0], "peak_y": peak[1],
                         "concentration": dg.concentration, "shadow_sup": dg.shadow_sup})
        return rows

    def to_csv(self, path, columns=("rho1", "max_v1", "concentration")) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(columns)
            for row in self.rows():
                wr.writerow([_fmt(row[c]) for c in columns])


def _fmt(x) -> str:
    if x is None:
        return ""
    return repr(float(x))


def _path_points(path):
    pts = np.asarray([tuple(map(float, p)) for p in path])
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
        raise InvalidArgument("path needs at least two (rho1, rho2) points")
    seg = np.hypot(*np.diff(pts, axis=0).T)
    return pts, np.concatenate([[0.0], np.cumsum(seg)])


def _at_length(pts, cum, s):
    s = min(max(s, 0.0), cum[-1])
    i = min(int(np.searchsorted(cum, s, side="right")) - 1, len(pts) - 2)
    frac = 0.0 if cum[i + 1] == cum[i] else (s - cum[i]) / (cum[i + 1] - cum[i])
    return tuple(pts[i] + frac * (pts[i + 1] - pts[i]))


def _bordered_newton(sys_at, x0, mu0, tangent, anchor, tol, max_iter=40):
    """Newton on F(x, mu) = 0 plus the arclength row <tangent, (x, mu) - anchor> = 0.

    Inner products on x are grid means so that the step length is resolution free.
    """
    n2 = x0.size
    tx, tm = tangent
    ax, am = anchor

    def full_residual(x, mu):
        sys, dsys = sys_at(mu)
        r = sys.residual(x)
        arc = float(np.mean(tx * (x - ax)) + tm * (mu - am))
        return r, arc, sys, dsys

    x, mu = x0.copy(), float(mu0)
    r, arc, sys, dsys = full_residual(x, mu)
    rn = max(float(np.max(np.abs(r))), abs(arc))
    report = NewtonReport(final_residual_sup=rn, residual_history=[rn])
    n = sys.n
    project = _demean_pair(n)
    while rn > tol:
        if report.iterations >= max_iter:
            raise DivergenceError(f"arclength corrector stalled at residual {rn:.3e}", report)
        jac = sys.jacobian(x)
        f_mu = dsys(x)

        def apply(v):
            p1, p2 = sys.split(v[:n2])
            dm = v[n2]
            j1, j2 = jac(p1, p2)
            fm1, fm2 = sys.split(f_mu)
            top = np.concatenate([(inverse_laplacian(j1 + dm * fm1) + p1.mean()).ravel(),
                                  (inverse_laplacian(j2 + dm * fm2) + p2.mean()).ravel()])
            return np.concatenate([top, [float(np.mean(tx * v[:n2]) + tm * dm)]])

        r1, r2 = sys.split(r)
        rhs = -np.concatenate([inverse_laplacian(r1).ravel(), inverse_laplacian(r2).ravel(), [arc]])
        d = krylov_solve(apply, rhs, mfsolve.KRYLOV_FACTOR)
        step = 1.0
        for _ in range(mfsolve.MAX_HALVINGS + 1):
            xt = project(x + step * d[:n2])
            mt = mu + step * d[n2]
            try:
                rt, at, st, dt = full_residual(xt, mt)
                rtn = max(float(np.max(np.abs(rt))), abs(at))
            except (DegenerateWeight, CriticalParameter):
                rtn = math.inf
            if np.isfinite(rtn) and rtn < rn:
                break
            step *= 0.5
        else:
            raise DivergenceError(f"arclength line search failed at residual {rn:.3e}", report)
        x, mu, r, arc, sys, dsys, rn = xt, mt, rt, at, st, dt, rtn
        report.iterations += 1
        report.damping_history.append(step)
        report.residual_history.append(rn)
        report.final_residual_sup = rn
    report.converged = True
    return x, mu, report


def continue_branch(start: TodaState, problem: TodaProblem, path, controller: StepController | None = None,
                    tol: float = 1e-9, shadow_ref=None, blowup_max: float = BLOWUP_MAX,
                    core_cells: int = CORE_CELLS, max_steps: int = 2000, method: str = "arclength") -> ContinuationRun:
    """Continuation along a polyline in (rho1, rho2).

    method='natural' steps the path parameter and corrects with Newton from a
    secant predictor; method='arclength' (default) corrects in (field, path
    parameter) with a pseudo-arclength row, so folds in rho are passed.
    """
    if method not in ("natural", "arclength"):
        raise InvalidArgument(f"unknown continuation method {method!r}")
    ctl = controller or StepController()
    pts, cum = _path_points(path)
    if start.form != "v":
        start = transform_uv(start)
    state, rep = newton_toda(start, problem, tuple(pts[0]), tol)
    run = ContinuationRun()
    h = problem.grid.spacing
    g = problem.grid
    n = g.n

    def record(st, rp, s):
        run.states.append(st)
        run.reports.append(rp)
        run.steps.append(s)
        run.diagnostics.append(blowup_diagnostics(st, problem, shadow_ref))

    def vec(st):
        return np.concatenate([st.f1.values.ravel(), st.f2.values.ravel()])

    def to_state(x, mu):
        return TodaState("v", TorusField(g, x[: n * n].reshape(n, n).copy()), TorusField(g, x[n * n:].reshape(n, n).copy()),
                         _at_length(pts, cum, mu))

    direction = (pts[-1] - pts[0]) / max(cum[-1], 1e-300)

    def sys_at(mu):
        rho = _at_length(pts, cum, mu)
        check_parameters(rho)
        sys = _System(problem, rho)
        i = min(int(np.searchsorted(cum, mu, side="right")) - 1, len(pts) - 2)
        seg = pts[i + 1] - pts[i]
        dr = seg / max(np.hypot(*seg), 1e-300)

        def dsys(x):
            v1, v2 = sys.split(x)
            u1, u2 = _exponents(v1, v2)
            return np.concatenate([(dr[0] * (_normalized(u1, sys.h1) - 1.0)).ravel(),
                                   (dr[1] * (_normalized(u2, sys.h2) - 1.0)).ravel()])

        return sys, dsys

    del direction
    record(state, rep, 0.0)
    mu_cur = 0.0
    prev = None
    for _ in range(max_steps):
        if mu_cur >= cum[-1] - 1e-14:
            run.reason = "path_end"
            return run
        ds = ctl.step
        try:
            if method == "natural" or prev is None:
                ds = min(ds, cum[-1] - mu_cur)
                mu_new = mu_cur + ds
                if prev is None:
                    guess = state
                else:
                    mu_old, st_old = prev
                    k = ds / (mu_cur - mu_old)
                    guess = to_state(vec(state) + k * (vec(state) - vec(st_old)), mu_new)
                new_state, new_rep = newton_toda(guess, problem, _at_length(pts, cum, mu_new), tol)
            else:
                mu_old, st_old = prev
                tx = vec(state) - vec(st_old)
                tm = mu_cur - mu_old
                norm = math.sqrt(float(np.mean(tx * tx)) + tm * tm)
                tx, tm = tx / norm, tm / norm
                x_pred = vec(state) + ds * tx
                mu_pred = mu_cur + ds * tm
                if mu_pred > cum[-1]:
                    # land on the path end with a natural step
                    mu_new = cum[-1]
                    new_state, new_rep = newton_toda(to_state(x_pred, mu_new), problem, _at_length(pts, cum, mu_new), tol)
                else:
                    x, mu_new, new_rep = _bordered_newton(sys_at, x_pred, mu_pred, (tx, tm), (x_pred, mu_pred), tol)
                    if mu_new < 0:
                        run.reason = "returned_to_start"
                        return run
                    new_state = to_state(x, mu_new)
        except (DivergenceError, DegenerateWeight, FloatingPointError) as exc:
            log.info("corrector failed near mu=%s: %s", mu_cur, exc)
            if not ctl.failed():
                run.reason = "step_underflow"
                return run
            continue
        except CriticalParameter:
            if not ctl.failed():
                run.reason = "critical_parameter"
                return run
            continue
        prev = (mu_cur, state)
        state, mu_cur = new_state, mu_new
        ctl.succeeded()
        record(state, new_rep, mu_cur)
        dg = run.diagnostics[-1]
        if state.sup()[0] > blowup_max:
            run.reason = "blowup_threshold"
            return run
        if dg.peaks and dg.core_width < core_cells * h:
            run.reason = "core_underresolved"
            return run
    run.reason = "max_steps"
    return run


def height_law_fit(run: ContinuationRun, min_lambda: float = 4.0) -> dict:
    """Fit (rho1 - 4 pi) e^lambda = A lambda + B over the states with lambda >= min_lambda."""
    lam = np.array([d.lam for d in run.diagnostics])
    rho1 = np.array(run.rho1())
    sel = lam >= min_lambda
    if sel.sum() < 2:
        raise InvalidArgument(f"fewer than two branch states with lambda >= {min_lambda}")
    lam, rho1 = lam[sel], rho1[sel]
    A, B = np.polyfit(lam, (rho1 - FOUR_PI) * np.exp(lam), 1)
    return {"lambda": lam.tolist(), "rho1": rho1.tolist(), "A": float(A), "B": float(B)}


def shadow_reference(problem: TodaProblem, rho2: float, point, tol: float = 1e-10):
    """Converged one-point shadow state for the same weights, started at ``point``."""
    from . import shadow

    prob = shadow.ShadowProblem(rho2, problem.h1, problem.h2, problem.grid, m=1)
    init = shadow.ShadowState(points=np.array([point], dtype=float), w=TorusField.zeros(problem.grid))
    return shadow.newton_shadow(prob, init, tol), prob


__all__ = [
    "TodaProblem", "TodaState", "transform_uv", "residual_toda", "newton_toda", "jacobian_apply",
    "check_parameters", "find_peaks", "blowup_diagnostics", "blowup_height", "BlowupDiagnostics",
    "StepController", "ContinuationRun", "continue_branch", "height_law_fit", "shadow_reference",
    "NewtonReport", "mfsolve",
]
