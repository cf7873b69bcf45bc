"""Command-line front end: one command per process, JSON config in, report and CSV files out.

Exit codes: 0 when every declared check passes, 1 when a check fails,
2 on invalid input or a critical parameter, 3 on solver divergence,
4 on a resolution limit.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__, bubble, genfun, mfsolve, shadow, toda, torus
from .errors import InvalidArgument, TodaDegreeError
from .weights import TrigWeight, sample

log = logging.getLogger("todadeg")

COMMANDS = ("degree", "green-check", "solve-mf", "solve-shadow", "solve-toda", "continue", "bubble-check")
GRID_BOUNDS = (16, 1024)


def pi_value(text) -> float:
    """A rational multiple of pi given as '9/2', 4 or '4'; returns the float value."""
    return float(pi_fraction(text)) * math.pi


def pi_fraction(text) -> Fraction:
    if isinstance(text, float):
        raise InvalidArgument(f"pi-valued parameter {text!r} must be an integer or a rational string like '9/2'")
    try:
        return Fraction(str(text))
    except (ValueError, ZeroDivisionError) as exc:
        raise InvalidArgument(f"cannot read {text!r} as a rational number") from exc


@dataclass
class RunConfig:
    command: str
    grid: int = 128
    params: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)
    out: str = "out"
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        unknown = set(d) - {"command", "grid", "params", "weights", "out", "seed"}
        if unknown:
            raise InvalidArgument(f"unknown config keys: {sorted(unknown)}")
        if "command" not in d:
            raise InvalidArgument("config needs a 'command'")
        cfg = cls(str(d["command"]), int(d.get("grid", 128)), dict(d.get("params", {})), dict(d.get("weights", {})),
                  str(d.get("out", "out")), int(d.get("seed", 0)))
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, text: str) -> RunConfig:
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise InvalidArgument(f"config is not valid JSON: {exc}") from exc

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    def validate(self) -> None:
        if self.command not in COMMANDS:
            raise InvalidArgument(f"unknown command {self.command!r}; choose from {', '.join(COMMANDS)}")
        lo, hi = GRID_BOUNDS
        if not lo <= self.grid <= hi or self.grid & (self.grid - 1):
            raise InvalidArgument(f"grid must be a power of two in [{lo}, {hi}]")
        for name in self.weights:
            TrigWeight.from_dict(self.weights[name])
        _GATES.get(self.command, lambda cfg: None)(self)

    def weight(self, name: str) -> TrigWeight:
        return TrigWeight.from_dict(self.weights.get(name, 1.0))

    def torus_grid(self) -> torus.TorusGrid:
        return torus.TorusGrid(self.grid)


# -- gates run before any computation --------------------------------------------

def _gate_degree(cfg):
    p = cfg.params
    if "chi" not in p:
        raise InvalidArgument("degree needs 'chi'")
    if "rho" in p:
        data = genfun.SingularData(int(p["chi"]), tuple(pi_fraction(a) for a in p.get("alphas", ())))
        rho = pi_fraction(p["rho"])
        sigma, _, _ = genfun.critical_sets(data, rho)
        if rho in sigma:
            raise genfun.CriticalParameter(f"critical parameter: rho = {rho}*pi lies in Sigma")
    else:
        genfun.Rho1Window.parse(p.get("rho1_window", "(0,4pi)"))


def _gate_rho2(value, s_alphas=()):
    rho2 = pi_value(value)
    mfsolve.check_sigma2(rho2, s_alphas)
    genfun.rho2_window_index(pi_fraction(value))
    return rho2


def _gate_mf(cfg):
    rho = pi_fraction(cfg.params.get("rho", "1"))
    if rho <= 0:
        raise InvalidArgument("rho must be positive")
    sigma, _, _ = genfun.critical_sets(genfun.SingularData(0), rho + 1)
    if rho in sigma:
        raise genfun.CriticalParameter(f"critical parameter: rho = {rho}*pi lies in Sigma")


def _gate_shadow(cfg):
    _gate_rho2(cfg.params.get("rho2", "2"), [a for _, a in cfg.params.get("fixed_singular", ())])


def _gate_toda(cfg):
    toda.check_parameters((pi_value(cfg.params.get("rho1", "2")), pi_value(cfg.params.get("rho2", "2"))))


def _gate_continue(cfg):
    path = cfg.params.get("path")
    if not path or len(path) < 2:
        raise InvalidArgument("continue needs a 'path' of at least two [rho1, rho2] points")
    toda.check_parameters(tuple(pi_value(v) for v in path[0]))
    for pt in path:
        if len(pt) != 2:
            raise InvalidArgument("path points are [rho1, rho2] pairs")
        pi_fraction(pt[0])
        pi_fraction(pt[1])


def _gate_bubble(cfg):
    _gate_rho2(cfg.params.get("rho2", "2"))
    lams = cfg.params.get("lambdas", [10, 11, 12, 13, 14])
    ceiling = bubble.lambda_ceiling(cfg.grid)
    if max(lams) > ceiling:
        raise bubble.ResolutionError(f"height {max(lams)} exceeds the resolved ceiling {ceiling:.2f} at n={cfg.grid}")
    if min(lams) < bubble.LAMBDA_MIN:
        raise InvalidArgument(f"heights must be at least {bubble.LAMBDA_MIN}")


_GATES = {"degree": _gate_degree, "solve-mf": _gate_mf, "solve-shadow": _gate_shadow, "solve-toda": _gate_toda,
          "continue": _gate_continue, "bubble-check": _gate_bubble}


# -- report ------------------------------------------------------------------------

@dataclass
class RunReport:
    config: dict
    results: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    manifest: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def to_json(self) -> str:
        return json.dumps({"config": self.config, "results": self.results, "checks": self.checks,
                           "passed": self.passed, "timings": self.timings, "manifest": self.manifest},
                          indent=2, sort_keys=True, default=_json_default)


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Fraction):
        return str(obj)
    raise TypeError(f"not serializable: {type(obj).__name__}")


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    return repr(float(x))


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for row in rows:
            wr.writerow([_fmt(v) for v in row])


class _Runner:
    def __init__(self, cfg: RunConfig, out: Path):
        self.cfg = cfg
        self.out = out
        self.report = RunReport(json.loads(cfg.to_json()))
        self.rng = np.random.default_rng(cfg.seed)

    def artifact(self, name: str) -> Path:
        self.report.manifest.append(name)
        return self.out / name

    def timed(self, key, fn, *args, **kw):
        t0 = time.perf_counter()
        res = fn(*args, **kw)
        self.report.timings[key] = time.perf_counter() - t0
        return res

    # each command fills results/checks and writes its artifacts
    def degree(self):
        p = self.cfg.params
        chi = int(p["chi"])
        if "rho" in p:
            data = genfun.SingularData(chi, tuple(pi_fraction(a) for a in p.get("alphas", ())))
            d = genfun.mean_field_degree(data, pi_fraction(p["rho"]))
            self.report.results["mean_field_degree"] = d
            rows = [(0, d)]
        else:
            ks = p.get("k", [0, 1, 2, 3])
            window = p.get("rho1_window", "(0,4pi)")
            table = [genfun.toda_degree(chi, window, int(k)) for k in ks]
            self.report.results["toda_degree"] = table
            self.report.results["shadow_degree"] = [genfun.shadow_degree(chi, int(k)) for k in ks]
            rows = list(zip(map(int, ks), table))
            d = table
        if "expect" in p:
            self.report.checks["expected_degree"] = d == p["expect"]
        write_csv(self.artifact("degrees.csv"), ("k", "d"), rows)

    def green_check(self):
        grids = self.cfg.params.get("grids", [64, 128, 256])
        pole = tuple(self.cfg.params.get("pole", (0.0, 0.0)))
        rows = []
        for n in grids:
            g = torus.TorusGrid(int(n))
            pts = np.stack(g.coords(), -1)
            r = torus.euclid_distance(pole, pts)
            far = r >= 0.1
            theta = torus.green_eval(pole, pts[far])
            err = float(np.max(np.abs(torus.spectral_green(pole, g).values[far] - theta)))
            integral = torus.integrate_against_green(lambda a, b: np.ones_like(a), pole, g)
            rows.append((int(n), float(np.real(integral)), err))
        errs = np.array([r[2] for r in rows])
        ns = np.array([r[0] for r in rows], dtype=float)
        order = float(-np.polyfit(np.log(ns), np.log(errs), 1)[0]) if len(rows) > 1 else float("nan")
        self.report.results["rows"] = rows
        self.report.results["observed_order"] = order
        self.report.checks["mean_zero"] = all(abs(r[1]) <= 1e-8 for r in rows)
        if len(rows) > 1:
            self.report.checks["order"] = order >= 1.8
        write_csv(self.artifact("green.csv"), ("n", "integral", "far_error"), rows)

    def solve_mf(self):
        p = self.cfg.params
        g = self.cfg.torus_grid()
        prob = mfsolve.MeanFieldProblem(pi_value(p.get("rho", "1")), sample(self.cfg.weight("h"), g))
        u, rep = self.timed("newton", mfsolve.newton_mf, None, prob, float(p.get("tol", 1e-10)))
        res = float(np.max(np.abs(mfsolve.residual_mf(u, prob).values)))
        self.report.results.update(residual=res, sup=u.sup(), newton=rep.to_dict())
        self.report.checks["residual"] = res <= float(p.get("tol", 1e-10))
        u.to_csv(self.artifact("u.csv"))

    def _shadow_problem(self):
        p = self.cfg.params
        g = self.cfg.torus_grid()
        fixed = tuple((tuple(q), float(pi_fraction(a))) for q, a in p.get("fixed_singular", ()))
        return shadow.ShadowProblem(pi_value(p.get("rho2", "2")), self.cfg.weight("h1"), self.cfg.weight("h2"), g,
                                    m=int(p.get("m", 1)), fixed_singular=fixed)

    def solve_shadow(self):
        p = self.cfg.params
        prob = self._shadow_problem()
        tol = float(p.get("tol", 1e-9))
        if "start" in p:
            init = shadow.ShadowState(points=np.array(p["start"], dtype=float).reshape(-1, 2), w=torus.TorusField.zeros(prob.grid))
            states = [self.timed("newton", shadow.newton_shadow, prob, init, tol)]
            shadow.morse_index(states[0], prob)
        else:
            states = self.timed("multi_start", shadow.multi_start, prob, None, tol, _threads())
        out = []
        for st in states:
            d_s, d_t = shadow.degree_signs(st, prob)
            out.append(dict(st.to_dict(), d_S=d_s, d_T=d_t))
        self.report.results["states"] = out
        self.report.results["sum_d_S"] = sum(s["d_S"] for s in out)
        self.report.checks["converged"] = bool(states) and all(s.converged for s in states)
        rows = [(i, *np.asarray(s.points).ravel()[:2], s.morse_index) for i, s in enumerate(states)]
        write_csv(self.artifact("shadow_points.csv"), ("i", "x1", "x2", "morse_index"), rows)
        if states:
            states[0].w.to_csv(self.artifact("w.csv"))

    def solve_toda(self):
        p = self.cfg.params
        g = self.cfg.torus_grid()
        rho = (pi_value(p.get("rho1", "2")), pi_value(p.get("rho2", "2")))
        prob = toda.TodaProblem(g, self.cfg.weight("h1"), self.cfg.weight("h2"))
        noise = float(p.get("noise", 0.0))
        f1 = self.rng.standard_normal((g.n, g.n)) * noise
        f2 = self.rng.standard_normal((g.n, g.n)) * noise
        st0 = toda.TodaState("v", torus.TorusField(g, f1 - f1.mean()), torus.TorusField(g, f2 - f2.mean()), rho)
        tol = float(p.get("tol", 1e-10))
        st, rep = self.timed("newton", toda.newton_toda, st0, prob, rho, tol)
        r1, r2 = toda.residual_toda(st, prob)
        res = max(r1.sup(), r2.sup())
        self.report.results.update(residual=res, max_v=st.sup(), newton=rep.to_dict())
        self.report.checks["residual"] = res <= tol
        st.f1.to_csv(self.artifact("v1.csv"))
        st.f2.to_csv(self.artifact("v2.csv"))

    def continue_(self):
        p = self.cfg.params
        g = self.cfg.torus_grid()
        prob = toda.TodaProblem(g, self.cfg.weight("h1"), self.cfg.weight("h2"))
        path = [(pi_value(a), pi_value(b)) for a, b in p["path"]]
        ctl = toda.StepController(step=float(p.get("step", 0.1)) * math.pi, max_step=float(p.get("max_step", 0.2)) * math.pi)
        ref = None
        if "shadow_point" in p:
            ref, _ = toda.shadow_reference(prob, path[0][1], tuple(p["shadow_point"]))
        run = self.timed("continuation", toda.continue_branch, toda.TodaState.zeros(g, path[0]), prob, path, ctl,
                         float(p.get("tol", 1e-9)), ref, float(p.get("blowup_max", toda.BLOWUP_MAX)))
        rows = run.rows()
        self.report.results.update(reason=run.reason, states=len(rows), final=rows[-1] if rows else None,
                                   diagnostics=run.diagnostics[-1].to_dict() if run.diagnostics else None)
        self.report.checks["all_converged"] = all(r.converged for r in run.reports)
        write_csv(self.artifact("branch.csv"), ("rho1", "max_v1", "concentration"),
                  [(r["rho1"], r["max_v1"], r["concentration"]) for r in rows])
        write_csv(self.artifact("branch_full.csv"),
                  ("rho1", "rho2", "max_v1", "max_v2", "residual", "peak_x", "peak_y", "concentration", "shadow_sup"),
                  [tuple(float("nan") if r[k] is None else r[k] for k in ("rho1", "rho2", "max_v1", "max_v2", "residual",
                                                                         "peak_x", "peak_y", "concentration", "shadow_sup"))
                   for r in rows])

    def bubble_check(self):
        p = self.cfg.params
        prob = self._shadow_problem()
        point = tuple(p.get("point", (0.0, 0.0)))
        init = shadow.ShadowState(points=np.array([point], dtype=float), w=torus.TorusField.zeros(prob.grid))
        st = self.timed("shadow", shadow.newton_shadow, prob, init, float(p.get("tol", 1e-9)))
        ctx = bubble.BubbleContext.from_shadow(prob, st)
        lams = [float(v) for v in p.get("lambdas", [10, 11, 12, 13, 14])]
        fit = self.timed("rate_law", bubble.rate_law_fit, ctx, tuple(st.points[0]), lams, float(p.get("r0", 0.1)))
        self.report.results["rate_law"] = fit
        self.report.checks["rate_law"] = fit["relative_error"] <= 0.1
        write_csv(self.artifact("rate.csv"), ("lambda", "rho1_minus_4pi", "predicted"),
                  zip(fit["lambda"], fit["rho1_minus_4pi"], fit["predicted"]))


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("TODA_DEGREE_THREADS", "1")))
    except ValueError:
        return 1


def run(cfg: RunConfig) -> RunReport:
    cfg.validate()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    runner = _Runner(cfg, out)
    method = {"continue": runner.continue_}.get(cfg.command) or getattr(runner, cfg.command.replace("-", "_"))
    t0 = time.perf_counter()
    method()
    runner.report.timings["total"] = time.perf_counter() - t0
    (out / "report.json").write_text(runner.report.to_json())
    return runner.report


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="todadeg", description="Batch solvers and degree tables for a two-component Toda system on the unit torus.")
    ap.add_argument("command", nargs="?", choices=COMMANDS, help="overrides the config's command")
    ap.add_argument("--config", type=Path, help="JSON run configuration")
    ap.add_argument("--out", type=Path, help="output directory")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--grid", type=int)
    ap.add_argument("--quiet", action="store_true")
    ap.add_argument("--version", action="version", version=__version__)
    return ap


def _error_exit(exc: Exception, code: int) -> int:
    payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    report = getattr(exc, "report", None)
    if report is not None and hasattr(report, "to_dict"):
        payload["newton"] = report.to_dict()
    print(json.dumps(payload), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        d = json.loads(args.config.read_text()) if args.config else {}
        if args.command:
            d["command"] = args.command
        if args.grid is not None:
            d["grid"] = args.grid
        if args.seed is not None:
            d["seed"] = args.seed
        if args.out is not None:
            d["out"] = str(args.out)
        cfg = RunConfig.from_dict(d)
        report = run(cfg)
    except json.JSONDecodeError as exc:
        return _error_exit(InvalidArgument(f"config is not valid JSON: {exc}"), 2)
    except OSError as exc:
        return _error_exit(exc, 2)
    except TodaDegreeError as exc:
        return _error_exit(exc, exc.exit_code)
    if not args.quiet:
        print(report.to_json())
    return 0 if report.passed else 1


if __name__ == "__main__":
    sys.exit(main())
