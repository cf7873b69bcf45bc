import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from todadeg import bubble as b
from todadeg import torus
from todadeg.errors import GeometryError, InvalidArgument, NoRootError, ResolutionError, SolvabilityError
from todadeg.torus import TorusField
from todadeg.weights import TrigWeight

from conftest import solve_one_point

FOUR_PI = 4 * math.pi


def single(ctx, lam, rho1=FOUR_PI, r0=0.1, a=1.0):
    return b.Bubble(ctx, b.BubbleParams((b.BubbleSite((0.0, 0.0), 0.0, lam, a),), rho1, r0))


def bisect_large_root(target, lo=1.0, hi=60.0):
    # plain bisection on the decreasing branch of lam e^{-lam}
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid * math.exp(-mid) > target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# -- rate function inversion -----------------------------------------------------

def test_lambda_of_rho_matches_bisection():
    lam = b.lambda_of_rho(0.01, 1.0)
    assert lam == pytest.approx(bisect_large_root(0.01), abs=1e-10)
    assert lam == pytest.approx(6.47, abs=0.01)


def test_lambda_of_rho_round_trip_example():
    assert b.lambda_of_rho(2 * 12 * math.exp(-12), 2.0) == pytest.approx(12.0, abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.floats(2.5, 40), st.floats(0.0, 3.0), st.floats(-20, 20).filter(lambda c: abs(c) > 1e-3))
def test_lambda_of_rho_inverts_rate_function(lam, alpha, c):
    if lam <= 1 + alpha + 0.5:
        return
    delta = c * float(b.rate_function(lam, alpha))
    back = b.lambda_of_rho(delta, c, alpha)
    assert abs(back - lam) <= 1e-8 * lam
    assert abs(c * float(b.rate_function(back, alpha)) - delta) <= 1e-10 * abs(delta)


def test_lambda_of_rho_errors():
    with pytest.raises(SolvabilityError):
        b.lambda_of_rho(-0.01, 1.0)
    with pytest.raises(NoRootError):
        b.lambda_of_rho(1.0, 1.0)
    with pytest.raises(InvalidArgument):
        b.lambda_of_rho(0.0, 1.0)


def test_singular_rate_law_inverts():
    lam = b.lambda_of_P(3.0 * math.exp(-12 / 1.5), 3.0, 0.5)
    assert lam == pytest.approx(12.0, abs=1e-12)


# -- radial profiles ---------------------------------------------------------------

def test_zeta1_matches_closed_form_and_decays():
    for alpha in (0.5, 1.5):
        z = b.solve_zeta(alpha, "zeta1", c=0.7, e=1.3)
        exact = b.zeta1_closed_form(z.nodes, alpha, 0.7, 1.3)
        assert np.max(np.abs(z.values - exact)) <= 1e-7 * np.max(np.abs(exact))
        assert z.residual <= 1e-8
        assert abs(z.values[0]) <= 10 * z.nodes[0] * np.max(np.abs(exact))


def test_zeta1_decay_rate():
    z = b.solve_zeta(0.5, "zeta1", c=0.7, e=1.3)
    assert abs(z.log_slope(1e2, 1e4) + 2.0) <= 0.05


def test_zeta_zero_forcing_is_zero():
    z1 = b.solve_zeta(0.5, "zeta1", c=0.7, e=0.0)
    z2 = b.solve_zeta(0.5, "zeta2", c=0.7, e=0.0, hess=np.zeros((2, 2)), zeta1=z1)
    assert np.max(np.abs(z1.values)) == 0.0
    assert np.max(np.abs(z2.values)) <= 1e-14
    assert all(np.max(np.abs(p.values)) <= 1e-14 for p in z2.companions.values())


def test_zeta2_log_growth_and_flux():
    alpha, c, e = 0.5, 0.7, 1.3
    hess = np.array([[0.4, 0.1], [0.1, -0.2]])
    z1 = b.solve_zeta(alpha, "zeta1", c=c, e=e)
    z2 = b.solve_zeta(alpha, "zeta2", c=c, e=e, hess=hess, zeta1=z1)
    assert z2.residual <= 1e-8
    assert abs(z2.values[0]) <= 1e-6 * np.max(np.abs(z2.values))
    top = z2.nodes[-1]
    lo_fit = z2.log_coefficient(top / 100, top / 10)
    hi_fit = z2.log_coefficient(top / 10, top)
    assert abs(hi_fit - lo_fit) <= 0.05 * abs(hi_fit)
    rho1h = c * 4 * (1 + alpha) ** 2
    assert b.d_from_flux(z2) == pytest.approx(b.d_closed_form(alpha, rho1h, 1.0, np.trace(hess)), rel=1e-6)


@pytest.mark.parametrize("alpha", [0.0, 1.0, 2.0])
def test_zeta_refuses_integer_alpha(alpha):
    with pytest.raises(InvalidArgument):
        b.solve_zeta(alpha, "zeta1", c=1.0, e=1.0)


def test_profile_csv(tmp_path):
    z = b.solve_zeta(0.5, "zeta1", c=0.7, e=1.3)
    z.to_csv(tmp_path / "z.csv")
    rows = list(csv.reader(open(tmp_path / "z.csv")))
    assert rows[0] == ["r", "value"] and len(rows) == len(z.nodes) + 1


# -- parameter validation ------------------------------------------------------------

def test_params_validation():
    with pytest.raises(InvalidArgument):
        b.BubbleParams((b.BubbleSite((0, 0), 0, 4.0),), FOUR_PI)
    with pytest.raises(InvalidArgument):
        b.BubbleParams((b.BubbleSite((0, 0), 0, 10.0, 1.2),), FOUR_PI)
    with pytest.raises(GeometryError):
        b.BubbleParams((b.BubbleSite((0, 0), 0, 10.0), b.BubbleSite((0.1, 0), 0, 10.0)), 2 * FOUR_PI)


def test_index_blocks():
    p = b.BubbleParams((b.BubbleSite((0, 0), 0, 10), b.BubbleSite((0.5, 0), 0.5, 10), b.BubbleSite((0, 0.5), 0.25, 10),
                        b.BubbleSite((0.5, 0.5), 0.5, 10)), 20.0)
    assert p.J1 == [0] and p.J2 == [1, 3]
    assert b.BubbleParams((b.BubbleSite((0, 0), 0, 10),), FOUR_PI).J2 == []


def test_overlapping_cutoffs_and_ceiling(bubble_ctx):
    params = b.BubbleParams((b.BubbleSite((0, 0), 0, 10), b.BubbleSite((0.3, 0), 0, 10)), 2 * FOUR_PI, 0.1)
    with pytest.raises(GeometryError):
        b.Bubble(bubble_ctx, params)
    with pytest.raises(ResolutionError):
        single(bubble_ctx, b.lambda_ceiling(128) + 0.5)
    assert b.lambda_ceiling(256) == 16.0


# -- assembly -------------------------------------------------------------------------

def test_peak_value_is_lambda(bubble_ctx):
    bub = single(bubble_ctx, 12.0)
    sd = bub.sites[0]
    at_q = bub.site_value(0, np.array([[0.0, 0.0]]))[0]
    assert at_q - sd.s == pytest.approx(12.0, abs=1e-12)
    near = np.random.default_rng(0).normal(scale=1e-4, size=(50, 2))
    assert np.all(bub.site_value(0, near % 1.0, near) <= at_q)
    assert sd.d == 0.0


def test_far_field_approaches_green_function(bubble_ctx):
    r = np.linspace(0.1, 0.2, 21)
    th = np.linspace(0, 2 * np.pi, 12, endpoint=False)
    R, T = np.meshgrid(r, th)
    off = np.stack([(R * np.cos(T)).ravel(), (R * np.sin(T)).ravel()], -1)
    errs = []
    for lam in (8.0, 10.0, 12.0):
        bub = single(bubble_ctx, lam)
        diff = bub.site_value(0, off % 1.0, off) - 8 * math.pi * torus.green_eval((0.0, 0.0), off % 1.0)
        errs.append(np.max(np.abs(diff)))
        assert errs[-1] <= 3.0 * lam * math.exp(-lam)
    assert errs[0] > errs[1] > errs[2]


def test_standard_bubble_mass_is_eight_pi(bubble_ctx):
    sd = single(bubble_ctx, 12.0).sites[0]
    r, wt = b._gauss_log_panels(1e-11, 1e4)
    a = sd.c * math.exp(12.0)
    dens = 2 * FOUR_PI * math.exp(sd.log_hp) * math.exp(12.0) / (1 + a * r**2) ** 2
    assert abs(np.sum(wt * r * 2 * math.pi * r * dens) - 8 * math.pi) <= 1e-8


def test_assembled_field_is_mean_zero(shadow_weak):
    prob, st = shadow_weak
    params = b.BubbleParams((b.BubbleSite((0.0, 0.0), 0.0, 8.0),), FOUR_PI)
    f = b.assemble_bubble(params, st, prob)
    # the grid mean misses the unresolved core; the polar-corrected mean is what is subtracted
    assert abs(f.mean()) <= 1e-2
    assert f.values[0, 0] == f.sup()


def test_report_json(bubble_ctx):
    rep = json.loads(single(bubble_ctx, 10.0).to_json())
    site = rep["sites"][0]
    assert {"s", "t", "d", "lambda", "g_star"} <= set(site)


# -- l(Q) -----------------------------------------------------------------------------------

def test_l_q_single_free_point_reduces_to_rate_bracket(shadow_weak, bubble_ctx):
    prob, _ = shadow_weak
    params = b.BubbleParams((b.BubbleSite((0, 0), 0, 12),), FOUR_PI)
    sd = b.site_data(bubble_ctx, params, 0)
    pref = math.exp(sd.log_hp) * FOUR_PI / 4 * math.exp(sd.g_star)
    p = np.array([0.0, 0.0])
    expected = bubble_ctx.delta_log_h1_star(p) - prob.rho2 + 8 * math.pi
    assert b.l_Q_eval(bubble_ctx, params) / pref == pytest.approx(expected, rel=1e-8)
    assert bubble_ctx.laplacian_w(p) == pytest.approx(2 * prob.rho2, rel=1e-8)


def test_l_q_flat_weight_term_by_term():
    prob, st = solve_one_point(64, 1.0)
    ctx = b.BubbleContext.from_shadow(prob, st)
    p = tuple(st.points[0])
    params = b.BubbleParams((b.BubbleSite(p, 0, 12),), FOUR_PI)
    # h1 = 1: h(p) = e^{-w(p)/2}, G* = 8 pi R_DIAG, and the shadow equation gives Delta w(p) = 2 rho2
    h_at = math.exp(-0.5 * st.w.eval_at(np.atleast_2d(p))[0])
    expected = h_at * math.pi * math.exp(8 * math.pi * torus.R_DIAG) * (-prob.rho2 + 8 * math.pi)
    assert b.l_Q_eval(ctx, params) == pytest.approx(expected, rel=1e-6)


def test_l_q_decreases_as_weight_peak_sharpens():
    values = []
    for amp in (0.1, 0.4, 0.9):
        prob, st = solve_one_point(64, TrigWeight.cos_cos(amp))
        ctx = b.BubbleContext.from_shadow(prob, st)
        values.append(b.l_Q_eval(ctx, b.BubbleParams((b.BubbleSite((0, 0), 0, 12),), FOUR_PI)))
    assert values[0] > values[1] > values[2]
    assert values[0] > 0 > values[2]


def test_l_q_singular_site(singular_setup):
    _, _, ctx = singular_setup
    params = b.BubbleParams((b.BubbleSite((0, 0), 0.5, 12),), FOUR_PI * 1.5, 0.2)
    assert math.isfinite(b.l_Q_eval(ctx, params))
    assert b.l_Q_eval(ctx, params) != 0.0


# -- mass expansion and theta --------------------------------------------------------------------

def test_mass_expansion_single_free_bubble(bubble_ctx):
    scaled = {}
    for lam in (10.0, 12.0):
        rep = b.mass_expansion_check(single(bubble_ctx, lam))
        scaled[lam] = rep["relative"] / (lam * math.exp(-lam))
        assert abs(scaled[lam]) <= 10.0
    assert abs(scaled[10.0] / scaled[12.0] - 1) <= 0.25


def amplitude_response(ctx, lam, delta=1e-3):
    mk = lambda a: single(ctx, lam, a=a)
    base = mk(1.0)
    change = (mk(1 + delta).mass() - mk(1 - delta).mass()) / 2
    return change / (8 * math.pi * lam * delta * math.exp(base.sites[0].t)), base.sites[0]


@pytest.mark.xfail(strict=True, reason="the O(1) core average gives a relative gap of about 2.2/lambda, 22% at lambda = 10; see the decisions ledger")
def test_amplitude_response_matches_leading_term(bubble_ctx):
    ratio, _ = amplitude_response(bubble_ctx, 10.0)
    assert abs(ratio - 1) <= 0.10


@pytest.mark.parametrize("lam", [10.0, 14.0])
def test_amplitude_response_matches_core_average(bubble_ctx, lam):
    # d/da of the mass is 4 pi e^t times the bubble average of v - mean, which is 2 lam + (s - lam) - 2 - mean
    ratio, sd = amplitude_response(bubble_ctx, lam)
    predicted = 1 + (sd.s - lam - 2 - sd.mean) / (2 * lam)
    assert abs(ratio - predicted) <= 1e-3


def test_singular_d_term_matches_bracket_quadrature(singular_setup):
    _, _, ctx = singular_setup
    params = b.BubbleParams((b.BubbleSite((0, 0), 0.5, 12.0),), FOUR_PI * 1.5, 0.2)
    bub = b.Bubble(ctx, params)
    sd = bub.sites[0]
    dterm = math.pi * sd.d * math.exp(sd.t) * math.exp(-12.0 / 1.5)
    assert abs(bub.bracket_integral(0) / dterm - 1) <= 0.15


def test_singular_remainder_is_below_the_d_term_order(singular_setup):
    _, _, ctx = singular_setup
    scaled = []
    for lam in (10.0, 12.0, 14.0):
        params = b.BubbleParams((b.BubbleSite((0, 0), 0.5, lam),), FOUR_PI * 1.5, 0.2)
        rel = b.mass_expansion_check(b.Bubble(ctx, params))["relative"]
        scaled.append(abs(rel) / math.exp(-lam / 1.5))
    assert scaled[0] > scaled[1] > scaled[2]
    assert scaled[2] <= 0.5 * scaled[0]


def test_injected_psi_changes_discrepancy_at_second_order(bubble_ctx):
    bub = single(bubble_ctx, 12.0)
    psi = TorusField.from_function(bubble_ctx.grid, lambda x, y: 1e-2 * np.cos(2 * np.pi * (x - 0.1)) * np.cos(2 * np.pi * y))
    psi_q = float(psi.eval_at(np.array([[0.0, 0.0]]))[0])
    r0 = b.mass_expansion_check(bub)["relative"]
    r1 = b.mass_expansion_check(bub, psi)["relative"]
    assert abs(r1 - r0) <= FOUR_PI * psi_q**2


def test_theta_vanishes_at_solvability_point(singular_setup):
    _, _, ctx = singular_setup
    lam = 12.0
    bub = b.Bubble(ctx, b.BubbleParams((b.BubbleSite((0, 0), 0.5, lam),), FOUR_PI * 1.5, 0.2))
    rho1 = FOUR_PI * 1.5 + math.pi * bub.sites[0].d * math.exp(-lam / 1.5)
    assert abs(b.theta_eval(bub, rho1)[0]) <= 1e-14


def test_theta_single_free_bubble(bubble_ctx):
    bub = single(bubble_ctx, 10.0, rho1=FOUR_PI + 0.01)
    assert b.theta_eval(bub)[0] == pytest.approx(0.01 / FOUR_PI, rel=1e-12)


def test_theta_consistent_with_normalization(bubble_ctx):
    scaled = []
    for lam in (8.0, 10.0, 12.0):
        bub = single(bubble_ctx, lam)
        gap = math.exp(bub.sites[0].t) * bub.params.rho1 / bub.mass() - 1 - b.theta_eval(bub)[0]
        scaled.append(gap / (lam * math.exp(-lam)))
        assert abs(gap) <= lam * math.exp(-lam)
    assert np.ptp(scaled) <= 0.1


# -- correction eta ----------------------------------------------------------------------------

def test_eta_vanishes_to_second_order_at_the_point(bubble_ctx):
    eta = single(bubble_ctx, 12.0).sites[0].eta
    for prof in eta.modes.values():
        assert prof.residual <= 1e-8
        assert abs(prof(np.array([1e-6]))[0]) <= 1e-9


def test_eta_axisymmetric_mode_matches_independent_ivp(bubble_ctx):
    bub = single(bubble_ctx, 12.0)
    sd = bub.sites[0]
    prof = sd.eta.radial(0, "cos")
    R = math.sqrt(sd.c * math.exp(12.0))
    r_eval = 0.05
    forcing = bubble_ctx._cache
    key = next(k for k in forcing if k[0] == "J")
    F = forcing[key][(0, "cos")]
    r_nodes = sd.eta.r

    def rhs(t, y):
        s = math.exp(t)
        V = 8 * s * s / (1 + s * s) ** 2
        f = np.interp(math.log(s / R), np.log(r_nodes), F)
        return [y[1], -V * (y[0] + f)]

    sol = solve_ivp(rhs, (math.log(R * r_nodes[0]), math.log(R * r_eval)), [0.0, 0.0], method="DOP853", rtol=1e-11, atol=1e-22)
    assert prof(np.array([r_eval]))[0] == pytest.approx(sol.y[0, -1], rel=5e-3)


@pytest.mark.xfail(strict=True, reason="leading log^2 term carries an O(1/log(R r)) correction of about 40% at lambda = 12; see the decisions ledger")
def test_eta_matches_leading_log_square_term(bubble_ctx):
    bub = single(bubble_ctx, 12.0)
    r = 0.05
    th = np.linspace(0, 2 * np.pi, 16, endpoint=False)
    vals = bub.sites[0].eta(np.stack([r * np.cos(th), r * np.sin(th)], -1))
    lead = b.eta_leading_term(bub, 0, r)
    assert abs(vals.mean() - lead) <= 0.2 * abs(lead)


def test_eta_sup_scales_like_lambda_squared_exp():
    prob, st = solve_one_point(256, TrigWeight.cos_cos(0.1))
    ctx = b.BubbleContext.from_shadow(prob, st)
    lams = np.array([8.0, 10.0, 12.0, 14.0])
    sups = np.array([single(ctx, lam).sites[0].eta.sup() for lam in lams])
    slope = np.polyfit(lams, np.log(sups / lams**2), 1)[0]
    assert -1.2 <= slope <= -0.8


@pytest.mark.xfail(strict=True, reason="sup of grad eta sits in the core and scales like e^{-lambda/2}; see the decisions ledger")
def test_eta_gradient_scales_like_lambda_squared_exp():
    prob, st = solve_one_point(256, TrigWeight.cos_cos(0.1))
    ctx = b.BubbleContext.from_shadow(prob, st)
    lams = np.array([8.0, 10.0, 12.0, 14.0])
    sups = np.array([single(ctx, lam).sites[0].eta.grad_sup() for lam in lams])
    slope = np.polyfit(lams, np.log(sups / lams**2), 1)[0]
    assert -1.2 <= slope <= -0.8


# -- rate law and cutoff independence ---------------------------------------------------------------

def test_rate_coefficient_formula(shadow_weak, bubble_ctx):
    prob, _ = shadow_weak
    p = np.array([0.0, 0.0])
    h = math.exp(float(bubble_ctx.log_h(p[None, :])[0]))
    lap = bubble_ctx.delta_log_h1_star(p) - 0.5 * bubble_ctx.laplacian_w(p)
    assert b.rate_coefficient(bubble_ctx, p) == pytest.approx((lap + 8 * math.pi) / h, rel=1e-12)
    # h1 = 1 + a cos cos peaks at the origin: Delta log h1 = -8 pi^2 a / (1 + a)
    assert bubble_ctx.delta_log_h1_star(p) == pytest.approx(-8 * math.pi**2 * 0.1 / 1.1, rel=1e-10)
    del prob


def test_cutoff_radius_changes_t_by_lambda_exp(bubble_ctx):
    for lam in (10.0, 12.0):
        t1 = single(bubble_ctx, lam, r0=0.1).sites[0].t
        t2 = single(bubble_ctx, lam, r0=0.15).sites[0].t
        assert abs(t1 - t2) <= lam * math.exp(-lam)


def test_rate_law_fit_short_window(bubble_ctx):
    fit = b.rate_law_fit(bubble_ctx, (0.0, 0.0), (10.0, 12.0, 14.0))
    assert fit["relative_error"] <= 0.10
