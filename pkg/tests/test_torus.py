import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate as sp_integrate
from scipy.special import i0

from todadeg import torus
from todadeg.errors import InvalidArgument, SolvabilityError
from todadeg.torus import TorusField, TorusGrid

points = st.tuples(st.floats(0, 1, exclude_max=True), st.floats(0, 1, exclude_max=True))


def periodic_distance(p, x):
    d = np.asarray(x, dtype=float) - np.asarray(p, dtype=float)
    d -= np.round(d)
    return float(np.hypot(*d))


# -- grid and fields -----------------------------------------------------------

@pytest.mark.parametrize("n", [8, 48, 100, 0])
def test_grid_rejects_bad_sizes(n):
    with pytest.raises(InvalidArgument):
        TorusGrid(n)


def test_field_rejects_non_finite():
    g = TorusGrid(16)
    vals = np.zeros((16, 16))
    vals[3, 4] = np.nan
    with pytest.raises(InvalidArgument):
        TorusField(g, vals)


def test_fourier_round_trip():
    g = TorusGrid(64)
    f = TorusField(g, np.random.default_rng(0).standard_normal((64, 64)))
    back = np.fft.ifft2(f.coefficients() * 64**2).real
    assert np.max(np.abs(back - f.values)) <= 1e-12 * f.sup()


def test_field_file_round_trips(tmp_path):
    g = TorusGrid(16)
    f = TorusField(g, np.random.default_rng(1).standard_normal((16, 16)))
    f.to_csv(tmp_path / "f.csv")
    f.to_binary(tmp_path / "f.bin")
    assert np.array_equal(TorusField.from_csv(tmp_path / "f.csv").values, f.values)
    assert np.array_equal(TorusField.from_binary(tmp_path / "f.bin").values, f.values)
    raw = (tmp_path / "f.bin").read_bytes()
    assert int.from_bytes(raw[:8], "little") == 16 and len(raw) == 8 + 8 * 256


def test_eval_at_reproduces_trig_polynomial():
    g = TorusGrid(32)
    f = TorusField.from_function(g, lambda x, y: np.cos(2 * np.pi * x) * np.sin(4 * np.pi * y))
    pts = np.random.default_rng(2).random((10, 2))
    exact = np.cos(2 * np.pi * pts[:, 0]) * np.sin(4 * np.pi * pts[:, 1])
    dx = -2 * np.pi * np.sin(2 * np.pi * pts[:, 0]) * np.sin(4 * np.pi * pts[:, 1])
    assert np.allclose(f.eval_at(pts), exact, atol=1e-12)
    assert np.allclose(f.eval_at(pts, (1, 0)), dx, atol=1e-11)


# -- Poisson -------------------------------------------------------------------

def test_poisson_zero_rhs():
    g = TorusGrid(32)
    assert torus.solve_poisson(TorusField.zeros(g)).sup() == 0.0


def test_poisson_single_mode():
    g = TorusGrid(32)
    rhs = TorusField.from_function(g, lambda x, y: np.cos(2 * np.pi * x))
    u = torus.solve_poisson(rhs)
    x1, _ = g.coords()
    assert np.max(np.abs(u.values + np.cos(2 * np.pi * x1) / (4 * np.pi**2))) <= 1e-14


def test_poisson_rejects_nonzero_mean():
    g = TorusGrid(16)
    with pytest.raises(SolvabilityError):
        torus.solve_poisson(TorusField(g, np.ones((16, 16))))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_poisson_inverts_laplacian_on_random_fields(seed):
    g = TorusGrid(32)
    v = np.random.default_rng(seed).standard_normal((32, 32))
    rhs = TorusField(g, v - v.mean())
    u = torus.solve_poisson(rhs)
    assert np.max(np.abs(torus.laplacian(u.values) - torus.laplacian(torus.inverse_laplacian(rhs.values)))) <= 1e-10
    # solve(Delta f) = f - mean(f), checked on a band-limited field
    smooth = TorusField(g, torus.inverse_laplacian(torus.inverse_laplacian(v)))
    back = torus.solve_poisson(smooth.laplacian()).values
    assert np.max(np.abs(back - smooth.demeaned().values)) <= 1e-10 * max(smooth.sup(), 1e-300) + 1e-16
    assert abs(u.mean()) <= 1e-14


# -- Green function ------------------------------------------------------------

@settings(max_examples=100, deadline=None)
@given(points, points)
def test_green_symmetry(p, x):
    if periodic_distance(p, x) < 1e-6:
        return
    assert abs(torus.green_eval(p, x) - torus.green_eval(x, p)) <= 1e-10


def test_green_rejects_pole():
    with pytest.raises(Exception):
        torus.green_eval((0.2, 0.3), (0.2, 0.3))


def test_green_mean_zero_on_fine_grid():
    g = TorusGrid(256)
    val = torus.integrate_against_green(lambda a, b: np.ones_like(a), (0.3, 0.7), g)
    assert abs(val) <= 1e-8


def test_green_first_fourier_coefficient():
    # -Delta G = delta - 1 gives the (1,0) coefficient 1/(4 pi^2); computed by 1-D quadrature of G against cos
    g = TorusGrid(128)
    val = torus.integrate_against_green(lambda a, b: np.cos(2 * np.pi * a), (0.0, 0.0), g)
    assert abs(val.real - 1 / (4 * np.pi**2)) <= 1e-8


def test_green_matches_spectral_delta_construction_at_second_order():
    errs = []
    for n in (64, 128, 256):
        g = TorusGrid(n)
        pts = np.stack(g.coords(), -1)
        far = torus.euclid_distance((0.0, 0.0), pts) >= 0.1
        spectral = torus.spectral_green((0.0, 0.0), g).values[far]
        errs.append(np.max(np.abs(spectral - torus.green_eval((0.0, 0.0), pts[far]))))
    order = -np.polyfit(np.log([64, 128, 256]), np.log(errs), 1)[0]
    assert order >= 1.8, order


def test_regular_part_has_a_limit_at_the_pole():
    p = np.array([0.31, 0.62])
    ds = 0.1 * 2.0 ** -np.arange(1, 8)
    direction = np.array([math.cos(0.7), math.sin(0.7)])
    vals = np.array([torus.green_regular(p, p + d * direction) for d in ds])
    incr = np.abs(np.diff(vals))
    assert np.all(incr <= 2.0 * ds[:-1])
    assert abs(vals[-1] - torus.R_DIAG) <= 1e-3


@settings(max_examples=40, deadline=None)
@given(points, points, points)
def test_regular_part_translation_invariant(p, x, a):
    if periodic_distance(p, x) < 1e-6:
        return
    shifted = torus.green_regular(np.add(p, a) % 1.0, np.add(x, a) % 1.0)
    assert abs(shifted - torus.green_regular(p, x)) <= 1e-10


def test_diagonal_regular_gradient_is_constant():
    rng = np.random.default_rng(3)
    grads = np.array([torus.green_regular_grad_diag(p) for p in rng.random((20, 2))])
    assert np.max(np.ptp(grads, axis=0)) <= 1e-9
    # central-difference oracle on x -> R(x, x)
    p = rng.random(2)
    h = 1e-5
    fd = [(torus.green_regular(p + h * e, p + h * e) - torus.green_regular(p - h * e, p - h * e)) / (2 * h) for e in np.eye(2)]
    assert np.allclose(fd, grads[0], atol=1e-7)


def test_green_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    p = rng.random(2)
    for x in rng.random((5, 2)):
        if periodic_distance(p, x) < 0.05:
            continue
        h = 1e-6
        fd = [(torus.green_eval(p, x + h * e) - torus.green_eval(p, x - h * e)) / (2 * h) for e in np.eye(2)]
        assert np.allclose(torus.green_grad(p, x), fd, rtol=1e-6, atol=1e-8)


# -- singular weights ------------------------------------------------------------

def test_singular_weight_rejects_nonpositive():
    with pytest.raises(InvalidArgument):
        torus.singular_weight((0.0, 0.0), 0.0, TorusGrid(16))


def test_singular_weight_vanishes_quadratically():
    g = TorusGrid(1024)
    w = torus.singular_weight((0.0, 0.0), 4 * math.pi, g)
    ks = 2 ** np.arange(6)
    ratios = w.values[ks, 0] / (ks / 1024.0) ** 2
    target = math.exp(-4 * math.pi * torus.R_DIAG)
    assert np.all(np.abs(ratios / target - 1) <= 10 * (ks / 1024.0) ** 2 + 1e-12)
    assert w.values[0, 0] == 0.0
    assert torus.singular_weight((0.0, 0.0), 8 * math.pi, g).values[0, 0] == 0.0


def test_singular_weight_integral_matches_clamped_exponential():
    g = TorusGrid(256)
    p = (0.0, 0.0)
    w = torus.singular_weight(p, 4 * math.pi, g)
    pts = np.stack(g.coords(), -1)
    r = torus.euclid_distance(p, pts)
    G = np.where(r > 0, torus.green_eval(p, np.where((r > 0)[..., None], pts, 0.5)), 50.0)
    naive = np.exp(-4 * math.pi * G)
    assert abs(torus.integrate(w) - torus.integrate(TorusField(g, naive))) <= 1e-4


def test_singular_weight_continuous_across_seam():
    g = TorusGrid(64)
    w = torus.singular_weight((0.9, 0.05), 4 * math.pi, g).values
    interior = max(np.max(np.abs(np.diff(w, axis=0))), np.max(np.abs(np.diff(w, axis=1))))
    seam = max(np.max(np.abs(w[0] - w[-1])), np.max(np.abs(w[:, 0] - w[:, -1])))
    assert seam <= 2 * interior


# -- quadrature ----------------------------------------------------------------------

def test_integrate_examples():
    g = TorusGrid(128)
    assert torus.integrate(TorusField(g, np.ones((128, 128)))) == pytest.approx(1.0, abs=1e-15)
    assert abs(torus.integrate(TorusField.from_function(g, lambda x, y: np.cos(2 * np.pi * x)))) <= 1e-14
    bessel = torus.integrate(TorusField.from_function(g, lambda x, y: np.exp(np.cos(2 * np.pi * x))))
    quad, _ = sp_integrate.quad(lambda t: math.exp(math.cos(2 * math.pi * t)), 0, 1, epsabs=1e-14)
    assert abs(bessel - quad) <= 1e-10
    assert abs(bessel - i0(1.0)) <= 1e-10
