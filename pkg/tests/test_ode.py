import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diracweyl.errors import ConfigError, EvaluationFailed, OutOfRange
from diracweyl.expr import parse
from diracweyl.ode import (
    Coefficient,
    PotentialSpec,
    export_trace_csv,
    integrate,
    l2_norm_sq,
    ode_residual,
    wronskian,
    wronskian_scaled,
    z_derivative,
)

from oracles import free_phi, free_theta, rel_err

FREE = PotentialSpec.free()


# ---------------------------------------------------------------------------
# expressions and coefficients
# ---------------------------------------------------------------------------


@pytest.mark.parametrize(
    "src, x, expected",
    [
        ("1 + 2*3", 0.0, 7.0),
        ("2^3^2", 0.0, 512.0),
        ("2**3", 0.0, 8.0),
        ("-x^2", 3.0, -9.0),
        ("(1 + x)/2", 3.0, 2.0),
        ("sin(pi*x) + cos(0)", 0.5, 2.0),
        ("exp(log(x))", 2.5, 2.5),
        ("1e-3*x", 2.0, 2e-3),
    ],
)
def test_expression_values(src, x, expected):
    assert parse(src)(x) == pytest.approx(expected, rel=1e-14)


def test_expression_vectorised():
    xs = np.linspace(0, 1, 5)
    np.testing.assert_allclose(parse("x*x")(xs), xs**2)
    np.testing.assert_allclose(parse("3")(xs), np.full(5, 3.0))


@pytest.mark.parametrize("src", ["1 +", "sin x", "foo(x)", "(1", "2 * * 3", "x y", "@"])
def test_expression_errors(src):
    with pytest.raises(ConfigError):
        parse(src)


def test_coefficient_table_interpolates_linearly(tmp_path):
    p = tmp_path / "q.csv"
    p.write_text("x,value\n0,0\n0.5,1\n1,0\n")
    c = Coefficient.from_csv(str(p))
    np.testing.assert_allclose(c(np.array([0.0, 0.25, 0.5, 0.75, 1.0])), [0, 0.5, 1, 0.5, 0])
    np.testing.assert_allclose(c.knots, [0, 0.5, 1])


def test_coefficient_table_rejects_bad_rows(tmp_path):
    p = tmp_path / "q.csv"
    p.write_text("0,0\n1,1\nabc,2\n")
    with pytest.raises(ConfigError):
        Coefficient.from_csv(str(p))
    with pytest.raises(ConfigError):
        Coefficient(np.array([[0.0, 1.0], [0.0, 2.0]]))


def test_potential_validation():
    with pytest.raises(OutOfRange):
        PotentialSpec(a=1.0, b=0.0)
    with pytest.raises(OutOfRange):
        PotentialSpec(mass=-1.0)
    with pytest.raises(OutOfRange):
        PotentialSpec(q_el="1/x")  # infinite at the regular endpoint
    with pytest.raises(OutOfRange):
        PotentialSpec(a=0.0, kappa=0.5)  # kappa/x needs a singular endpoint
    assert PotentialSpec.free().is_free
    assert not PotentialSpec(q_el="x").is_free
    assert PotentialSpec(q_mg=0.0).q_mg is None


# ---------------------------------------------------------------------------
# integration
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("z", [2.0, 1j, 30.0, 5 + 3j])
def test_free_solution_matches_closed_form(z):
    tr = integrate(FREE, z, 0.0, [0.0, 1.0], 1.0, tol=1e-12)
    x = np.linspace(0, 1, 11)
    assert rel_err(tr(x), free_phi(np.asarray(z), x)) < 1e-9


def test_batched_equals_single():
    zs = np.array([2.0, 5 + 3j, 40j])
    batch = integrate(FREE, zs, 0.0, [1.0, 0.0], 1.0, tol=1e-12)
    x = np.linspace(0, 1, 7)
    for i, z in enumerate(zs):
        single = integrate(FREE, z, 0.0, [1.0, 0.0], 1.0, tol=1e-12)
        assert rel_err(batch(x)[:, i], single(x)) < 1e-9
        assert rel_err(batch(x)[:, i], free_theta(z, x)) < 1e-9


def test_backward_integration():
    tr = integrate(FREE, 2.0, 1.0, [0.0, 1.0], 0.0, tol=1e-12)
    np.testing.assert_allclose(tr(0.0), [np.sin(-2.0), np.cos(2.0)], atol=1e-10)


def test_real_z_gives_real_trace():
    pot = PotentialSpec(q_el="sin(3*x)", mass=0.5)
    assert integrate(pot, 1.7, 0.0, [0.0, 1.0], 1.0).is_real
    assert not integrate(pot, 1.7 + 0.1j, 0.0, [0.0, 1.0], 1.0).is_real


def test_large_imaginary_part_is_rescaled():
    # e^{|Im z| x} = e^{2000} overflows doubles; the trace keeps a scale exponent
    z = 2000j
    tr = integrate(FREE, z, 0.0, [0.0, 1.0], 1.0)
    v, e = tr.scaled(1.0)
    assert np.all(np.isfinite(v)) and int(e) > 1000
    # W_x(Phi, u) = -cos(z) for u(1) = (1, 0); |cos(2000i)| ~ e^2000 / 2
    th = integrate(FREE, z, 1.0, [1.0, 0.0], 0.0)
    w, ew = wronskian_scaled(tr, th, 0.5)
    log_w = np.log(abs(complex(w))) + float(ew) * np.log(2.0)
    assert log_w == pytest.approx(2000.0 - np.log(2.0), abs=1e-6)
    assert abs(np.angle(-complex(w))) < 1e-8
    # the unscaled value overflows cleanly instead of producing NaN
    assert np.isinf(complex(wronskian(tr, th, 0.5)).real)


def test_piecewise_linear_potential_and_residual():
    table = np.array([[0.0, 0.0], [0.3, 2.0], [0.7, -1.0], [1.0, 0.5]])
    pot = PotentialSpec(q_el=table, q_sc="x", q_am="cos(x)")
    tr = integrate(pot, 3.0 + 1j, 0.0, [0.0, 1.0], 1.0)
    for k in (0.3, 0.7):
        assert np.any(np.isclose(tr.breaks, k))
    xs = np.array([0.1, 0.45, 0.85])
    assert ode_residual(tr, pot, xs) < 1e-7


def test_out_of_range():
    tr = integrate(FREE, 1.0, 0.0, [0.0, 1.0], 0.5)
    with pytest.raises(OutOfRange):
        tr(0.8)
    with pytest.raises(OutOfRange):
        l2_norm_sq(tr, 0.0, 0.9)


# ---------------------------------------------------------------------------
# Wronskian, norms, z-derivatives
# ---------------------------------------------------------------------------


def test_wronskian_examples():
    z = 2.0
    u = integrate(FREE, z, 0.0, [0.0, 1.0], 1.0, tol=1e-12)
    v = integrate(FREE, z, 0.0, [1.0, 0.0], 1.0, tol=1e-12)
    assert abs(complex(wronskian(u, u, 0.4))) < 1e-14
    for x in (0.0, 0.3, 1.0):
        assert complex(wronskian(u, v, x)) == pytest.approx(-1.0, abs=1e-10)
        assert complex(wronskian(v, u, x)) == pytest.approx(1.0, abs=1e-10)
    w = integrate(FREE, z, 1.0, [0.0, 1.0], 0.0, tol=1e-12)  # (sin z(x-1), cos z(x-1))
    assert complex(wronskian(u, w, 0.6)) == pytest.approx(np.sin(2.0), abs=1e-10)


def test_l2_norm_examples():
    u = integrate(FREE, np.pi, 0.0, [0.0, 1.0], 1.0, tol=1e-12)
    assert l2_norm_sq(u, 0.0, 1.0) == pytest.approx(1.0, rel=1e-9)
    c = integrate(FREE, 0.0, 0.0, [0.0, 1.0], 1.0)
    assert l2_norm_sq(c, 0.0, 1.0) == pytest.approx(1.0, rel=1e-9)
    # (sinh x, cosh x) solves the free equation at z = i up to the factor i
    s = integrate(FREE, 1j, 0.0, [0.0, 1.0], 1.0, tol=1e-12)
    assert l2_norm_sq(s, 0.0, 1.0) == pytest.approx(np.sinh(2.0) / 2, rel=1e-9)


def test_z_derivative_examples():
    assert z_derivative(lambda z: z**2, 3.0) == pytest.approx(6.0, abs=1e-12)
    assert z_derivative(lambda z: z**3, 1 + 1j) == pytest.approx(3 * (1 + 1j) ** 2, rel=1e-8)
    d = z_derivative(lambda z: integrate(FREE, z, 0.0, [1.0, 0.0], 1.0, tol=1e-12), 2.0)
    np.testing.assert_allclose(d(1.0), [-np.sin(2.0), -np.cos(2.0)], atol=1e-9)


def test_z_derivative_wraps_failures():
    def bad(z):
        raise ValueError("boom")

    with pytest.raises(EvaluationFailed):
        z_derivative(bad, 1.0)


@settings(max_examples=25, deadline=None)
@given(
    st.lists(st.floats(-5, 5), min_size=4, max_size=4),
    st.floats(-4, 4),
)
def test_complex_step_exact_for_cubics(coef, z):
    p = np.polynomial.Polynomial(coef)
    assert z_derivative(p, z) == pytest.approx(p.deriv()(z), abs=1e-10 * max(1.0, abs(p.deriv()(z))))


@settings(max_examples=15, deadline=None)
@given(
    st.floats(-20, 20),
    st.floats(-5, 5),
    st.floats(-3, 3),
    st.floats(0, 2),
)
def test_wronskian_constant_in_x(re, im, q, m):
    pot = PotentialSpec(q_el=f"{q}*sin(2*x)", mass=m, q_am=f"{q}*x")
    z = complex(re, im)
    u = integrate(pot, z, 0.0, [0.0, 1.0], 1.0)
    v = integrate(pot, z, 1.0, [0.3, -0.7], 0.0)
    ws = np.array([complex(wronskian(u, v, x)) for x in np.linspace(0, 1, 6)])
    assert np.max(np.abs(ws - ws[0])) <= 100 * 1e-10 * max(1.0, abs(ws[0])) * 10


@settings(max_examples=10, deadline=None)
@given(st.floats(-10, 10), st.floats(-10, 10), st.floats(0.05, 0.95))
def test_lagrange_identity(lam, mu, x):
    pot = PotentialSpec(q_el="cos(x)", mass=0.3)
    u = integrate(pot, lam, 0.0, [0.0, 1.0], 1.0, tol=1e-12)
    v = integrate(pot, mu, 0.0, [1.0, 0.5], 1.0, tol=1e-12)
    from diracweyl.ode import product_integral

    lhs = (lam - mu) * product_integral(u, v, x, 1.0)
    rhs = complex(wronskian(u, v, 1.0)) - complex(wronskian(u, v, x))
    assert abs(lhs - rhs) <= 100 * 1e-10 * max(1.0, abs(rhs), abs(lam - mu))


def test_export_trace_csv(tmp_path):
    tr = integrate(FREE, 2.0 + 1j, 0.0, [0.0, 1.0], 1.0)
    path = export_trace_csv(tr, str(tmp_path / "trace.csv"), x=np.linspace(0, 1, 5))
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["x", "re_u1", "im_u1", "re_u2", "im_u2"]
    assert len(rows) == 6
    assert float(rows[-1][1]) == pytest.approx(np.sin(2 + 1j).real, rel=1e-8)
