import numpy as np
import pytest

from diracweyl.errors import (
    AtomMismatch,
    KappaTooSmall,
    LogCaseUnsupported,
    NoAdmissibleLambda,
    OutOfRange,
)
from diracweyl.ode import PotentialSpec, l2_norm_sq, wronskian
from diracweyl.radial import (
    RadialSystem,
    assemble_M,
    check_frobenius_normalization,
    default_chooser,
    fit_inverse_x_coefficient,
    frobenius_constant,
    frobenius_phi,
    frobenius_theta,
    herglotz_check,
    iterate_reduction,
    kappa_lower_step,
    measure_factorization_check,
    nevanlinna_index,
    radial_weyl_data,
    reduction_step_count,
)
from diracweyl.weyl import SpectralMeasureDiscrete, eigenvalues, norming_weights

from oracles import bessel_M, bessel_phi, bessel_theta, free_phi, free_theta, frobenius_A, rel_err

KAPPAS = (0.25, 0.75, 1.3)
XS = np.linspace(0.05, 1.0, 20)


def test_frobenius_constant():
    assert frobenius_constant(0.0) == pytest.approx(1.0, rel=1e-15)
    for k in KAPPAS + (2.3,):
        assert frobenius_constant(k) == pytest.approx(frobenius_A(k), rel=1e-14)


# ---------------------------------------------------------------------------
# Frobenius solutions against the Bessel oracle
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("kappa", KAPPAS)
@pytest.mark.parametrize("z", [1.0, 2.0 + 1.0j, 5.0j, -3.0])
def test_bessel_oracle(radial_wd, kappa, z):
    rs = radial_wd(kappa).system
    phi, theta = rs.pair(z)
    assert rel_err(phi(XS), bessel_phi(kappa, z, XS)) < 1e-9
    assert rel_err(theta(XS), bessel_theta(kappa, z, XS)) < 1e-9
    tiny = np.array([1e-8, 1e-4])
    assert rel_err(phi(tiny), bessel_phi(kappa, z, tiny)) < 1e-9
    assert rel_err(theta(tiny), bessel_theta(kappa, z, tiny)) < 1e-9


@pytest.mark.parametrize("kappa", KAPPAS)
def test_weyl_function_oracle(radial_wd, kappa):
    zs = np.array([1j, 2 + 1j, -4 + 0.5j])
    np.testing.assert_allclose(radial_wd(kappa).M(zs), bessel_M(kappa, zs), rtol=1e-8)


def test_kappa_zero_is_free_dirac():
    wd = radial_weyl_data(0.0)
    z = 2.0 + 0.5j
    phi, theta = wd.system.pair(z)
    assert rel_err(phi(XS), free_phi(z, XS)) < 1e-9
    assert rel_err(theta(XS), free_theta(z, XS)) < 1e-9
    assert wd.M(z) == pytest.approx(-1 / np.tan(z), rel=1e-9)


def test_constant_electrostatic_shift(radial_wd):
    # q_el = c shifts the spectral parameter: Phi(z) = Phi_free(z - c)
    k = 0.75
    wd = radial_weyl_data(pot=PotentialSpec.radial(k, q_el=1.5))
    z = 3.0 + 0.5j
    phi, theta = wd.system.pair(z)
    assert rel_err(phi(XS), bessel_phi(k, z - 1.5, XS)) < 1e-9
    assert rel_err(theta(XS), bessel_theta(k, z - 1.5, XS)) < 1e-9


def test_leading_behaviour_at_zero(radial_wd):
    for k in KAPPAS:
        assert check_frobenius_normalization(radial_wd(k), k, xs=(1e-10, 1e-9)) < 1e-7
        theta = radial_wd(k).system.theta(1.0 + 1.0j)
        x = np.array([1e-10])
        np.testing.assert_allclose(theta(x)[0, 0] * x[0] ** k, 1.0 / frobenius_A(k), rtol=1e-6)


def test_wronskian_normalisation(radial_wd):
    rs = radial_wd(0.75).system
    phi, theta = rs.pair(1.0)
    for x in (rs.x_eps0, 0.5, 1.0, 1e-6):
        assert complex(wronskian(theta, phi, x)) == pytest.approx(1.0, abs=1e-8)


def test_series_matches_integration(radial_wd):
    rs = radial_wd(0.75).system
    z = np.array([2.0 + 1.0j])
    xe = rs._x_eps_for(z)
    for which in ("phi", "theta"):
        series = rs.series(z, which)(np.array([2 * xe]))
        trace = (rs.phi if which == "phi" else rs.theta)(z)(np.array([2 * xe]))
        assert rel_err(trace, series) < 1e-8


def test_theta_integrability_profile(radial_wd):
    k = 0.75
    theta = radial_wd(k).system.theta(1.0)
    vals = [x ** (2 * k - 1) * float(l2_norm_sq(theta, x, 0.5)) for x in (1e-2, 1e-3, 1e-4)]
    assert all(v > 0 for v in vals)
    d1, d2 = abs(vals[1] - vals[0]), abs(vals[2] - vals[1])
    assert d2 < d1  # Cauchy: differences shrink
    # the limit is |Theta_1 x^k|^2 / (2k - 1) at x -> 0
    limit = (1.0 / frobenius_A(k)) ** 2 / (2 * k - 1)
    assert vals[-1] == pytest.approx(limit, rel=1e-2)


@pytest.mark.parametrize("kappa", KAPPAS)
def test_growth_band(radial_wd, kappa):
    ys = np.geomspace(10, 100, 12)
    phi = radial_wd(kappa).system.phi(1j * ys)
    for x in (0.5, 1.0):
        v = np.linalg.norm(phi(np.array([x]))[0], axis=-1) * ys**kappa * np.exp(-ys * x)
        assert v.max() / v.min() <= 3.0


def test_sector_asymptotics():
    # z^k Phi(z, x) ~ (sin t, cos t) with t = zx - k pi/2 - int_0^x q_el; the
    # correction is O(1/(zx)), so (zx) * deviation stays bounded
    k = 0.75
    wd = radial_weyl_data(pot=PotentialSpec.radial(k, q_el="1 + x"))
    zs = np.array([20.0, 40.0, 60.0, 80.0, 100.0])
    for x in (0.5, 1.0):
        v = wd.system.phi(zs)(np.array([x]))[0].real * zs[:, None] ** k
        amp = np.linalg.norm(v, axis=-1)
        phase = np.arctan2(v[:, 0], v[:, 1])
        pred = zs * x - k * np.pi / 2 - (x + x * x / 2)
        dev = np.abs(np.angle(np.exp(1j * (phase - pred))))
        assert np.all(np.abs(amp - 1) * zs * x <= 2.0)
        assert np.all(dev * zs * x <= 2.0)
        if x == 1.0:
            assert dev[-1] < 1e-2 and abs(amp[-1] - 1) < 1e-2


def test_rough_or_log_cases():
    for k in (0.5, 1.0, 1.5):
        with pytest.raises(LogCaseUnsupported):
            radial_weyl_data(k)
    with pytest.raises(OutOfRange):
        RadialSystem(PotentialSpec.free())


def test_frobenius_entry_points(radial_wd):
    rs = radial_wd(0.25).system
    assert frobenius_phi(rs, 1.0).label == "Phi"
    assert frobenius_theta(rs, 1.0).label == "Theta"


# ---------------------------------------------------------------------------
# kappa lowering
# ---------------------------------------------------------------------------


def test_lowering_kappa_13(ledger):
    res = ledger(1.3).results[0]
    assert res.kappa_before == 1.3
    assert res.kappa_after == pytest.approx(0.3)
    assert res.gauged
    assert res.fit_before == pytest.approx(-0.3, abs=1e-3)
    assert res.fit_after == pytest.approx(0.3, abs=1e-3)
    assert abs(res.fit_sigma3) < 1e-3
    assert res.normalization_error < 1e-6
    assert res.wd.pot.kappa == pytest.approx(0.3)


def test_lowering_kappa_075(ledger):
    res = ledger(0.75).results[0]
    assert res.kappa_after == pytest.approx(0.25)
    assert not res.gauged
    assert res.fit_before == pytest.approx(0.25, abs=1e-3)
    assert res.normalization_error is None


def test_lowering_preconditions(radial_wd):
    with pytest.raises(KappaTooSmall):
        kappa_lower_step(radial_wd(0.25), 1.0)
    with pytest.raises(NoAdmissibleLambda):
        default_chooser(window=(-0.5, 0.5))(0, radial_wd(0.75))


def test_inverse_x_fit_recovers_known_coefficient():
    pot = PotentialSpec.radial(0.75, q_am="0.2*x + 0.1*x^2")
    c, resid = fit_inverse_x_coefficient(pot, 0.75, "sigma1")
    assert c == pytest.approx(0.75, abs=1e-10) and resid < 1e-10


# ---------------------------------------------------------------------------
# iterated reduction
# ---------------------------------------------------------------------------


def test_step_count():
    assert reduction_step_count(0.3) == 0
    assert reduction_step_count(0.75) == 1
    assert reduction_step_count(1.3) == 1
    assert reduction_step_count(2.3) == 2
    with pytest.raises(LogCaseUnsupported):
        reduction_step_count(1.5)


def test_empty_ledger(radial_wd, ledger):
    L = ledger(0.3)
    assert L.steps == [] and L.terminal is radial_wd(0.3)
    zs = np.array([1j, 3 + 2j])
    np.testing.assert_allclose(assemble_M(L, zs), radial_wd(0.3).M(zs))
    rho = norming_weights(radial_wd(0.3), eigenvalues(radial_wd(0.3), -20, 20), cross_check=False)
    rep = measure_factorization_check(L, rho, 10, rho0=rho)
    np.testing.assert_allclose(rep.ratios, 1.0)


def test_chain_kappa_23(ledger):
    L = ledger(2.3)
    assert [s.kappa for s in L.steps] == pytest.approx([2.3, 1.3])
    assert L.terminal_kappa == pytest.approx(0.3)
    for r in L.results:
        assert r.fit_before == pytest.approx(1 - r.kappa_before, abs=1e-3)
        assert r.normalization_error < 1e-6


@pytest.mark.parametrize("kappa", [0.75, 1.3, 2.3])
def test_ledger_invariants(ledger, kappa):
    L = ledger(kappa)
    assert len(L.steps) == reduction_step_count(kappa)
    for s, c in zip(L.steps, L.c_recomputed()):
        assert abs(s.c - c) <= 1e-8 * max(1.0, abs(c))
    # P_n(z) = prod_{j<n} (z - lambda_j)
    z = 0.7 + 0.2j
    for n in range(len(L.steps) + 1):
        expected = np.prod([z - s.lam for s in L.steps[:n]])
        assert L.P_at(n, z) == pytest.approx(expected, rel=1e-14)
    doc = L.to_dict()
    assert doc["P"][0] == [1.0] and doc["terminal_kappa"] == pytest.approx(L.terminal_kappa)


@pytest.mark.parametrize("kappa", [0.75, 1.3, 2.3])
def test_terminal_herglotz(ledger, kappa):
    rng = np.random.default_rng(7)
    zs = rng.uniform(-20, 20, 20) + 1j * rng.uniform(0.1, 5, 20) * np.where(np.arange(20) % 2, 1, -1)
    ok, _ = herglotz_check(ledger(kappa).terminal, zs)
    assert ok


def test_assemble_one_step(radial_wd, ledger):
    L = ledger(1.3)
    s = L.steps[0]
    zs = np.array([1 + 1j, -3 + 0.5j, 7 + 2j])
    manual = (zs - s.lam) ** 2 * L.terminal.M(zs) - s.c * (s.lam - zs)
    np.testing.assert_allclose(assemble_M(L, zs), manual, rtol=1e-13)
    # our canonical systems make the representative coincide with M itself
    np.testing.assert_allclose(assemble_M(L, zs), radial_wd(1.3).M(zs), rtol=1e-8)


def test_factorization_kappa_23(radial_wd, ledger):
    wd = radial_wd(2.3)
    rho = norming_weights(wd, eigenvalues(wd, -30, 30), cross_check=False)
    rep = measure_factorization_check(ledger(2.3), rho, 10)
    assert rep.n_common >= 10
    assert rep.max_rel_dev < 1e-5
    assert len(rep.inserted) <= 2


def test_factorization_detects_mismatch(radial_wd, ledger):
    wd = radial_wd(1.3)
    rho = norming_weights(wd, eigenvalues(wd, -20, 20), cross_check=False)
    fake = SpectralMeasureDiscrete(rho.lambdas + 0.01, rho.weights)
    with pytest.raises(AtomMismatch):
        measure_factorization_check(ledger(1.3), fake, 5, window=(-21, 21))


# ---------------------------------------------------------------------------
# moment diagnostic
# ---------------------------------------------------------------------------


def test_nevanlinna_unit_weights():
    n = np.arange(-40, 41)
    rep = nevanlinna_index(SpectralMeasureDiscrete(np.pi * n, np.ones_like(n, dtype=float)), 0.0)
    assert rep.status == "ok" and rep.index == 0 and rep.agrees


def test_nevanlinna_quadratic_weights():
    lam = np.pi * (np.arange(-40, 41) + 0.5)
    rep = nevanlinna_index(SpectralMeasureDiscrete(lam, lam**2), 1.3)
    assert rep.status == "ok" and rep.index == 1 and rep.agrees


def test_nevanlinna_inconclusive():
    empty = SpectralMeasureDiscrete(np.array([]), np.array([]))
    rep = nevanlinna_index(empty, 0.3)
    assert rep.status == "inconclusive" and rep.index is None and not rep.agrees
    # weights ~ t^-1 on a linear lattice sit exactly on the k = 0 border
    lam = np.arange(1, 60, dtype=float)
    rep = nevanlinna_index(SpectralMeasureDiscrete(lam, lam), 0.3)
    assert rep.status == "inconclusive"
