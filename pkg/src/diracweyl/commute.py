"""Double commutation of Dirac operators.

Given a real solution ``u_-(lambda, .)`` (left side) or ``u_+(lambda, .)``
(right side) and a coupling ``gamma`` the commuted operator is
``tau_gamma = tau + Q_gamma`` with

    Q_gamma = (r1^2 - r2^2)/c sigma_1 - 2 r1 r2 / c sigma_3,

where ``r`` is the reference solution and

    c(x) =  1/gamma + int_a^x r^T r     (left),
    c(x) = -1/gamma - int_x^b r^T r     (right).

Solutions transform as ``v = u + r/c * W_x(r, u) / (z - lambda)``.  The
Weyl-function maps for the three constructions are

    left, finite gamma:   M_gamma = M - gamma/(z - lambda)
    left, gamma = inf:    M_inf   = (z - lambda)^2 M
    right from Theta:     M_gamma = [M + W_b(Theta, dTheta)(z - lambda)]/(z - lambda)^2
                                    - (1/gamma)/(z - lambda)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import (
    InvalidGamma,
    LambdaNotAdmissible,
    LambdaNotEigenvalue,
    OutOfRange,
    ThetaSquareIntegrable,
    UnclassifiableCase,
    ZEqualsLambda,
)
from .ode import DEFAULT_TOL, FormulaTrace, Potential, apply_scale, integrate, l2_norm_sq, z_derivative
from .quadrature import PanelIntegral
from .weyl import FundamentalSystem, RegularSystem, WeylData, scan_zeros, default_scan_step

SIDES = ("left_from_phi", "right_from_theta")
EIGEN_TOL = 1e-8
INWARD_MATCH = 0.05


def _inv(gamma):
    return 0.0 if np.isinf(gamma) else 1.0 / gamma


def _wedge(u, v):
    return u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]


def _full(scaled):
    v, e = scaled
    return apply_scale(v, np.asarray(e)[..., None])


def parse_gamma(value):
    """Parse a coupling constant; accepts numbers and the strings ``inf``/``+inf``."""
    if isinstance(value, str):
        s = value.strip().lower()
        if s in ("inf", "+inf", "infinity", "+infinity"):
            return np.inf
        try:
            value = float(s)
        except ValueError:
            raise InvalidGamma(f"cannot parse gamma {value!r}")
    value = float(value)
    if np.isnan(value) or value == -np.inf:
        raise InvalidGamma(f"invalid gamma {value!r}")
    return value


# ---------------------------------------------------------------------------
# parameters and c_gamma
# ---------------------------------------------------------------------------


@dataclass
class CommutationParams:
    """``(lambda, gamma, side)`` and the real reference solution at ``lambda``."""

    lam: float
    gamma: float
    side: str = "left_from_phi"
    reference: object = None

    def __post_init__(self):
        self.lam = float(self.lam)
        self.gamma = parse_gamma(self.gamma)
        if self.side not in SIDES:
            raise OutOfRange(f"side must be one of {SIDES}")

    @property
    def gamma_inv(self):
        return _inv(self.gamma)

    def reference_norm_sq(self):
        """``||r||^2`` over the whole interval (``inf`` when not square integrable)."""
        ref = self.reference
        try:
            val = float(l2_norm_sq(ref, ref.lo, ref.hi))
        except OutOfRange:
            return np.inf
        return val if np.isfinite(val) else np.inf


class CGammaTrace:
    """``c_gamma(lambda, x)`` built with the same panel quadrature as norms."""

    def __init__(self, params):
        self.params = params
        ref = params.reference
        self.ref = ref
        self.start = ref.breaks[0]
        self.b = ref.hi
        self._F = PanelIntegral(lambda x: np.sum(ref(x) ** 2, axis=-1), ref.breaks)
        gi = params.gamma_inv
        if params.side == "left_from_phi":
            head = 0.0
            if ref.lo < self.start:
                head = float(ref.head_product_integral(ref, ref.lo, self.start))
            self._const = gi + head
            self.sign = 1.0
        else:
            self._const = -gi
            self.sign = -1.0
        self._check()

    def _check(self):
        vals = self.values
        if self.params.side == "left_from_phi":
            # zero-free inside; a zero is allowed only at an end point
            # (gamma = inf at a, gamma = -1/||Phi||^2 at b)
            inner = vals[1:-1]
            if not (np.all(inner > 0) or np.all(inner < 0)):
                raise InvalidGamma("c_gamma changes sign inside the interval; gamma below -1/||Phi(lambda)||^2")
            scale = max(1.0, float(np.max(np.abs(vals))))
            if np.sign(vals[0]) * np.sign(vals[-1]) < 0 and min(abs(vals[0]), abs(vals[-1])) > 1e-10 * scale:
                raise InvalidGamma("gamma below -1/||Phi(lambda)||^2")
        else:
            if np.any(vals[:-1] >= 0):
                raise InvalidGamma("right c_gamma must be negative")

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        right = self.sign < 0
        main = (lambda xs: -self._F.from_right(xs)) if right else self._F
        head_base = self._const - float(self._F.total) if right else self._const
        if np.ndim(x) == 0:
            if x >= self.start:
                return self._const + float(main(x))
            return head_base - float(self.ref.head_product_integral(self.ref, float(x), self.start))
        out = np.empty(x.shape)
        hi = x >= self.start
        out[hi] = self._const + main(x[hi])
        if np.any(~hi):
            out[~hi] = head_base - self._head(x[~hi])
        return out

    def _head(self, xs):
        """``int_x^start r^T r`` for points below the first panel."""
        try:
            return np.asarray(self.ref.head_product_integral(self.ref, xs, self.start), dtype=float)
        except (TypeError, ValueError):
            return np.array([float(self.ref.head_product_integral(self.ref, float(v), self.start)) for v in xs])

    @property
    def grid(self):
        return self.ref.breaks

    @property
    def values(self):
        return self(self.grid)

    def derivative(self, x):
        return np.sum(self.ref(x) ** 2, axis=-1)

    @property
    def at_b(self):
        if self.sign < 0:
            return self._const
        return self._const + float(self._F.total)


# ---------------------------------------------------------------------------
# potentials
# ---------------------------------------------------------------------------


class CommutedPotential(Potential):
    """``Q + Q_gamma`` for a reference solution ``r`` and ``c_gamma``."""

    def __init__(self, base, params, cg, kappa=None):
        self.base = base
        self.params = params
        self.cg = cg
        self.ref = params.reference
        self.a = base.a
        self.b = base.b
        self.endpoint_a_kind = base.endpoint_a_kind
        self.kappa = base.kappa if kappa is None else kappa

    @property
    def has_magnetic(self):
        return self.base.has_magnetic

    def magnetic(self, x):
        return self.base.magnetic(x)

    def knots(self):
        return self.base.knots()

    def correction(self, x):
        """``(s1, s3)``: sigma_1 and sigma_3 components of ``Q_gamma``."""
        if self.params.gamma == 0.0:
            z = np.zeros(np.shape(x))
            return (0.0, 0.0) if np.ndim(x) == 0 else (z, z)
        r = self.ref(x)
        c = self.cg(x)
        r1, r2 = r[..., 0], r[..., 1]
        return (r1 * r1 - r2 * r2) / c, -2.0 * r1 * r2 / c

    def coefficients(self, x):
        p0, p1, p3 = self.base.coefficients(x)
        s1, s3 = self.correction(x)
        return p0, p1 + s1, p3 + s3

    def gamma_matrix(self, x):
        s1, s3 = self.correction(x)
        return np.array([[s3, s1], [s1, -s3]])


class Sigma2GaugedPotential(Potential):
    """``sigma_2 H sigma_2``: flips the sigma_1 and sigma_3 parts, keeps the rest."""

    def __init__(self, base):
        self.base = base
        self.a = base.a
        self.b = base.b
        self.endpoint_a_kind = base.endpoint_a_kind
        self.kappa = -base.kappa

    @property
    def has_magnetic(self):
        return self.base.has_magnetic

    def magnetic(self, x):
        return self.base.magnetic(x)

    def knots(self):
        return self.base.knots()

    def coefficients(self, x):
        p0, p1, p3 = self.base.coefficients(x)
        return p0, -p1, -p3


def commuted_potential(pot, params, cg=None):
    """``Q + Q_gamma`` as a potential object (``gamma = 0`` gives ``Q``)."""
    if params.gamma == 0.0:
        return pot
    cg = CGammaTrace(params) if cg is None else cg
    return CommutedPotential(pot, params, cg)


def sigma2_gauge_vector(u):
    """``i sigma_2 u = (u2, -u1)``; preserves Wronskians."""
    u = np.asarray(u)
    return np.stack([u[..., 1], -u[..., 0]], axis=-1)


# ---------------------------------------------------------------------------
# transformed solutions
# ---------------------------------------------------------------------------


def transform_solution(u, params, cg):
    """``v = u + (r/c) W_x(r, u) / (z - lambda)`` solving the commuted equation."""
    z = np.asarray(u.z)
    if np.any(z == params.lam):
        raise ZEqualsLambda("z = lambda needs the limiting form of the Weyl-function map")
    ref = params.reference
    dz = (z - params.lam)[..., None]

    def fn(xf):
        r = ref(xf)
        uu = u(xf)
        rt = r / cg(xf)[:, None]
        w = _wedge(r[:, None, :] if uu.ndim == 3 else r, uu)
        rt = rt[:, None, :] if uu.ndim == 3 else rt
        return uu + rt * (w[..., None] / dz)

    return FormulaTrace(fn, [u, ref], z, label="Derived")


def wronskian_identity_residual(u, uhat, params, cg, x):
    """Residual of the Wronskian identity for transformed solutions at ``x``.

    ``W(v, vhat) - [W(u, uhat) - (1/c) (z - zh)/((z - lam)(zh - lam)) W(r, u) W(r, uhat)]``
    """
    v = transform_solution(u, params, cg)
    vh = transform_solution(uhat, params, cg)
    z, zh, lam = complex(u.z), complex(uhat.z), params.lam
    r = params.reference(x)
    uu, uh = u(x), uhat(x)
    lhs = _wedge(v(x), vh(x))
    rhs = _wedge(uu, uh) - (1.0 / cg(x)) * (z - zh) / ((z - lam) * (zh - lam)) * _wedge(r, uu) * _wedge(r, uh)
    return complex(lhs - rhs), complex(lhs)


# ---------------------------------------------------------------------------
# fundamental systems of commuted operators
# ---------------------------------------------------------------------------


def _dot_pair(system, lam, which=("phi", "theta")):
    out = []
    for w in which:
        fn = system.phi if w == "phi" else system.theta
        out.append(z_derivative(fn, lam))
    return out


class _CommutedSystemBase(FundamentalSystem):
    normalization_tag = "commuted"

    def __init__(self, base, pot_gamma, params, cg):
        super().__init__(pot_gamma, base.tol)
        self.base = base
        self.params = params
        self.cg = cg
        self.ref = params.reference

    @property
    def lo(self):
        return self.base.lo

    @property
    def hi(self):
        return self.base.hi

    @property
    def x_mid(self):
        return self.base.x_mid

    # formulas on point values --------------------------------------------
    def _formulas(self, z, r, c, P, T):  # pragma: no cover - interface
        raise NotImplementedError

    def _limits(self, x):  # pragma: no cover - interface
        raise NotImplementedError

    def pair_at(self, z, x):
        z = np.asarray(z)
        (Ps, Ts) = self.base.pair_at(z, x)
        P, T = _full(Ps), _full(Ts)
        r = self.ref(x)
        c = self.cg(x)
        mask = z == self.params.lam
        zz = np.where(mask, self.params.lam + 1.0, z)
        Pg, Tg = self._formulas(zz, r, c, P, T)
        if np.any(mask):
            lp, lt = self._limits(np.array([x]))
            Pg = np.where(mask[..., None], lp[0], Pg)
            Tg = np.where(mask[..., None], lt[0], Tg)
        zero = np.zeros(z.shape, dtype=np.int64)
        return (Pg, zero), (Tg, zero)

    def phi_at(self, z, x):
        z = np.asarray(z)
        P = _full(self.base.phi_at(z, x))
        r = self.ref(x)
        c = self.cg(x)
        mask = z == self.params.lam
        zz = np.where(mask, self.params.lam + 1.0, z)
        Pg = self._phi_formula(zz, r, c, P)
        if np.any(mask):
            lp = self._phi_limit(np.array([x]))
            Pg = np.where(mask[..., None], lp[0], Pg)
        return Pg, np.zeros(z.shape, dtype=np.int64)

    def theta_at(self, z, x):
        return self.pair_at(z, x)[1]

    def pair(self, z):
        z = np.asarray(z)
        p, t = self.base.pair(z)
        ref, cg = self.ref, self.cg
        mask = z == self.params.lam
        zz = np.where(mask, self.params.lam + 1.0, z)
        lims = {}

        def limits(xf):
            if "v" not in lims or len(lims["x"]) != len(xf) or np.any(lims["x"] != xf):
                lims["x"] = xf.copy()
                lims["v"] = self._limits(xf)
            return lims["v"]

        def expand(a, P):
            return a[:, None, :] if P.ndim == 3 else a

        def phi_fn(xf):
            P = p(xf)
            r, c = ref(xf), cg(xf)
            out = self._phi_formula(zz, expand(r, P), c[:, None] if P.ndim == 3 else c, P)
            if np.any(mask):
                out = np.where(mask[..., None], expand(self._phi_limit(xf), P), out)
            return out

        def theta_fn(xf):
            P, T = p(xf), t(xf)
            r, c = ref(xf), cg(xf)
            _, out = self._formulas(zz, expand(r, P), c[:, None] if P.ndim == 3 else c, P, T)
            if np.any(mask):
                out = np.where(mask[..., None], expand(limits(xf)[1], P), out)
            return out

        parts = [p, t, ref]
        return (
            FormulaTrace(phi_fn, parts, z, label="Phi"),
            FormulaTrace(theta_fn, parts, z, label="Theta"),
        )

    def _phi_formula(self, z, r, c, P):
        return self._formulas(z, r, c, P, P)[0]

    def _phi_limit(self, x):
        return self._limits(x)[0]


class LeftFiniteSystem(_CommutedSystemBase):
    """Entire system after commutation from ``Phi(lambda)`` with finite ``gamma``."""

    def _formulas(self, z, r, c, P, T):
        lam, g = self.params.lam, self.params.gamma
        dz = (z - lam)[..., None]
        rt = r / (np.asarray(c)[..., None] if np.ndim(c) else c)
        Pg = P + rt * (_wedge(r, P)[..., None] / dz)
        Tg = T + (rt * _wedge(r, T)[..., None] + g * Pg) / dz
        return Pg, Tg

    def _limits(self, x):
        g = self.params.gamma
        r = self.ref(x)
        c = self.cg(x)
        rt = r / c[:, None]
        phi_l = rt / g
        if not hasattr(self, "_dots"):
            self._dots = _dot_pair(self.base, self.params.lam)
            pd = self._dots[0]
            self._int_dot = PanelIntegral(lambda y: np.sum(self.ref(y) * pd(y), axis=-1), self.ref.breaks)
        pd, td = self._dots
        lo = self.ref.lo
        phi_dot_g = pd(x) - rt * (self._int_dot(x) - self._int_dot(np.array([lo]))[0])[:, None]
        if not hasattr(self, "_theta_lam"):
            self._theta_lam = self.base.theta(self.params.lam)
        theta_l = self._theta_lam(x) + rt * _wedge(r, td(x))[:, None] + g * phi_dot_g
        return phi_l, theta_l


class LeftInfiniteSystem(_CommutedSystemBase):
    """Entire system after commutation from ``Phi(lambda)`` with ``gamma = inf``."""

    def _formulas(self, z, r, c, P, T):
        lam = self.params.lam
        dz = (z - lam)[..., None]
        rt = r / (np.asarray(c)[..., None] if np.ndim(c) else c)
        Pg = (P + rt * (_wedge(r, P)[..., None] / dz)) / dz
        Tg = dz * T + rt * _wedge(r, T)[..., None]
        return Pg, Tg

    def _limits(self, x):
        r = self.ref(x)
        c = self.cg(x)
        rt = r / c[:, None]
        if not hasattr(self, "_dots"):
            self._dots = _dot_pair(self.base, self.params.lam, ("phi",))
            pd = self._dots[0]
            self._int_dot = PanelIntegral(lambda y: np.sum(self.ref(y) * pd(y), axis=-1), self.ref.breaks)
        pd = self._dots[0]
        lo = self.ref.lo
        phi_l = pd(x) - rt * (self._int_dot(x) - self._int_dot(np.array([lo]))[0])[:, None]
        return phi_l, -rt


class RightThetaSystem(_CommutedSystemBase):
    """Entire system after commutation from ``Theta(lambda)`` at the right endpoint."""

    def __init__(self, base, pot_gamma, params, cg, wb_dot):
        super().__init__(base, pot_gamma, params, cg)
        self.wb_dot = wb_dot
        self.k = params.gamma_inv - wb_dot

    def _formulas(self, z, r, c, P, T):
        lam = self.params.lam
        dz = (z - lam)[..., None]
        rt = r / (np.asarray(c)[..., None] if np.ndim(c) else c)
        Pg = dz * P + rt * _wedge(r, P)[..., None]
        Tg = (T + rt * (_wedge(r, T)[..., None] / dz) + self.k * Pg) / dz
        return Pg, Tg

    def _phi_limit(self, x):
        return self.ref(x) / self.cg(x)[:, None]

    def _limits(self, x):
        raise ZEqualsLambda("Theta_gamma(lambda) has no closed limit formula; evaluate away from lambda")

    def pair_at(self, z, x):
        if np.any(np.asarray(z) == self.params.lam):
            raise ZEqualsLambda("Theta_gamma is evaluated off z = lambda")
        return super().pair_at(z, x)

    def pair(self, z):
        """Formula traces; below ``INWARD_MATCH * b`` ``Theta_gamma`` is integrated inward.

        Near the singular endpoint the formula for ``Theta_gamma`` subtracts
        terms of order ``x^-kappa`` to leave one of order ``x^(kappa-1)``,
        losing digits as ``x -> 0``.  ``Theta_gamma`` is the dominant
        solution towards 0, so integrating the commuted equation inward from
        a matching point is stable and keeps full relative accuracy.
        """
        z = np.asarray(z)
        if np.any(z == self.params.lam):
            raise ZEqualsLambda("Theta_gamma is evaluated off z = lambda")
        phi, theta = super().pair(z)
        x_c = INWARD_MATCH * self.hi
        x_min = theta.breaks[0]
        if not self.pot.singular or x_c <= x_min:
            return phi, theta
        zf = np.atleast_1d(z).ravel()
        u0 = np.asarray(theta(np.array([x_c]))[0]).reshape(zf.shape + (2,))
        inner = integrate(self.pot, zf, x_c, u0, x_min, self.tol)
        zshape = z.shape

        def fn(xf):
            out = np.asarray(theta(xf)).copy()
            low = xf < x_c
            if np.any(low):
                out[low] = np.asarray(inner(xf[low])).reshape((np.count_nonzero(low),) + zshape + (2,))
            return out

        return phi, FormulaTrace(fn, [theta], z, label="Theta", extra_breaks=inner.breaks)


class Sigma2GaugedSystem(FundamentalSystem):
    """Solutions ``i sigma_2 u`` of the sigma_2-gauged operator."""

    def __init__(self, base, pot):
        super().__init__(pot, base.tol)
        self.base = base
        self.normalization_tag = base.normalization_tag

    @property
    def lo(self):
        return self.base.lo

    @property
    def hi(self):
        return self.base.hi

    @property
    def x_mid(self):
        return self.base.x_mid

    def pair(self, z):
        p, t = self.base.pair(z)
        return (
            FormulaTrace(lambda xf: sigma2_gauge_vector(p(xf)), [p], np.asarray(z), label="Phi"),
            FormulaTrace(lambda xf: sigma2_gauge_vector(t(xf)), [t], np.asarray(z), label="Theta"),
        )

    def pair_at(self, z, x):
        (P, eP), (T, eT) = self.base.pair_at(z, x)
        return (sigma2_gauge_vector(P), eP), (sigma2_gauge_vector(T), eT)

    def phi_at(self, z, x):
        P, e = self.base.phi_at(z, x)
        return sigma2_gauge_vector(P), e

    def theta_at(self, z, x):
        T, e = self.base.theta_at(z, x)
        return sigma2_gauge_vector(T), e


# ---------------------------------------------------------------------------
# commuted operators
# ---------------------------------------------------------------------------


@dataclass
class CommutedOperator:
    """Result of one commutation step.

    Attributes
    ----------
    record : CommutationParams
    kind : str
        ``'left_finite'``, ``'left_infinite'`` or ``'right'``.
    pot_gamma : Potential
    system : FundamentalSystem
        The entire fundamental system given by the transformation formulas.
    base_wd : WeylData
        Weyl data of the original operator.
    cg : CGammaTrace
    weyl_map : callable
        ``weyl_map(M, z)`` returns the commuted Weyl function from ``M(z)``.
    wb_dot : float, optional
        ``W_b(Theta(lambda), dTheta/dz(lambda))`` (right commutation).
    """

    record: CommutationParams
    kind: str
    pot_gamma: object
    system: FundamentalSystem
    base_wd: WeylData
    cg: Optional[CGammaTrace]
    weyl_map: Callable
    wb_dot: Optional[float] = None
    bc_at_b: np.ndarray = None
    uplus_fn: Optional[Callable] = None

    def __post_init__(self):
        if self.bc_at_b is None:
            self.bc_at_b = self.base_wd.bc_at_b

    def M_formula(self, z):
        """Commuted Weyl function from the original one via the transformation map."""
        return self.weyl_map(self.base_wd.M(z, check_pole=False), np.asarray(z))

    def weyl_data(self):
        """Weyl data with the transformed fundamental system."""
        return WeylData(self.system, self.bc_at_b, self.uplus_fn, self.base_wd.x_eval, self.base_wd.tol)

    def direct_weyl_data(self):
        """Weyl data computed from scratch on the commuted potential where possible.

        For a left commutation with finite ``gamma`` at a regular endpoint the
        canonical system of ``pot_gamma`` is integrated directly (it agrees
        with the transformed system because ``c_gamma(a) = 1/gamma``).  In the
        other cases the entire system is only available through the
        transformation formulas, while ``u_{gamma,+}`` is still integrated
        on the commuted potential.
        """
        if self.kind == "left_finite" and not self.pot_gamma.singular and self.record.gamma != 0.0:
            system = RegularSystem(self.pot_gamma, self.base_wd.tol)
        else:
            system = self.system
        return WeylData(system, self.bc_at_b, self.uplus_fn, self.base_wd.x_eval, self.base_wd.tol)

    def c_gamma_at_b(self):
        return None if self.cg is None else self.cg.at_b

    @property
    def commutation_residue(self):
        """Residue of the commuted Weyl function at ``lambda`` predicted by the map."""
        if self.kind == "left_finite":
            return -self.record.gamma
        if self.kind == "right":
            return -self.record.gamma_inv
        return 0.0


def _check_eigen(wd, lam):
    g = abs(float(np.real(wd.char_scaled(np.array([lam]), wd.pot.b if wd.uplus_fn is None else None)[0])))
    if g > EIGEN_TOL:
        raise LambdaNotEigenvalue(f"lambda={lam!r} is not an eigenvalue (|W|/norms = {g:.2e}) but Phi(lambda) is square integrable")


def _transformed_uplus(wd, params, cg, divide=False):
    """``u_{gamma,+} = u_+ + (r/c) W(r, u_+)/(z - lambda)`` from the original ``u_+``.

    With ``divide`` the result is divided by ``z - lambda``: when ``gamma``
    sits at the lower bound this solution vanishes identically at
    ``z = lambda`` and the quotient is the non-trivial Weyl solution.
    """

    def fn(z, x_stop):
        v = transform_solution(wd.uplus(z, x_stop), params, cg)
        if not divide:
            return v
        dz = np.asarray(v.z - params.lam)[..., None]
        return FormulaTrace(lambda xf: v(xf) / dz, [v], v.z, label="UPlus")

    return fn


def commute_left_phi(wd, lam, gamma, check=True):
    """Commute with ``u_-(lambda) = Phi(lambda)`` and finite ``gamma``.

    ``gamma`` must lie in ``[-1/||Phi(lambda)||^2, inf)``; since ``Phi`` is
    square integrable near the regular endpoint, ``lambda`` must be an
    eigenvalue.
    """
    gamma = parse_gamma(gamma)
    if np.isinf(gamma):
        raise InvalidGamma("use commute_left_phi_infinite for gamma = inf")
    if check:
        _check_eigen(wd, lam)
    ref = wd.system.phi(float(lam))
    params = CommutationParams(lam, gamma, "left_from_phi", ref)
    if gamma == 0.0:
        return CommutedOperator(params, "left_finite", wd.pot, wd.system, wd, None, lambda M, z: M)
    cg = CGammaTrace(params)
    pot_g = CommutedPotential(wd.pot, params, cg)
    system = LeftFiniteSystem(wd.system, pot_g, params, cg)
    norm_sq = cg.at_b - params.gamma_inv
    uplus_fn = None
    if abs(cg.at_b) <= 1e-8 * norm_sq:
        # gamma at the lower bound: c vanishes at b and the commuted potential
        # is singular there; u_{gamma,+} comes from the transformation formula.
        uplus_fn = _transformed_uplus(wd, params, cg, divide=True)
    return CommutedOperator(
        params, "left_finite", pot_g, system, wd, cg,
        lambda M, z, g=gamma, l=float(lam): M - g / (z - l), uplus_fn=uplus_fn,
    )


def commute_left_phi_infinite(wd, lam, check=True):
    """Commute with ``u_-(lambda) = Phi(lambda)`` and ``gamma = inf``."""
    if check:
        _check_eigen(wd, lam)
    ref = wd.system.phi(float(lam))
    params = CommutationParams(lam, np.inf, "left_from_phi", ref)
    cg = CGammaTrace(params)
    pot_g = CommutedPotential(wd.pot, params, cg)
    pot_g.endpoint_a_kind = "singular_radial"
    system = LeftInfiniteSystem(wd.system, pot_g, params, cg)
    return CommutedOperator(
        params, "left_infinite", pot_g, system, wd, cg, lambda M, z, l=float(lam): (z - l) ** 2 * M
    )


def theta_wb_dot(wd, lam):
    """``W_b(Theta(lambda), dTheta/dz(lambda))`` by a complex-step derivative at ``b``."""
    b = wd.pot.b
    T = _full(wd.system.theta_at(np.array([float(lam)]), b))[0]
    h = 1e-20 * max(1.0, abs(lam))
    Tc = _full(wd.system.theta_at(np.array([float(lam) + 1j * h]), b))[0]
    Td = np.imag(Tc) / h
    return float(_wedge(T, Td))


def commute_right_theta(wd, lam, gamma, check=True):
    """Commute with ``u_+(lambda) = Theta(lambda)`` from the right endpoint.

    Requires ``M(lambda) = 0`` (so ``Theta(lambda)`` satisfies the boundary
    condition at ``b``) and ``Theta(lambda)`` not square integrable near
    ``a``; ``gamma`` in ``(0, inf]``.
    """
    gamma = parse_gamma(gamma)
    if not gamma > 0:
        raise InvalidGamma("right commutation needs gamma in (0, inf]")
    pot = wd.pot
    if not pot.singular or pot.kappa <= 0.5:
        raise ThetaSquareIntegrable("Theta(lambda) is square integrable near a (regular endpoint or kappa <= 1/2)")
    lam = float(lam)
    if check:
        m0 = abs(float(np.real(wd.numerator_scaled(np.array([lam]), wd.pot.b)[0])))
        if m0 > EIGEN_TOL:
            raise LambdaNotAdmissible(f"M({lam!r}) != 0 (scaled |W(Theta,u+)| = {m0:.2e})")
    ref = wd.system.theta(lam)
    params = CommutationParams(lam, gamma, "right_from_theta", ref)
    cg = CGammaTrace(params)
    wb_dot = theta_wb_dot(wd, lam)
    pot_g = CommutedPotential(pot, params, cg, kappa=1.0 - pot.kappa)
    system = RightThetaSystem(wd.system, pot_g, params, cg, wb_dot)
    gi = params.gamma_inv

    def weyl_map(M, z, l=lam, w=wb_dot, gi=gi):
        return (M + w * (z - l)) / (z - l) ** 2 - gi / (z - l)

    return CommutedOperator(params, "right", pot_g, system, wd, cg, weyl_map, wb_dot=wb_dot)


def commute_right_phi(wd, lam, gamma):
    """Right commutation when ``u_+(lambda) = Phi(lambda)`` (``lambda`` an eigenvalue).

    Coincides with :func:`commute_left_phi` after ``1/gamma -> 1/gamma + ||Phi(lambda)||^2``.
    """
    gamma = parse_gamma(gamma)
    _check_eigen(wd, lam)
    norm_sq = float(l2_norm_sq(wd.system.phi(float(lam)), wd.system.lo, wd.pot.b))
    gi = _inv(gamma) + norm_sq
    return commute_left_phi(wd, lam, np.inf if gi == 0 else 1.0 / gi, check=False)


def sigma2_gauge(op_or_wd):
    """Apply the sigma_2 gauge to a commuted operator's Weyl data.

    The potential's sigma_1 and sigma_3 parts change sign, solutions map to
    ``i sigma_2 u`` and the boundary vector at ``b`` to ``i sigma_2 beta``;
    the Weyl function is unchanged.
    """
    wd = op_or_wd.direct_weyl_data() if isinstance(op_or_wd, CommutedOperator) else op_or_wd
    pot = Sigma2GaugedPotential(wd.pot)
    system = Sigma2GaugedSystem(wd.system, pot)
    beta = sigma2_gauge_vector(wd.bc_at_b)
    uplus_fn = None
    if wd.uplus_fn is not None:
        f = wd.uplus_fn

        def uplus_fn(z, x_stop):
            u = f(z, x_stop)
            return FormulaTrace(lambda xf: sigma2_gauge_vector(u(xf)), [u], u.z, label="UPlus")

    return WeylData(system, beta, uplus_fn, wd.x_eval, wd.tol)


# ---------------------------------------------------------------------------
# spectrum bookkeeping and admissible lambdas
# ---------------------------------------------------------------------------


def classify(params, norm_sq=None, rel=1e-8):
    """Return ``(in_h, gamma_case)`` for the spectral bookkeeping.

    ``gamma_case`` is one of ``'zero'``, ``'positive'``, ``'infinite'``,
    ``'interior'``, ``'lower'`` or ``'invalid'``.
    """
    g = params.gamma
    if norm_sq is None:
        norm_sq = params.reference_norm_sq() if params.reference is not None else None
    if norm_sq is None:
        raise UnclassifiableCase("cannot decide whether the reference solution is square integrable")
    in_h = np.isfinite(norm_sq)
    if g == 0.0:
        return in_h, "zero"
    if np.isinf(g):
        return in_h, "infinite"
    if not in_h:
        return in_h, "positive" if g > 0 else "invalid"
    lower = -1.0 / norm_sq
    if abs(g - lower) <= rel * abs(lower):
        return in_h, "lower"
    if g > lower:
        return in_h, "interior"
    return in_h, "invalid"


def spectral_bookkeeping(eigs_before, params, norm_sq=None):
    """Predicted spectrum of the commuted operator.

    * reference not square integrable, ``gamma > 0``: ``lambda`` is inserted;
    * reference not square integrable, ``gamma = inf``: unchanged;
    * reference square integrable, ``gamma`` interior: unchanged;
    * reference square integrable, ``gamma`` at the lower bound or ``inf``:
      ``lambda`` is removed.
    """
    in_h, case = classify(params, norm_sq)
    lam = params.lam
    eigs = sorted(float(e) for e in eigs_before)
    if case == "zero":
        return eigs
    if case == "invalid":
        raise UnclassifiableCase(f"gamma={params.gamma!r} outside the admissible range")
    if not in_h:
        if case == "positive":
            return sorted(eigs + [lam])
        return eigs
    if not any(abs(e - lam) <= 1e-8 * max(1.0, abs(lam)) for e in eigs):
        raise UnclassifiableCase("square-integrable reference requires lambda to be an eigenvalue")
    if case == "interior":
        return eigs
    return [e for e in eigs if abs(e - lam) > 1e-8 * max(1.0, abs(lam))]


def admissible_lambda_right(wd, lo, hi, step=None):
    """Real zeros of ``M`` in ``[lo, hi]`` (zeros of ``W(Theta, u_+)``)."""
    step = default_scan_step(wd.pot) if step is None else step
    x = wd.pot.b if wd.uplus_fn is None else None
    roots, _, _ = scan_zeros(lambda lam: np.real(wd.numerator_scaled(lam, x)), lo, hi, step)
    return [float(r) for r in roots]
