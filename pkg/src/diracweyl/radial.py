"""Radial Dirac operators with a ``kappa/x sigma_1`` singularity at ``x = 0``.

Near zero the solutions are Frobenius series

    u(z, x) = x^s sum_n c_n(z) x^n,
    (n + s + kappa sigma_3) c_n = J (z c_{n-1} - sum_k Q_k c_{n-1-k}),

with ``Q_k`` the Taylor matrices of the regular part of the potential.
The regular solution takes ``s = kappa``, ``c_0 = (0, A)`` with
``A = sqrt(pi) / (2^kappa Gamma(kappa + 1/2))``; the singular one
``s = -kappa``, ``c_0 = (1/A, 0)`` so that ``W(Theta, Phi) = 1``.  The
series is used on ``(0, x_eps]`` and handed to the integrator there.

For ``kappa > 1/2`` commutation from ``Theta(lambda)`` at a zero of ``M``
lowers the angular momentum to ``|1 - kappa|``; iterating gives the
representation

    M(z) = P_N(z)^2 M_0(z) - sum_n c_n P_n(z)^2 (lambda_n - z),
    P_n(z) = prod_{j<n} (z - lambda_j),   N = floor(kappa + 1/2),

and the measure factorisation ``d rho = P_N^2 d rho_0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from numpy.polynomial import Chebyshev, Polynomial
from numpy.polynomial import polynomial as P

from .commute import (
    CommutedOperator,
    commute_right_theta,
    sigma2_gauge,
    admissible_lambda_right,
)
from .errors import (
    AtomMismatch,
    KappaTooSmall,
    LambdaNotAdmissible,
    LogCaseUnsupported,
    NoAdmissibleLambda,
    OutOfRange,
    SeriesDivergence,
)
from .ode import DEFAULT_TOL, IntegratedTrace, PotentialSpec, SolutionTrace, integrate, l2_norm_sq
from .weyl import (
    FundamentalSystem,
    SpectralMeasureDiscrete,
    WeylData,
    default_scan_step,
    eigenvalues,
    norming_weights,
)

HEAD_OCTAVES = 40
DEFAULT_X_EPS = 0.25
SERIES_ZX_MAX = 4.0


def frobenius_constant(kappa):
    """``sqrt(pi) / (2^kappa Gamma(kappa + 1/2))``."""
    return math.sqrt(math.pi) / (2.0**kappa * math.gamma(kappa + 0.5))


def _is_log_case(kappa):
    two = 2.0 * kappa
    return kappa > 0 and abs(two - round(two)) < 1e-12


# ---------------------------------------------------------------------------
# Frobenius series traces
# ---------------------------------------------------------------------------


class SeriesBlock:
    """``x^s sum_n C[n] x^n`` for a batch of spectral parameters."""

    def __init__(self, s, C):
        self.s = float(s)
        self.C = C  # (N+1,) + zshape + (2,)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        C = self.C
        xx = x.reshape(x.shape + (1,) * (C.ndim - 1))
        acc = np.zeros(x.shape + C.shape[1:], dtype=C.dtype)
        for n in range(len(C) - 1, -1, -1):
            acc = acc * xx + C[n]
        return acc * xx**self.s

    def derivative(self, x):
        x = np.asarray(x, dtype=float)
        C = self.C
        xx = x.reshape(x.shape + (1,) * (C.ndim - 1))
        acc = np.zeros(x.shape + C.shape[1:], dtype=C.dtype)
        for n in range(len(C) - 1, -1, -1):
            acc = acc * xx + (n + self.s) * C[n]
        return acc * xx ** (self.s - 1.0)

    def product_coefficients(self, other, conj=False):
        """Coefficients ``E_k`` and exponents ``p_k`` with ``u^T v = sum_k E_k x^(p_k - 1)``."""
        key = (id(other), conj)
        cache = self.__dict__.setdefault("_products", {})
        if key not in cache:
            A = np.conj(self.C) if conj else self.C
            B = other.C
            n = len(A) + len(B) - 1
            E = np.zeros((n,) + np.broadcast_shapes(A.shape[1:-1], B.shape[1:-1]), dtype=np.result_type(A, B))
            for i in range(len(A)):
                E[i : i + len(B)] += np.sum(A[i] * B, axis=-1)
            p = self.s + other.s + np.arange(n) + 1.0
            if np.any(np.abs(p) < 1e-14):
                raise OutOfRange("logarithmic term in a series product integral")
            cache[key] = (E, p, other)
        return cache[key][:2]

    def product_integral(self, other, c, d, conj=False):
        """``int_c^d u^T v`` term by term (``u^H v`` when ``conj``); ``c`` may be an array."""
        E, p = self.product_coefficients(other, conj)
        c = np.asarray(c, dtype=float)
        if np.any(c == 0.0) and np.any(p < 0):
            raise OutOfRange("series product is not integrable at 0")
        cc = c.reshape(c.shape + (1,) * (E.ndim))
        with np.errstate(divide="ignore"):
            cp = np.where(cc == 0.0, 0.0, cc ** p.reshape((-1,) + (1,) * (E.ndim - 1)))
        dp = d ** p.reshape((-1,) + (1,) * (E.ndim - 1))
        out = np.sum(E * (dp - cp) / p.reshape((-1,) + (1,) * (E.ndim - 1)), axis=c.ndim)
        return out


class RadialTrace(SolutionTrace):
    """Frobenius series on ``(0, x_eps]`` joined to an integrated trace."""

    def __init__(self, z, series, x_eps, tail, label):
        breaks = np.concatenate([x_eps * 2.0 ** -np.arange(HEAD_OCTAVES, 0, -1), tail.breaks])
        super().__init__(z, 0.0, tail.hi, breaks, label)
        self.zshape = tail.zshape
        self.series = series
        self.x_eps = x_eps
        self.tail = tail

    def _eval_scaled(self, xf):
        out = np.empty((len(xf),) + self.zshape + (2,), dtype=np.result_type(self.series.C, self.tail._F))
        exps = np.zeros((len(xf),) + self.zshape, dtype=np.int64)
        low = xf < self.x_eps
        if np.any(low):
            out[low] = self.series(xf[low])
        if np.any(~low):
            v, e = self.tail.scaled(xf[~low])
            out[~low] = v
            exps[~low] = e
        return out, exps

    def derivative(self, x):
        x = np.asarray(x, dtype=float)
        xf = np.atleast_1d(x).ravel()
        out = np.empty((len(xf),) + self.zshape + (2,), dtype=np.result_type(self.series.C, self.tail._F))
        low = xf < self.x_eps
        if np.any(low):
            out[low] = self.series.derivative(xf[low])
        if np.any(~low):
            out[~low] = self.tail.derivative(xf[~low])
        return out.reshape(x.shape + self.zshape + (2,))

    def head_product_integral(self, other, c, lo, conj=False):
        if isinstance(other, RadialTrace) and lo <= min(self.x_eps, other.x_eps) * (1 + 1e-12):
            return self.series.product_integral(other.series, c, lo, conj)
        return super().head_product_integral(other, c, lo, conj)


# ---------------------------------------------------------------------------
# the radial fundamental system
# ---------------------------------------------------------------------------


def _taylor(fn, X, order, name):
    """Power-series coefficients of ``fn`` on ``[0, X]`` from a Chebyshev fit."""
    deg = max(order, 8)
    nodes = 0.5 * X * (1 - np.cos(np.pi * (np.arange(deg + 1) + 0.5) / (deg + 1)))
    vals = np.asarray(fn(nodes), dtype=float)
    if np.ptp(vals) == 0.0:
        return np.array([vals[0]])
    ch = Chebyshev.fit(nodes, vals, deg, domain=[0.0, X])
    test = np.linspace(0.0, X, 4 * deg + 3)
    err = np.max(np.abs(ch(test) - np.asarray(fn(test), dtype=float)))
    if err > 1e-11 * (1.0 + np.max(np.abs(vals))):
        raise SeriesDivergence(
            f"{name} is not smooth enough near 0 for the Frobenius recursion (fit error {err:.2e})"
        )
    return ch.convert(kind=Polynomial).coef


class RadialSystem(FundamentalSystem):
    """Frobenius-normalised fundamental system of a radial Dirac operator.

    Parameters
    ----------
    pot : PotentialSpec
        With ``endpoint_a_kind == 'singular_radial'`` and ``kappa >= 0``.
    series_order : int
        Number of series terms (default 20).
    x_eps : float, optional
        Largest admissible hand-over point; default ``b / 4``.  It is
        halved automatically while the last series terms exceed the
        tolerance, so the series is used as far out as it converges.
        ``Theta`` is the decaying solution when integrating away from 0,
        so a late hand-over keeps it free of ``Phi`` contamination.
    """

    normalization_tag = "radial_frobenius"

    def __init__(self, pot, series_order=20, x_eps=None, tol=DEFAULT_TOL):
        if not pot.singular:
            raise OutOfRange("radial system needs a singular_radial endpoint")
        super().__init__(pot, tol)
        self.kappa = float(pot.kappa)
        if _is_log_case(self.kappa):
            raise LogCaseUnsupported(f"2*kappa = {2 * self.kappa:g} is an integer; logarithmic series not supported")
        self.series_order = int(series_order)
        self.x_eps0 = DEFAULT_X_EPS * pot.b if x_eps is None else float(x_eps)
        self.A = frobenius_constant(self.kappa)
        self._Q = self._taylor_matrices()

    @property
    def lo(self):
        return 0.0

    @property
    def x_mid(self):
        return 0.5 * self.pot.b

    def _taylor_matrices(self):
        # the fit interval shrinks (and x_eps with it) until the regular
        # part of the potential is resolved by a degree-K polynomial
        while True:
            try:
                return self._taylor_matrices_on(min(self.pot.b, self.x_eps0))
            except SeriesDivergence:
                if self.x_eps0 < 1e-6 * self.pot.b:
                    raise
                self.x_eps0 *= 0.25

    def _taylor_matrices_on(self, X):
        pot = self.pot
        K = self.series_order
        p0 = _taylor(pot.q_el, X, K, "q_el")
        p1 = _taylor(pot.q_am, X, K, "q_am")
        p3 = _taylor(lambda x: pot.mass + pot.q_sc(x), X, K, "q_sc")
        mg = _taylor(pot.q_mg, X, K, "q_mg") if pot.has_magnetic else np.zeros(1)
        n = max(len(p0), len(p1), len(p3), len(mg))
        Q = np.zeros((n, 2, 2), dtype=complex if pot.has_magnetic else float)
        for k in range(n):
            a0 = p0[k] if k < len(p0) else 0.0
            a1 = p1[k] if k < len(p1) else 0.0
            a3 = p3[k] if k < len(p3) else 0.0
            Q[k] = [[a0 + a3, a1], [a1, a0 - a3]]
            if pot.has_magnetic and k < len(mg):
                Q[k] = Q[k] + mg[k] * np.array([[0, -1j], [1j, 0]])
        return Q

    # series coefficients -------------------------------------------------
    def coefficients(self, z, which, order=None):
        """Series coefficients ``C[n]`` (shape ``(N+1,) + z.shape + (2,)``) and exponent ``s``."""
        z = np.asarray(z)
        N = self.series_order if order is None else order
        kap = self.kappa
        if which == "phi":
            s = kap
            c0 = np.array([0.0, self.A])
        else:
            s = -kap
            c0 = np.array([1.0 / self.A, 0.0])
        dtype = np.result_type(z, self._Q, float)
        C = np.zeros((N + 1,) + z.shape + (2,), dtype=dtype)
        C[0] = c0
        Q = self._Q
        for n in range(1, N + 1):
            v = z[..., None] * C[n - 1]
            for k in range(min(n, len(Q))):
                v = v - C[n - 1 - k] @ Q[k].T
            rhs = np.stack([v[..., 1], -v[..., 0]], axis=-1)
            d = np.array([n + s + kap, n + s - kap])
            if np.any(d == 0):
                raise LogCaseUnsupported("resonant Frobenius exponent")
            C[n] = rhs / d
        return C, s

    def _x_eps_for(self, z, which_list=("phi", "theta")):
        x = self.x_eps0
        N = self.series_order
        for _ in range(60):
            ok = True
            for which in which_list:
                C, s = self.coefficients(z, which)
                head = np.max(np.abs(C[0]))
                tail = np.max(np.abs(C[N]) * x**N + np.abs(C[N - 1]) * x ** (N - 1))
                if tail > 1e-3 * self.tol * head or np.max(np.abs(z)) * x > SERIES_ZX_MAX:
                    ok = False
            if ok:
                return x
            x *= 0.5
        raise SeriesDivergence("Frobenius series does not converge at any usable x_eps")

    def series(self, z, which, x_eps=None):
        z = np.asarray(z)
        C, s = self.coefficients(z, which)
        return SeriesBlock(s, C)

    # traces -----------------------------------------------------------------
    def _traces(self, z, which_list):
        z = np.asarray(z)
        zshape = z.shape
        zf = np.atleast_1d(z).ravel()
        xe = self._x_eps_for(zf, which_list)
        blocks = [SeriesBlock(*self.coefficients(zf, w)[::-1]) for w in which_list]
        u0 = np.concatenate([b(np.array([xe]))[0] for b in blocks])
        zz = np.concatenate([zf] * len(which_list))
        tr = integrate(self.pot, zz, xe, u0, self.pot.b, self.tol)
        n = zf.size
        out = []
        for i, (w, blk) in enumerate(zip(which_list, blocks)):
            tail = tr.take(np.arange(i * n, (i + 1) * n), zshape)
            blk_shaped = SeriesBlock(blk.s, blk.C.reshape((len(blk.C),) + zshape + (2,)))
            label = "Phi" if w == "phi" else "Theta"
            tail.label = label
            out.append(RadialTrace(z, blk_shaped, xe, tail, label))
        return out

    def pair(self, z):
        return tuple(self._traces(z, ("phi", "theta")))

    def phi(self, z):
        return self._traces(z, ("phi",))[0]

    def theta(self, z):
        return self._traces(z, ("theta",))[0]

    def _at(self, z, x, which_list):
        z = np.asarray(z)
        zf = np.atleast_1d(z).ravel()
        xe = self._x_eps_for(zf, which_list)
        blocks = [SeriesBlock(*self.coefficients(zf, w)[::-1]) for w in which_list]
        n = zf.size
        if x <= xe:
            vals = [b(np.array([x]))[0].reshape(z.shape + (2,)) for b in blocks]
            return [(v, np.zeros(z.shape, dtype=np.int64)) for v in vals]
        u0 = np.concatenate([b(np.array([xe]))[0] for b in blocks])
        zz = np.concatenate([zf] * len(which_list))
        tr = integrate(self.pot, zz, xe, u0, x, self.tol)
        v, e = tr.scaled(x)
        return [
            (v[i * n : (i + 1) * n].reshape(z.shape + (2,)), e[i * n : (i + 1) * n].reshape(z.shape))
            for i in range(len(which_list))
        ]

    def pair_at(self, z, x):
        return tuple(self._at(z, x, ("phi", "theta")))

    def phi_at(self, z, x):
        return self._at(z, x, ("phi",))[0]

    def theta_at(self, z, x):
        return self._at(z, x, ("theta",))[0]


def radial_weyl_data(kappa=None, b=1.0, pot=None, bc_at_b=(0.0, 1.0), tol=DEFAULT_TOL, **kw):
    """Weyl data of a radial operator (free unless ``pot`` is given)."""
    if pot is None:
        pot = PotentialSpec.radial(kappa, b=b)
    return WeylData(RadialSystem(pot, tol=tol, **kw), bc_at_b)


def frobenius_phi(rs, z):
    """Regular solution ``Phi(z, .)`` normalised at ``x = 0``."""
    return rs.phi(z)


def frobenius_theta(rs, z):
    """Singular solution ``Theta(z, .)`` with ``W(Theta, Phi) = 1``."""
    return rs.theta(z)


# ---------------------------------------------------------------------------
# kappa lowering
# ---------------------------------------------------------------------------


def fit_inverse_x_coefficient(pot, kappa, component="sigma1", x_range=(1e-3, 1e-1), n=200):
    """Coefficient of ``1/x`` in a component of ``pot`` near 0.

    ``x p(x)`` is regressed on ``1`` and the powers ``x^(j(2k-1))``
    (``j = 1..12``, up to ``x^6``), ``x``, ``x^2``, ``x^(2k+1)`` that appear in the
    expansion of the commuted potential (``k = kappa`` of the operator
    before commutation); returns the intercept and the fit residual.
    """
    xs = np.geomspace(x_range[0], x_range[1], n)
    p0, p1, p3 = pot.coefficients(xs)
    y = xs * (np.asarray(p1) if component == "sigma1" else np.asarray(p3))
    k = kappa
    powers = sorted({round(j * (2 * k - 1), 12) for j in range(1, 13)} | {1.0, 2.0, round(2 * k + 1, 12)})
    powers = [q for q in powers if 0 < q <= 6.0]
    A = np.stack([np.ones_like(xs)] + [xs**q for q in powers], axis=1)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = float(np.max(np.abs(A @ coef - y)))
    return float(coef[0]), resid


@dataclass
class LoweringResult:
    """One kappa-lowering step."""

    op: CommutedOperator
    wd: WeylData  # Weyl data of the new operator (after the sigma_2 gauge if applied)
    kappa_before: float
    kappa_after: float
    gauged: bool
    fit_before: float
    fit_after: float
    fit_sigma3: float
    normalization_error: Optional[float] = None


def check_frobenius_normalization(wd, kappa, z=(1.0, 2.0 + 1.0j), xs=(1e-10, 1e-9)):
    """Max relative deviation of ``x^-kappa Phi(z, x)`` from ``(0, A(kappa))`` at small x."""
    A = frobenius_constant(kappa)
    phi = wd.system.phi(np.asarray(z))
    v = phi(np.asarray(xs))
    target = np.array([0.0, A])
    dev = np.abs(v / np.asarray(xs)[:, None, None] ** kappa - target) / A
    return float(np.max(dev))


FIT_RANGES = ((1e-3, 1e-1), (1e-4, 1e-2), (1e-5, 1e-3), (1e-6, 1e-4))
FIT_RESIDUAL = 1e-5


def _fit_near_zero(pot, kappa, component, fit_range, b):
    """Fit on ``fit_range`` (scaled by ``b``), shrinking towards 0 while the basis misses structure."""
    ranges = FIT_RANGES if fit_range is None else (fit_range,)
    for lo, hi in ranges:
        coef, resid = fit_inverse_x_coefficient(pot, kappa, component, (lo * b, hi * b))
        if resid <= FIT_RESIDUAL:
            break
    return coef, (lo * b, hi * b)


def kappa_lower_step(wd, lam, gamma=1.0, fit_range=None):
    """Lower the angular momentum by commuting with ``Theta(lambda)``.

    Returns a :class:`LoweringResult` whose ``wd`` describes the operator
    with angular momentum ``|1 - kappa|`` (sigma_2-gauged when
    ``kappa > 1``).  The ``1/x`` coefficients are fitted on
    ``[1e-3, 1e-1] b`` unless the regression residual shows unresolved
    structure, in which case the window moves towards 0 by decades.
    """
    kappa = float(wd.pot.kappa)
    if kappa <= 0.5:
        raise KappaTooSmall(f"kappa = {kappa} <= 1/2: operator is already limit circle")
    if np.isinf(gamma):
        raise LambdaNotAdmissible("kappa lowering keeps b regular only for finite gamma")
    op = commute_right_theta(wd, lam, gamma)
    b = wd.pot.b
    fit_before, used = _fit_near_zero(op.pot_gamma, kappa, "sigma1", fit_range, b)
    fit_s3, _ = fit_inverse_x_coefficient(op.pot_gamma, kappa, "sigma3", used)
    new_wd = op.direct_weyl_data()
    gauged = kappa > 1.0
    fit_after = fit_before
    if gauged:
        new_wd = sigma2_gauge(new_wd)
        fit_after, _ = fit_inverse_x_coefficient(new_wd.pot, kappa, "sigma1", used)
    kappa_after = abs(1.0 - kappa)
    new_wd.pot.kappa = kappa_after
    norm_err = None
    if kappa >= 1.0:
        norm_err = check_frobenius_normalization(new_wd, kappa_after)
    res = LoweringResult(op, new_wd, kappa, kappa_after, gauged, fit_before, fit_after, fit_s3, norm_err)
    res.fit_range = used
    return res


# ---------------------------------------------------------------------------
# iterated reduction
# ---------------------------------------------------------------------------


@dataclass
class ReductionStep:
    lam: float
    gamma: float
    c: float
    kappa: float
    wb_dot: float


@dataclass
class ReductionLedger:
    """Steps ``(lambda_n, gamma_n, c_n, kappa_n)``, polynomials ``P_n`` and the terminal Weyl data."""

    kappa: float
    steps: list
    terminal: WeylData
    original: WeylData
    results: list = field(default_factory=list)

    @property
    def P(self):
        """Ascending coefficient vectors of ``P_0 = 1, ..., P_N``."""
        out = [np.array([1.0])]
        for st in self.steps:
            out.append(P.polymul(out[-1], [-st.lam, 1.0]))
        return out

    def P_at(self, n, z):
        return P.polyval(np.asarray(z), self.P[n])

    @property
    def terminal_kappa(self):
        k = self.kappa
        for _ in self.steps:
            k = abs(1.0 - k)
        return k

    def c_recomputed(self):
        return [st_gamma_inv(st) - st.wb_dot for st in self.steps]

    def to_dict(self):
        return {
            "kappa": self.kappa,
            "steps": [
                {"lambda": s.lam, "gamma": s.gamma, "c": s.c, "kappa": s.kappa, "wb_dot": s.wb_dot}
                for s in self.steps
            ],
            "P": [p.tolist() for p in self.P],
            "terminal_kappa": self.terminal_kappa,
        }


def st_gamma_inv(step):
    return 0.0 if np.isinf(step.gamma) else 1.0 / step.gamma


def reduction_step_count(kappa):
    if kappa + 0.5 == math.floor(kappa + 0.5) and kappa > 0:
        raise LogCaseUnsupported("kappa + 1/2 must not be an integer")
    return int(math.floor(kappa + 0.5))


DEFAULT_WINDOW = (-0.5, 30.0)


def default_chooser(window=DEFAULT_WINDOW, gamma=1.0):
    """Smallest zero of ``M`` between the first two poles inside ``window`` (scaled by ``1/b``)."""

    def choose(step, wd):
        b = wd.pot.b
        lo, hi = window[0] / b, window[1] / b
        poles = eigenvalues(wd, lo, hi)
        if len(poles) < 2:
            raise NoAdmissibleLambda(f"fewer than two poles of M in [{lo}, {hi}]")
        zeros = admissible_lambda_right(wd, poles[0], poles[1])
        zeros = [z for z in zeros if poles[0] < z < poles[1]]
        if not zeros:
            raise NoAdmissibleLambda("no zero of M between the first two poles")
        return zeros[0], gamma

    return choose


def fixed_chooser(pairs):
    """Chooser replaying stored ``(lambda, gamma)`` pairs."""

    def choose(step, wd):
        return pairs[step]

    return choose


def iterate_reduction(wd, chooser=None, steps=None):
    """Apply ``floor(kappa + 1/2)`` lowering steps and record the ledger."""
    kappa = float(wd.pot.kappa)
    n_steps = reduction_step_count(kappa) if steps is None else int(steps)
    chooser = default_chooser() if chooser is None else chooser
    cur = wd
    recs, results = [], []
    for n in range(n_steps):
        lam, gamma = chooser(n, cur)
        res = kappa_lower_step(cur, lam, gamma)
        g_inv = 0.0 if np.isinf(gamma) else 1.0 / gamma
        recs.append(ReductionStep(float(lam), float(gamma), g_inv - res.op.wb_dot, float(cur.pot.kappa), res.op.wb_dot))
        results.append(res)
        cur = res.wd
    return ReductionLedger(kappa, recs, cur, wd, results)


def assemble_M(ledger, z):
    """``P_N(z)^2 M_0(z) - sum_n c_n P_n(z)^2 (lambda_n - z)``."""
    z = np.asarray(z)
    N = len(ledger.steps)
    out = ledger.P_at(N, z) ** 2 * ledger.terminal.M(z, check_pole=False)
    for n, st in enumerate(ledger.steps):
        out = out - st.c * ledger.P_at(n, z) ** 2 * (st.lam - z)
    return out


def herglotz_check(wd, zs):
    """Fraction of points with ``sign(Im M) == sign(Im z)`` and the worst value."""
    m = np.asarray(wd.M(np.asarray(zs), check_pole=False))
    ok = np.sign(np.imag(m)) == np.sign(np.imag(zs))
    return bool(np.all(ok)), float(np.min(np.imag(m) * np.sign(np.imag(zs))))


# ---------------------------------------------------------------------------
# measure factorisation and the moment diagnostic
# ---------------------------------------------------------------------------


@dataclass
class FactorizationReport:
    n_common: int
    max_rel_dev: float
    inserted: list
    ratios: np.ndarray
    lambdas: np.ndarray


def terminal_measure(ledger, lo, hi, known=()):
    """Spectral measure of the terminal operator on ``[lo, hi]``.

    An inserted ``lambda_n`` can sit close to an atom of the original
    operator.  Around each ``lambda_n`` the interval between the midpoints
    to its neighbours (among ``known`` and the other ``lambda_n``) is
    scanned with a quarter of its length as step; the rest of the window
    uses the default step.
    """
    twd = ledger.terminal
    step = default_scan_step(twd.pot)
    lams = sorted(st.lam for st in ledger.steps if lo < st.lam < hi)
    pts = np.unique(np.concatenate([np.asarray(known, float), lams]))
    fine = []
    for lam in lams:
        i = int(np.searchsorted(pts, lam))
        left = 0.5 * (pts[i - 1] + lam) if i > 0 else max(lo, lam - step)
        right = 0.5 * (pts[i + 1] + lam) if i + 1 < len(pts) else min(hi, lam + step)
        fine.append((max(lo, left), min(hi, right)))
    fine.sort()
    merged = []
    for a, b in fine:
        if merged and a <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(merged[-1][1], b))
        else:
            merged.append((a, b))
    eigs = []
    cur = lo
    for a, b in merged:
        if a > cur:
            eigs.extend(eigenvalues(twd, cur, a, step=step))
        eigs.extend(eigenvalues(twd, a, b, step=min(step, 0.25 * (b - a))))
        cur = b
    if hi > cur:
        eigs.extend(eigenvalues(twd, cur, hi, step=step))
    eigs = sorted(set(eigs))
    return norming_weights(twd, eigs, cross_check=False)


def measure_factorization_check(ledger, original_measure, n_atoms=10, rho0=None, window=None, atol=1e-7):
    """Compare ``rho`` with ``P_N^2 rho_0`` atom by atom.

    Atoms of ``rho_0`` not in ``rho`` must be among the ``lambda_n`` of
    the ledger (inserted eigenvalues); anything else raises
    :class:`AtomMismatch`.
    """
    if rho0 is None:
        lo = original_measure.lambdas[0] - 1.0 if window is None else window[0]
        hi = original_measure.lambdas[-1] + 1.0 if window is None else window[1]
        rho0 = terminal_measure(ledger, lo, hi, original_measure.lambdas)
    lo = max(original_measure.lambdas[0], rho0.lambdas[0]) - atol
    hi = min(original_measure.lambdas[-1], rho0.lambdas[-1]) + atol
    a = original_measure.restrict(lo, hi)
    b = rho0.restrict(lo, hi)
    lams = [st.lam for st in ledger.steps]
    common, ratios, inserted = [], [], []
    j = 0
    used = np.zeros(len(b), dtype=bool)
    for lam, w in zip(a.lambdas, a.weights):
        k = np.flatnonzero(np.abs(b.lambdas - lam) <= atol * max(1.0, abs(lam)))
        if len(k) != 1:
            raise AtomMismatch(f"atom {lam!r} of rho has no partner in rho_0")
        used[k[0]] = True
        p2 = ledger.P_at(len(ledger.steps), lam) ** 2
        common.append(lam)
        ratios.append(w / (p2 * b.weights[k[0]]))
    for lam in b.lambdas[~used]:
        if not any(abs(lam - l) <= 1e-6 * max(1.0, abs(l)) for l in lams):
            raise AtomMismatch(f"atom {lam!r} of rho_0 is neither in rho nor an inserted eigenvalue")
        inserted.append(float(lam))
    ratios = np.array(ratios)
    if len(common) < n_atoms:
        raise AtomMismatch(f"only {len(common)} common atoms, {n_atoms} requested")
    return FactorizationReport(len(common), float(np.max(np.abs(ratios - 1.0))), inserted, ratios, np.array(common))


@dataclass
class NevanlinnaReport:
    index: Optional[int]
    status: str  # 'ok' or 'inconclusive'
    alpha: float = float("nan")
    beta: float = float("nan")
    exponents: dict = field(default_factory=dict)
    partial_sums: dict = field(default_factory=dict)
    expected: Optional[int] = None
    message: str = ""

    @property
    def agrees(self):
        return self.status == "ok" and self.expected is not None and self.index == self.expected


def nevanlinna_index(measure, kappa=None, min_atoms=30, margin=0.15, k_max=6):
    """Estimate the smallest ``k`` with ``(1 + t^2)^{-k-1}`` integrable against ``rho``.

    The weights are fitted as ``w ~ |t|^alpha`` and the atom counting
    function as ``N(t) ~ t^beta`` on the outer half of the window; the sum
    ``S_k`` converges iff ``alpha - 2(k+1) + beta < 0``.  Exponents within
    ``margin`` of zero, or windows with fewer than ``min_atoms`` atoms,
    give status ``'inconclusive'``.  Partial sums over nested windows are
    reported alongside.
    """
    expected = None if kappa is None else int(math.floor(kappa + 0.5))
    lam = np.asarray(measure.lambdas, float)
    w = np.asarray(measure.weights, float)
    if len(lam) < min_atoms:
        return NevanlinnaReport(None, "inconclusive", expected=expected, message=f"{len(lam)} atoms < {min_atoms}")
    t = np.abs(lam)
    order = np.argsort(t)
    t, w = t[order], w[order]
    tmax = t[-1]
    sel = t >= 0.5 * tmax
    if np.count_nonzero(sel) < 6:
        return NevanlinnaReport(None, "inconclusive", expected=expected, message="too few atoms in the outer window")
    alpha = float(np.polyfit(np.log(t[sel]), np.log(w[sel]), 1)[0])
    counts = np.arange(1, len(t) + 1)
    beta = float(np.polyfit(np.log(t[sel]), np.log(counts[sel]), 1)[0])
    exps, sums = {}, {}
    index = None
    status = "ok"
    msg = ""
    for k in range(k_max + 1):
        e = alpha - 2 * (k + 1) + beta
        exps[k] = e
        cuts = np.quantile(t, [0.25, 0.5, 0.75, 1.0])
        sums[k] = [float(np.sum(w[t <= c] / (1 + t[t <= c] ** 2) ** (k + 1))) for c in cuts]
        if abs(e) < margin:
            status = "inconclusive"
            msg = f"growth exponent {e:.3f} for k={k} within margin {margin}"
            break
        if e < 0:
            index = k
            break
    if index is None and status == "ok":
        status = "inconclusive"
        msg = f"no convergent moment up to k={k_max}"
    return NevanlinnaReport(index if status == "ok" else None, status, alpha, beta, exps, sums, expected, msg)
