"""Fundamental systems, Weyl solutions and the singular Weyl function.

For a real entire fundamental system ``(Phi, Theta)`` with
``W(Theta, Phi) = 1`` and the solution ``u_+`` fixed by the boundary
condition ``u_+(z, b) = (beta1, beta2)`` the Weyl function is

    M(z) = -W(Theta(z), u_+(z)) / W(Phi(z), u_+(z)).

Its poles are the eigenvalues, the residues are minus the norming weights
``1/||Phi(lambda_n)||^2``, and ``(1/pi) Im M(lambda + i eps)`` converges to
the spectral measure.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AtPole,
    ClusterSuspected,
    NonIntegrableMagnetic,
    NotAnEigenvalue,
    OutOfRange,
    SlowConvergence,
    ZEqualsLambda,
)
from .ode import (
    DEFAULT_TOL,
    FormulaTrace,
    apply_scale,
    PotentialSpec,
    integrate,
    l2_norm_sq,
    wronskian_scaled,
)
from .quadrature import PanelIntegral

POLE_THRESHOLD = 1e-8
DIRICHLET = (0.0, 1.0)


# ---------------------------------------------------------------------------
# fundamental systems
# ---------------------------------------------------------------------------


class FundamentalSystem:
    """Real entire solutions ``Phi``, ``Theta`` with ``W(Theta, Phi) = 1``.

    Subclasses implement :meth:`pair`; point evaluations default to
    evaluating the traces.
    """

    normalization_tag = "regular_at_a"

    def __init__(self, pot, tol=DEFAULT_TOL):
        self.pot = pot
        self.tol = tol

    # domain on which traces are available
    @property
    def lo(self):
        return self.pot.a

    @property
    def hi(self):
        return self.pot.b

    @property
    def x_mid(self):
        return 0.5 * (self.pot.a + self.pot.b)

    def pair(self, z):  # pragma: no cover - interface
        raise NotImplementedError

    def phi(self, z):
        return self.pair(z)[0]

    def theta(self, z):
        return self.pair(z)[1]

    def phi_at(self, z, x):
        return self.phi(z).scaled(x)

    def theta_at(self, z, x):
        return self.theta(z).scaled(x)

    def pair_at(self, z, x):
        p, t = self.pair(z)
        return p.scaled(x), t.scaled(x)


def _stack_pair(z, first, second):
    """Batch ``z`` twice with two initial values; returns (zbatch, u0, n)."""
    zf = np.atleast_1d(np.asarray(z)).ravel()
    n = zf.size
    zz = np.concatenate([zf, zf])
    u0 = np.concatenate([np.tile(first, (n, 1)), np.tile(second, (n, 1))]).astype(float)
    return zz, u0, n


def _split(trace, n, zshape):
    return trace.take(np.arange(n), zshape), trace.take(np.arange(n, 2 * n), zshape)


class RegularSystem(FundamentalSystem):
    """``Phi(z, a) = (0, 1)`` and ``Theta(z, a) = (1, 0)`` at a regular endpoint."""

    normalization_tag = "regular_at_a"

    def __init__(self, pot, tol=DEFAULT_TOL):
        if pot.singular:
            raise OutOfRange("regular fundamental system needs a regular left endpoint")
        super().__init__(pot, tol)

    def _run(self, z, x1, label="Derived"):
        zshape = np.shape(z)
        zz, u0, n = _stack_pair(z, (0.0, 1.0), (1.0, 0.0))
        tr = integrate(self.pot, zz, self.pot.a, u0, x1, self.tol, label=label)
        phi, theta = _split(tr, n, zshape)
        phi.label, theta.label = "Phi", "Theta"
        return phi, theta

    def pair(self, z):
        return self._run(z, self.pot.b)

    def phi(self, z):
        tr = integrate(self.pot, z, self.pot.a, (0.0, 1.0), self.pot.b, self.tol, label="Phi")
        return tr

    def theta(self, z):
        return integrate(self.pot, z, self.pot.a, (1.0, 0.0), self.pot.b, self.tol, label="Theta")

    def phi_at(self, z, x):
        if x == self.pot.a:
            return _const_at(z, (0.0, 1.0))
        return integrate(self.pot, z, self.pot.a, (0.0, 1.0), x, self.tol).scaled(x)

    def theta_at(self, z, x):
        if x == self.pot.a:
            return _const_at(z, (1.0, 0.0))
        return integrate(self.pot, z, self.pot.a, (1.0, 0.0), x, self.tol).scaled(x)

    def pair_at(self, z, x):
        if x == self.pot.a:
            return _const_at(z, (0.0, 1.0)), _const_at(z, (1.0, 0.0))
        p, t = self._run(z, x)
        return p.scaled(x), t.scaled(x)


def _const_at(z, value):
    shape = np.shape(z)
    v = np.broadcast_to(np.asarray(value, dtype=float), shape + (2,)).copy()
    return v, np.zeros(shape, dtype=np.int64)


def build_fundamental_system(pot, tol=DEFAULT_TOL):
    """Canonical system normalised at a regular left endpoint."""
    return RegularSystem(pot, tol)


# ---------------------------------------------------------------------------
# Weyl data and the Weyl function
# ---------------------------------------------------------------------------


class WeylData:
    """A fundamental system together with the right Weyl solution.

    Parameters
    ----------
    system : FundamentalSystem
    bc_at_b : (float, float)
        ``u_+(z, b)``; the default ``(0, 1)`` is the Dirichlet condition
        ``u_1(b) = 0``.
    uplus_fn : callable, optional
        Replacement for the integrated ``u_+`` (``uplus_fn(z, x_stop)``
        returns a trace); used when ``b`` is not a regular point of the
        potential.
    x_eval : float, optional
        Abscissa where Wronskians are evaluated (midpoint by default).
    """

    def __init__(self, system, bc_at_b=DIRICHLET, uplus_fn=None, x_eval=None, tol=None):
        beta = np.asarray(bc_at_b, dtype=float)
        if beta.shape != (2,) or not np.any(beta):
            raise OutOfRange("boundary vector must be a non-zero real 2-vector")
        self.system = system
        self.pot = system.pot
        self.bc_at_b = beta
        self.uplus_fn = uplus_fn
        self.x_eval = system.x_mid if x_eval is None else float(x_eval)
        self.tol = system.tol if tol is None else tol

    # u_+ -------------------------------------------------------------------
    def uplus(self, z, x_stop=None):
        x_stop = self.system.lo if x_stop is None else x_stop
        if self.uplus_fn is not None:
            return self.uplus_fn(z, x_stop)
        if self.pot.singular and x_stop <= self.pot.a:
            x_stop = self.system.lo
        return integrate(self.pot, z, self.pot.b, self.bc_at_b, x_stop, self.tol, label="UPlus")

    def uplus_at(self, z, x):
        if self.uplus_fn is None and x == self.pot.b:
            return _const_at(z, self.bc_at_b)
        return self.uplus(z, x).scaled(x)

    # Wronskians ----------------------------------------------------------
    def char_scaled(self, z, x=None):
        """``W_x(Phi(z), u_+(z))`` divided by ``|Phi(z,x)| |u_+(z,x)|`` (scale-free)."""
        x = self.x_eval if x is None else x
        (P, _), (U, _) = self.system.phi_at(z, x), self.uplus_at(z, x)
        w = P[..., 0] * U[..., 1] - P[..., 1] * U[..., 0]
        return w / (np.linalg.norm(P, axis=-1) * np.linalg.norm(U, axis=-1))

    def numerator_scaled(self, z, x=None):
        """``W_x(Theta(z), u_+(z))`` divided by ``|Theta| |u_+|``; vanishes where M does."""
        x = self.x_eval if x is None else x
        (T, _), (U, _) = self.system.theta_at(z, x), self.uplus_at(z, x)
        w = T[..., 0] * U[..., 1] - T[..., 1] * U[..., 0]
        return w / (np.linalg.norm(T, axis=-1) * np.linalg.norm(U, axis=-1))

    def wronskians(self, z, x=None):
        """Return ``(W(Theta,u+), W(Phi,u+), pole_ratio)`` at ``x``."""
        x = self.x_eval if x is None else x
        (P, eP), (T, eT) = self.system.pair_at(z, x)
        U, eU = self.uplus_at(z, x)
        wp = P[..., 0] * U[..., 1] - P[..., 1] * U[..., 0]
        wt = T[..., 0] * U[..., 1] - T[..., 1] * U[..., 0]
        ratio = np.abs(wp) / (np.linalg.norm(P, axis=-1) * np.linalg.norm(U, axis=-1))
        with np.errstate(over="ignore", under="ignore"):
            wt_full = apply_scale(wt, eT + eU)
            wp_full = apply_scale(wp, eP + eU)
        return wt_full, wp_full, ratio, (wt, wp, eT - eP)

    def M(self, z, x=None, check_pole=True):
        """Weyl function at ``z`` (scalar or array)."""
        _, _, ratio, (wt, wp, de) = self.wronskians(z, x)
        if check_pole and np.any(ratio < POLE_THRESHOLD):
            i = np.unravel_index(np.argmin(ratio), np.shape(ratio)) if np.ndim(ratio) else ()
            raise AtPole(np.asarray(z)[i], float(np.asarray(ratio)[i]))
        with np.errstate(over="ignore", under="ignore", divide="ignore", invalid="ignore"):
            m = apply_scale(-(wt / wp), de)
        return m[()] if np.ndim(m) == 0 else m

    __call__ = M

    def psi(self, z):
        """Weyl solution ``Psi = Theta + M Phi`` as a trace."""
        m = self.M(z)
        phi, theta = self.system.pair(z)
        mm = np.asarray(m)[..., None]
        return FormulaTrace(lambda xf: theta(xf) + mm * phi(xf), [phi, theta], np.asarray(z), label="Derived")


def weyl_solution_plus(wd, z):
    """``u_+(z, .)`` integrated from the boundary condition at ``b``."""
    return wd.uplus(z)


def weyl_function(wd, z):
    """``M(z) = -W(Theta, u_+) / W(Phi, u_+)``; raises :class:`AtPole` at eigenvalues."""
    return wd.M(z)


def check_wronskian_constancy(wd, z, xs):
    """Relative spread of ``M`` computed at several abscissae."""
    vals = np.array([wd.M(z, x=x, check_pole=False) for x in xs])
    return float(np.max(np.abs(vals - vals[0])) / max(1.0, np.max(np.abs(vals))))


# ---------------------------------------------------------------------------
# real zeros: eigenvalues and zeros of M
# ---------------------------------------------------------------------------


def scan_zeros(fn, lo, hi, step, xtol=1e-13, max_iter=200):
    """All sign changes of a real vectorised function on ``[lo, hi]``.

    ``fn`` maps a 1-D array of abscissae to real values.  Brackets found on
    a uniform grid of spacing ``<= step`` are refined simultaneously by the
    Illinois variant of regula falsi.  Returns ``(roots, slopes)`` where
    ``slopes`` is the sign of the function's increase across each root.
    """
    if not hi > lo:
        raise OutOfRange("need lo < hi")
    n = int(np.ceil((hi - lo) / step)) + 1
    grid = np.linspace(lo, hi, max(n, 2))
    try:
        vals = np.real(np.asarray(fn(grid)))
    except ZEqualsLambda:
        # a grid point hit a removable singularity of the formulas; nudge the grid
        delta = 1e-7 * (grid[1] - grid[0])
        grid = grid + delta
        grid[-1] = hi - delta
        vals = np.real(np.asarray(fn(grid)))
    roots, slopes = [], []
    nz = vals != 0
    for i in np.flatnonzero(~nz):
        roots.append(grid[i])
        left = vals[i - 1] if i > 0 else -vals[i + 1] if i + 1 < len(vals) else 0.0
        right = vals[i + 1] if i + 1 < len(vals) else -left
        slopes.append(np.sign(right - left))
    idx = np.flatnonzero(nz[:-1] & nz[1:] & (np.sign(vals[:-1]) != np.sign(vals[1:])))
    a = grid[idx].copy()
    b = grid[idx + 1].copy()
    fa = vals[idx].copy()
    fb = vals[idx + 1].copy()
    slope_b = np.sign(fb - fa)
    active = np.ones(len(a), dtype=bool)
    side = np.zeros(len(a), dtype=int)
    for _ in range(max_iter):
        width = b - a
        active &= width > xtol * np.maximum(1.0, np.abs(a))
        if not np.any(active):
            break
        ia = np.flatnonzero(active)
        with np.errstate(invalid="ignore", divide="ignore"):
            c = (a[ia] * fb[ia] - b[ia] * fa[ia]) / (fb[ia] - fa[ia])
        bad = ~np.isfinite(c) | (c <= a[ia]) | (c >= b[ia])
        c[bad] = 0.5 * (a[ia][bad] + b[ia][bad])
        fc = np.real(np.asarray(fn(c)))
        exact = fc == 0
        same_a = np.sign(fc) == np.sign(fa[ia])
        # replace a
        ja = ia[same_a & ~exact]
        a[ja] = c[same_a & ~exact]
        fa[ja] = fc[same_a & ~exact]
        fb[ja] = np.where(side[ja] == -1, fb[ja] * 0.5, fb[ja])
        side[ja] = -1
        jb = ia[~same_a & ~exact]
        b[jb] = c[~same_a & ~exact]
        fb[jb] = fc[~same_a & ~exact]
        fa[jb] = np.where(side[jb] == 1, fa[jb] * 0.5, fa[jb])
        side[jb] = 1
        je = ia[exact]
        a[je] = b[je] = c[exact]
        active[je] = False
    refined = 0.5 * (a + b)
    roots = np.concatenate([np.asarray(roots, float), refined])
    slopes = np.concatenate([np.asarray(slopes, float), slope_b])
    order = np.argsort(roots)
    return roots[order], slopes[order], grid[1] - grid[0]


def _check_alternation(roots, slopes, step):
    gaps = np.diff(roots)
    if np.any(gaps < step) and len(roots) > 1:
        i = int(np.argmin(gaps))
        raise ClusterSuspected(f"zeros {roots[i]!r} and {roots[i + 1]!r} closer than scan step {step:.3g}")
    same = (slopes[:-1] == slopes[1:]) & (slopes[:-1] != 0)
    if np.any(same):
        i = int(np.flatnonzero(same)[0])
        raise ClusterSuspected(
            f"consecutive zeros {roots[i]!r}, {roots[i + 1]!r} cross in the same direction; "
            "an even number of zeros is hidden between them"
        )


def default_scan_step(pot):
    return np.pi / (4.0 * (pot.b - pot.a))


def eigenvalue_function(wd):
    """The scale-free real function whose zeros are the eigenvalues."""
    if wd.pot.has_magnetic:
        return _magnetic_char(wd)
    return lambda lam: np.real(wd.char_scaled(lam, wd.pot.b if wd.uplus_fn is None else None))


def _magnetic_char(wd):
    # With a magnetic term Phi(lambda, b) is a real vector times a
    # lambda-independent phase; remove that phase before taking signs.
    b = wd.pot.b

    def fn(lam):
        P, _ = wd.system.phi_at(lam, b)
        q = np.sum(P * P, axis=-1)
        omega = np.median(q / np.abs(q)) if np.size(q) > 1 else q / np.abs(q)
        phase = np.sqrt(omega)
        U = wd.bc_at_b
        w = P[..., 0] * U[1] - P[..., 1] * U[0]
        return np.real(w / phase) / np.linalg.norm(P, axis=-1)

    return fn


def eigenvalues(wd, lo, hi, step=None, xtol=1e-13):
    """Zeros of ``lambda -> W(Phi(lambda), u_+(lambda))`` in ``[lo, hi]``.

    Raises
    ------
    ClusterSuspected
        When two zeros are closer than the scan step or consecutive zeros
        have the same crossing direction.
    """
    step = default_scan_step(wd.pot) if step is None else step
    roots, slopes, used = scan_zeros(eigenvalue_function(wd), lo, hi, step, xtol)
    _check_alternation(roots, slopes, used)
    return [float(r) for r in roots]


# ---------------------------------------------------------------------------
# spectral measures
# ---------------------------------------------------------------------------


@dataclass
class SpectralMeasureDiscrete:
    """Point masses ``weights[n]`` at ``lambdas[n]`` (strictly increasing)."""

    lambdas: np.ndarray
    weights: np.ndarray
    residue_weights: np.ndarray = None

    def __post_init__(self):
        self.lambdas = np.asarray(self.lambdas, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        order = np.argsort(self.lambdas)
        self.lambdas = self.lambdas[order]
        self.weights = self.weights[order]
        if self.residue_weights is not None:
            self.residue_weights = np.asarray(self.residue_weights, dtype=float)[order]
        if np.any(np.diff(self.lambdas) <= 0):
            raise OutOfRange("atoms must be strictly increasing")

    @property
    def atoms(self):
        return list(zip(self.lambdas.tolist(), self.weights.tolist()))

    def __len__(self):
        return len(self.lambdas)

    def mass(self, l0, l1):
        sel = (self.lambdas > l0) & (self.lambdas < l1)
        return float(np.sum(self.weights[sel]))

    def restrict(self, lo, hi):
        sel = (self.lambdas >= lo) & (self.lambdas <= hi)
        rw = None if self.residue_weights is None else self.residue_weights[sel]
        return SpectralMeasureDiscrete(self.lambdas[sel], self.weights[sel], rw)

    def without(self, lam, atol=1e-8):
        sel = np.abs(self.lambdas - lam) > atol
        rw = None if self.residue_weights is None else self.residue_weights[sel]
        return SpectralMeasureDiscrete(self.lambdas[sel], self.weights[sel], rw)

    def rows(self):
        return list(zip(self.lambdas.tolist(), self.weights.tolist()))


def norming_weights(wd, eigs, cross_check=True, h=1e-4, eig_tol=1e-6):
    """Weights ``1/||Phi(lambda_n)||^2`` with a residue cross-check.

    ``residue_weights`` holds ``W(Theta, u_+) / dW(Phi, u_+)/dz`` at each
    eigenvalue (minus the residue of ``M``), computed independently by a
    Richardson-extrapolated central difference.
    """
    lams = np.asarray(eigs, dtype=float)
    if lams.size == 0:
        return SpectralMeasureDiscrete(lams, lams, lams if cross_check else None)
    g = np.abs(eigenvalue_function(wd)(lams))
    if np.any(g > eig_tol):
        i = int(np.argmax(g))
        raise NotAnEigenvalue(f"lambda={lams[i]!r} is not an eigenvalue (|W|/norms = {g[i]:.2e})")
    phi = wd.system.phi(lams)
    norms = np.atleast_1d(l2_norm_sq(phi, wd.system.lo if not wd.pot.singular else 0.0, wd.pot.b))
    weights = 1.0 / norms
    res = None
    if cross_check:
        x = wd.x_eval
        wt, _, _, _ = wd.wronskians(lams, x)

        def wp(z):
            return wd.wronskians(z, x)[1]

        d1 = (wp(lams + h) - wp(lams - h)) / (2 * h)
        d2 = (wp(lams + h / 2) - wp(lams - h / 2)) / h
        deriv = (4 * d2 - d1) / 3
        res = np.real(wt / deriv)
    return SpectralMeasureDiscrete(lams, weights, res)


def residue(fn, z0, radius=0.1, n=32):
    """Residue of ``fn`` at ``z0`` by the trapezoidal rule on a circle."""
    theta = 2 * np.pi * (np.arange(n) + 0.5) / n
    zs = z0 + radius * np.exp(1j * theta)
    vals = np.asarray(fn(zs))
    return complex(np.mean(vals * (zs - z0)))


# ---------------------------------------------------------------------------
# Stieltjes inversion
# ---------------------------------------------------------------------------


@dataclass
class InversionResult:
    estimate: float
    integrals: list
    residual: float

    def __float__(self):
        return self.estimate


def _gauss_panels(l0, l1, width, order=10):
    npan = max(1, int(np.ceil((l1 - l0) / width)))
    edges = np.linspace(l0, l1, npan + 1)
    t, w = np.polynomial.legendre.leggauss(order)
    mid = 0.5 * (edges[1:] + edges[:-1])
    half = 0.5 * (edges[1:] - edges[:-1])
    x = (mid[:, None] + half[:, None] * t[None, :]).ravel()
    ww = (half[:, None] * w[None, :]).ravel()
    return x, ww


def _odd_extrapolate(eps, vals):
    """Value at 0 of the interpolant ``c0 + c1 e + c3 e^3 + ...`` through the data."""
    eps = np.asarray(eps, float)
    powers = [0] + [2 * k + 1 for k in range(len(eps) - 1)]
    V = np.array([[e**p for p in powers] for e in eps])
    return float(np.linalg.solve(V, np.asarray(vals, float))[0])


def stieltjes_inversion_check(wd, l0, l1, eps_list=(0.2, 0.1, 0.05, 0.025), threshold=1e-3, chunk=4096):
    """Estimate ``rho((l0, l1))`` from ``(1/pi) int Im M(lambda + i eps)``.

    For each ``eps`` the integral is computed by composite Gauss-Legendre
    quadrature on panels no wider than ``eps/2``; the values are then
    extrapolated to ``eps -> 0`` assuming an expansion in odd powers of
    ``eps``.  The residual is the change when the largest ``eps`` is
    dropped; above ``threshold`` :class:`SlowConvergence` is raised.
    """
    eps_list = [float(e) for e in eps_list]
    if len(eps_list) < 2 or any(e2 >= e1 for e1, e2 in zip(eps_list, eps_list[1:])):
        raise OutOfRange("eps_list must be decreasing with at least two entries")
    integrals = []
    for eps in eps_list:
        x, w = _gauss_panels(l0, l1, eps / 2)
        total = 0.0
        for s in range(0, len(x), chunk):
            m = wd.M(x[s : s + chunk] + 1j * eps, check_pole=False)
            total += np.sum(w[s : s + chunk] * np.imag(m))
        integrals.append(total / np.pi)
    est = _odd_extrapolate(eps_list, integrals)
    est_short = _odd_extrapolate(eps_list[1:], integrals[1:])
    residual = abs(est - est_short)
    if residual > threshold:
        raise SlowConvergence(f"extrapolation residual {residual:.2e} above {threshold:g}")
    return InversionResult(est, integrals, residual)


# ---------------------------------------------------------------------------
# gauge freedom and magnetic elimination
# ---------------------------------------------------------------------------


def gauge_transform_M(M, g, f, z):
    """``e^{-2g(z)} M(z) + e^{g(z)} f(z)``."""
    gz = g(z)
    return np.exp(-2 * gz) * M(z) + np.exp(gz) * f(z)


class GaugedSystem(FundamentalSystem):
    """Fundamental system matching :func:`gauge_transform_M`.

    ``Phi~ = e^g Phi`` and ``Theta~ = e^{-g} Theta - e^{2g} f Phi``, so that
    ``W(Theta~, Phi~) = 1`` and the Weyl function becomes
    ``e^{-2g} M + e^{g} f``.
    """

    def __init__(self, base, g, f):
        super().__init__(base.pot, base.tol)
        self.base = base
        self.normalization_tag = base.normalization_tag
        self.g = g
        self.f = f

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
        eg = np.asarray(np.exp(self.g(z)))[..., None]
        fz = eg * eg * np.asarray(self.f(z))[..., None]
        phi = FormulaTrace(lambda xf: eg * p(xf), [p], z, label="Phi")
        theta = FormulaTrace(lambda xf: t(xf) / eg - fz * p(xf), [p, t], z, label="Theta")
        return phi, theta

    def pair_at(self, z, x):
        (P, eP), (T, eT) = self.base.pair_at(z, x)
        eg = np.asarray(np.exp(self.g(z)))[..., None]
        fz = eg * eg * np.asarray(self.f(z))[..., None]
        P = apply_scale(P, eP[..., None])
        T = apply_scale(T, eT[..., None])
        zero = np.zeros(np.shape(z), dtype=np.int64)
        return (eg * P, zero), (T / eg - fz * P, zero)

    def phi_at(self, z, x):
        return self.pair_at(z, x)[0]

    def theta_at(self, z, x):
        return self.pair_at(z, x)[1]


def gauge_weyl_data(wd, g, f):
    """Weyl data of the gauged fundamental system (same ``u_+``)."""
    return WeylData(GaugedSystem(wd.system, g, f), wd.bc_at_b, wd.uplus_fn, wd.x_eval, wd.tol)


def magnetic_phase(pot, base=None):
    """``x -> exp(-i int_base^x q_mg)`` for the magnetic coefficient of ``pot``."""
    if not pot.has_magnetic:
        return lambda x: np.ones(np.shape(x), dtype=complex)
    base = pot.a if base is None else base
    lo = pot.a if not pot.singular else pot.a + 1e-9 * (pot.b - pot.a)
    breaks = np.unique(np.concatenate([np.linspace(lo, pot.b, 65), pot.knots(), [base]]))
    qm = pot.q_mg
    F = PanelIntegral(lambda x: np.asarray(qm(x), dtype=float), breaks)
    if not np.isfinite(F.total):
        raise NonIntegrableMagnetic("magnetic coefficient is not integrable")
    off = F(base)
    return lambda x: np.exp(-1j * (F(x) - off))


def eliminate_magnetic(pot, base=None):
    """Remove the magnetic coefficient by a scalar phase.

    A solution ``u~`` of the problem without ``q_mg`` yields the solution
    ``u = exp(-i int q_mg) u~`` of the original problem, so both operators
    have the same spectrum and the same Weyl function.

    Returns
    -------
    (PotentialSpec, callable)
        The reduced potential and the phase ``Gamma(x)``.
    """
    if not isinstance(pot, PotentialSpec):
        raise OutOfRange("magnetic elimination works on PotentialSpec")
    gamma = magnetic_phase(pot, base)
    return pot.replace(q_mg=None), gamma


# ---------------------------------------------------------------------------
# CSV helpers
# ---------------------------------------------------------------------------


def M_rows(zs, ms):
    return [(complex(z).real, complex(z).imag, complex(m).real, complex(m).imag) for z, m in zip(zs, ms)]


M_HEADER = ["re_z", "im_z", "re_M", "im_M"]
MEASURE_HEADER = ["lambda", "weight"]
