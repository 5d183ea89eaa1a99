"""Core numerics for the 2x2 Dirac system.

The differential expression

    tau u = (1/i) sigma_2 u' + Q(x) u,
    Q = q_el I + (q_am + kappa/x) sigma_1 + (m + q_sc) sigma_3 + q_mg sigma_2,

is integrated in the first-order form ``u' = J (z - Q) u`` with
``J = i sigma_2 = [[0, 1], [-1, 0]]``.  Written out, with
``p0 = q_el``, ``p1 = q_am + kappa/x``, ``p3 = m + q_sc``::

    u1' = -p1 u1 + (z - p0 + p3) u2        - i q_mg u1
    u2' = -(z - p0 - p3) u1 + p1 u2        - i q_mg u2

The integrator is an embedded 8(5,3) Dormand-Prince pair with its seventh
order dense output, vectorised over a batch of spectral parameters that
share one step grid.  Solutions for real ``z`` and real data are computed
in real arithmetic.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.integrate._ivp import dop853_coefficients as _dop

from .errors import EvaluationFailed, NonFiniteValue, OutOfRange, StepSizeUnderflow, ConfigError
from .expr import Expression
from .quadrature import PanelIntegral

DEFAULT_TOL = 1e-10

LABELS = ("Phi", "Theta", "UPlus", "Derived")

# ---------------------------------------------------------------------------
# coefficient functions
# ---------------------------------------------------------------------------


class Coefficient:
    """A real coefficient function of ``x``.

    Accepts a number, a vectorised callable, an inline expression string
    (see :mod:`diracweyl.expr`), or a table of ``(x, value)`` pairs that is
    interpolated linearly (constant extrapolation outside the table).
    """

    def __init__(self, value=0.0, *, name="coefficient"):
        self.name = name
        self.knots = None
        if isinstance(value, Coefficient):
            self._fn, self.knots, self.constant, self.source = value._fn, value.knots, value.constant, value.source
            return
        self.source = value
        self.constant = None
        if value is None:
            value = 0.0
        if isinstance(value, (int, float, np.floating, np.integer)):
            self.constant = float(value)
            c = self.constant
            self._fn = lambda x: c if np.ndim(x) == 0 else np.full(np.shape(x), c)
        elif isinstance(value, str):
            self._fn = Expression(value)
        elif callable(value):
            self._fn = value
        else:
            table = np.asarray(value, dtype=float)
            if table.ndim != 2 or table.shape[1] != 2 or len(table) < 2:
                raise ConfigError(f"{name}: table must have two columns and at least two rows")
            order = np.argsort(table[:, 0], kind="stable")
            xs, ys = table[order, 0], table[order, 1]
            if np.any(np.diff(xs) <= 0):
                raise ConfigError(f"{name}: table abscissae must be strictly increasing")
            self.knots = xs
            self._fn = lambda x, xs=xs, ys=ys: np.interp(x, xs, ys)
            self.source = table

    @classmethod
    def from_csv(cls, path, name="coefficient"):
        """Read a two-column ``x,value`` CSV file (an optional header row is skipped)."""
        rows = []
        try:
            with open(path, newline="") as fh:
                for lineno, row in enumerate(csv.reader(fh), start=1):
                    if not row or row[0].strip().startswith("#"):
                        continue
                    try:
                        rows.append((float(row[0]), float(row[1])))
                    except (ValueError, IndexError):
                        if rows:
                            raise ConfigError(f"{name}: bad table row in {path}", line=lineno)
        except OSError as exc:
            raise ConfigError(f"{name}: cannot read table {path}: {exc}")
        return cls(np.array(rows), name=name)

    @property
    def is_zero(self):
        return self.constant == 0.0

    def __call__(self, x):
        return self._fn(x)

    def __repr__(self):
        return f"Coefficient({self.source!r})"


def _as_coefficient(value, name):
    return value if isinstance(value, Coefficient) else Coefficient(value, name=name)


# ---------------------------------------------------------------------------
# potentials
# ---------------------------------------------------------------------------


class Potential:
    """Interface shared by all potentials the integrator understands.

    Subclasses provide ``a``, ``b``, ``kappa``, ``endpoint_a_kind`` and
    :meth:`coefficients`.  ``coefficients(x)`` returns ``(p0, p1, p3)``,
    the identity, sigma_1 and sigma_3 components of ``Q`` (``p1`` includes
    ``kappa/x``).  ``magnetic(x)`` returns the sigma_2 component or
    ``None`` when it is absent.
    """

    a: float
    b: float
    kappa: float = 0.0
    endpoint_a_kind: str = "regular"

    def coefficients(self, x):  # pragma: no cover - interface
        raise NotImplementedError

    def magnetic(self, x):
        return None

    @property
    def has_magnetic(self):
        return False

    @property
    def singular(self):
        return self.endpoint_a_kind == "singular_radial"

    def knots(self):
        """Abscissae where coefficients may have kinks (table nodes)."""
        return np.empty(0)

    def matrix(self, x):
        """The 2x2 potential matrix ``Q(x)`` (complex when magnetic)."""
        p0, p1, p3 = self.coefficients(x)
        Q = np.array([[p0 + p3, p1], [p1, p0 - p3]], dtype=complex)
        qm = self.magnetic(x)
        if qm is not None:
            Q += qm * np.array([[0, -1j], [1j, 0]])
        return Q


@dataclass
class PotentialSpec(Potential):
    """Coefficients of a Dirac operator on ``(a, b)``.

    Parameters
    ----------
    a, b : float
        Endpoints; ``b`` is finite and regular.
    mass : float
        Non-negative mass ``m``.
    q_el, q_sc, q_am : coefficient-like
        Electrostatic, scalar and anomalous magnetic moment coefficients.
    q_mg : coefficient-like or None
        Magnetic coefficient (multiplies sigma_2); ``None`` when absent.
    kappa : float
        Angular momentum; adds ``kappa/x`` to the sigma_1 part.
    endpoint_a_kind : {'regular', 'singular_radial'}
    """

    a: float = 0.0
    b: float = 1.0
    mass: float = 0.0
    q_el: object = 0.0
    q_sc: object = 0.0
    q_am: object = 0.0
    q_mg: object = None
    kappa: float = 0.0
    endpoint_a_kind: str = "regular"

    def __post_init__(self):
        self.a = float(self.a)
        self.b = float(self.b)
        self.mass = float(self.mass)
        self.kappa = float(self.kappa)
        if not (np.isfinite(self.a) and np.isfinite(self.b)) or self.b <= self.a:
            raise OutOfRange(f"need finite a < b, got a={self.a}, b={self.b}")
        if self.mass < 0:
            raise OutOfRange("mass must be non-negative")
        if self.endpoint_a_kind not in ("regular", "singular_radial"):
            raise OutOfRange(f"unknown endpoint kind {self.endpoint_a_kind!r}")
        if self.endpoint_a_kind == "singular_radial":
            if self.kappa < 0:
                raise OutOfRange("radial kappa must be non-negative (apply the sigma_2 gauge first)")
            if self.a != 0.0:
                raise OutOfRange("radial problems live on (0, b]")
        elif self.kappa != 0.0 and self.a <= 0.0:
            raise OutOfRange("kappa/x term requires a > 0 at a regular endpoint")
        self.q_el = _as_coefficient(self.q_el, "q_el")
        self.q_sc = _as_coefficient(self.q_sc, "q_sc")
        self.q_am = _as_coefficient(self.q_am, "q_am")
        if self.q_mg is not None:
            self.q_mg = _as_coefficient(self.q_mg, "q_mg")
            if self.q_mg.is_zero:
                self.q_mg = None
        self._check_sampled()

    def _check_sampled(self):
        lo = self.a + 1e-6 * (self.b - self.a) if self.singular else self.a
        xs = np.linspace(lo, self.b, 257)
        for name in ("q_el", "q_sc", "q_am", "q_mg"):
            c = getattr(self, name)
            if c is None:
                continue
            vals = np.asarray(c(xs), dtype=float)
            if not np.all(np.isfinite(vals)):
                raise OutOfRange(f"{name} is not finite on [{lo}, {self.b}]")

    @classmethod
    def free(cls, a=0.0, b=1.0, **kw):
        return cls(a=a, b=b, **kw)

    @classmethod
    def radial(cls, kappa, b=1.0, **kw):
        return cls(a=0.0, b=b, kappa=kappa, endpoint_a_kind="singular_radial", **kw)

    @property
    def has_magnetic(self):
        return self.q_mg is not None

    @property
    def is_free(self):
        return (
            self.mass == 0.0
            and self.q_el.is_zero
            and self.q_sc.is_zero
            and self.q_am.is_zero
            and self.q_mg is None
        )

    def knots(self):
        ks = [c.knots for c in (self.q_el, self.q_sc, self.q_am, self.q_mg) if c is not None and c.knots is not None]
        if not ks:
            return np.empty(0)
        k = np.unique(np.concatenate(ks))
        return k[(k > self.a) & (k < self.b)]

    def regular_coefficients(self, x):
        """``(p0, p1, p3)`` without the ``kappa/x`` term."""
        return self.q_el(x), self.q_am(x), self.mass + self.q_sc(x)

    def coefficients(self, x):
        p0, p1, p3 = self.regular_coefficients(x)
        if self.kappa != 0.0:
            p1 = p1 + self.kappa / x
        return p0, p1, p3

    def magnetic(self, x):
        return None if self.q_mg is None else self.q_mg(x)

    def replace(self, **changes):
        fields = dict(
            a=self.a, b=self.b, mass=self.mass, q_el=self.q_el, q_sc=self.q_sc, q_am=self.q_am,
            q_mg=self.q_mg, kappa=self.kappa, endpoint_a_kind=self.endpoint_a_kind,
        )
        fields.update(changes)
        return PotentialSpec(**fields)


# ---------------------------------------------------------------------------
# solution traces
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WronskianValue:
    value: complex
    x: float

    def __complex__(self):
        return complex(self.value)


def apply_scale(v, e):
    """``v * 2**e`` without the NaNs complex multiplication makes on overflow."""
    e = np.asarray(e)
    if not np.any(e != 0):
        return v
    with np.errstate(over="ignore", under="ignore"):
        if np.iscomplexobj(v):
            return np.ldexp(v.real, e) + 1j * np.ldexp(v.imag, e)
        return np.ldexp(v, e)


class SolutionTrace:
    """A solution ``u(z, .)`` of ``tau u = z u`` available by dense evaluation.

    Calling a trace with abscissae ``x`` returns an array of shape
    ``x.shape + zshape + (2,)``.  ``breaks`` are the panel boundaries
    between which the trace is smooth; ``grid``/``values`` expose them as
    a sampled solution.
    """

    label = "Derived"

    def __init__(self, z, lo, hi, breaks, label="Derived"):
        self.z = np.asarray(z)
        self.zshape = self.z.shape
        self.lo = float(lo)
        self.hi = float(hi)
        self.breaks = np.asarray(breaks, dtype=float)
        if label not in LABELS:
            raise ValueError(f"unknown label {label!r}")
        self.label = label

    # subclasses implement _eval_scaled(xf) -> (values (n,)+zshape+(2,), exps (n,)+zshape)
    def _eval_scaled(self, xf):  # pragma: no cover - interface
        raise NotImplementedError

    def _check(self, xf):
        slack = 1e-12 * max(1.0, abs(self.hi - self.lo))
        if np.any(xf < self.lo - slack) or np.any(xf > self.hi + slack):
            raise OutOfRange(f"x outside trace domain [{self.lo}, {self.hi}]")

    def scaled(self, x):
        """Return ``(v, e)`` with ``u(x) = v * 2**e`` (``e`` is per point and z)."""
        x = np.asarray(x, dtype=float)
        xf = np.atleast_1d(x).ravel()
        self._check(xf)
        v, e = self._eval_scaled(xf)
        return v.reshape(x.shape + self.zshape + (2,)), e.reshape(x.shape + self.zshape)

    def __call__(self, x):
        v, e = self.scaled(x)
        return apply_scale(v, e[..., None])

    @property
    def grid(self):
        return self.breaks

    @property
    def values(self):
        return self(self.grid)

    @property
    def is_real(self):
        return not np.iscomplexobj(self(self.breaks[:1]))

    def derivative(self, x):
        """``u'(x)``; generic fallback by a fourth-order central difference."""
        x = np.asarray(x, dtype=float)
        h = 1e-3 * max(1.0, self.hi - self.lo) * 1e-1
        xs = np.clip(x, self.lo + 2 * h, self.hi - 2 * h)
        return (-self(xs + 2 * h) + 8 * self(xs + h) - 8 * self(xs - h) + self(xs - 2 * h)) / (12 * h)

    def head_product_integral(self, other, c, lo, conj=False):
        """``int_c^lo u^T v`` below the first panel break; overridden by series traces."""
        if c < self.lo:
            raise OutOfRange(f"cannot integrate below x={self.lo}")
        return default_head_integral(self, other, c, lo, conj)


class IntegratedTrace(SolutionTrace):
    """Dense output of one batched integration run."""

    def __init__(self, z, nodes, node_vals, node_exps, t_old, h, y_old, F, exps, label, pot=None, zshape=None):
        lo, hi = nodes[0], nodes[-1]
        super().__init__(z, lo, hi, nodes, label)
        if zshape is not None:
            self.zshape = zshape
        self.pot = pot
        self._node_vals = node_vals
        self._node_exps = node_exps
        self._t_old = t_old
        self._h = h
        self._y_old = y_old
        self._F = F
        self._exps = exps
        self._mono = None

    @property
    def nsteps(self):
        return len(self._h)

    def _index(self, xf):
        return np.clip(np.searchsorted(self.breaks, xf, side="right") - 1, 0, self.nsteps - 1)

    def _eval_scaled(self, xf):
        idx = self._index(xf)
        t = (xf - self._t_old[idx]) / self._h[idx]
        F = self._F
        tt = t.reshape((-1, 1, 1))
        y = np.zeros((len(xf),) + F.shape[2:], dtype=F.dtype)
        for i in range(F.shape[1]):
            y += F[idx, F.shape[1] - 1 - i]
            if i % 2 == 0:
                y *= tt
            else:
                y *= 1.0 - tt
        y += self._y_old[idx]
        e = self._exps[idx]
        return y.reshape((len(xf),) + self.zshape + (2,)), e.reshape((len(xf),) + self.zshape)

    @property
    def values(self):
        v = self._node_vals
        e = self._node_exps
        v = apply_scale(v, e[..., None])
        return v.reshape((len(self.breaks),) + self.zshape + (2,))

    def _monomials(self):
        if self._mono is None:
            F = self._F
            n = F.shape[1]
            P = np.zeros((F.shape[0], n + 1) + F.shape[2:], dtype=F.dtype)
            for i in range(n):
                P[:, 0] += F[:, n - 1 - i]
                shifted = np.zeros_like(P)
                shifted[:, 1:] = P[:, :-1]
                P = shifted if i % 2 == 0 else P - shifted
            self._mono = P
        return self._mono

    def derivative(self, x):
        x = np.asarray(x, dtype=float)
        xf = np.atleast_1d(x).ravel()
        self._check(xf)
        idx = self._index(xf)
        t = (xf - self._t_old[idx]) / self._h[idx]
        P = self._monomials()
        tt = t.reshape((-1, 1, 1))
        d = np.zeros((len(xf),) + P.shape[2:], dtype=P.dtype)
        for k in range(P.shape[1] - 1, 0, -1):
            d = d * tt + k * P[idx, k]
        d = d / self._h[idx].reshape((-1, 1, 1))
        e = self._exps[idx]
        d = apply_scale(d, e[..., None])
        return d.reshape(x.shape + self.zshape + (2,))

    def take(self, idx, zshape=None):
        """Sub-batch ``idx`` of a 1-D batch, reshaped to ``zshape``."""
        idx = np.atleast_1d(np.asarray(idx))
        zshape = (len(idx),) if zshape is None else tuple(zshape)
        z = np.atleast_1d(self.z).ravel()[idx].reshape(zshape)
        return IntegratedTrace(
            z, self.breaks, self._node_vals[:, idx], self._node_exps[:, idx], self._t_old, self._h,
            self._y_old[:, idx], self._F[:, :, idx], self._exps[:, idx], self.label, self.pot, zshape=zshape,
        )

    def select(self, i):
        """The trace of batch member ``i`` (requires a 1-D batch)."""
        return self.take([i], ())

    def members(self):
        return [self.select(i) for i in range(np.atleast_1d(self.z).size)]


class FormulaTrace(SolutionTrace):
    """A trace defined by a closed formula in terms of other traces.

    Parameters
    ----------
    fn : callable
        ``fn(x)`` for a 1-D array ``x`` returns shape ``(len(x),) + zshape + (2,)``.
    parts : sequence of SolutionTrace
        Traces the formula is built from; the domain is the intersection
        of theirs and the breaks their union.
    """

    def __init__(self, fn, parts, z, label="Derived", lo=None, hi=None, extra_breaks=(), head=None, dfn=None):
        parts = list(parts)
        lo_ = max(p.lo for p in parts) if parts else lo
        hi_ = min(p.hi for p in parts) if parts else hi
        lo = lo_ if lo is None else max(lo, lo_) if parts else lo
        hi = hi_ if hi is None else min(hi, hi_) if parts else hi
        first = max((p.breaks[0] for p in parts), default=lo)
        ends = [lo, hi] if lo >= first else [hi]
        br = np.concatenate([p.breaks for p in parts] + [np.asarray(extra_breaks, float), ends])
        br = np.unique(br[(br >= max(lo, first)) & (br <= hi)])
        super().__init__(z, lo, hi, br, label)
        self.fn = fn
        self.parts = parts
        self._head = head
        self._dfn = dfn

    def _eval_scaled(self, xf):
        v = np.asarray(self.fn(xf))
        return v, np.zeros(v.shape[:-1], dtype=np.int64)

    def derivative(self, x):
        if self._dfn is None:
            return super().derivative(x)
        x = np.asarray(x, dtype=float)
        xf = np.atleast_1d(x).ravel()
        return np.asarray(self._dfn(xf)).reshape(x.shape + self.zshape + (2,))

    def head_product_integral(self, other, c, lo, conj=False):
        if self._head is None:
            return super().head_product_integral(other, c, lo, conj)
        return self._head(other, c, lo, conj)


def constant_trace(value, z, lo, hi, label="Derived"):
    value = np.asarray(value)
    zshape = np.shape(z)

    def fn(xf):
        return np.broadcast_to(value, (len(xf),) + zshape + (2,)).copy()

    return FormulaTrace(fn, [], z, label=label, lo=lo, hi=hi)


# ---------------------------------------------------------------------------
# the integrator
# ---------------------------------------------------------------------------

_N = _dop.N_STAGES
_A = _dop.A[:_N, :_N]
_B = _dop.B
_C = _dop.C[:_N]
_E3 = _dop.E3
_E5 = _dop.E5
_A_EXTRA = _dop.A[_N + 1 :]
_C_EXTRA = _dop.C[_N + 1 :]
_D = _dop.D

SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 10.0
_ERR_EXP = -1.0 / 8.0
_RESCALE_HI = 2.0**400
_RESCALE_LO = 2.0**-400


def _make_rhs(pot, z):
    """Right-hand side for a batch ``z`` of shape ``(B,)``; state ``(B, 2)``.

    Returns ``(coeffs, rhs)``: ``coeffs(xs)`` tabulates the potential at
    several abscissae in one vectorised call (rows ``p0, p1, p3, q_mg``)
    and ``rhs(c, y, out)`` applies one column of that table.  The
    coefficients do not depend on ``u``, so all stage abscissae of a step
    are evaluated together.
    """
    zz = z
    has_mg = pot.has_magnetic

    def coeffs(xs):
        xs = np.asarray(xs, dtype=float)
        p0, p1, p3 = pot.coefficients(xs)
        qm = pot.magnetic(xs) if has_mg else 0.0
        return np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (p0, p1, p3, qm)), xs)[:4]

    def rhs(c, y, out):
        p0, p1, p3, qm = c
        zp = zz - p0
        out[:, 0] = -p1 * y[:, 0] + (zp + p3) * y[:, 1]
        out[:, 1] = -(zp - p3) * y[:, 0] + p1 * y[:, 1]
        if has_mg:
            out -= 1j * qm * y
        return out

    return coeffs, rhs


def _col(table, i):
    return (table[0][i], table[1][i], table[2][i], table[3][i])


def _initial_step(pot, z, x0, x1):
    p0, p1, p3 = pot.coefficients(x0)
    scale = 1.0 + np.max(np.abs(z)) + abs(p0) + abs(p1) + abs(p3)
    return min(abs(x1 - x0), 0.05 / scale)


def integrate(pot, z, x0, u0, x1, tol=DEFAULT_TOL, *, label="Derived", max_steps=1_000_000, first_step=None):
    """Integrate ``tau u = z u`` from ``u(x0) = u0`` to ``x1``.

    Parameters
    ----------
    pot : Potential
    z : complex or array_like
        Spectral parameter(s).  A 1-D array integrates a batch on a common
        step grid; the returned trace then has ``zshape == z.shape``.
    x0, x1 : float
        Start and end; either direction is allowed.
    u0 : array_like
        Initial value, shape ``(2,)`` or ``z.shape + (2,)``.
    tol : float
        Relative local error per step (per batch member, vector norm).

    Returns
    -------
    IntegratedTrace
    """
    if tol <= 0:
        raise OutOfRange("tol must be positive")
    x0 = float(x0)
    x1 = float(x1)
    span = pot.b - pot.a
    for xx in (x0, x1):
        if xx < pot.a - 1e-12 * span or xx > pot.b + 1e-12 * span:
            raise OutOfRange(f"x={xx} outside [{pot.a}, {pot.b}]")
    if pot.singular and min(x0, x1) <= pot.a:
        raise OutOfRange("cannot integrate up to the singular endpoint")
    z = np.asarray(z)
    zshape = z.shape
    zb = np.atleast_1d(z).ravel()
    nb = zb.size
    u0 = np.asarray(u0)
    y = np.broadcast_to(u0, zshape + (2,)).reshape(nb, 2)
    real = np.isrealobj(zb) or np.all(np.imag(zb) == 0)
    real = real and (np.isrealobj(u0) or np.all(np.imag(u0) == 0)) and not pot.has_magnetic
    dtype = float if real else complex
    zb = zb.real.astype(float) if real else zb.astype(complex)
    y = (y.real if real else y).astype(dtype).copy()
    if x0 == x1:
        raise OutOfRange("x0 == x1")
    coeffs, rhs = _make_rhs(pot, zb)

    direction = 1.0 if x1 > x0 else -1.0
    h_abs = first_step if first_step is not None else _initial_step(pot, zb, x0, x1)
    knots = pot.knots()
    knots = knots[(knots - x0) * direction > 0]
    knots = knots[(x1 - knots) * direction > 0]
    knots = np.sort(knots)[:: int(direction)]
    stops = list(knots) + [x1]

    K = np.empty((_N + 4, nb, 2), dtype=dtype)
    exps = np.zeros(nb, dtype=np.int64)
    t = x0
    f = rhs(_col(coeffs(np.array([t])), 0), y, np.empty_like(y))

    xs = [t]
    node_vals = [y.copy()]
    node_exps = [exps.copy()]
    t_olds, hs, y_olds, Fs, step_exps = [], [], [], [], []

    stop_i = 0
    rejected = False
    steps = 0
    while stop_i < len(stops):
        target = stops[stop_i]
        min_step = 10 * np.abs(np.nextafter(t, direction * np.inf) - t)
        if h_abs < min_step:
            raise StepSizeUnderflow(f"step size underflow at x={t}")
        h = h_abs * direction
        t_new = t + h
        hit = (t_new - target) * direction >= 0
        if hit:
            t_new = target
            h = t_new - t
        h_eff = abs(h)
        # stages: the potential at every stage abscissa in one call
        table = coeffs(np.concatenate([t + _C[1:] * h, [t_new], t + _C_EXTRA * h]))
        K[0] = f
        for s in range(1, _N):
            dy = np.tensordot(_A[s, :s], K[:s], axes=1) * h
            rhs(_col(table, s - 1), y + dy, K[s])
        y_new = y + h * np.tensordot(_B, K[:_N], axes=1)
        rhs(_col(table, _N - 1), y_new, K[_N])
        # error estimate, relative per member
        ny = np.maximum(np.linalg.norm(y, axis=1), np.linalg.norm(y_new, axis=1))
        ny = np.maximum(ny, 1e-300)
        err5 = np.tensordot(_E5, K[: _N + 1], axes=1)
        err3 = np.tensordot(_E3, K[: _N + 1], axes=1)
        e5 = np.sum(np.abs(err5) ** 2, axis=1) / (tol * ny) ** 2
        e3 = np.sum(np.abs(err3) ** 2, axis=1) / (tol * ny) ** 2
        denom = e5 + 0.01 * e3
        with np.errstate(invalid="ignore", divide="ignore"):
            errs = np.where(denom > 0, h_eff * e5 / np.sqrt(denom * 2.0), 0.0)
        err = float(np.max(errs))
        if not np.isfinite(err) or not np.all(np.isfinite(y_new)):
            if not np.all(np.isfinite(y)):
                raise NonFiniteValue(f"non-finite solution at x={t}")
            h_abs *= MIN_FACTOR
            rejected = True
            steps += 1
            if steps > max_steps:
                raise NonFiniteValue("non-finite values persisted")
            continue
        if err < 1.0:
            factor = MAX_FACTOR if err == 0 else min(MAX_FACTOR, SAFETY * err**_ERR_EXP)
            if rejected:
                factor = min(1.0, factor)
            # dense output
            for j, (s, a) in enumerate(zip(range(_N + 1, _N + 1 + len(_A_EXTRA)), _A_EXTRA)):
                dy = np.tensordot(a[:s], K[:s], axes=1) * h
                rhs(_col(table, _N + j), y + dy, K[s])
            F = np.empty((7, nb, 2), dtype=dtype)
            dlt = y_new - y
            F[0] = dlt
            F[1] = h * K[0] - dlt
            F[2] = 2 * dlt - h * (K[_N] + K[0])
            F[3:] = h * np.tensordot(_D, K, axes=1)
            t_olds.append(t)
            hs.append(h)
            y_olds.append(y.copy())
            Fs.append(F)
            step_exps.append(exps.copy())
            f = K[_N].copy()
            y = y_new
            # power-of-two rescaling per member
            mag = np.max(np.abs(y), axis=1)
            big = (mag > _RESCALE_HI) | ((mag < _RESCALE_LO) & (mag > 0))
            if np.any(big):
                k = np.zeros(nb, dtype=np.int64)
                k[big] = np.frexp(mag[big])[1]
                sc = np.exp2(-k.astype(float))[:, None]
                y = y * sc
                f = f * sc
                exps = exps + k
            t = t_new
            xs.append(t)
            node_vals.append(y.copy())
            node_exps.append(exps.copy())
            h_abs = max(h_abs, h_eff * factor) if hit else h_eff * factor
            rejected = False
            if hit:
                stop_i += 1
        else:
            h_abs = h_eff * max(MIN_FACTOR, SAFETY * err**_ERR_EXP)
            rejected = True
        steps += 1
        if steps > max_steps:
            raise StepSizeUnderflow("maximum number of steps exceeded")

    xs = np.array(xs)
    t_olds = np.array(t_olds)
    hs = np.array(hs)
    y_olds = np.array(y_olds)
    Fs = np.array(Fs)
    step_exps = np.array(step_exps)
    node_vals = np.array(node_vals)
    node_exps = np.array(node_exps)
    if direction < 0:
        xs = xs[::-1]
        node_vals = node_vals[::-1]
        node_exps = node_exps[::-1]
        t_olds, hs, y_olds, Fs, step_exps = t_olds[::-1], hs[::-1], y_olds[::-1], Fs[::-1], step_exps[::-1]
    return IntegratedTrace(
        z, xs, node_vals, node_exps, t_olds, hs, y_olds, Fs, step_exps, label, pot, zshape=zshape
    )


def ode_residual(trace, pot, x):
    """Relative residual ``|u' - J(z - Q)u| / (1 + |u|)`` at ``x`` (max over z)."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    u = trace(x)
    du = trace.derivative(x)
    z = trace.z
    out = np.empty_like(du, dtype=complex)
    for i, xi in enumerate(x):
        p0, p1, p3 = pot.coefficients(xi)
        zp = z - p0
        ui = u[i]
        out[i, ..., 0] = -p1 * ui[..., 0] + (zp + p3) * ui[..., 1]
        out[i, ..., 1] = -(zp - p3) * ui[..., 0] + p1 * ui[..., 1]
        qm = pot.magnetic(xi)
        if qm is not None:
            out[i] -= 1j * qm * ui
    res = np.linalg.norm(du - out, axis=-1) / (1.0 + np.linalg.norm(u, axis=-1))
    return float(np.max(res))


# ---------------------------------------------------------------------------
# Wronskians, norms, z-derivatives
# ---------------------------------------------------------------------------


def wronskian_scaled(u, v, x):
    """Return ``(w, e)`` with ``W_x(u, v) = w * 2**e``."""
    uu, eu = u.scaled(x)
    vv, ev = v.scaled(x)
    w = uu[..., 0] * vv[..., 1] - uu[..., 1] * vv[..., 0]
    return w, eu + ev


def wronskian(u, v, x):
    """``W_x(u, v) = u1(x) v2(x) - u2(x) v1(x)``.

    Returns a :class:`WronskianValue` for scalar ``x`` and a plain array
    otherwise.
    """
    w, e = wronskian_scaled(u, v, x)
    w = apply_scale(w, e)
    if np.ndim(x) == 0:
        return WronskianValue(w[()] if np.ndim(w) == 0 else w, float(x))
    return w


def _panel_breaks(traces, c, d):
    br = np.concatenate([t.breaks for t in traces] + [[c, d]])
    return np.unique(br[(br >= c) & (br <= d)])


def product_integral(u, v, c, d, conj=False):
    """``int_c^d u^T v dx`` (``u^H v`` when ``conj``), panel quadrature on dense output.

    Below the first panel break (inside a Frobenius disk) the traces'
    :meth:`SolutionTrace.head_product_integral` is used.
    """
    if c > d:
        return -product_integral(u, v, d, c, conj)
    span = max(1.0, abs(d))
    if c < max(u.lo, v.lo) - 1e-12 * span or d > min(u.hi, v.hi) + 1e-12 * span:
        raise OutOfRange("integration range exceeds trace domain")
    start = max(u.breaks[0], v.breaks[0])
    head = 0.0
    if c < start:
        head = u.head_product_integral(v, c, min(start, d), conj)
        c = min(start, d)

    def integrand(x):
        a = u(x)
        b = v(x)
        if conj:
            a = np.conj(a)
        return np.sum(a * b, axis=-1)

    br = _panel_breaks([u, v], c, d)
    if len(br) < 2 or c >= d:
        return head
    return PanelIntegral(integrand, br).total + head


def _pair_integrand(u, v, conj):
    def integrand(x):
        a = u(x)
        if conj:
            a = np.conj(a)
        return np.sum(a * v(x), axis=-1)

    return integrand


def default_head_integral(u, v, c, lo, conj=False):
    """``int_c^lo u^T v`` for traces evaluable below their first break.

    For ``c > 0`` geometric panels are used; for ``c = 0`` the integrand is
    assumed to follow a power law below the smallest panel, whose integral
    is added in closed form.
    """
    f = _pair_integrand(u, v, conj)
    if np.ndim(c) > 0:
        c = np.asarray(c, dtype=float)
        if not np.all(c > 0):
            raise ValueError("vectorised head integrals need c > 0")
        cmin = float(np.min(c))
        k = max(1, int(np.ceil(np.log2(lo / cmin))))
        br = np.unique(np.concatenate([[cmin], cmin * 2.0 ** np.arange(1, k), [lo]]))
        return PanelIntegral(f, br[br <= lo]).from_right(c)
    if c > 0:
        k = max(1, int(np.ceil(np.log2(lo / c))))
        br = np.unique(np.concatenate([[c], c * 2.0 ** np.arange(1, k), [lo]]))
        return PanelIntegral(f, br[br <= lo]).total
    if lo <= 0:
        return 0.0
    x0 = lo * 2.0**-10
    br = x0 * 2.0 ** np.arange(0, 11)
    br[-1] = lo
    P = PanelIntegral(f, br)
    return P.total + P.powerlaw_tail()


def l2_norm_sq(u, c=None, d=None, tol=DEFAULT_TOL):
    """``int_c^d |u1|^2 + |u2|^2 dx``.

    ``c`` below the trace's panel range is allowed for traces that know
    their behaviour near a singular endpoint (Frobenius traces).
    """
    c = u.lo if c is None else float(c)
    d = u.hi if d is None else float(d)
    return np.real(product_integral(u, u, c, d, conj=True))


def z_derivative(f, z, h=None, method="auto"):
    """Derivative of ``f`` with respect to the spectral parameter.

    For real ``z`` and ``method`` in ``{'auto', 'complex_step'}`` the
    complex step ``Im f(z + ih) / h`` is used (``f`` must be real for real
    arguments and analytic).  Otherwise a central difference with one
    Richardson extrapolation step is used.  ``f`` may return numbers,
    arrays or :class:`SolutionTrace` objects; traces yield a derivative
    trace.
    """
    z = complex(z)
    use_cs = method == "complex_step" or (method == "auto" and z.imag == 0.0)
    try:
        if use_cs:
            hh = 1e-20 * max(1.0, abs(z)) if h is None else h
            val = f(z.real + 1j * hh)
            return _combine([val], lambda vs: np.imag(vs[0]) / hh, z)
        hh = 1e-3 * max(1.0, abs(z)) if h is None else h
        vals = [f(z + hh), f(z - hh), f(z + hh / 2), f(z - hh / 2)]
    except (ArithmeticError, ValueError) as exc:
        raise EvaluationFailed(f"evaluation failed near z={z}: {exc}") from exc

    def central(vs):
        d1 = (vs[0] - vs[1]) / (2 * hh)
        d2 = (vs[2] - vs[3]) / hh
        return (4 * d2 - d1) / 3

    return _combine(vals, central, z)


def _combine(vals, op, z):
    if isinstance(vals[0], SolutionTrace):
        traces = vals
        return FormulaTrace(lambda xf: op([t(xf) for t in traces]), traces, z, label="Derived")
    return op([np.asarray(v) if not np.isscalar(v) else v for v in vals])


def export_trace_csv(trace, path, x=None):
    """Write ``x, re_u1, im_u1, re_u2, im_u2`` rows (scalar-z traces)."""
    x = trace.grid if x is None else np.asarray(x, dtype=float)
    vals = trace(x)
    if vals.ndim != 2:
        raise OutOfRange("export needs a trace at a single z")
    from .cli import write_csv  # local import to avoid a cycle

    rows = [(xi, v[0].real, v[0].imag, v[1].real, v[1].imag) for xi, v in zip(x, np.asarray(vals, dtype=complex))]
    return write_csv(path, ["x", "re_u1", "im_u1", "re_u2", "im_u2"], rows)
