"""Piecewise Chebyshev quadrature on integrator panels.

Every trace carries breakpoints between which it is smooth (the accepted
integrator steps, or geometric panels inside a Frobenius disk).  Integrals
of products of traces are built here by interpolating the integrand at
Chebyshev-Lobatto points on each panel and integrating the interpolant, so
norms and the cumulative integrals that define commutation denominators
share one quadrature rule.
"""

from __future__ import annotations

import numpy as np
from numpy.polynomial import chebyshev as C

from .errors import OutOfRange

DEFAULT_DEGREE = 16


def _lobatto(n):
    return np.cos(np.pi * np.arange(n + 1) / n)


def _values_to_coeffs_matrix(n):
    j = np.arange(n + 1)
    M = np.cos(np.pi * np.outer(j, j) / n) * (2.0 / n)
    M[:, 0] *= 0.5
    M[:, -1] *= 0.5
    M[0, :] *= 0.5
    M[-1, :] *= 0.5
    return M


_MATRICES = {}


def _transform(n):
    if n not in _MATRICES:
        _MATRICES[n] = (_lobatto(n), _values_to_coeffs_matrix(n))
    return _MATRICES[n]


def clenshaw(t, coeffs):
    """Evaluate Chebyshev series with one coefficient set per point.

    ``coeffs`` has shape ``(npts, m, *batch)`` and ``t`` shape ``(npts,)``.
    """
    m = coeffs.shape[1]
    tt = t.reshape((-1,) + (1,) * (coeffs.ndim - 2))
    b1 = np.zeros_like(coeffs[:, 0])
    b2 = np.zeros_like(b1)
    for k in range(m - 1, 0, -1):
        b1, b2 = coeffs[:, k] + 2.0 * tt * b1 - b2, b1
    return coeffs[:, 0] + tt * b1 - b2


def refine_breaks(breaks, max_width=None):
    breaks = np.unique(np.asarray(breaks, dtype=float))
    if max_width is None or len(breaks) < 2:
        return breaks
    out = [breaks[:1]]
    for lo, hi in zip(breaks[:-1], breaks[1:]):
        k = max(1, int(np.ceil((hi - lo) / max_width)))
        out.append(np.linspace(lo, hi, k + 1)[1:])
    return np.concatenate(out)


class PanelIntegral:
    """Cumulative integral ``F(x) = int_{breaks[0]}^x f(y) dy``.

    Parameters
    ----------
    f : callable
        Vectorised integrand; ``f(x)`` returns an array whose leading axis
        matches ``x`` (trailing axes are batch dimensions).
    breaks : array_like
        Panel boundaries; ``f`` must be smooth inside every panel.
    degree : int
        Chebyshev degree per panel.
    """

    def __init__(self, f, breaks, degree=DEFAULT_DEGREE):
        self.breaks = refine_breaks(breaks)
        if len(self.breaks) < 2:
            raise OutOfRange("need at least one panel")
        self.f = f
        self.degree = degree
        nodes, T = _transform(degree)
        lo, hi = self.breaks[:-1], self.breaks[1:]
        self._mid = 0.5 * (lo + hi)
        self._half = 0.5 * (hi - lo)
        xs = self._mid[:, None] + self._half[:, None] * nodes[None, :]
        vals = np.asarray(f(xs.ravel()))
        batch = vals.shape[1:]
        vals = vals.reshape((len(lo), degree + 1) + batch)
        coeffs = np.tensordot(T, vals, axes=([1], [1]))  # (n+1, P, *batch)
        coeffs = np.moveaxis(coeffs, 0, 1)
        anti = C.chebint(coeffs, lbnd=-1, axis=1)
        anti = anti * self._half.reshape((-1, 1) + (1,) * len(batch))
        self._anti = anti
        totals = anti.sum(axis=1)  # T_k(1) = 1
        self._offsets = np.concatenate([np.zeros((1,) + batch, dtype=totals.dtype), np.cumsum(totals, axis=0)])
        # suffix sums: integral from the end of panel i to hi
        rev = np.cumsum(totals[::-1], axis=0)[::-1]
        self._suffix = np.concatenate([rev[1:], np.zeros((1,) + batch, dtype=totals.dtype)])
        self._panel_totals = totals
        self.batch_shape = batch

    @property
    def total(self):
        return self._offsets[-1]

    @property
    def lo(self):
        return self.breaks[0]

    @property
    def hi(self):
        return self.breaks[-1]

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        xf = np.atleast_1d(x).ravel()
        span = self.hi - self.lo
        if np.any(xf < self.lo - 1e-12 * span) or np.any(xf > self.hi + 1e-12 * span):
            raise OutOfRange(f"x outside [{self.lo}, {self.hi}]")
        idx = np.clip(np.searchsorted(self.breaks, xf, side="right") - 1, 0, len(self._mid) - 1)
        t = np.clip((xf - self._mid[idx]) / self._half[idx], -1.0, 1.0)
        out = self._offsets[idx] + clenshaw(t, self._anti[idx])
        return out.reshape(x.shape + self.batch_shape)

    def from_right(self, x):
        """``int_x^{hi} f``, accumulated from the right end.

        Avoids the cancellation of ``total - F(x)`` when the integrand is
        large near ``lo``.
        """
        x = np.asarray(x, dtype=float)
        xf = np.atleast_1d(x).ravel()
        span = self.hi - self.lo
        if np.any(xf < self.lo - 1e-12 * span) or np.any(xf > self.hi + 1e-12 * span):
            raise OutOfRange(f"x outside [{self.lo}, {self.hi}]")
        idx = np.clip(np.searchsorted(self.breaks, xf, side="right") - 1, 0, len(self._mid) - 1)
        t = np.clip((xf - self._mid[idx]) / self._half[idx], -1.0, 1.0)
        out = self._suffix[idx] + (self._panel_totals[idx] - clenshaw(t, self._anti[idx]))
        return out.reshape(x.shape + self.batch_shape)

    def between(self, c, d):
        return self(d) - self(c)

    def powerlaw_tail(self):
        """Estimate ``int_0^{lo} f`` assuming ``f ~ A x^alpha`` near zero."""
        x0 = self.lo
        f0 = np.asarray(self.f(np.array([x0])))[0]
        f1 = np.asarray(self.f(np.array([2.0 * x0])))[0]
        with np.errstate(all="ignore"):
            alpha = np.log2(np.abs(f1) / np.abs(f0))
            tail = np.where(np.abs(f0) > 0, x0 * f0 / (alpha + 1.0), 0.0)
        if np.any(alpha <= -1.0):
            raise OutOfRange("integrand is not integrable at 0")
        return tail


def integrate_panels(f, breaks, degree=DEFAULT_DEGREE):
    """Definite integral of ``f`` over ``[breaks[0], breaks[-1]]``."""
    return PanelIntegral(f, breaks, degree).total
