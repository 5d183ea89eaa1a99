"""Command-line front end: configuration, task pipelines and output files.

Usage::

    diracweyl eigs --config problem.yaml --out results/
    diracweyl reduce --kappa 1.3 --window -0.5 30 --out results/

A configuration is a YAML file::

    problem:
      a: 0.0
      b: 1.0
      mass: 0.0
      q_el: "0.5*sin(x)"        # number, expression, or {table: path.csv}
      kappa: 0.0
      endpoint_a: regular       # or singular_radial
      bc_at_b: [0.0, 1.0]
    task: eigs
    params:
      window: [-10.0, 10.0]
    tol: 1.0e-10

Every task writes CSV/JSON artifacts and a ``report.json`` listing the
invariant checks that were run (name, residual, tolerance, pass/fail).
Exit status: 0 ok, 1 configuration error, 2 numerical failure, 3 failed
invariant.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import yaml

from .commute import (
    commute_left_phi,
    commute_left_phi_infinite,
    commute_right_theta,
    parse_gamma,
    spectral_bookkeeping,
)
from .errors import ConfigError, DiracError, InvalidGamma, IoError, OutOfRange, TaskError
from .ode import DEFAULT_TOL, Coefficient, PotentialSpec, ode_residual, wronskian
from .radial import (
    DEFAULT_WINDOW,
    RadialSystem,
    assemble_M,
    default_chooser,
    fixed_chooser,
    herglotz_check,
    iterate_reduction,
    measure_factorization_check,
    nevanlinna_index,
    reduction_step_count,
)
from .weyl import (
    M_HEADER,
    MEASURE_HEADER,
    WeylData,
    build_fundamental_system,
    check_wronskian_constancy,
    eigenvalues,
    norming_weights,
    stieltjes_inversion_check,
)

TASKS = ("solve", "weyl", "eigs", "commute", "reduce", "check")
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_INVARIANT = 0, 1, 2, 3
FLOAT_FORMAT = "%.17g"

PLOT_HEADERS = {
    "M_on_line": M_HEADER,
    "potential": ["x", "p0", "p1", "p3", "q_mg"],
    "trace": ["x", "re_u1", "im_u1", "re_u2", "im_u2"],
    "measure": MEASURE_HEADER,
}


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------


def _fmt(v):
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return FLOAT_FORMAT % float(v)


def write_csv(path, header, rows):
    """Write ``rows`` under ``header`` with 17 significant digits."""
    try:
        d = os.path.dirname(os.path.abspath(path))
        os.makedirs(d, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(v) for v in row])
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    return path


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, complex):
        return [o.real, o.imag]
    raise TypeError(f"not serialisable: {type(o)}")


def _float_repr(o):
    """Recursively convert floats to 17-digit strings-as-numbers for stable JSON."""
    if isinstance(o, dict):
        return {k: _float_repr(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_float_repr(v) for v in o]
    if isinstance(o, (float, np.floating)):
        f = float(o)
        if not np.isfinite(f):
            return "inf" if f > 0 else ("-inf" if f < 0 else "nan")
        return float(FLOAT_FORMAT % f)
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.ndarray):
        return _float_repr(o.tolist())
    return o


def write_json(path, obj):
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w") as fh:
            json.dump(_float_repr(obj), fh, indent=2, sort_keys=True, default=_json_default)
            fh.write("\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    return path


def emit_plot_data(samples, kind, path):
    """Write plot-ready CSV data.

    Parameters
    ----------
    samples : sequence
        ``M_on_line``: ``(z, M)`` pairs; ``potential``: ``(x, p0, p1, p3, q_mg)``;
        ``trace``: ``(x, u)`` with ``u`` a complex 2-vector; ``measure``:
        ``(lambda, weight)`` pairs (sorted by ``lambda`` on output).
    kind : {'M_on_line', 'potential', 'trace', 'measure'}
    path : str

    Returns
    -------
    str
        The path written.
    """
    if kind not in PLOT_HEADERS:
        raise IoError(f"unknown plot kind {kind!r}")
    samples = list(samples)
    if not samples:
        raise IoError("no samples to write")
    if kind == "M_on_line":
        rows = [(complex(z).real, complex(z).imag, complex(m).real, complex(m).imag) for z, m in samples]
    elif kind == "trace":
        rows = []
        for x, u in samples:
            u = np.asarray(u, dtype=complex)
            rows.append((float(x), u[0].real, u[0].imag, u[1].real, u[1].imag))
    elif kind == "measure":
        rows = sorted((float(l), float(w)) for l, w in samples)
    else:
        rows = [tuple(float(v) for v in s) for s in samples]
    return write_csv(path, PLOT_HEADERS[kind], rows)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def _line_index(text):
    """Map key paths to 1-based line numbers in a YAML document."""
    lines = {}
    try:
        node = yaml.compose(text)
    except yaml.YAMLError:
        return lines

    def walk(n, path):
        if isinstance(n, yaml.MappingNode):
            for k, v in n.value:
                p = path + (k.value,)
                lines[p] = k.start_mark.line + 1
                walk(v, p)

    if node is not None:
        walk(node, ())
    return lines


@dataclass
class RunConfig:
    """A validated run description."""

    problem: dict
    task: str
    params: dict = field(default_factory=dict)
    out: str = "out"
    tol: float = DEFAULT_TOL
    jobs: int = 1
    seed: int = 0
    base_dir: str = "."
    lines: dict = field(default_factory=dict)

    def line(self, *path):
        return self.lines.get(tuple(path))

    def error(self, message, *path):
        return ConfigError(message, field=".".join(path) if path else None, line=self.line(*path))

    # factories ---------------------------------------------------------
    @classmethod
    def from_text(cls, text, base_dir=".", overrides=None, validate=True):
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            raise ConfigError(f"malformed configuration: {exc}", line=None if mark is None else mark.line + 1)
        if not isinstance(data, dict):
            raise ConfigError("configuration must be a mapping")
        cfg = cls(
            problem=data.get("problem") or {},
            task=data.get("task", ""),
            params=data.get("params") or {},
            out=(data.get("output") or {}).get("dir", "out") if isinstance(data.get("output"), dict) else "out",
            tol=data.get("tol", DEFAULT_TOL),
            base_dir=base_dir,
            lines=_line_index(text),
        )
        for k, v in (overrides or {}).items():
            if v is not None:
                setattr(cfg, k, v)
        if validate:
            cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path, overrides=None, validate=True):
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read configuration {path}: {exc}")
        return cls.from_text(text, os.path.dirname(os.path.abspath(path)), overrides, validate)

    # validation ----------------------------------------------------------
    def validate(self):
        if self.task not in TASKS:
            raise self.error(f"task must be one of {TASKS}, got {self.task!r}", "task")
        if not isinstance(self.problem, dict):
            raise self.error("problem must be a mapping", "problem")
        if not isinstance(self.params, dict):
            raise self.error("params must be a mapping", "params")
        try:
            self.tol = float(self.tol)
        except (TypeError, ValueError):
            raise self.error(f"tol must be a number, got {self.tol!r}", "tol")
        if not 0 < self.tol < 1:
            raise self.error("tol must lie in (0, 1)", "tol")
        for name in ("q_el", "q_sc", "q_am", "q_mg"):
            v = self.problem.get(name)
            if isinstance(v, dict) and "table" in v:
                p = self._path(v["table"])
                if not os.path.exists(p):
                    raise self.error(f"table file {v['table']!r} does not exist", "problem", name)
        for wkey in ("window", "line"):
            if wkey in self.params:
                w = self.params[wkey]
                lo, hi = (w.get("lo"), w.get("hi")) if isinstance(w, dict) else (w[0], w[1]) if isinstance(w, (list, tuple)) and len(w) >= 2 else (None, None)
                try:
                    lo, hi = float(lo), float(hi)
                except (TypeError, ValueError):
                    raise self.error(f"{wkey} needs two numbers", "params", wkey)
                if not hi > lo:
                    raise self.error(f"{wkey} is degenerate: [{lo}, {hi}]", "params", wkey)
        if "gamma" in self.params:
            try:
                parse_gamma(self.params["gamma"])
            except InvalidGamma as exc:
                raise self.error(str(exc), "params", "gamma")
        if self.task == "commute" and "lambda" not in self.params:
            raise self.error("commute needs params.lambda", "params")
        bc = self.problem.get("bc_at_b", (0.0, 1.0))
        try:
            bc = [float(v) for v in bc]
            if len(bc) != 2 or not any(bc):
                raise ValueError
        except (TypeError, ValueError):
            raise self.error("bc_at_b must be a non-zero pair", "problem", "bc_at_b")
        self.build_potential()  # surfaces coefficient errors early

    def _path(self, p):
        return p if os.path.isabs(p) else os.path.join(self.base_dir, p)

    def _coefficient(self, name, default=0.0):
        v = self.problem.get(name, default)
        if v is None:
            return None
        if isinstance(v, dict):
            if "table" not in v:
                raise self.error("coefficient mapping needs a 'table' entry", "problem", name)
            return Coefficient.from_csv(self._path(v["table"]), name=name)
        if isinstance(v, (int, float)):
            return float(v)
        if isinstance(v, str):
            try:
                c = Coefficient(v, name=name)
                c(np.array([0.5]))
            except ConfigError as exc:
                raise ConfigError(str(exc), field=f"problem.{name}", line=self.line("problem", name))
            return c
        raise self.error(f"cannot interpret coefficient {v!r}", "problem", name)

    def build_potential(self):
        p = self.problem
        kind = p.get("endpoint_a", "regular")
        try:
            return PotentialSpec(
                a=float(p.get("a", 0.0)),
                b=float(p.get("b", 1.0)),
                mass=float(p.get("mass", 0.0)),
                q_el=self._coefficient("q_el"),
                q_sc=self._coefficient("q_sc"),
                q_am=self._coefficient("q_am"),
                q_mg=self._coefficient("q_mg", None),
                kappa=float(p.get("kappa", 0.0)),
                endpoint_a_kind=kind,
            )
        except OutOfRange as exc:
            raise ConfigError(str(exc), field="problem", line=self.line("problem"))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad problem entry: {exc}", field="problem", line=self.line("problem"))

    @property
    def bc_at_b(self):
        return tuple(float(v) for v in self.problem.get("bc_at_b", (0.0, 1.0)))

    def window(self, default=(-10.0, 10.0)):
        w = self.params.get("window", default)
        if isinstance(w, dict):
            return float(w["lo"]), float(w["hi"])
        return float(w[0]), float(w[1])

    def z_points(self, default=None):
        """Test points from ``params.z`` (list of [re, im]) or ``params.line``."""
        if "z" in self.params:
            pts = []
            for item in self.params["z"]:
                if isinstance(item, (list, tuple)):
                    pts.append(complex(float(item[0]), float(item[1]) if len(item) > 1 else 0.0))
                else:
                    pts.append(complex(item))
            return np.array(pts, dtype=complex)
        if "line" in self.params:
            ln = self.params["line"]
            lo, hi = (ln["lo"], ln["hi"]) if isinstance(ln, dict) else (ln[0], ln[1])
            n = int(ln.get("n", 200)) if isinstance(ln, dict) else 200
            eps = float(ln.get("eps", 0.1)) if isinstance(ln, dict) else 0.1
            return np.linspace(float(lo), float(hi), n) + 1j * eps
        return default


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class InvariantCheck:
    name: str
    residual: float
    tolerance: float
    passed: Optional[bool] = None

    def __post_init__(self):
        if self.passed is None:
            self.passed = bool(np.isfinite(self.residual) and self.residual <= self.tolerance)


@dataclass
class RunReport:
    """Inputs, written files, invariant checks and wall time of one run."""

    inputs: dict
    outputs: list = field(default_factory=list)
    checks: list = field(default_factory=list)
    wall_time: float = 0.0
    error: Optional[str] = None
    exit_code: int = EXIT_OK

    def check(self, name, residual, tolerance, passed=None):
        c = InvariantCheck(name, float(residual), float(tolerance), passed)
        self.checks.append(c)
        return c

    @property
    def all_passed(self):
        return all(c.passed for c in self.checks)

    def to_dict(self):
        return {
            "inputs": self.inputs,
            "outputs": list(self.outputs),
            "checks": [
                {"name": c.name, "residual": c.residual, "tolerance": c.tolerance, "passed": c.passed}
                for c in self.checks
            ],
            "wall_time": self.wall_time,
            "error": self.error,
            "exit_code": self.exit_code,
        }


# ---------------------------------------------------------------------------
# pipelines
# ---------------------------------------------------------------------------


def _weyl_data(cfg, pot=None):
    pot = cfg.build_potential() if pot is None else pot
    if pot.singular:
        system = RadialSystem(pot, tol=cfg.tol)
    else:
        system = build_fundamental_system(pot, cfg.tol)
    return WeylData(system, cfg.bc_at_b, tol=cfg.tol)


# Fixed batch size: the integrator shares its step sequence across a batch, so
# the split must not depend on the worker count or outputs would differ in the
# last digits between ``--jobs`` settings.
_BATCH = 16


def _chunks(zs):
    return [zs[i:i + _BATCH] for i in range(0, len(zs), _BATCH)] or [zs]


def _map_M(wd, zs, jobs):
    parts = _chunks(zs)

    def one(p):
        return np.asarray(wd.M(p, check_pole=False))

    if jobs <= 1 or len(parts) == 1:
        return np.concatenate([one(p) for p in parts])
    with ThreadPoolExecutor(max_workers=jobs) as ex:
        return np.concatenate(list(ex.map(one, parts)))


def _out(cfg, name):
    return os.path.join(cfg.out, name)


def _task_solve(cfg, rep):
    wd = _weyl_data(cfg)
    zs = cfg.z_points(np.array([1.0 + 0.0j]))
    n = int(cfg.params.get("n", 101))
    lo = wd.system.lo if not wd.pot.singular else wd.pot.b * 1e-3
    xs = np.linspace(lo, wd.pot.b, n)
    phi, theta = wd.system.pair(zs)
    pv, tv = phi(xs), theta(xs)
    rows = []
    for j, z in enumerate(zs):
        for i, x in enumerate(xs):
            rows.append((z.real, z.imag, x, *_split_complex(pv[i, j]), *_split_complex(tv[i, j])))
    header = ["re_z", "im_z", "x", "re_phi1", "im_phi1", "re_phi2", "im_phi2", "re_theta1", "im_theta1", "re_theta2", "im_theta2"]
    rep.outputs.append(write_csv(_out(cfg, "solutions.csv"), header, rows))
    # invariants: W(Theta, Phi) = 1 and the ODE residual
    xs_chk = np.linspace(lo, wd.pot.b, 7)
    w = np.asarray(wronskian(theta, phi, xs_chk))
    rep.check("wronskian_theta_phi_equals_one", float(np.max(np.abs(w - 1.0))), 1e3 * cfg.tol)
    res = max(float(np.max(np.abs(ode_residual(phi, wd.pot, xs_chk[1:-1])))), float(np.max(np.abs(ode_residual(theta, wd.pot, xs_chk[1:-1])))))
    rep.check("ode_residual", res, 1e-5)


def _split_complex(u):
    u = np.asarray(u, dtype=complex)
    return u[0].real, u[0].imag, u[1].real, u[1].imag


def _expects_herglotz(wd):
    """Whether ``M`` must map the upper half plane to itself.

    A singular radial endpoint with ``kappa >= 1/2`` gives a generalized
    Nevanlinna function with negative index ``floor(kappa + 1/2)``; only
    index 0 is Herglotz.  The conjugation symmetry holds in every case.
    """
    return not wd.pot.singular or reduction_step_count(wd.pot.kappa) == 0


def _task_weyl(cfg, rep):
    wd = _weyl_data(cfg)
    zs = cfg.z_points(np.linspace(0.0, 10.0, 200) + 0.1j)
    ms = _map_M(wd, zs, cfg.jobs)
    rep.outputs.append(emit_plot_data(zip(zs, ms), "M_on_line", _out(cfg, "M_on_line.csv")))
    off = np.abs(zs.imag) > 0
    if np.any(off) and _expects_herglotz(wd):
        ok = np.sign(ms.imag[off]) == np.sign(zs.imag[off])
        rep.check("herglotz_sign", float(np.count_nonzero(~ok)), 0.0)
    zc = zs[: min(len(zs), _BATCH)]
    mc = np.asarray(wd.M(np.conj(zc), check_pole=False))
    sym = np.abs(mc - np.conj(ms[: len(zc)])) / np.maximum(1.0, np.abs(ms[: len(zc)]))
    rep.check("conjugation_symmetry", float(np.max(sym)), 1e3 * cfg.tol)
    z0 = zs[np.argmax(np.abs(zs.imag))] if np.any(off) else zs[0]
    lo = wd.system.lo if not wd.pot.singular else wd.pot.b * 1e-3
    dev = check_wronskian_constancy(wd, np.array([z0]), np.linspace(lo, wd.pot.b, 5))
    rep.check("wronskian_constancy", float(np.max(dev)), 1e3 * cfg.tol)


def _measure(cfg, wd, window):
    eigs = eigenvalues(wd, *window)
    return norming_weights(wd, eigs, cross_check=True)


def _task_eigs(cfg, rep):
    wd = _weyl_data(cfg)
    window = cfg.window()
    mu = _measure(cfg, wd, window)
    rep.outputs.append(write_csv(_out(cfg, "eigenvalues.csv"), ["n", "lambda", "weight", "residue_weight"],
                                 [(i, l, w, r) for i, (l, w, r) in enumerate(zip(mu.lambdas, mu.weights, mu.residue_weights))]))
    if len(mu):
        rep.outputs.append(emit_plot_data(mu.rows(), "measure", _out(cfg, "measure.csv")))
        dev = float(np.max(np.abs(mu.weights - mu.residue_weights) / mu.weights))
        rep.check("weight_vs_residue", dev, 1e-5)


def _commute_operator(cfg, wd):
    p = cfg.params
    lam = float(p["lambda"])
    gamma = parse_gamma(p.get("gamma", 1.0))
    side = p.get("side", "left")
    if side == "left":
        if np.isinf(gamma):
            return commute_left_phi_infinite(wd, lam)
        return commute_left_phi(wd, lam, gamma)
    if side == "right":
        return commute_right_theta(wd, lam, gamma)
    raise cfg.error(f"side must be 'left' or 'right', got {side!r}", "params", "side")


def _potential_samples(pot, n=201):
    """Rows ``(x, p0, p1, p3, q_mg)`` on a uniform grid (starting at ``b/1000`` for radial problems)."""
    lo = pot.a if not pot.singular else pot.a + 1e-3 * (pot.b - pot.a)
    xs = np.linspace(lo, pot.b, n)
    p0, p1, p3 = (np.broadcast_to(np.asarray(c, dtype=float), xs.shape) for c in pot.coefficients(xs))
    qm = pot.magnetic(xs)
    qm = np.zeros_like(xs) if qm is None else np.broadcast_to(np.asarray(qm, dtype=float), xs.shape)
    return zip(xs, p0, p1, p3, qm)


def _task_commute(cfg, rep):
    wd = _weyl_data(cfg)
    op = _commute_operator(cfg, wd)
    lam = op.record.lam
    zs = cfg.z_points(None)
    if zs is None:
        zs = lam + np.array([0.5 + 0.5j, -0.7 + 1.0j, 1.3 + 0.2j, -2.1 + 0.4j, 3.0 + 2.0j, 0.2 + 3.0j, -4.0 + 1.5j, 5.5 + 0.3j, 1j * 7.0, -0.3 + 0.8j])
    mf = op.M_formula(zs)
    md = op.direct_weyl_data().M(zs, check_pole=False)
    rel = np.abs(mf - md) / np.abs(md)
    rows = [(z.real, z.imag, a.real, a.imag, b.real, b.imag, r) for z, a, b, r in zip(zs, mf, md, rel)]
    header = ["re_z", "im_z", "re_M_formula", "im_M_formula", "re_M_direct", "im_M_direct", "rel_dev"]
    rep.outputs.append(write_csv(_out(cfg, "M_comparison.csv"), header, rows))
    rep.check("weyl_map_formula_vs_direct", float(np.max(rel)), 1e-6)
    rep.outputs.append(emit_plot_data(_potential_samples(op.pot_gamma), "potential", _out(cfg, "potential_gamma.csv")))
    if "window" in cfg.params:
        window = cfg.window()
        before = eigenvalues(wd, *window)
        # Theta(lambda) is never square integrable for an admissible right commutation
        norm_sq = np.inf if op.kind == "right" else None
        predicted = spectral_bookkeeping(before, op.record, norm_sq=norm_sq)
        after = eigenvalues(op.direct_weyl_data(), *window)
        rep.outputs.append(write_csv(_out(cfg, "spectrum.csv"), ["kind", "lambda"],
                                     [("before", l) for l in before] + [("after", l) for l in after] + [("predicted", l) for l in predicted]))
        if len(after) != len(predicted):
            dev = np.inf
        else:
            dev = float(np.max(np.abs(np.array(after) - np.array(predicted)))) if after else 0.0
        rep.check("spectral_bookkeeping", dev, 1e-8)


def _reduction_inputs(cfg):
    p = cfg.params
    kappa = float(p.get("kappa", cfg.problem.get("kappa", 0.0)))
    b = float(p.get("b", cfg.problem.get("b", 1.0)))
    window = tuple(p.get("window", DEFAULT_WINDOW))
    gamma = float(p.get("gamma_policy", p.get("gamma", 1.0)))
    if not gamma > 0 or not np.isfinite(gamma):
        raise cfg.error("gamma policy must be a positive finite number", "params", "gamma_policy")
    steps = p.get("steps")
    return kappa, b, window, gamma, None if steps is None else int(steps)


def _radial_potential(cfg, kappa, b):
    prob = dict(cfg.problem)
    prob.update({"a": 0.0, "b": b, "kappa": kappa, "endpoint_a": "singular_radial"})
    sub = RunConfig(problem=prob, task="reduce", base_dir=cfg.base_dir, tol=cfg.tol, lines=cfg.lines)
    return sub.build_potential()


def ledger_document(ledger, problem):
    doc = ledger.to_dict()
    doc["problem"] = problem
    return doc


def load_ledger(doc, tol=DEFAULT_TOL):
    """Rebuild a reduction ledger from its JSON document.

    The terminal operator is recomputed from the stored ``(lambda_n,
    gamma_n)``; the stored ``c_n`` are used in :func:`assemble_M`.
    """
    prob = doc["problem"]
    cfg = RunConfig(problem=prob, task="reduce", tol=tol)
    pot = _radial_potential(cfg, float(doc["kappa"]), float(prob.get("b", 1.0)))
    wd = WeylData(RadialSystem(pot, tol=tol), cfg.bc_at_b, tol=tol)
    pairs = [(float(s["lambda"]), float(s["gamma"])) for s in doc["steps"]]
    ledger = iterate_reduction(wd, fixed_chooser(pairs), steps=len(pairs))
    for st, s in zip(ledger.steps, doc["steps"]):
        st.c = float(s["c"])
    return ledger


def _task_reduce(cfg, rep):
    kappa, b, window, gamma, steps = _reduction_inputs(cfg)
    pot = _radial_potential(cfg, kappa, b)
    wd = WeylData(RadialSystem(pot, tol=cfg.tol), cfg.bc_at_b, tol=cfg.tol)
    ledger = iterate_reduction(wd, default_chooser(window, gamma), steps=steps)
    problem = {k: v for k, v in cfg.problem.items()}
    problem.update({"a": 0.0, "b": b, "kappa": kappa, "endpoint_a": "singular_radial"})
    rep.outputs.append(write_json(_out(cfg, "ledger.json"), ledger_document(ledger, problem)))
    # c_n recomputation
    if ledger.steps:
        dev = max(abs(st.c - (1.0 / st.gamma - st.wb_dot)) for st in ledger.steps)
        rep.check("c_n_recomputed", dev, 1e-8)
        for i, r in enumerate(ledger.results):
            rep.check(f"step{i}_inverse_x_coefficient", abs(r.fit_before - (1.0 - r.kappa_before)), 1e-3)
            rep.check(f"step{i}_sigma3_inverse_x_coefficient", abs(r.fit_sigma3), 1e-3)
            if r.normalization_error is not None:
                rep.check(f"step{i}_frobenius_normalization", r.normalization_error, 1e-6)
    rng = np.random.default_rng(cfg.seed)
    zs = rng.uniform(-20, 20, 20) / b + 1j * rng.uniform(0.2, 5.0, 20) / b * np.where(np.arange(20) % 2, 1, -1)
    ok, worst = herglotz_check(ledger.terminal, zs)
    rep.check("terminal_herglotz", 0.0 if ok else 1.0, 0.0)
    mw = cfg.params.get("measure_window", (-60.0 / b, 60.0 / b))
    mw = (float(mw[0]), float(mw[1]))
    rho = norming_weights(wd, eigenvalues(wd, *mw), cross_check=False)
    rep.outputs.append(emit_plot_data(rho.rows(), "measure", _out(cfg, "measure.csv")))
    if ledger.steps:
        fr = measure_factorization_check(ledger, rho, int(cfg.params.get("n_atoms", 10)), window=(mw[0] - 1, mw[1] + 1))
        rep.check("measure_factorization", fr.max_rel_dev, 1e-5)
        rep.outputs.append(write_csv(_out(cfg, "factorization.csv"), ["lambda", "ratio"], zip(fr.lambdas, fr.ratios)))
    nv = nevanlinna_index(rho, kappa)
    rep.outputs.append(write_json(_out(cfg, "nevanlinna.json"), {
        "index": nv.index, "status": nv.status, "expected": nv.expected, "alpha": nv.alpha, "beta": nv.beta,
        "exponents": {str(k): v for k, v in nv.exponents.items()}, "message": nv.message,
    }))
    rep.check("nevanlinna_index", 0.0 if nv.agrees else 1.0, 0.0, passed=nv.agrees if nv.status == "ok" else None)
    zt = np.array([1.0 + 1.0j, -3.0 + 0.5j, 7.0 + 2.0j]) / b
    m = assemble_M(ledger, zt)
    rep.outputs.append(emit_plot_data(zip(zt, m), "M_on_line", _out(cfg, "assembled_M.csv")))


def _task_check(cfg, rep):
    """Self-checks of a problem: Wronskians, ODE residual, Stieltjes inversion."""
    wd = _weyl_data(cfg)
    rng = np.random.default_rng(cfg.seed)
    zs = rng.uniform(-10, 10, 6) + 1j * rng.uniform(0.5, 3.0, 6)
    lo = wd.system.lo if not wd.pot.singular else wd.pot.b * 1e-3
    xs = np.linspace(lo, wd.pot.b, 5)
    dev = check_wronskian_constancy(wd, zs, xs)
    rep.check("wronskian_constancy", float(np.max(dev)), 1e3 * cfg.tol)
    phi = wd.system.phi(zs)
    rep.check("ode_residual", float(np.max(np.abs(ode_residual(phi, wd.pot, xs[1:-1])))), 1e-5)
    ms = wd.M(zs)
    if _expects_herglotz(wd):
        rep.check("herglotz_sign", float(np.count_nonzero(np.sign(ms.imag) != np.sign(zs.imag))), 0.0)
    sym = np.abs(wd.M(np.conj(zs)) - np.conj(ms)) / np.maximum(1.0, np.abs(ms))
    rep.check("conjugation_symmetry", float(np.max(sym)), 1e3 * cfg.tol)
    if "window" in cfg.params:
        l0, l1 = cfg.window()
        eps = tuple(cfg.params.get("eps", (0.1, 0.05, 0.025, 0.0125)))
        inv = stieltjes_inversion_check(wd, l0, l1, eps, threshold=float(cfg.params.get("threshold", 1e-3)))
        mu = norming_weights(wd, eigenvalues(wd, l0, l1), cross_check=False)
        exact = mu.mass(l0, l1)
        rep.check("stieltjes_inversion", abs(inv.estimate - exact), 1e-3)
        rep.outputs.append(write_csv(_out(cfg, "stieltjes.csv"), ["eps", "integral"], zip(eps, inv.integrals)))
    rep.outputs.append(write_csv(_out(cfg, "check_points.csv"), M_HEADER, [(z.real, z.imag, m.real, m.imag) for z, m in zip(zs, ms)]))


PIPELINES = {
    "solve": _task_solve,
    "weyl": _task_weyl,
    "eigs": _task_eigs,
    "commute": _task_commute,
    "reduce": _task_reduce,
    "check": _task_check,
}


def run(cfg):
    """Execute a validated :class:`RunConfig` and return its :class:`RunReport`.

    Module errors are wrapped in :class:`TaskError`; the report records the
    exit code (2 for numerical failures, 3 for failed invariants).
    """
    t0 = time.perf_counter()
    rep = RunReport(inputs={"task": cfg.task, "problem": cfg.problem, "params": cfg.params, "tol": cfg.tol, "seed": cfg.seed})
    try:
        PIPELINES[cfg.task](cfg, rep)
    except ConfigError:
        raise
    except DiracError as exc:
        rep.error = f"{type(exc).__name__}: {exc}"
        rep.exit_code = EXIT_NUMERIC
        rep.wall_time = time.perf_counter() - t0
        raise TaskError(rep.error, report=rep) from exc
    rep.exit_code = EXIT_OK if rep.all_passed else EXIT_INVARIANT
    rep.wall_time = time.perf_counter() - t0
    return rep


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML configuration file")
    common.add_argument("--out", help="output directory")
    common.add_argument("--tol", type=float, help="integration tolerance")
    common.add_argument("--jobs", type=int, default=1, help="parallel workers for z-grids")
    common.add_argument("--seed", type=int, default=0, help="seed for randomised test grids")

    parser = argparse.ArgumentParser(prog="diracweyl", description="Weyl functions, spectra and commutation of Dirac operators")
    sub = parser.add_subparsers(dest="task", required=True)
    for name in ("solve", "weyl", "check"):
        sub.add_parser(name, parents=[common])
    p = sub.add_parser("eigs", parents=[common])
    p.add_argument("--window", type=float, nargs=2)
    p = sub.add_parser("commute", parents=[common])
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--gamma")
    p.add_argument("--side", choices=("left", "right"))
    p.add_argument("--window", type=float, nargs=2)
    p = sub.add_parser("reduce", parents=[common])
    p.add_argument("--kappa", type=float)
    p.add_argument("--b", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--window", type=float, nargs=2)
    p.add_argument("--gamma-policy", dest="gamma_policy", type=float)
    return parser


def config_from_args(args):
    overrides = {"task": args.task, "out": args.out, "tol": args.tol, "jobs": args.jobs, "seed": args.seed}
    if args.config:
        text_cfg = RunConfig.from_file(args.config, overrides=overrides, validate=False)
    else:
        text_cfg = RunConfig.from_text("{}", overrides=overrides, validate=False)
    params = dict(text_cfg.params)
    for src, dst in (("window", "window"), ("lam", "lambda"), ("gamma", "gamma"), ("side", "side"),
                     ("kappa", "kappa"), ("b", "b"), ("steps", "steps"), ("gamma_policy", "gamma_policy")):
        v = getattr(args, src, None)
        if v is not None:
            params[dst] = list(v) if isinstance(v, list) else v
    text_cfg.params = params
    text_cfg.validate()
    return text_cfg


def _join_negative_words(argv):
    """Keep ``--gamma -inf`` together; argparse would read ``-inf`` as an option."""
    out = []
    i = 0
    while i < len(argv):
        a = argv[i]
        if a == "--gamma" and i + 1 < len(argv) and argv[i + 1].lstrip("-+").isalpha():
            out.append(f"{a}={argv[i + 1]}")
            i += 2
            continue
        out.append(a)
        i += 1
    return out


def main(argv=None):
    """Entry point; returns the process exit code."""
    parser = build_parser()
    argv = _join_negative_words(list(sys.argv[1:] if argv is None else argv))
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse reports usage errors with status 2; they are configuration errors here
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    try:
        cfg = config_from_args(args)
        rep = run(cfg)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TaskError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        rep = exc.report
        if rep is not None:
            write_json(os.path.join(cfg.out, "report.json"), rep.to_dict())
        return EXIT_NUMERIC
    except IoError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    write_json(os.path.join(cfg.out, "report.json"), rep.to_dict())
    for c in rep.checks:
        status = "PASS" if c.passed else "FAIL"
        print(f"{status} {c.name}: residual={c.residual:.3e} tol={c.tolerance:.1e}")
    for p in rep.outputs:
        print(f"wrote {p}")
    return rep.exit_code


def main_exit():  # pragma: no cover - console script wrapper
    sys.exit(main())


if __name__ == "__main__":  # pragma: no cover
    main_exit()
