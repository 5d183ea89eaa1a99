import csv
import json
import os

import numpy as np
import pytest

from diracweyl.cli import (
    EXIT_CONFIG,
    EXIT_INVARIANT,
    EXIT_NUMERIC,
    EXIT_OK,
    RunConfig,
    emit_plot_data,
    load_ledger,
    main,
    run,
    write_csv,
)
from diracweyl.errors import ConfigError, IoError, TaskError
from diracweyl.radial import assemble_M
from diracweyl.weyl import WeylData, build_fundamental_system
from diracweyl.ode import PotentialSpec

FREE_EIGS = """
problem:
  a: 0.0
  b: 1.0
task: eigs
params:
  window: [-10.0, 10.0]
"""


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def test_config_parses():
    cfg = RunConfig.from_text(FREE_EIGS)
    assert cfg.task == "eigs" and cfg.window() == (-10.0, 10.0)
    assert cfg.build_potential().is_free
    assert cfg.bc_at_b == (0.0, 1.0)


@pytest.mark.parametrize(
    "text, field, line",
    [
        ("task: frobnicate\n", "task", 1),
        ("problem:\n  b: 1.0\ntask: eigs\nparams:\n  window: [2.0, 1.0]\n", "params.window", 5),
        ("problem:\n  b: 1.0\ntask: commute\nparams:\n  lambda: 3.0\n  gamma: -inf\n", "params.gamma", 6),
        ("problem:\n  q_el: \"sin(x\"\ntask: eigs\n", "problem.q_el", 2),
        ("problem:\n  q_el: {table: missing.csv}\ntask: eigs\n", "problem.q_el", 2),
        ("problem:\n  bc_at_b: [0, 0]\ntask: eigs\n", "problem.bc_at_b", 2),
        ("task: eigs\ntol: 2.0\n", "tol", 2),
        ("task: commute\n", "params", None),
    ],
)
def test_config_errors_carry_field_and_line(text, field, line):
    with pytest.raises(ConfigError) as ei:
        RunConfig.from_text(text)
    assert ei.value.field == field
    if line is not None:
        assert ei.value.line == line


def test_malformed_yaml():
    with pytest.raises(ConfigError) as ei:
        RunConfig.from_text("task: [eigs\nparams: {")
    assert ei.value.line is not None


def test_table_coefficient_relative_to_config(tmp_path):
    (tmp_path / "q.csv").write_text("x,value\n0,1\n1,1\n")
    cfg_path = tmp_path / "c.yaml"
    cfg_path.write_text("problem:\n  q_el: {table: q.csv}\ntask: eigs\nparams:\n  window: [-4, 4]\n")
    cfg = RunConfig.from_file(str(cfg_path))
    pot = cfg.build_potential()
    np.testing.assert_allclose(pot.q_el(np.array([0.3])), 1.0)
    with pytest.raises(ConfigError):
        RunConfig.from_file(str(tmp_path / "nope.yaml"))


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------


def test_plot_data_M_on_line(tmp_path, free_wd):
    lam = np.linspace(0, 10, 200)
    zs = lam + 0.1j
    path = emit_plot_data(zip(zs, free_wd.M(zs)), "M_on_line", str(tmp_path / "m.csv"))
    rows = read_csv(path)
    assert rows[0] == ["re_z", "im_z", "re_M", "im_M"]
    assert len(rows) == 201


def test_plot_data_measure_sorted(tmp_path):
    path = emit_plot_data([(2.0, 1.0), (-1.0, 0.5)], "measure", str(tmp_path / "mu.csv"))
    rows = read_csv(path)
    assert rows == [["lambda", "weight"], ["-1", "0.5"], ["2", "1"]]


def test_plot_data_errors(tmp_path):
    with pytest.raises(IoError):
        emit_plot_data([], "measure", str(tmp_path / "x.csv"))
    with pytest.raises(IoError):
        emit_plot_data([(1, 2)], "histogram", str(tmp_path / "x.csv"))
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(IoError):
        write_csv(str(blocker / "sub.csv"), ["a"], [(1.0,)])


def test_plot_data_trace_and_potential(tmp_path):
    p = emit_plot_data([(0.5, [1 + 2j, 3 - 4j])], "trace", str(tmp_path / "t.csv"))
    assert read_csv(p)[1] == ["0.5", "1", "2", "3", "-4"]
    p = emit_plot_data([(0.5, 0.1, 0.2, 0.3, 0.0)], "potential", str(tmp_path / "p.csv"))
    assert read_csv(p)[0] == ["x", "p0", "p1", "p3", "q_mg"]


def test_seventeen_digit_round_trip(tmp_path):
    vals = [np.pi, 1 / 3, 1e-300, -2.5e17]
    rows = read_csv(write_csv(str(tmp_path / "v.csv"), ["v"], [(v,) for v in vals]))
    assert [float(r[0]) for r in rows[1:]] == vals


# ---------------------------------------------------------------------------
# pipelines
# ---------------------------------------------------------------------------


def test_run_eigs_free(tmp_path):
    cfg = RunConfig.from_text(FREE_EIGS, overrides={"out": str(tmp_path)})
    rep = run(cfg)
    assert rep.exit_code == EXIT_OK and rep.all_passed
    rows = read_csv(tmp_path / "eigenvalues.csv")[1:]
    lams = np.array([float(r[1]) for r in rows])
    np.testing.assert_allclose(lams, np.pi * np.arange(-3, 4), atol=1e-10)
    np.testing.assert_allclose([float(r[2]) for r in rows], 1.0, rtol=1e-9)


def test_run_commute_free(tmp_path):
    text = "problem: {}\ntask: commute\nparams:\n  lambda: 3.141592653589793\n  gamma: 1\n  window: [-10, 10]\n"
    rep = run(RunConfig.from_text(text, overrides={"out": str(tmp_path)}))
    assert rep.exit_code == EXIT_OK
    checks = {c.name: c for c in rep.checks}
    assert checks["weyl_map_formula_vs_direct"].residual <= 1e-6
    assert checks["spectral_bookkeeping"].passed
    assert os.path.exists(tmp_path / "potential_gamma.csv")


@pytest.mark.parametrize("task", ["solve", "weyl", "check"])
def test_run_other_tasks(tmp_path, task):
    text = (
        "problem:\n  q_el: \"0.5*sin(3*x)\"\n  mass: 0.2\n"
        f"task: {task}\nparams:\n  z: [[1.0, 0.5], [2.0, -1.0]]\n"
    )
    if task == "check":
        text = text.replace("  z: [[1.0, 0.5], [2.0, -1.0]]\n", "  window: [0.5, 5.0]\n")
    rep = run(RunConfig.from_text(text, overrides={"out": str(tmp_path)}))
    assert rep.exit_code == EXIT_OK, rep.to_dict()
    assert rep.checks and rep.outputs


def test_run_radial_weyl(tmp_path):
    text = "problem:\n  endpoint_a: singular_radial\n  kappa: 0.75\ntask: weyl\nparams:\n  line: {lo: 0, hi: 10, n: 50, eps: 0.1}\n"
    rep = run(RunConfig.from_text(text, overrides={"out": str(tmp_path)}))
    assert rep.exit_code == EXIT_OK
    assert len(read_csv(tmp_path / "M_on_line.csv")) == 51
    names = {c.name for c in rep.checks}
    # kappa = 3/4 gives negative index 1, so the Herglotz test does not apply
    assert "herglotz_sign" not in names and "conjugation_symmetry" in names


def test_radial_check_task(tmp_path):
    text = "problem:\n  endpoint_a: singular_radial\n  kappa: 1.3\ntask: check\nparams:\n  window: [2.0, 7.0]\n"
    rep = run(RunConfig.from_text(text, overrides={"out": str(tmp_path)}))
    assert rep.exit_code == EXIT_OK, rep.to_dict()
    assert "herglotz_sign" not in {c.name for c in rep.checks}


def test_numeric_failure_is_wrapped(tmp_path):
    text = "problem: {}\ntask: commute\nparams:\n  lambda: 1.0\n  gamma: 1\n"
    with pytest.raises(TaskError) as ei:
        run(RunConfig.from_text(text, overrides={"out": str(tmp_path)}))
    assert ei.value.report.exit_code == EXIT_NUMERIC
    assert "LambdaNotEigenvalue" in ei.value.report.error


# ---------------------------------------------------------------------------
# main and exit codes
# ---------------------------------------------------------------------------


def test_main_exit_codes(tmp_path, capsys):
    out = str(tmp_path / "o")
    assert main(["eigs", "--window", "-4", "4", "--out", out]) == EXIT_OK
    report = json.loads((tmp_path / "o" / "report.json").read_text())
    assert report["exit_code"] == 0 and all(c["passed"] for c in report["checks"])
    assert main(["commute", "--lambda", "3.14", "--gamma", "-inf", "--out", out]) == EXIT_CONFIG
    assert main(["frobnicate"]) == EXIT_CONFIG
    assert main(["commute", "--lambda", "1.0", "--gamma", "1", "--out", out]) == EXIT_NUMERIC
    # too few atoms for the moment diagnostic: reported as a failed invariant
    bad = str(tmp_path / "b")
    cfg = tmp_path / "small.yaml"
    cfg.write_text("task: reduce\nparams:\n  kappa: 0.3\n  measure_window: [-5, 5]\n")
    assert main(["reduce", "--config", str(cfg), "--out", bad]) == EXIT_INVARIANT
    err = capsys.readouterr().err
    assert "configuration error" in err and "numerical failure" in err


def test_jobs_do_not_change_output(tmp_path):
    args = ["weyl", "--config", None, "--jobs", None, "--out", None]
    cfg = tmp_path / "w.yaml"
    cfg.write_text("problem:\n  q_el: \"x\"\ntask: weyl\nparams:\n  line: {lo: -5, hi: 5, n: 40}\n")
    outs = []
    for jobs in ("1", "3"):
        out = tmp_path / f"j{jobs}"
        args[2], args[4], args[6] = str(cfg), jobs, str(out)
        assert main(list(args)) == EXIT_OK
        outs.append((out / "M_on_line.csv").read_bytes())
    assert outs[0] == outs[1]


def test_ledger_round_trip(tmp_path):
    out = tmp_path / "r"
    assert main(["reduce", "--kappa", "1.3", "--out", str(out)]) == EXIT_OK
    doc = json.loads((out / "ledger.json").read_text())
    assert doc["kappa"] == 1.3 and len(doc["steps"]) == 1
    assert doc["P"][1] == pytest.approx([-doc["steps"][0]["lambda"], 1.0])
    reloaded = load_ledger(doc)
    from diracweyl.radial import iterate_reduction, radial_weyl_data

    original = iterate_reduction(radial_weyl_data(1.3))
    zs = np.array([1 + 1j, -3 + 0.5j, 7 + 2j, 0.2 - 4j])
    a, b = assemble_M(original, zs), assemble_M(reloaded, zs)
    assert np.max(np.abs(a - b) / np.abs(a)) <= 1e-12


def test_reduce_outputs(tmp_path):
    out = tmp_path / "r"
    assert main(["reduce", "--kappa", "0.75", "--out", str(out)]) == EXIT_OK
    for name in ("ledger.json", "measure.csv", "factorization.csv", "nevanlinna.json", "assembled_M.csv", "report.json"):
        assert (out / name).exists()
    nv = json.loads((out / "nevanlinna.json").read_text())
    assert nv["status"] == "ok" and nv["index"] == nv["expected"] == 1


def test_direct_equivalence_of_free_config(tmp_path, free_wd):
    cfg = RunConfig.from_text(FREE_EIGS)
    wd = WeylData(build_fundamental_system(cfg.build_potential()))
    assert wd.M(1j) == pytest.approx(free_wd.M(1j), rel=1e-9)
    assert isinstance(cfg.build_potential(), PotentialSpec)
