"""Acceptance criteria, each at its stated tolerance and runtime budget.

Every test records one line in the ``acceptance criteria`` section of the
terminal summary. The MNIST criteria need ``data/mnist01``.
"""

import csv
import json
import time

import numpy as np
import pytest

from dynloss import cli, saddle
from dynloss import models as mdl
from dynloss.oracles import TOLERANCES, TinySpec, check_hvp, check_hvp_mixed, check_rmd, check_teacher, \
    check_unroll_identity, tiny_problem

pytestmark = pytest.mark.acceptance


def _record(report, name, passed, detail):
    report.append((name, bool(passed), detail))
    assert passed, f"criterion {name}: {detail}"


def _timed(fn):
    t0 = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t0


def _ablate(tmp_path_factory, mnist_dir, axis, values, repeats):
    out = tmp_path_factory.mktemp(f"ablate-{axis}")
    code, seconds = _timed(lambda: cli.main(["ablate", axis, *values, "--repeats", str(repeats),
                                             "--set", f"data_dir={mnist_dir}", "--out", str(out)]))
    rows = {r["value"]: r for r in csv.DictReader(open(out / "ablate.csv"))}
    timing = list(csv.DictReader(open(out / "ablate_timing.csv")))
    return code, seconds, rows, timing


# -- oracle criteria -------------------------------------------------------------


@pytest.mark.parametrize("n", [1, 3])
def test_c1_dln_hypergradient_matches_finite_differences(n, acceptance_report):
    prob = tiny_problem(TinySpec(N=n))
    assert mdl.count(prob.theta0) <= 10 and mdl.count(prob.phi) <= 20
    (err, _), seconds = _timed(lambda: check_rmd(prob))
    ok = err < TOLERANCES["rmd_dln_grad"] and seconds < 10
    _record(acceptance_report, f"1 (N={n})", ok, f"rel err {err:.2e} (< 1e-4), {seconds:.1f}s (< 10s)")


@pytest.mark.parametrize("n", [1, 3])
def test_c2_teacher_hypergradient_matches_finite_differences(n, acceptance_report):
    prob = tiny_problem(TinySpec(N=n))
    assert prob.spec.teacher_hidden == (2, 1)
    (err, detail), seconds = _timed(lambda: check_teacher(prob))
    ok = err < TOLERANCES["teacher_stage"] and seconds < 30
    _record(acceptance_report, f"2 (N={n})", ok, f"rel err {err:.2e} (< 1e-3), {detail}, {seconds:.1f}s (< 30s)")


def test_c3_one_step_reverse_pass_equals_unrolled_gradient(acceptance_report):
    err, _ = check_unroll_identity(tiny_problem(TinySpec(N=1)))
    _record(acceptance_report, "3", err < TOLERANCES["unroll_identity"], f"rel err {err:.2e} (< 1e-10)")


def test_c4_hessian_vector_products_match_dense_hessians(acceptance_report):
    err_h, size_h = check_hvp(0)
    err_m, size_m = check_hvp_mixed(0)
    ok = err_h < TOLERANCES["hvp"] and err_m < TOLERANCES["hvp_mixed"]
    _record(acceptance_report, "4", ok, f"hvp {err_h:.2e} ({size_h}), hvp_mixed {err_m:.2e} ({size_m}); tol 1e-6")


def test_c5_saddle_escape_sweep(acceptance_report):
    spec = saddle.SweepSpec(n_instances=100)
    rows, seconds = _timed(lambda: saddle.run_sweep(spec))
    s = saddle.summarize(rows, tolerance=1e-10)
    assert max(r.dim for r in rows) <= 10 and all(r.eta <= 1 / r.C for r in rows if r.saddle)
    ok = (s.n_saddle == 100 and s.n_errors == 0 and s.pass_rate == 1.0 and s.escape_rate >= 0.95
          and s.max_growth_error <= 0.05 and seconds < 60)
    _record(acceptance_report, "5", ok, f"{s.line()}; {seconds:.1f}s (< 60s)")


# -- MNIST trend criteria ----------------------------------------------------------


def test_c6_longer_stages_do_not_hurt_and_cost_more(tmp_path_factory, mnist_dir, acceptance_report):
    code, seconds, rows, timing = _ablate(tmp_path_factory, mnist_dir, "length", ["1", "5", "10"], 3)
    accs = [float(rows[v]["median_test_acc"]) for v in ("1", "5", "10")]
    ms = [float(np.median([float(t["ms_per_teacher_iteration"]) for t in timing if t["value"] == v]))
          for v in ("1", "5", "10")]
    ok = (code == 0 and all(a <= b for a, b in zip(accs, accs[1:]))
          and all(a < b for a, b in zip(ms, ms[1:])) and seconds < 15 * 60)
    _record(acceptance_report, "6", ok,
            f"median test acc N=1,5,10: {accs}; median ms/teacher iteration: {[round(m, 1) for m in ms]}; "
            f"{seconds:.0f}s (< 900s)")


@pytest.fixture(scope="module")
def optimizer_ablation(tmp_path_factory, mnist_dir):
    return _ablate(tmp_path_factory, mnist_dir, "optimizer", ["lstm", "sgd", "ce"], 5)


def test_c7_lstm_teacher_at_least_sgd(optimizer_ablation, acceptance_report):
    code, seconds, rows, _ = optimizer_ablation
    lstm, sgd = float(rows["lstm"]["median_test_acc"]), float(rows["sgd"]["median_test_acc"])
    ok = code == 0 and lstm >= sgd and seconds < 20 * 60
    _record(acceptance_report, "7", ok, f"median over 5 seeds: lstm {lstm:.4f} >= sgd {sgd:.4f}; "
                                        f"sweep {seconds:.0f}s (< 1200s)")


def test_c8_not_worse_than_cross_entropy(optimizer_ablation, acceptance_report):
    code, seconds, rows, _ = optimizer_ablation
    lstm, ce = float(rows["lstm"]["median_test_acc"]), float(rows["ce"]["median_test_acc"])
    ok = code == 0 and lstm >= ce - 0.005 and seconds < 15 * 60
    _record(acceptance_report, "8", ok, f"median over 5 seeds: lstm {lstm:.4f} >= ce {ce:.4f} - 0.005; "
                                        f"sweep {seconds:.0f}s (< 900s)")


def test_c9_trained_surface_is_finite_and_decreasing(tmp_path_factory, mnist_dir, acceptance_report):
    run = tmp_path_factory.mktemp("surface-train")
    assert cli.main(["train", "--set", f"data_dir={mnist_dir}", "--out", str(run)]) == 0
    checkpoints = sorted(run.glob("dln_epoch*.ckpt"))
    assert len(checkpoints) == 11
    finite, fractions = True, []
    for ckpt in checkpoints:
        out = tmp_path_factory.mktemp("surface")
        assert cli.main(["surface", str(ckpt), "--grid", "-3", "3", "25", "--out", str(out)]) == 0
        z = np.asarray(json.loads(next(out.glob("surface_epoch*.json")).read_text())["z"])
        finite &= bool(np.all(np.isfinite(z)))
        fractions.append(cli.monotone_fraction(z))
    ok = finite and fractions[-1] >= 0.9
    _record(acceptance_report, "9", ok, f"all {len(checkpoints)} epoch surfaces finite: {finite}; "
                                        f"final non-increasing fraction {fractions[-1]:.0%} (>= 90%)")


# -- determinism -------------------------------------------------------------------


TINY = ["--set", "dataset=moons", "--set", "synthetic_n=120", "--set", "K=3", "--set", "epochs=2",
        "--set", "N=2", "--set", "student_hidden=8", "--set", "dln_sizes=2,6,6,1",
        "--set", "teacher_hidden=4,1", "--set", "warm_start_steps=50"]


def _artifacts(out):
    wall = set(json.loads((out / "manifest.json").read_text())["wall_clock"])
    return {p.relative_to(out).as_posix(): p.read_bytes() for p in sorted(out.rglob("*"))
            if p.is_file() and p.name not in wall}


def test_c10_repeated_commands_are_byte_identical(tmp_path, acceptance_report):
    commands = {
        "train": ["train", *TINY, "--seed", "7"],
        "ablate": ["ablate", "optimizer", "lstm", "ce", *TINY, "--repeats", "2"],
        "gradcheck": ["gradcheck", "--steps", "1"],
        "saddle": ["saddle", "--instances", "5", "--controls", "1", "--horizon", "2000", "--seed", "3"],
    }
    checked, diffs = 0, []
    for name, argv in commands.items():
        outs = [tmp_path / f"{name}{i}" for i in range(2)]
        for out in outs:
            assert cli.main([*argv, "--out", str(out)]) == 0
        a, b = (_artifacts(o) for o in outs)
        assert a.keys() == b.keys()
        diffs += [f"{name}/{k}" for k in a if a[k] != b[k]]
        checked += len(a)
    ckpt = tmp_path / "train0" / "dln_epoch02.ckpt"
    surfaces = []
    for i in range(2):
        assert cli.main(["surface", str(ckpt), "--out", str(tmp_path / f"surface{i}")]) == 0
        surfaces.append((tmp_path / f"surface{i}" / "surface_epoch02.json").read_bytes())
    diffs += ["surface"] if surfaces[0] != surfaces[1] else []
    _record(acceptance_report, "10", not diffs,
            f"{checked + 1} artifacts compared across 5 commands; differing: {diffs or 'none'}")
