"""Command-line harness: ``train``, ``ablate``, ``surface``, ``gradcheck``, ``saddle``.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or arguments.
Output goes to ``--out``, else the config's ``out`` key, else
``$DYNLOSS_OUT/<command>`` (``runs/<command>`` when the variable is unset).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from . import autodiff as ad
from . import engine
from . import models as mdl
from . import oracles
from . import saddle
from .config import ConfigError, ExperimentConfig, load_config
from .data import Dataset, IdxFormatError, load_mnist_dir, make_synthetic

OUT_ENV = "DYNLOSS_OUT"
SCHEMAS = {
    "run.csv": "v1:" + ",".join(engine.RUN_CSV_HEADER),
    "ablate.csv": "v1:axis,value,seeds,median_test_acc,test_accs,failures",
    "ablate_timing.csv": "v1:axis,value,seed,ms_per_teacher_iteration",
    "surface.json": "v1:epoch,x0,x1,z",
    "saddle.csv": "v1:" + ",".join(saddle.CSV_COLUMNS),
    "timing.csv": "v1:stage,kind,wall_ms",
}
# Wall-clock measurements; every other artifact is reproducible byte for byte.
WALL_CLOCK = ("timing.csv", "ablate_timing.csv")
AXES = {"ratio": "val_ratio", "length": "N", "optimizer": "dln_optimizer"}
DLN_INPUT_CODES = {"score": 0.0, "probability": 1.0}

log = logging.getLogger("dynloss")


class UsageError(Exception):
    """Invalid invocation; maps to exit code 2."""


# -- shared helpers --------------------------------------------------------------


def output_dir(args, cfg_out: str = "") -> Path:
    if args.out:
        path = Path(args.out)
    elif cfg_out:
        path = Path(cfg_out)
    else:
        path = Path(os.environ.get(OUT_ENV) or "runs") / args.command
    path.mkdir(parents=True, exist_ok=True)
    return path


def versions() -> dict:
    return {"dynloss": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__}


def write_manifest(out: Path, command: str, payload: dict, artifacts) -> None:
    manifest = {
        "command": command,
        "versions": versions(),
        "schemas": {k: v for k, v in SCHEMAS.items() if k in {Path(a).name for a in artifacts}},
        "artifacts": sorted(str(a) for a in artifacts),
        "wall_clock": sorted(str(a) for a in artifacts if Path(a).name in WALL_CLOCK),
        **payload,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def config_from_args(args) -> ExperimentConfig:
    if any("=" not in kv for kv in args.set or ()):
        raise ConfigError("--set", "expected key=value")
    overrides = dict(kv.split("=", 1) for kv in args.set or ())
    overrides = {k.strip(): v for k, v in overrides.items()}
    if args.seed is not None:
        overrides["seed"] = args.seed
    return load_config(args.config, overrides)


def load_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    if cfg.dataset == "mnist01":
        root = Path(cfg.data_dir)
        if not root.is_dir():
            raise ConfigError("data_dir", f"dataset directory {root} does not exist")
        try:
            return (load_mnist_dir(root, "train", cfg.classes), load_mnist_dir(root, "test", cfg.classes))
        except (FileNotFoundError, IdxFormatError) as exc:
            raise ConfigError("data_dir", str(exc)) from exc
    n_test = max(cfg.synthetic_n // 4, 2)
    full = make_synthetic(cfg.dataset, cfg.synthetic_n + n_test, cfg.synthetic_noise, cfg.seed,
                          n_classes=2 if cfg.dataset == "moons" else max(2, len(cfg.classes)))
    idx = np.arange(len(full))
    return full.subset(idx[:cfg.synthetic_n]), full.subset(idx[cfg.synthetic_n:])


def dln_checkpoint(phi, epoch: int, dln_input: str) -> dict:
    tensors = {f"dln/{k}": v for k, v in phi.items()}
    tensors["meta/epoch"] = np.array([float(epoch)])
    tensors["meta/dln_input"] = np.array([DLN_INPUT_CODES[dln_input]])
    return tensors


def ms_per_teacher_iteration(record: engine.RunRecord) -> float:
    """Median wall time of one outer iteration (its two stage rows); robust to bursts of CPU contention."""
    wall = record.column("wall_ms")
    pairs = len(wall) // 2
    if not pairs:
        return float(wall.sum()) if len(wall) else float("nan")
    return float(np.median(wall[0:2 * pairs:2] + wall[1:2 * pairs:2]))


# -- train -------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = config_from_args(args)
    train, test = load_datasets(cfg)
    out = output_dir(args, cfg.out)
    csv_path = out / "run.csv"
    artifacts = [csv_path.name]
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(engine.RUN_CSV_HEADER)

        def on_row(row):
            one = engine.RunRecord([row]).to_csv().splitlines()[1]
            fh.write(one + "\n")
            fh.flush()

        try:
            result = engine.run_l2t_dln(cfg.stage(), train, test, cfg.model(), on_row=on_row)
        except (engine.StageError, ad.AutodiffError) as exc:
            log.error("training failed: %s", exc)
            write_manifest(out, "train", {"config": cfg.as_dict(), "seed": cfg.seed, "status": f"failed: {exc}"},
                           artifacts)
            return 1
    (out / "timing.csv").write_text(result.record.timing_csv())
    artifacts.append("timing.csv")
    ckpt = {**{f"student/{k}": v for k, v in result.theta.items()},
            **{f"dln/{k}": v for k, v in result.phi.items()},
            **{f"teacher/{k}": v for k, v in result.teacher.items()}}
    mdl.save_checkpoint(out / "final.ckpt", ckpt)
    artifacts += ["final.ckpt"]
    for epoch, phi in sorted(result.phi_history.items()):
        name = f"dln_epoch{epoch:02d}.ckpt"
        mdl.save_checkpoint(out / name, dln_checkpoint(phi, epoch, cfg.dln_input))
        artifacts.append(name)
    (out / "config.txt").write_text(cfg.to_text())
    artifacts.append("config.txt")
    write_manifest(out, "train", {"config": cfg.as_dict(), "seed": cfg.seed, "status": "ok",
                                  "final_test_acc": result.record.final_test_acc,
                                  "student_steps": result.student_steps}, artifacts)
    print(f"final test accuracy {result.record.final_test_acc:.4f}; artifacts in {out}")
    return 0


# -- ablate ------------------------------------------------------------------------


def _ablate_one(job):
    """One isolated run; returns ``(value, seed, accuracy or None, ms/iteration, error, csv text)``."""
    cfg_dict, axis, value, seed = job
    cfg = load_config(None, {**cfg_dict, "seed": seed})
    try:
        train, test = load_datasets(cfg)
        if axis == "optimizer" and value == "ce":
            result = engine.run_fixed_loss(cfg.stage(), train, test, cfg.model(), loss="ce")
        else:
            result = engine.run_l2t_dln(cfg.stage(), train, test, cfg.model())
        return (value, seed, result.record.final_test_acc, ms_per_teacher_iteration(result.record), "",
                result.record.to_csv())
    except (engine.StageError, ad.AutodiffError, ValueError) as exc:
        return value, seed, None, float("nan"), str(exc) or type(exc).__name__, ""


def parse_axis_values(axis: str, values) -> list:
    key = AXES[axis]
    if axis == "optimizer":
        allowed = engine.DLN_OPTIMIZERS + ("ce",)
        bad = [v for v in values if v not in allowed]
        if bad:
            raise ConfigError(key, f"unknown optimizer {bad[0]!r}; expected one of {allowed}")
        return list(values)
    try:
        return [int(v) if key == "N" else float(v) for v in values]
    except ValueError as exc:
        raise ConfigError(key, str(exc)) from exc


def cmd_ablate(args) -> int:
    cfg = config_from_args(args)
    values = parse_axis_values(args.axis, args.values)
    base = cfg.as_dict()
    key = AXES[args.axis]
    jobs = []
    for v in values:
        if v != "ce":
            load_config(None, {**base, key: v})        # validate before launching anything
        for r in range(args.repeats):
            jobs.append(({**base, key: v} if v != "ce" else base, args.axis, v, cfg.seed + r))
    out = output_dir(args, cfg.out)
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_ablate_one, jobs))
    else:
        results = [_ablate_one(j) for j in jobs]

    runs_dir = out / "runs"
    runs_dir.mkdir(exist_ok=True)
    artifacts = ["ablate.csv", "ablate_timing.csv"]
    summary = io.StringIO()
    timing = io.StringIO()
    sw, tw = csv.writer(summary, lineterminator="\n"), csv.writer(timing, lineterminator="\n")
    sw.writerow(SCHEMAS["ablate.csv"][3:].split(","))
    tw.writerow(SCHEMAS["ablate_timing.csv"][3:].split(","))
    failures = 0
    for v in values:
        rows = [r for r in results if r[0] == v]
        accs = [r[2] for r in rows if r[2] is not None]
        errs = [f"seed {r[1]}: {r[4]}" for r in rows if r[2] is None]
        failures += len(errs)
        med = float(np.median(accs)) if accs else float("nan")
        sw.writerow([args.axis, v, " ".join(str(r[1]) for r in rows), repr(med),
                     " ".join(repr(float(a)) for a in accs), "; ".join(errs)])
        for r in rows:
            tw.writerow([args.axis, v, r[1], f"{r[3]:.3f}"])
            if r[5]:
                name = f"runs/{args.axis}-{v}-seed{r[1]}.csv"
                (out / name).write_text(r[5])
                artifacts.append(name)
        print(f"{args.axis}={v}: median test accuracy {med:.4f} over {len(accs)} runs"
              + (f", {len(errs)} failed" if errs else ""))
    (out / "ablate.csv").write_text(summary.getvalue())
    (out / "ablate_timing.csv").write_text(timing.getvalue())
    write_manifest(out, "ablate", {"config": base, "seed": cfg.seed, "axis": args.axis,
                                   "values": values, "repeats": args.repeats}, artifacts)
    return 1 if failures else 0


# -- surface -----------------------------------------------------------------------


def surface_grid(phi, lo: float, hi: float, n: int, dln_input: str = "probability"):
    """DLN values ``z[i][j]`` at correct-class score ``x0[i]`` and wrong-class score ``x1[j]``."""
    axis = np.linspace(lo, hi, n)
    a, b = np.meshgrid(axis, axis, indexing="ij")
    pairs = np.stack([a.ravel(), b.ravel()], axis=1)
    z = mdl.dln_forward(mdl.as_constants(phi), mdl.score_pairs_to_inputs(pairs, dln_input)).data.reshape(n, n)
    return axis, axis.copy(), z


def monotone_fraction(z: np.ndarray, tol: float = 1e-12) -> float:
    """Share of wrong-class-score slices along which ``z`` never rises as the correct-class score grows."""
    z = np.asarray(z)
    steps = np.diff(z, axis=0)
    return float(np.mean(np.all(steps <= tol, axis=0)))


def cmd_surface(args) -> int:
    try:
        tensors = mdl.load_checkpoint(args.checkpoint)
        phi = mdl.dln_from_checkpoint(tensors)
    except (OSError, mdl.CheckpointError) as exc:
        raise UsageError(f"checkpoint: {exc}") from exc
    codes = {v: k for k, v in DLN_INPUT_CODES.items()}
    dln_input = codes.get(float(tensors.get("meta/dln_input", [1.0])[0]), "probability")
    epoch = int(tensors["meta/epoch"][0]) if "meta/epoch" in tensors else None
    lo, hi, n = args.grid
    if not hi > lo or n < 2 or n != int(n):
        raise UsageError("grid: need LO < HI and an integer resolution of at least 2")
    x0, x1, z = surface_grid(phi, lo, hi, int(n), dln_input)
    if not np.all(np.isfinite(z)):
        log.error("surface has non-finite values")
        return 1
    out = output_dir(args)
    name = f"surface_epoch{epoch:02d}.json" if epoch is not None else "surface.json"
    payload = {"epoch": epoch, "x0": x0.tolist(), "x1": x1.tolist(), "z": z.tolist()}
    (out / name).write_text(json.dumps(payload) + "\n")
    print(f"{name}: {int(n)}x{int(n)} grid, non-increasing in the correct-class score on "
          f"{monotone_fraction(z):.0%} of slices")
    return 0


# -- gradcheck ---------------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    spec = oracles.GradcheckSpec(tuple(args.steps), args.seed or 0, frozenset(args.corrupt or ()))
    if any(n < 1 for n in spec.steps):
        raise UsageError("steps must be positive")
    results = oracles.run_gradcheck(spec)
    for r in results:
        print(r.line())
    out = output_dir(args)
    report = [{"name": r.name, "max_rel_err": r.error, "tolerance": r.tolerance, "passed": r.passed}
              for r in results]
    (out / "gradcheck.json").write_text(json.dumps(report, indent=2) + "\n")
    write_manifest(out, "gradcheck", {"seed": spec.seed, "steps": list(spec.steps)}, ["gradcheck.json"])
    failed = [r.name for r in results if not r.passed]
    if failed:
        print("failed: " + ", ".join(failed), file=sys.stderr)
        return 1
    return 0


# -- saddle ------------------------------------------------------------------------


def cmd_saddle(args) -> int:
    spec = saddle.SweepSpec(n_instances=args.instances, n_controls=args.controls, dims=tuple(args.dims),
                            horizon=args.horizon, seed=args.seed or 0)
    try:
        spec.validate()
    except saddle.SaddleError as exc:
        raise UsageError(str(exc)) from exc
    rows = saddle.run_sweep(spec)
    summary = saddle.summarize(rows)
    out = output_dir(args)
    (out / "saddle.csv").write_text(saddle.sweep_csv(rows))
    write_manifest(out, "saddle", {"seed": spec.seed, "spec": {k: (list(v) if isinstance(v, tuple) else v)
                                                               for k, v in vars(spec).items()},
                                   "summary": vars(summary)}, ["saddle.csv"])
    print(summary.line())
    return 0


# -- entry point -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value configuration file")
    common.add_argument("--seed", type=int, help="base seed (unsigned 64-bit)")
    common.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<command>)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="dynloss", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="run the teaching loop")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    p = sub.add_parser("ablate", parents=[common], help="sweep one axis")
    p.add_argument("axis", choices=sorted(AXES))
    p.add_argument("values", nargs="+")
    p.add_argument("--repeats", type=int, default=1, help="seeds per value: seed, seed+1, ...")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")

    p = sub.add_parser("surface", parents=[common], help="evaluate a DLN checkpoint on a grid")
    p.add_argument("checkpoint")
    p.add_argument("--grid", nargs=3, type=float, default=(-3.0, 3.0, 25), metavar=("LO", "HI", "N"))

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference oracles")
    p.add_argument("--steps", nargs="+", type=int, default=[1, 3], help="student steps per stage")
    p.add_argument("--corrupt", action="append", choices=["hvp", "hvp_mixed"], help=argparse.SUPPRESS)

    p = sub.add_parser("saddle", parents=[common], help="strict-saddle escape sweep")
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--controls", type=int, default=10)
    p.add_argument("--dims", nargs=2, type=int, default=(2, 10), metavar=("LO", "HI"))
    p.add_argument("--horizon", type=int, default=20000)
    return parser


COMMANDS = {"train": cmd_train, "ablate": cmd_ablate, "surface": cmd_surface,
            "gradcheck": cmd_gradcheck, "saddle": cmd_saddle}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
