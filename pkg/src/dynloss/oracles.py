"""Finite-difference oracles for the autodiff engine and both hypergradients.

Everything here runs on a deliberately tiny problem (three Gaussian blobs,
a linear student, a 20-parameter DLN, a 2-unit LSTM teacher) so that
central differences over every coordinate stay cheap.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import models as mdl
from .data import make_synthetic
from .engine import StageConfig, dln_update, rmd_dln_grad, student_stage, teacher_stage
from .models import Params, TeacherState

TOLERANCES = {
    "ops": 1e-6,
    "hvp": 1e-6,
    "hvp_mixed": 1e-6,
    "rmd_dln_grad": 1e-4,
    "teacher_stage": 1e-3,
    "unroll_identity": 1e-10,
}


def relative_error(a, b) -> float:
    """``max|a - b| / max|b|``; falls back to the absolute error when ``b`` is zero."""
    a, b = np.ravel(np.asarray(a, dtype=np.float64)), np.ravel(np.asarray(b, dtype=np.float64))
    err = float(np.max(np.abs(a - b))) if a.size else 0.0
    ref = float(np.max(np.abs(b))) if b.size else 0.0
    return err / ref if ref > 0 else err


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        out.flat[i] = (f(xp) - f(xm)) / (2 * h)
    return out


# -- tiny problem ---------------------------------------------------------------


@dataclass
class TinySpec:
    """Sizes for the oracle problem: a linear ``2 -> 3`` student has 9 parameters, DLN ``(2,3,2,1)`` has 20."""

    N: int = 3
    n_classes: int = 3
    dln_sizes: tuple = (2, 3, 2, 1)
    teacher_hidden: tuple = (2, 1)
    teacher_mode: str = "log_sign"
    batch: int = 6
    eta: float = 0.5
    gamma: float = 0.1
    seed: int = 0
    dln_input: str = "probability"


@dataclass
class TinyProblem:
    spec: TinySpec
    cfg: StageConfig
    theta0: Params
    phi: Params
    teacher: Params
    batches1: list
    batches2: list
    val1: tuple
    val2: tuple


def tiny_problem(spec: TinySpec | None = None) -> TinyProblem:
    spec = spec or TinySpec()
    data = make_synthetic("blobs", 60, noise=0.8, seed=spec.seed, n_classes=spec.n_classes)
    rng = np.random.default_rng([spec.seed, 99])
    theta0 = mdl.init_student(data.input_dim, spec.n_classes, rng, hidden=())
    phi = mdl.init_dln(rng, spec.dln_sizes)
    teacher = mdl.init_teacher(rng, spec.teacher_hidden, spec.teacher_mode, zero_output=False)

    def batch():
        idx = rng.choice(len(data), spec.batch, replace=False)
        return data.features[idx], data.labels[idx]

    cfg = StageConfig(N=spec.N, K=1, eta=spec.eta, gamma=spec.gamma, epochs=1, seed=spec.seed,
                      dln_input=spec.dln_input)
    return TinyProblem(spec, cfg, theta0, phi, teacher, [batch() for _ in range(spec.N)],
                       [batch() for _ in range(spec.N)], batch(), batch())


def val_ce(theta: Params, val) -> float:
    return mdl.ce_loss(mdl.student_forward(mdl.as_constants(theta), val[0]), val[1]).item()


def stage_val_ce(prob: TinyProblem, phi: Params, batches, val, theta0: Params | None = None) -> tuple[float, Params]:
    theta, _ = student_stage(prob.theta0 if theta0 is None else theta0, phi, batches, prob.cfg)
    return val_ce(theta, val), theta


def unrolled_dln_grad(theta0: Params, phi: Params, batches, val, cfg: StageConfig) -> Params:
    """Differentiate straight through ``N`` SGD steps kept on one tape (forward unroll)."""
    tape = ad.Tape()
    ph = mdl.as_leaves(tape, phi)
    th = mdl.as_leaves(tape, theta0)
    for x, y in batches:
        loss = mdl.dln_loss(ph, mdl.student_forward(th, x), y, cfg.w, cfg.dln_input)
        grads = ad.grad(loss, list(th.values()), create_graph=True)
        th = {k: ad.sub(t, ad.scale(g, cfg.eta)) for (k, t), g in zip(th.items(), grads)}
    e = mdl.ce_loss(mdl.student_forward(th, val[0]), val[1])
    return {k: g.data for k, g in zip(ph, ad.grad(e, list(ph.values()), create_graph=False))}


# -- individual checks ----------------------------------------------------------


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float
    seconds: float = 0.0
    detail: str = ""

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < self.tolerance)

    def line(self) -> str:
        status, cmp = ("PASS", "<") if self.passed else ("FAIL", ">=")
        extra = f" ({self.detail})" if self.detail else ""
        return f"{status} {self.name}: max rel err {self.error:.3e} {cmp} {self.tolerance:.0e}{extra}"


def _timed(name: str, fn) -> CheckResult:
    t0 = time.perf_counter()
    err, detail = fn()
    return CheckResult(name, err, TOLERANCES[name.split("[")[0]], time.perf_counter() - t0, detail)


def _op_cases(rng: np.random.Generator):
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4))
    m = rng.standard_normal((4, 2))
    pos = rng.uniform(0.5, 2.0, (3, 4))
    idx = np.array([[0, 5], [7, 11], [2, 2]])
    return [
        ("add", lambda t: ad.add(t, b), a),
        ("sub_broadcast", lambda t: ad.sub(t, b[0]), a),
        ("mul", lambda t: ad.mul(t, t), a),
        ("div", lambda t: ad.div(b, t), pos),
        ("scale_neg", lambda t: ad.neg(ad.scale(t, 2.5)), a),
        ("matmul", lambda t: ad.matmul(t, m), a),
        ("matvec", lambda t: ad.matmul(t, m[:, 0]), a),
        ("transpose_reshape", lambda t: ad.reshape(ad.transpose(t), (2, 6)), a),
        ("sum_axis", lambda t: ad.sum_(t, axis=0, keepdims=True), a),
        ("mean", lambda t: ad.mean(t, axis=1), a),
        ("concat", lambda t: ad.concat([t, ad.square(t)], axis=1), a),
        ("slice", lambda t: ad.slice_(t, (slice(1, 3), slice(None, None, 2))), a),
        ("gather", lambda t: ad.gather(t, idx), a),
        ("exp", ad.exp, a),
        ("log", ad.log, pos),
        ("tanh", ad.tanh, a),
        ("sigmoid", ad.sigmoid, a),
        ("leaky_relu", ad.leaky_relu, a),
        ("logsumexp", lambda t: ad.logsumexp(t, axis=1), a),
        ("log_softmax", lambda t: ad.log_softmax(t, axis=1), a),
        ("softmax", lambda t: ad.softmax(t, axis=0), a),
        ("broadcast_to", lambda t: ad.broadcast_to(ad.slice_(t, (slice(0, 1),)), (3, 4)), a),
    ]


def check_ops(seed: int = 0) -> tuple[float, str]:
    """Gradient of ``<op(x), r>`` for a random ``r``, for every primitive."""
    rng = np.random.default_rng([seed, 1])
    worst, worst_name = 0.0, ""
    for name, op, x0 in _op_cases(rng):
        probe = rng.standard_normal(np.shape(op(ad.constant(x0)).data))

        def f(x):
            return float(np.sum(op(ad.constant(x)).data * probe))

        tape = ad.Tape()
        x = tape.variable(x0)
        (g,) = ad.grad(ad.vdot(op(x), probe), [x], create_graph=False)
        err = relative_error(g.data, central_difference(f, x0, 1e-6))
        if err > worst:
            worst, worst_name = err, name
    return worst, f"worst op {worst_name}" if worst_name else ""


def _dense_fd_hessian(loss_fn, p1: Params, p2: Params, h: float = 1e-5) -> np.ndarray:
    """Columns by central differences of the analytic gradient w.r.t. ``p1`` as ``p2`` varies."""
    def grad_p1(flat2):
        tape = ad.Tape()
        t2 = mdl.as_leaves(tape, mdl.unflatten(flat2, p2))
        t1 = t2 if p1 is p2 else mdl.as_leaves(tape, p1)
        grads = ad.grad(loss_fn(t1, t2), list(t1.values()), create_graph=False)
        return np.concatenate([g.data.reshape(-1) for g in grads])

    x = mdl.flatten(p2)
    cols = []
    for j in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[j] += h
        xm[j] -= h
        cols.append((grad_p1(xp) - grad_p1(xm)) / (2 * h))
    return np.stack(cols, axis=1)


def _hvp_problem(seed: int):
    rng = np.random.default_rng([seed, 2])
    theta = mdl.init_student(2, 3, rng, hidden=(2,))      # 15 parameters
    phi = mdl.init_dln(rng, (2, 3, 2, 1))                  # 20 parameters
    x = rng.standard_normal((5, 2))
    y = rng.integers(0, 3, 5)
    return theta, phi, x, y


def check_hvp(seed: int = 0, hvp_fn=None) -> tuple[float, str]:
    """``hvp`` on the student loss against a dense finite-difference Hessian."""
    hvp_fn = hvp_fn or ad.hvp
    theta, phi, x, y = _hvp_problem(seed)
    phi_c = mdl.as_constants(phi)

    def loss_fn(t1, _t2):
        return mdl.dln_loss(phi_c, mdl.student_forward(t1, x), y)

    H = _dense_fd_hessian(loss_fn, theta, theta)
    v = np.random.default_rng([seed, 3]).standard_normal(H.shape[1])
    tape = ad.Tape()
    th = mdl.as_leaves(tape, theta)
    vs = [a for a in mdl.unflatten(v, theta).values()]
    out = hvp_fn(loss_fn(th, th), list(th.values()), vs)
    got = np.concatenate([o.data.reshape(-1) for o in out])
    return relative_error(got, H @ v), f"{H.shape[0]} parameters"


def check_hvp_mixed(seed: int = 0, hvp_fn=None) -> tuple[float, str]:
    """Mixed student/DLN second derivative ``d/d phi <d loss/d theta, v>`` against finite differences."""
    hvp_fn = hvp_fn or ad.hvp_mixed
    theta, phi, x, y = _hvp_problem(seed)

    def loss_fn(t_theta, t_phi):
        return mdl.dln_loss(t_phi, mdl.student_forward(t_theta, x), y)

    H = _dense_fd_hessian(loss_fn, theta, phi)               # rows theta, columns phi
    v = np.random.default_rng([seed, 4]).standard_normal(H.shape[0])
    tape = ad.Tape()
    th = mdl.as_leaves(tape, theta)
    ph = mdl.as_leaves(tape, phi)
    out = hvp_fn(loss_fn(th, ph), list(th.values()), list(ph.values()), list(mdl.unflatten(v, theta).values()))
    got = np.concatenate([o.data.reshape(-1) for o in out])
    return relative_error(got, H.T @ v), f"{H.shape[0]}x{H.shape[1]} block"


def check_rmd(prob: TinyProblem) -> tuple[float, str]:
    _, traj = student_stage(prob.theta0, prob.phi, prob.batches1, prob.cfg)
    got = mdl.flatten(rmd_dln_grad(traj, prob.phi, prob.val1, prob.cfg))

    def f(flat):
        return stage_val_ce(prob, mdl.unflatten(flat, prob.phi), prob.batches1, prob.val1)[0]

    return relative_error(got, central_difference(f, mdl.flatten(prob.phi))), f"N={prob.spec.N}"


def check_unroll_identity(prob: TinyProblem) -> tuple[float, str]:
    _, traj = student_stage(prob.theta0, prob.phi, prob.batches1, prob.cfg)
    got = mdl.flatten(rmd_dln_grad(traj, prob.phi, prob.val1, prob.cfg))
    ref = mdl.flatten(unrolled_dln_grad(prob.theta0, prob.phi, prob.batches1, prob.val1, prob.cfg))
    return relative_error(got, ref), f"N={prob.spec.N}"


def two_stage_val_ce(prob: TinyProblem, teacher: Params) -> float:
    """Validation CE after stage one, a teacher-driven DLN update, and stage two."""
    theta1, traj = student_stage(prob.theta0, prob.phi, prob.batches1, prob.cfg)
    grad_phi = rmd_dln_grad(traj, prob.phi, prob.val1, prob.cfg)
    state = TeacherState.zeros(mdl.count(prob.phi), prob.spec.teacher_hidden)
    phi_new, _, _ = dln_update(prob.phi, grad_phi, mdl.as_constants(teacher), state, prob.cfg.gamma,
                               prob.spec.teacher_mode)
    return stage_val_ce(prob, mdl.numpy_params(phi_new), prob.batches2, prob.val2, theta0=theta1)[0]


def check_teacher(prob: TinyProblem) -> tuple[float, str]:
    theta1, traj = student_stage(prob.theta0, prob.phi, prob.batches1, prob.cfg)
    grad_phi = rmd_dln_grad(traj, prob.phi, prob.val1, prob.cfg)
    tape = ad.Tape()
    teacher_t = mdl.as_leaves(tape, prob.teacher)
    state = TeacherState.zeros(mdl.count(prob.phi), prob.spec.teacher_hidden)
    phi_new_t, _, _ = dln_update(prob.phi, grad_phi, teacher_t, state, prob.cfg.gamma, prob.spec.teacher_mode)
    _, traj2 = student_stage(theta1, mdl.numpy_params(phi_new_t), prob.batches2, prob.cfg)
    grads, _ = teacher_stage(traj2, phi_new_t, prob.val2, teacher_t, prob.cfg)
    got = mdl.flatten(grads)
    ref = central_difference(lambda flat: two_stage_val_ce(prob, mdl.unflatten(flat, prob.teacher)),
                             mdl.flatten(prob.teacher))
    return relative_error(got, ref), f"{got.size} teacher parameters, N={prob.spec.N}"


# -- driver ----------------------------------------------------------------------


@dataclass
class GradcheckSpec:
    steps: tuple = (1, 3)
    seed: int = 0
    corrupt: frozenset = field(default_factory=frozenset)


def corrupted(fn):
    """Wrap an HVP routine so that its output is off by a visible amount (negative control)."""
    def wrapper(*args, **kwargs):
        out = fn(*args, **kwargs)
        return [ad.constant(o.data * 1.01 + 1e-3) for o in out]
    return wrapper


def run_gradcheck(spec: GradcheckSpec | None = None) -> list[CheckResult]:
    spec = spec or GradcheckSpec()
    unknown = set(spec.corrupt) - {"hvp", "hvp_mixed"}
    if unknown:
        raise ValueError(f"cannot corrupt {sorted(unknown)}")
    hvp_fn = corrupted(ad.hvp) if "hvp" in spec.corrupt else None
    mixed_fn = corrupted(ad.hvp_mixed) if "hvp_mixed" in spec.corrupt else None
    results = [
        _timed("ops", lambda: check_ops(spec.seed)),
        _timed("hvp", lambda: check_hvp(spec.seed, hvp_fn)),
        _timed("hvp_mixed", lambda: check_hvp_mixed(spec.seed, mixed_fn)),
    ]
    for n in spec.steps:
        prob = tiny_problem(TinySpec(N=n, seed=spec.seed))
        results.append(_timed(f"rmd_dln_grad[N={n}]", lambda: check_rmd(prob)))
        results.append(_timed(f"unroll_identity[N={n}]", lambda: check_unroll_identity(prob)))
        results.append(_timed(f"teacher_stage[N={n}]", lambda: check_teacher(prob)))
    return results
