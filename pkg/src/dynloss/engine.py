"""The three-stage teaching loop: student SGD under the DLN, reverse-mode
hypergradient for the DLN, teacher update from a second student stage.
"""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from . import models as mdl
from .data import BatchStream, Dataset, SplitState, redivide
from .models import Params, TeacherState

log = logging.getLogger(__name__)

DLN_OPTIMIZERS = ("lstm", "adam", "sgd", "rmsprop", "none")
RUN_CSV_HEADER = ("stage", "kind", "train_loss", "val_ce", "test_acc", "grad_phi_norm", "g_norm", "wall_ms")


class StageError(RuntimeError):
    pass


@dataclass
class StageConfig:
    """Hyperparameters of the teaching loop.

    ``K`` outer iterations are spread evenly over ``epochs``; the split is
    redrawn and the teacher state reset at the start of every epoch.
    """

    N: int = 5
    K: int = 40
    M: int | None = None
    eta: float = 0.1
    gamma: float = 0.001
    teacher_lr: float = 0.001
    w: float = 1.0
    dln_input: str = "probability"
    val_ratio: float = 0.5
    train_batch: int = 25
    val_batch: int = 100
    epochs: int = 10
    seed: int = 0
    nonfinite: str = "raise"

    def __post_init__(self):
        if self.M is None:
            self.M = self.K
        self.validate()

    def validate(self) -> None:
        if self.N < 0 or self.K < 0:
            raise ValueError("N and K must be non-negative")
        if self.M != self.K:
            raise ValueError("DLN and teacher iteration counts must match (M == K)")
        if not 0.0 < self.val_ratio < 1.0:
            raise ValueError("val_ratio must lie in (0, 1)")
        if self.eta < 0 or self.gamma < 0 or self.teacher_lr <= 0:
            raise ValueError("learning rates must be non-negative")
        if self.train_batch < 1 or self.val_batch < 1 or self.epochs < 1:
            raise ValueError("batch sizes and epochs must be positive")
        if self.nonfinite not in ("raise", "skip"):
            raise ValueError("nonfinite must be 'raise' or 'skip'")
        if self.dln_input not in mdl.DLN_INPUTS:
            raise ValueError(f"dln_input must be one of {mdl.DLN_INPUTS}")


@dataclass
class ModelConfig:
    student_hidden: tuple = mdl.STUDENT_HIDDEN
    dln_sizes: tuple = mdl.DLN_SIZES
    teacher_hidden: tuple = mdl.TEACHER_HIDDEN
    teacher_mode: str = "log_sign"
    teacher_zero_output: bool = True
    dln_optimizer: str = "lstm"
    warm_start: bool = True
    warm_start_steps: int = 600
    warm_start_lr: float = 0.005

    def __post_init__(self):
        if self.dln_optimizer not in DLN_OPTIMIZERS:
            raise ValueError(f"dln_optimizer must be one of {DLN_OPTIMIZERS}")
        mdl.teacher_input_dim(self.teacher_mode)


# -- trajectories ---------------------------------------------------------------


@dataclass
class TrajectoryStore:
    """Student iterates ``theta^0..theta^N`` and the batch each step consumed."""

    thetas: list = field(default_factory=list)
    batches: list = field(default_factory=list)
    indices: list = field(default_factory=list)
    losses: list = field(default_factory=list)

    @property
    def N(self) -> int:
        return len(self.batches)

    def __len__(self) -> int:
        return len(self.thetas)

    def replay(self, i: int, phi: Params, cfg: StageConfig, loss: str = "dln") -> Params:
        """Recompute ``theta^i`` from ``theta^(i-1)`` and the stored batch."""
        x, y = self.batches[i - 1]
        return sgd_step(self.thetas[i - 1], phi, x, y, cfg, loss)[0]


def sgd_step(theta: Params, phi: Params | None, x, y, cfg: StageConfig,
             loss: str = "dln") -> tuple[Params, float]:
    tape = ad.Tape()
    th = mdl.as_leaves(tape, theta)
    scores = mdl.student_forward(th, x)
    if loss == "ce":
        value = mdl.ce_loss(scores, y)
    else:
        value = mdl.dln_loss(mdl.as_constants(phi), scores, y, cfg.w, cfg.dln_input)
    grads = ad.grad(value, list(th.values()), create_graph=False)
    new = {k: theta[k] - cfg.eta * g.data for k, g in zip(theta, grads)}
    return new, value.item()


def student_stage(theta: Params, phi: Params | None, batches: Sequence, cfg: StageConfig,
                  loss: str = "dln", indices: Sequence | None = None) -> tuple[Params, TrajectoryStore]:
    """Plain SGD over ``batches`` (one step per ``(x, y)`` pair), recording every iterate."""
    traj = TrajectoryStore(thetas=[{k: np.array(v) for k, v in theta.items()}])
    current = traj.thetas[0]
    for i, (x, y) in enumerate(batches, start=1):
        try:
            current, value = sgd_step(current, phi, x, y, cfg, loss)
        except ad.NonFiniteError as exc:
            raise StageError(f"student step {i} of {len(batches)}: {exc}") from exc
        traj.thetas.append(current)
        traj.batches.append((x, y))
        traj.indices.append(None if indices is None else indices[i - 1])
        traj.losses.append(value)
    return current, traj


# -- hypergradients ------------------------------------------------------------


class ReverseResult(NamedTuple):
    grad_phi: Params
    val_ce: float
    grad_theta0: Params


def reverse_pass(traj: TrajectoryStore, phi: Params, val_batch, cfg: StageConfig) -> ReverseResult:
    """Replay the stored SGD steps backwards from ``N`` to ``1``.

    Starts from the validation-CE gradient at ``theta^N`` and at each step
    applies the student Hessian (for the next ``d theta``) and the mixed
    student/DLN Hessian (accumulated into ``d phi``), both as
    Hessian-vector products with the current ``d theta``.
    """
    if len(traj) != traj.N + 1:
        raise ValueError("incomplete trajectory")
    x_val, y_val = val_batch
    tape = ad.Tape()
    th = mdl.as_leaves(tape, traj.thetas[-1])
    e_val = mdl.ce_loss(mdl.student_forward(th, x_val), y_val)
    d_theta = [g.data for g in ad.grad(e_val, list(th.values()), create_graph=False)]
    d_phi = {k: np.zeros_like(v) for k, v in phi.items()}
    names = list(traj.thetas[0])
    for i in range(traj.N, 0, -1):
        theta_prev = traj.thetas[i - 1]
        if list(theta_prev) != names:
            raise ValueError("trajectory parameter layout changed mid-stage")
        tape = ad.Tape()
        th = mdl.as_leaves(tape, theta_prev)
        ph = mdl.as_leaves(tape, phi)
        x, y = traj.batches[i - 1]
        loss = mdl.dln_loss(ph, mdl.student_forward(th, x), y, cfg.w, cfg.dln_input)
        th_list = list(th.values())
        prods = ad.hvp_mixed(loss, th_list, th_list + list(ph.values()), d_theta)
        h_theta, h_phi = prods[: len(th_list)], prods[len(th_list):]
        for k, hk in zip(d_phi, h_phi):
            d_phi[k] = d_phi[k] - cfg.eta * hk.data
        d_theta = [dt - cfg.eta * hk.data for dt, hk in zip(d_theta, h_theta)]
        for arr in d_phi.values():
            if not np.all(np.isfinite(arr)):
                raise ad.NonFiniteError(f"non-finite DLN hypergradient at reverse step {i}")
    return ReverseResult(d_phi, e_val.item(), dict(zip(names, d_theta)))


def rmd_dln_grad(traj: TrajectoryStore, phi: Params, val_batch, cfg: StageConfig) -> Params:
    """Gradient of the validation CE at ``theta^N`` with respect to the DLN parameters."""
    return reverse_pass(traj, phi, val_batch, cfg).grad_phi


def dln_update(phi: Params, grad_phi: Params, teacher: Mapping[str, ad.Tensor], state: TeacherState,
               gamma: float, mode: str = "log_sign") -> tuple[dict, ad.Tensor, TeacherState]:
    """``phi' = phi + gamma * g`` with ``g`` from one teacher step; recorded on the teacher's tape."""
    flat = mdl.flatten(grad_phi)
    if flat.size != mdl.count(phi):
        raise ad.ShapeError("gradient does not match DLN parameters")
    g, new_state = mdl.teacher_step(teacher, state, flat, mode)
    phi_new, start = {}, 0
    for k, v in phi.items():
        n = np.size(v)
        gk = ad.reshape(ad.slice_(g, (slice(start, start + n),)), np.shape(v))
        phi_new[k] = ad.add(v, ad.scale(gk, gamma))
        start += n
    return phi_new, g, new_state


def teacher_stage(traj2: TrajectoryStore, phi_new: Mapping[str, ad.Tensor], val_batch,
                  teacher: Mapping[str, ad.Tensor], cfg: StageConfig) -> tuple[Params, ReverseResult]:
    """Gradient of the validation CE after the second stage w.r.t. the teacher parameters.

    The reverse pass over ``traj2`` yields ``d e_val / d phi'``; that
    cotangent is pulled back through the recorded DLN update into the
    teacher. Summing over steps first and pulling back once is exact
    because the pull-back is linear.
    """
    tape = next(iter(teacher.values())).tape
    for k, t in phi_new.items():
        if t.node is None or t.tape is not tape:
            raise ad.TapeError(f"updated DLN parameter {k!r} is not recorded on the teacher tape")
    rev = reverse_pass(traj2, mdl.numpy_params(phi_new), val_batch, cfg)
    inner = None
    for k, t in phi_new.items():
        term = ad.vdot(t, rev.grad_phi[k])
        inner = term if inner is None else ad.add(inner, term)
    grads = ad.grad(inner, list(teacher.values()), create_graph=False)
    return {k: g.data for k, g in zip(teacher, grads)}, rev


# -- optimizers ----------------------------------------------------------------


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def direction(self, grads: Mapping[str, np.ndarray]) -> Params:
        self.t += 1
        out = {}
        for k, g in grads.items():
            m = self.beta1 * self.m.get(k, 0.0) + (1 - self.beta1) * g
            v = self.beta2 * self.v.get(k, 0.0) + (1 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            mhat = m / (1 - self.beta1**self.t)
            vhat = v / (1 - self.beta2**self.t)
            out[k] = mhat / (np.sqrt(vhat) + self.eps)
        return out

    def step(self, params: Params, grads: Mapping[str, np.ndarray]) -> Params:
        d = self.direction(grads)
        return {k: params[k] - self.lr * d[k] for k in params}


class RMSProp:
    def __init__(self, alpha: float = 0.99, eps: float = 1e-8):
        self.alpha, self.eps = alpha, eps
        self.v: dict = {}

    def direction(self, grads):
        out = {}
        for k, g in grads.items():
            v = self.alpha * self.v.get(k, 0.0) + (1 - self.alpha) * g * g
            self.v[k] = v
            out[k] = g / (np.sqrt(v) + self.eps)
        return out


class PlainSGD:
    def direction(self, grads):
        return {k: np.array(g) for k, g in grads.items()}


def handcrafted_update(kind: str):
    return {"adam": lambda: Adam(1.0), "rmsprop": RMSProp, "sgd": PlainSGD}[kind]()


# -- the full loop ---------------------------------------------------------------


@dataclass
class StageRow:
    stage: int
    kind: str
    train_loss: float
    val_ce: float
    test_acc: float
    grad_phi_norm: float | None
    g_norm: float | None
    wall_ms: float


@dataclass
class RunRecord:
    rows: list = field(default_factory=list)

    def append(self, row: StageRow) -> None:
        if self.rows and row.stage != self.rows[-1].stage + 1:
            raise ValueError("stage index must increase by one")
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        return np.array([np.nan if getattr(r, name) is None else getattr(r, name) for r in self.rows])

    @property
    def final_test_acc(self) -> float:
        return self.rows[-1].test_acc if self.rows else float("nan")

    def to_csv(self, include_wall: bool = False) -> str:
        """CSV text. Wall times are left blank unless ``include_wall`` so the file is reproducible."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(RUN_CSV_HEADER)
        fmt = lambda v: "" if v is None else repr(float(v))
        for r in self.rows:
            writer.writerow([
                r.stage, r.kind, fmt(r.train_loss), fmt(r.val_ce), fmt(r.test_acc),
                fmt(r.grad_phi_norm), fmt(r.g_norm), fmt(r.wall_ms) if include_wall else "",
            ])
        return buf.getvalue()

    def timing_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(("stage", "kind", "wall_ms"))
        for r in self.rows:
            writer.writerow([r.stage, r.kind, f"{r.wall_ms:.3f}"])
        return buf.getvalue()


class RunResult(NamedTuple):
    theta: Params
    phi: Params
    teacher: Params
    record: RunRecord
    phi_history: dict
    student_steps: int


def _norm(params: Mapping[str, np.ndarray] | np.ndarray | None) -> float | None:
    if params is None:
        return None
    if isinstance(params, np.ndarray):
        return float(np.linalg.norm(params))
    return float(np.sqrt(sum(float(np.sum(v * v)) for v in params.values())))


def warm_start_dln(phi: Params, rng: np.random.Generator, steps: int, lr: float,
                   batch: int = 128, inputs: str = "probability", span: float | None = None) -> Params:
    """Regress the DLN onto two-class cross-entropy ``log(1 + exp(wrong - correct))``.

    Score pairs are drawn from ``[-span, span]^2`` and mapped to DLN inputs
    the same way the student's predictions are. Raw-score DLNs get a wide
    default span: their linear tails extrapolate, so a narrow fit leaves
    the loss unbounded below just outside it.
    """
    if span is None:
        span = 10.0 if inputs == "probability" else 30.0
    opt = Adam(lr)
    for _ in range(steps):
        pairs = rng.uniform(-span, span, size=(batch, 2))
        target = np.logaddexp(0.0, pairs[:, 1] - pairs[:, 0])[:, None]
        tape = ad.Tape()
        ph = mdl.as_leaves(tape, phi)
        x = mdl.score_pairs_to_inputs(pairs, inputs)
        loss = ad.mean(ad.square(ad.sub(mdl.dln_forward(ph, x), target)))
        grads = ad.grad(loss, list(ph.values()), create_graph=False)
        phi = opt.step(phi, {k: g.data for k, g in zip(ph, grads)})
    return phi


def init_run(cfg: StageConfig, model: ModelConfig, input_dim: int, n_classes: int):
    theta = mdl.init_student(input_dim, n_classes, np.random.default_rng([cfg.seed, 10]), model.student_hidden)
    phi = mdl.init_dln(np.random.default_rng([cfg.seed, 11]), model.dln_sizes)
    if model.warm_start:
        phi = warm_start_dln(phi, np.random.default_rng([cfg.seed, 13]), model.warm_start_steps,
                            model.warm_start_lr, inputs=cfg.dln_input)
    teacher = mdl.init_teacher(np.random.default_rng([cfg.seed, 12]), model.teacher_hidden, model.teacher_mode,
                               model.teacher_zero_output)
    return theta, phi, teacher


def epoch_schedule(K: int, epochs: int) -> list[int]:
    """Outer iterations per epoch, as even as possible."""
    return [len(part) for part in np.array_split(np.arange(K), epochs)]


class _Streams:
    def __init__(self, data: Dataset, cfg: StageConfig, split: SplitState):
        train_idx, val_idx, self.next_split = redivide(len(data), split)
        epoch = split.epoch
        self.data = data
        self.train = BatchStream(train_idx, cfg.train_batch, np.random.default_rng([cfg.seed, 1, epoch]))
        self.val = BatchStream(val_idx, cfg.val_batch, np.random.default_rng([cfg.seed, 2, epoch]))

    def batches(self, n: int):
        idx = self.train.take(n)
        return [(self.data.features[i], self.data.labels[i]) for i in idx], idx

    def val_batch(self):
        i = self.val.next()
        return self.data.features[i], self.data.labels[i]


def run_l2t_dln(cfg: StageConfig, train: Dataset, test: Dataset, model: ModelConfig | None = None,
                init: tuple | None = None, on_row=None) -> RunResult:
    """Run the teaching loop for ``cfg.K`` outer iterations.

    Each iteration: a student stage under the current DLN, the reverse pass
    for the DLN hypergradient, one DLN update from the teacher, a second
    student stage under the updated DLN, the teacher hypergradient through
    that stage, and one Adam step on the teacher. ``model.dln_optimizer``
    other than ``lstm`` swaps the teacher for a handcrafted update rule
    (``none`` keeps the DLN frozen).
    """
    model = model or ModelConfig()
    cfg.validate()
    theta, phi, teacher = init or init_run(cfg, model, train.input_dim, train.n_classes)
    teacher_opt = Adam(cfg.teacher_lr)
    handcrafted = None
    if model.dln_optimizer not in ("lstm", "none"):
        handcrafted = handcrafted_update(model.dln_optimizer)
    record = RunRecord()
    phi_history = {0: {k: np.array(v) for k, v in phi.items()}}
    split = SplitState(cfg.seed, cfg.val_ratio)
    stage = 0
    steps = 0

    def emit(row):
        record.append(row)
        if on_row is not None:
            on_row(row)

    for epoch, n_iter in enumerate(epoch_schedule(cfg.K, cfg.epochs), start=1):
        if n_iter == 0:
            continue
        streams = _Streams(train, cfg, split)
        split = streams.next_split
        state = TeacherState.zeros(mdl.count(phi), mdl.teacher_hidden(teacher))
        for _ in range(n_iter):
            # stage I: student learning under the current DLN
            t0 = time.perf_counter()
            batches, idx = streams.batches(cfg.N)
            theta, traj1 = student_stage(theta, phi, batches, cfg, indices=idx)
            steps += traj1.N
            # stage II: DLN hypergradient and update
            try:
                rev1 = reverse_pass(traj1, phi, streams.val_batch(), cfg)
                grad_phi, val1 = rev1.grad_phi, rev1.val_ce
            except ad.NonFiniteError as exc:
                if cfg.nonfinite == "raise":
                    raise StageError(f"stage {stage + 1}: {exc}") from exc
                log.warning("stage %d: skipping non-finite DLN hypergradient", stage + 1)
                grad_phi, val1 = {k: np.zeros_like(v) for k, v in phi.items()}, float("nan")
            tape = ad.Tape()
            teacher_t = mdl.as_leaves(tape, teacher)
            if model.dln_optimizer == "lstm":
                phi_new_t, g, state = dln_update(phi, grad_phi, teacher_t, state, cfg.gamma, model.teacher_mode)
                g_vec = g.data
            else:
                if handcrafted is None:
                    g_vec = np.zeros(mdl.count(phi))
                else:
                    g_vec = -mdl.flatten(handcrafted.direction(grad_phi))
                phi_new_t = None
            phi_new = (mdl.numpy_params(phi_new_t) if phi_new_t is not None
                       else mdl.unflatten(mdl.flatten(phi) + cfg.gamma * g_vec, phi))
            emit(StageRow(stage + 1, "dln", float(np.mean(traj1.losses)) if traj1.losses else float("nan"),
                          val1, mdl.accuracy(theta, test.features, test.labels), _norm(grad_phi),
                          _norm(g_vec), (time.perf_counter() - t0) * 1e3))
            stage += 1

            # stage III: second student stage and teacher learning
            t0 = time.perf_counter()
            batches, idx = streams.batches(cfg.N)
            theta2, traj2 = student_stage(theta, phi_new, batches, cfg, indices=idx)
            steps += traj2.N
            vb = streams.val_batch()
            grad_phi2 = None
            try:
                if phi_new_t is not None:
                    grad_teacher, rev2 = teacher_stage(traj2, phi_new_t, vb, teacher_t, cfg)
                    flat = np.concatenate([v.reshape(-1) for v in grad_teacher.values()])
                    if not np.all(np.isfinite(flat)):
                        raise ad.NonFiniteError("non-finite teacher hypergradient")
                    teacher = teacher_opt.step(teacher, grad_teacher)
                else:
                    rev2 = reverse_pass(traj2, phi_new, vb, cfg)
                val2, grad_phi2 = rev2.val_ce, rev2.grad_phi
            except ad.NonFiniteError as exc:
                if cfg.nonfinite == "raise":
                    raise StageError(f"stage {stage + 1}: {exc}") from exc
                log.warning("stage %d: skipping non-finite teacher hypergradient", stage + 1)
                val2 = float("nan")
            phi, theta = phi_new, theta2
            emit(StageRow(stage + 1, "teacher", float(np.mean(traj2.losses)) if traj2.losses else float("nan"),
                          val2, mdl.accuracy(theta, test.features, test.labels), _norm(grad_phi2),
                          None, (time.perf_counter() - t0) * 1e3))
            stage += 1
        phi_history[epoch] = {k: np.array(v) for k, v in phi.items()}
    return RunResult(theta, phi, teacher, record, phi_history, steps)


def run_fixed_loss(cfg: StageConfig, train: Dataset, test: Dataset, model: ModelConfig | None = None,
                   init: tuple | None = None, loss: str = "ce") -> RunResult:
    """Baseline with the same data schedule and step budget (``2 K N`` SGD steps) under a fixed loss.

    ``loss="ce"`` trains on cross-entropy; ``loss="dln"`` keeps the initial DLN frozen.
    """
    model = model or ModelConfig()
    theta, phi, teacher = init or init_run(cfg, model, train.input_dim, train.n_classes)
    record = RunRecord()
    split = SplitState(cfg.seed, cfg.val_ratio)
    stage = steps = 0
    for n_iter in epoch_schedule(cfg.K, cfg.epochs):
        if n_iter == 0:
            continue
        streams = _Streams(train, cfg, split)
        split = streams.next_split
        for _ in range(2 * n_iter):
            t0 = time.perf_counter()
            batches, idx = streams.batches(cfg.N)
            theta, traj = student_stage(theta, phi, batches, cfg, loss=loss, indices=idx)
            steps += traj.N
            xv, yv = streams.val_batch()
            val = mdl.ce_loss(mdl.student_forward(mdl.as_constants(theta), xv), yv).item()
            stage += 1
            record.append(StageRow(stage, loss, float(np.mean(traj.losses)) if traj.losses else float("nan"),
                                   val, mdl.accuracy(theta, test.features, test.labels), None, None,
                                   (time.perf_counter() - t0) * 1e3))
    return RunResult(theta, phi, teacher, record, {}, steps)
