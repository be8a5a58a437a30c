"""Student MLP, dynamic loss network, coordinate-wise LSTM teacher, losses.

Parameters are plain ordered ``dict[str, np.ndarray]`` outside a tape. The
forward functions take the same mapping with :class:`~dynloss.autodiff.Tensor`
values (leaves or constants) so that one code path serves training steps,
hypergradients and finite-difference oracles.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LEAKY_SLOPE = 0.01
STUDENT_HIDDEN = (32, 32)
DLN_SIZES = (2, 40, 40, 40, 40, 1)
TEACHER_HIDDEN = (64, 64, 64, 1)
PREPROCESS_P = 10.0
DLN_INPUTS = ("probability", "score")

Params = dict  # str -> np.ndarray, insertion-ordered


# -- parameter helpers --------------------------------------------------------


def as_leaves(tape: ad.Tape, params: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: tape.variable(v, name=k) for k, v in params.items()}


def as_constants(params: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}


def numpy_params(params: Mapping[str, Tensor]) -> Params:
    return {k: np.array(v.data if isinstance(v, Tensor) else v) for k, v in params.items()}


def flatten(params: Mapping[str, np.ndarray]) -> np.ndarray:
    if not params:
        return np.zeros(0)
    return np.concatenate([np.asarray(v, dtype=np.float64).reshape(-1) for v in params.values()])


def unflatten(vec: np.ndarray, like: Mapping[str, np.ndarray]) -> Params:
    out, start = {}, 0
    for k, v in like.items():
        n = int(np.prod(np.shape(v)))
        out[k] = np.array(vec[start : start + n]).reshape(np.shape(v))
        start += n
    if start != len(vec):
        raise ValueError(f"vector of length {len(vec)} does not match {start} parameters")
    return out


def count(params: Mapping[str, np.ndarray]) -> int:
    return int(sum(np.size(v) for v in params.values()))


# -- MLPs ---------------------------------------------------------------------


def kaiming_normal(fan_in: int, fan_out: int, rng: np.random.Generator, slope: float) -> np.ndarray:
    gain = np.sqrt(2.0 / (1.0 + slope**2))
    return rng.normal(0.0, gain / np.sqrt(fan_in), size=(fan_in, fan_out))


def init_mlp(sizes: Sequence[int], rng: np.random.Generator, slope: float = LEAKY_SLOPE) -> Params:
    params = {}
    for i, (fi, fo) in enumerate(zip(sizes[:-1], sizes[1:])):
        params[f"w{i}"] = kaiming_normal(fi, fo, rng, slope)
        params[f"b{i}"] = np.zeros(fo)
    return params


def mlp_sizes(params: Mapping[str, np.ndarray]) -> tuple[int, ...]:
    n_layers = len(params) // 2
    ws = [np.shape(params[f"w{i}"]) for i in range(n_layers)]
    for a, b in zip(ws[:-1], ws[1:]):
        if a[1] != b[0]:
            raise ValueError("inconsistent layer shapes")
    return (ws[0][0],) + tuple(w[1] for w in ws)


def mlp_forward(params: Mapping[str, Tensor], x, slope: float = LEAKY_SLOPE) -> Tensor:
    n_layers = len(params) // 2
    h = x
    for i in range(n_layers):
        h = ad.add(ad.matmul(h, params[f"w{i}"]), params[f"b{i}"])
        if i < n_layers - 1:
            h = ad.leaky_relu(h, slope)
    return h


def init_student(input_dim: int, n_classes: int, rng: np.random.Generator,
                 hidden: Sequence[int] = STUDENT_HIDDEN) -> Params:
    return init_mlp((input_dim, *hidden, n_classes), rng)


def student_forward(theta: Mapping[str, Tensor], x) -> Tensor:
    """Raw class scores of shape ``(batch, classes)``; no softmax."""
    x = ad.constant(x)
    in_dim = np.shape(theta["w0"])[0]
    if x.ndim != 2 or x.shape[1] != in_dim:
        raise ad.ShapeError(f"student expects inputs of shape (batch, {in_dim}), got {x.shape}")
    return mlp_forward(theta, x)


def init_dln(rng: np.random.Generator, sizes: Sequence[int] = DLN_SIZES) -> Params:
    if sizes[0] != 2 or sizes[-1] != 1:
        raise ValueError("the loss network maps 2-vectors to a scalar")
    return init_mlp(sizes, rng)


# -- losses -------------------------------------------------------------------


def _check_labels(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
        labels = labels.astype(np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    return labels


def pair_index(labels: np.ndarray, n_classes: int) -> np.ndarray:
    """Flat indices into a ``(batch, C)`` score matrix forming 1-vs-1 pairs.

    Row ``b * (C - 1) + j`` holds ``(correct score, j-th wrong score)`` of
    example ``b``.
    """
    labels = _check_labels(labels, n_classes)
    b = labels.shape[0]
    cls = np.arange(n_classes)
    wrong = np.stack([cls[cls != y] for y in labels]) if b else np.zeros((0, n_classes - 1), int)
    base = (np.arange(b) * n_classes)[:, None]
    correct = np.repeat(base[:, 0] + labels, n_classes - 1)
    return np.stack([correct, (base + wrong).reshape(-1)], axis=1)


def make_pairs(predictions: Tensor, labels, inputs: str = "probability") -> Tensor:
    """DLN inputs at each (correct, wrong) index pair.

    ``"score"`` hands the DLN raw scores. ``"probability"`` (the default)
    hands it softmax probabilities instead: a DLN on raw scores is piecewise
    linear and never flattens out, so once it drifts it can push the
    student's scores off to infinity. Probabilities saturate, which keeps
    the learned loss self-limiting.
    """
    if inputs == "probability":
        predictions = ad.softmax(predictions, axis=1)
    elif inputs != "score":
        raise ValueError(f"inputs must be one of {DLN_INPUTS}")
    return ad.gather(predictions, pair_index(labels, predictions.shape[1]))


def score_pairs_to_inputs(scores: np.ndarray, inputs: str = "probability") -> np.ndarray:
    """Map raw ``(correct, wrong)`` score rows to DLN inputs, each row read as a two-class prediction."""
    scores = np.asarray(scores, dtype=np.float64)
    if inputs == "score":
        return scores
    if inputs != "probability":
        raise ValueError(f"inputs must be one of {DLN_INPUTS}")
    return np.exp(scores - np.logaddexp(scores[..., :1], scores[..., 1:]))


def dln_forward(phi: Mapping[str, Tensor], pairs) -> Tensor:
    return mlp_forward(phi, pairs)


def dln_loss(phi: Mapping[str, Tensor], predictions: Tensor, labels, w: float = 1.0,
             inputs: str = "probability") -> Tensor:
    """Mean DLN output over all (correct, wrong) pairs, times the example weight ``w``."""
    predictions = ad.constant(predictions)
    if predictions.ndim != 2:
        raise ad.ShapeError("predictions must be (batch, classes)")
    out = ad.mean(dln_forward(phi, make_pairs(predictions, labels, inputs)))
    return ad.scale(out, w) if w != 1.0 else out


def ce_loss(predictions: Tensor, labels) -> Tensor:
    predictions = ad.constant(predictions)
    b, c = predictions.shape
    labels = _check_labels(labels, c)
    picked = ad.gather(predictions, np.arange(b) * c + labels)
    return ad.mean(ad.sub(ad.logsumexp(predictions, axis=1), picked))


def accuracy(theta: Mapping[str, np.ndarray], x: np.ndarray, y: np.ndarray) -> float:
    scores = student_forward(as_constants(theta), x).data
    return float(np.mean(np.argmax(scores, axis=1) == y))


# -- LSTM teacher -------------------------------------------------------------


@dataclass
class TeacherState:
    """Per-coordinate hidden and cell state for each LSTM layer."""

    h: list
    c: list

    @property
    def n_coords(self) -> int:
        return self.h[0].shape[0]

    @classmethod
    def zeros(cls, n_coords: int, hidden: Sequence[int] = TEACHER_HIDDEN) -> "TeacherState":
        return cls([np.zeros((n_coords, n)) for n in hidden], [np.zeros((n_coords, n)) for n in hidden])

    def permuted(self, perm: np.ndarray) -> "TeacherState":
        return TeacherState([h[perm] for h in self.h], [c[perm] for c in self.c])


def teacher_input_dim(mode: str) -> int:
    if mode == "log_sign":
        return 2
    if mode == "raw":
        return 1
    raise ValueError(f"unknown teacher preprocessing mode {mode!r}")


def init_teacher(rng: np.random.Generator, hidden: Sequence[int] = TEACHER_HIDDEN,
                 mode: str = "log_sign", zero_output: bool = True) -> Params:
    """LSTM weights drawn uniformly in ``+-1/sqrt(width)``.

    With ``zero_output`` the last layer starts at zero, so the first update
    is ``g = 0`` and the teacher begins as the identity on the DLN.
    """
    params = {}
    n_in = teacher_input_dim(mode)
    for i, n in enumerate(hidden):
        bound = 1.0 / np.sqrt(n)
        params[f"l{i}.w_ih"] = rng.uniform(-bound, bound, size=(n_in, 4 * n))
        params[f"l{i}.w_hh"] = rng.uniform(-bound, bound, size=(n, 4 * n))
        params[f"l{i}.b"] = rng.uniform(-bound, bound, size=4 * n)
        n_in = n
    if zero_output:
        last = len(hidden) - 1
        for key in ("w_ih", "w_hh", "b"):
            params[f"l{last}.{key}"] = np.zeros_like(params[f"l{last}.{key}"])
    return params


def teacher_hidden(params: Mapping[str, np.ndarray]) -> tuple[int, ...]:
    n_layers = len(params) // 3
    return tuple(int(np.shape(params[f"l{i}.w_hh"])[0]) for i in range(n_layers))


def preprocess_gradient(grad_vec: np.ndarray, mode: str = "log_sign", p: float = PREPROCESS_P) -> np.ndarray:
    """Per-coordinate teacher input.

    ``log_sign`` maps a gradient value to ``(log|x| / p, sign x)`` when
    ``|x| >= e^-p`` and to ``(-1, e^p x)`` otherwise.
    """
    x = np.asarray(grad_vec, dtype=np.float64).reshape(-1)
    if mode == "raw":
        return x[:, None]
    if mode != "log_sign":
        raise ValueError(f"unknown teacher preprocessing mode {mode!r}")
    big = np.abs(x) >= np.exp(-p)
    out = np.empty((x.size, 2))
    with np.errstate(divide="ignore"):
        out[:, 0] = np.where(big, np.log(np.abs(x)) / p, -1.0)
    out[:, 1] = np.where(big, np.sign(x), np.exp(p) * x)
    return out


def teacher_step(params: Mapping[str, Tensor], state: TeacherState, grad_phi,
                 mode: str = "log_sign") -> tuple[Tensor, TeacherState]:
    """One coordinate-wise LSTM step over every scalar of ``grad_phi``.

    Returns the update ``g`` (flat, one entry per coordinate) and the
    advanced state. Incoming state is a constant; the returned state is
    detached.
    """
    grad_vec = np.asarray(grad_phi.data if isinstance(grad_phi, Tensor) else grad_phi).reshape(-1)
    hidden = teacher_hidden(params)
    if len(state.h) != len(hidden) or state.n_coords != grad_vec.size:
        raise ValueError("teacher state does not match gradient or parameter shapes")
    for h, n in zip(state.h, hidden):
        if h.shape[1] != n:
            raise ValueError("teacher state width does not match parameters")
    x = Tensor(preprocess_gradient(grad_vec, mode))
    if x.shape[1] != np.shape(params["l0.w_ih"])[0]:
        raise ValueError("teacher input width does not match preprocessing mode")
    new_h, new_c = [], []
    for i, n in enumerate(hidden):
        z = ad.add(
            ad.add(ad.matmul(x, params[f"l{i}.w_ih"]), ad.matmul(state.h[i], params[f"l{i}.w_hh"])),
            params[f"l{i}.b"],
        )
        gi = ad.sigmoid(z[:, 0:n])
        gf = ad.sigmoid(z[:, n : 2 * n])
        gg = ad.tanh(z[:, 2 * n : 3 * n])
        go = ad.sigmoid(z[:, 3 * n : 4 * n])
        c = ad.add(ad.mul(gf, state.c[i]), ad.mul(gi, gg))
        h = ad.mul(go, ad.tanh(c))
        new_h.append(np.array(h.data))
        new_c.append(np.array(c.data))
        x = h
    return ad.reshape(x, (-1,)), TeacherState(new_h, new_c)


# -- checkpoints --------------------------------------------------------------

MAGIC = b"L2TD"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: Mapping[str, np.ndarray]) -> None:
    """Write tensors in the flat little-endian binary checkpoint format."""
    buf = bytearray(MAGIC)
    buf += struct.pack("<II", FORMAT_VERSION, len(tensors))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        buf += arr.tobytes(order="C")
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise CheckpointError(f"{path}: truncated checkpoint")
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    version, n = take("<II")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    out = {}
    for _ in range(n):
        (name_len,) = take("<I")
        name = bytes(take(f"<{name_len}s")[0]).decode("utf-8")
        (rank,) = take("<I")
        shape = take(f"<{rank}Q")
        count_ = int(np.prod(shape)) if rank else 1
        vals = take(f"<{count_ * 8}s")[0]
        out[name] = np.frombuffer(vals, dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(data):
        raise CheckpointError(f"{path}: trailing bytes")
    return out


def split_checkpoint(tensors: Mapping[str, np.ndarray], prefix: str) -> Params:
    p = prefix.rstrip("/") + "/"
    return {k[len(p):]: v for k, v in tensors.items() if k.startswith(p)}


def dln_from_checkpoint(tensors: Mapping[str, np.ndarray]) -> Params:
    phi = split_checkpoint(tensors, "dln") or dict(tensors)
    try:
        sizes = mlp_sizes(phi)
    except (KeyError, ValueError, IndexError) as exc:
        raise CheckpointError(f"checkpoint does not hold a loss network: {exc}") from None
    if sizes[0] != 2 or sizes[-1] != 1:
        raise CheckpointError(f"loss network must map 2 -> 1, checkpoint has {sizes}")
    for i in range(len(sizes) - 1):
        if np.shape(phi[f"b{i}"]) != (sizes[i + 1],):
            raise CheckpointError("bias shape mismatch in checkpoint")
    return phi
