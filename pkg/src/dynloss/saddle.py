"""Escape from strict saddles under two-block alternating gradient descent.

Around a stationary point ``v*`` of a quadratic with Hessian ``H``, one
alternating sweep (block 1 takes a gradient step, then block 2 steps using
the refreshed block 1) is the linear map ``v' = M^-1 G v`` with
``M = I + eta H_l`` and ``G = I - eta H_u``, where ``H_l`` is the
block-2-by-block-1 coupling and ``H_u`` everything else. The saddle is
escaped when the largest eigenvalue of that map exceeds one.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg

CSV_COLUMNS = ("dim", "eta", "gamma_c", "C", "Lmax", "lambda_max", "rhs_bound", "margin", "escaped")
OVERFLOW_DISTANCE = 1e150


class SaddleError(ValueError):
    pass


class EigenConvergenceError(ArithmeticError):
    pass


def _as_partition(partition, d: int) -> tuple[np.ndarray, np.ndarray]:
    try:
        b1, b2 = (np.asarray(sorted(int(i) for i in block), dtype=np.int64) for block in partition)
    except (TypeError, ValueError) as exc:
        raise SaddleError("partition must be two collections of indices") from exc
    joined = np.concatenate([b1, b2])
    if len(b1) == 0 or len(b2) == 0:
        raise SaddleError("both blocks must be non-empty")
    if len(np.unique(joined)) != len(joined):
        raise SaddleError("blocks overlap")
    if sorted(joined.tolist()) != list(range(d)):
        raise SaddleError(f"blocks must cover indices 0..{d - 1}")
    return b1, b2


@dataclass
class QuadraticSaddle:
    """``f(v) = 0.5 (v - v*)^T H (v - v*)`` with a two-block coordinate split.

    ``C`` is the spectral norm of ``H``; ``L_max`` the larger spectral norm
    of the two diagonal blocks.
    """

    H: np.ndarray
    partition: tuple
    eta: float
    gamma_c: float
    v_star: np.ndarray | None = None
    blocks: tuple = field(init=False, repr=False)

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=np.float64)
        d = self.H.shape[0]
        if self.H.ndim != 2 or self.H.shape != (d, d):
            raise SaddleError("H must be square")
        if not np.array_equal(self.H, self.H.T):
            raise SaddleError("H must be exactly symmetric")
        if self.gamma_c <= 0:
            raise SaddleError("gamma_c must be positive")
        self.blocks = _as_partition(self.partition, d)
        self.v_star = np.zeros(d) if self.v_star is None else np.asarray(self.v_star, dtype=np.float64)

    @property
    def dim(self) -> int:
        return self.H.shape[0]

    @property
    def lambda_min(self) -> float:
        return float(np.linalg.eigvalsh(self.H)[0])

    @property
    def is_strict_saddle(self) -> bool:
        return self.lambda_min <= -self.gamma_c

    @property
    def C(self) -> float:
        return float(np.linalg.norm(self.H, 2))

    @property
    def L_max(self) -> float:
        b1, b2 = self.blocks
        return max(float(np.linalg.norm(self.H[np.ix_(b, b)], 2)) for b in (b1, b2))

    def gradient(self, v: np.ndarray) -> np.ndarray:
        return self.H @ (v - self.v_star)


def split_hessian(H: np.ndarray, partition) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(H_u, H_l)``: ``H_l`` keeps only the block-2-rows/block-1-columns entries."""
    H = np.asarray(H, dtype=np.float64)
    b1, b2 = _as_partition(partition, H.shape[0])
    H_l = np.zeros_like(H)
    H_l[np.ix_(b2, b1)] = H[np.ix_(b2, b1)]
    H_u = H.copy()
    H_u[np.ix_(b2, b1)] = 0.0
    return H_u, H_l


def build_M_G(H_u: np.ndarray, H_l: np.ndarray, eta: float) -> tuple[np.ndarray, np.ndarray]:
    if eta < 0:
        raise SaddleError("eta must be non-negative")
    H_u, H_l = np.asarray(H_u, dtype=np.float64), np.asarray(H_l, dtype=np.float64)
    if H_u.shape != H_l.shape or H_u.ndim != 2 or H_u.shape[0] != H_u.shape[1]:
        raise SaddleError("H_u and H_l must be square and of equal shape")
    eye = np.eye(H_u.shape[0])
    M = eye + eta * H_l
    G = eye - eta * H_u
    # H_l only maps block 1 into block 2, so it is nilpotent and det(M) = 1.
    assert np.all(np.diag(M) == 1.0)
    return M, G


def agd_map(M: np.ndarray, G: np.ndarray) -> np.ndarray:
    """``M^-1 G`` by forward substitution on ``M = I + N`` with ``N @ N = 0``."""
    N = M - np.eye(M.shape[0])
    return G - N @ G


def max_eigenvalue(M: np.ndarray, G: np.ndarray) -> tuple[float, bool]:
    """Largest real part among the eigenvalues of ``M^-1 G`` and whether any is non-real.

    Eigenvalues come from LAPACK's Hessenberg reduction plus shifted QR
    (real Schur form). An eigenvalue counts as non-real when its imaginary
    part exceeds ``1e-9`` relative to the spectral radius.
    """
    A = agd_map(M, G)
    if not np.all(np.isfinite(A)):
        raise SaddleError("non-finite AGD map")
    try:
        eig = linalg.eigvals(A, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise EigenConvergenceError(f"QR iteration did not converge: {exc}") from exc
    scale = max(1.0, float(np.max(np.abs(eig))))
    has_complex = bool(np.any(np.abs(eig.imag) > 1e-9 * scale))
    return float(np.max(eig.real)), has_complex


def eigenvalues_by_determinant(M: np.ndarray, G: np.ndarray, lo: float = -3.0, hi: float = 3.0,
                               samples: int = 20001) -> np.ndarray:
    """Independent check: real roots of ``det(G - lambda M)`` bracketed on a grid and refined.

    Only simple real roots inside ``[lo, hi]`` are found; enough for the
    generalized problem on small well-separated instances.
    """
    from scipy.optimize import brentq

    def f(lam):
        return np.linalg.det(G - lam * M)

    grid = np.linspace(lo, hi, samples)
    vals = np.array([f(x) for x in grid])
    roots = [grid[i] for i in np.flatnonzero(vals == 0.0)]
    for i in np.flatnonzero(np.sign(vals[:-1]) * np.sign(vals[1:]) < 0):
        roots.append(brentq(f, grid[i], grid[i + 1], xtol=1e-14, rtol=1e-14, maxiter=200))
    return np.sort(np.asarray(roots))


@dataclass
class EscapeBoundReport:
    lambda_max: float
    rhs_bound: float
    margin: float
    has_complex: bool
    C: float
    L_max: float

    @property
    def passed(self) -> bool:
        return self.margin > 0


def escape_bound(eta: float, gamma_c: float, C: float, L_max: float) -> float:
    return 1.0 + eta * gamma_c / (1.0 + C / L_max)


def check_escape_bound(instance: QuadraticSaddle) -> EscapeBoundReport:
    """Compare ``lambda_max(M^-1 G)`` with the escape lower bound ``1 + eta gamma_c / (1 + C / L_max)``."""
    if not instance.is_strict_saddle:
        raise SaddleError(f"lambda_min(H) = {instance.lambda_min:.3g} is above -gamma_c = {-instance.gamma_c:.3g}")
    H_u, H_l = split_hessian(instance.H, instance.partition)
    lam, cplx = max_eigenvalue(*build_M_G(H_u, H_l, instance.eta))
    C, L = instance.C, instance.L_max
    rhs = escape_bound(instance.eta, instance.gamma_c, C, L)
    return EscapeBoundReport(lam, rhs, lam - rhs, cplx, C, L)


@dataclass
class AgdTrace:
    """Iterates of the alternating scheme.

    ``iterates`` holds ``v^0 .. v^T``; ``distances`` their distance to
    ``v*``. ``order`` is the block sequence within each sweep. A run that
    would overflow is cut short and flagged ``overflow``; otherwise
    ``len(distances) == horizon + 1``.
    """

    iterates: np.ndarray
    distances: np.ndarray
    order: tuple = (1, 2)
    horizon: int = 0
    overflow: bool = False

    def escaped(self, radius: float) -> bool:
        return self.overflow or bool(np.any(self.distances >= radius))

    def growth_ratio(self, window: int = 50) -> float:
        """Geometric mean per-step growth of the distance over the last ``window`` steps."""
        d = self.distances[np.isfinite(self.distances)]
        window = min(window, len(d) - 1)
        if window < 1 or d[-1 - window] == 0.0:
            return float("nan")
        return float((d[-1] / d[-1 - window]) ** (1.0 / window))


def agd_sweep(instance: QuadraticSaddle, v: np.ndarray) -> np.ndarray:
    """One alternating sweep; ``v`` may be ``(d,)`` or ``(d, batch)``."""
    b1, b2 = instance.blocks
    H, eta = instance.H, instance.eta
    delta = v - (instance.v_star if v.ndim == 1 else instance.v_star[:, None])
    delta = delta.copy()
    delta[b1] = delta[b1] - eta * (H[b1] @ delta)
    delta[b2] = delta[b2] - eta * (H[b2] @ delta)
    return delta + (instance.v_star if v.ndim == 1 else instance.v_star[:, None])


def agd_simulate(instance: QuadraticSaddle, v0: np.ndarray, horizon: int) -> AgdTrace:
    if horizon < 0:
        raise SaddleError("horizon must be non-negative")
    v = np.asarray(v0, dtype=np.float64)
    if v.shape != (instance.dim,):
        raise SaddleError(f"v0 must have shape ({instance.dim},)")
    iterates = [v]
    overflow = False
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(horizon):
            v = agd_sweep(instance, v)
            dist = np.linalg.norm(v - instance.v_star)
            if not np.isfinite(dist) or dist > OVERFLOW_DISTANCE:
                overflow = True
                break
            iterates.append(v)
    iterates = np.array(iterates)
    distances = np.linalg.norm(iterates - instance.v_star, axis=1)
    return AgdTrace(iterates, distances, (1, 2), horizon, overflow)


def escape_fraction(instance: QuadraticSaddle, starts: np.ndarray, horizon: int, radius: float) -> float:
    """Fraction of the ``(d, S)`` start columns whose distance reaches ``radius`` within ``horizon`` sweeps."""
    v = np.asarray(starts, dtype=np.float64)
    escaped = np.zeros(v.shape[1], dtype=bool)
    for _ in range(horizon):
        v = agd_sweep(instance, v)
        escaped |= np.linalg.norm(v - instance.v_star[:, None], axis=0) >= radius
        if escaped.all():
            break
    return float(escaped.mean())


# -- random instances ---------------------------------------------------------


def random_orthogonal(d: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def random_instance(rng: np.random.Generator, dim: int, gamma_c: float, eta_fraction: float,
                    saddle: bool = True, spread: float = 2.0) -> QuadraticSaddle:
    """Random quadratic with a random contiguous two-block split and ``eta = eta_fraction / C``.

    A saddle instance has smallest eigenvalue in ``[-2 gamma_c, -gamma_c]``,
    at least one eigenvalue in ``[gamma_c, spread]`` and the rest uniform
    between the smallest and ``spread``; a control instance has all
    eigenvalues in ``[gamma_c, spread]``.
    """
    if dim < 2:
        raise SaddleError("dim must be at least 2")
    if saddle:
        low = -gamma_c * rng.uniform(1.0, 2.0)
        eig = np.concatenate([[low], rng.uniform(gamma_c, spread, 1), rng.uniform(low, spread, dim - 2)])
    else:
        eig = rng.uniform(gamma_c, spread, dim)
    Q = random_orthogonal(dim, rng)
    H = (Q * eig) @ Q.T
    H = 0.5 * (H + H.T)
    cut = int(rng.integers(1, dim))
    partition = (tuple(range(cut)), tuple(range(cut, dim)))
    C = float(np.linalg.norm(H, 2))
    return QuadraticSaddle(H, partition, eta_fraction / C, gamma_c)


@dataclass
class SweepSpec:
    n_instances: int = 100
    n_controls: int = 10
    dims: tuple = (2, 10)
    gamma_c: tuple = (0.1, 1.0)
    eta_fraction: tuple = (0.1, 1.0)
    starts: int = 20
    start_radius: float = 1e-3
    escape_radius: float = 1.0
    horizon: int = 20000
    growth_horizon: int = 2000
    seed: int = 0

    def validate(self) -> None:
        lo, hi = self.dims
        if not 2 <= lo <= hi <= 20:
            raise SaddleError("dims must satisfy 2 <= lo <= hi <= 20")
        if not 0 < self.gamma_c[0] <= self.gamma_c[1]:
            raise SaddleError("gamma_c range must be positive")
        if not 0 < self.eta_fraction[0] <= self.eta_fraction[1] <= 1:
            raise SaddleError("eta_fraction range must lie in (0, 1]")
        if self.n_instances < 0 or self.n_controls < 0 or self.starts < 1 or self.horizon < 1:
            raise SaddleError("counts must be positive")


@dataclass
class SweepRow:
    dim: int
    eta: float
    gamma_c: float
    C: float
    Lmax: float
    lambda_max: float
    rhs_bound: float
    margin: float
    escaped: float
    saddle: bool
    has_complex: bool = False
    growth_ratio: float = float("nan")
    error: str = ""


def run_sweep(spec: SweepSpec) -> list[SweepRow]:
    """Saddle instances followed by positive-definite controls.

    Each instance draws its own generator from ``(seed, index)``, so rows
    do not depend on evaluation order.
    """
    spec.validate()
    rows = []
    total = spec.n_instances + spec.n_controls
    for i in range(total):
        saddle = i < spec.n_instances
        rng = np.random.default_rng([spec.seed, i])
        dim = int(rng.integers(spec.dims[0], spec.dims[1] + 1))
        gamma_c = float(rng.uniform(*spec.gamma_c))
        inst = random_instance(rng, dim, gamma_c, float(rng.uniform(*spec.eta_fraction)), saddle=saddle)
        starts = rng.standard_normal((dim, spec.starts))
        starts *= spec.start_radius / np.linalg.norm(starts, axis=0)
        try:
            H_u, H_l = split_hessian(inst.H, inst.partition)
            lam, cplx = max_eigenvalue(*build_M_G(H_u, H_l, inst.eta))
            rhs = escape_bound(inst.eta, gamma_c, inst.C, inst.L_max)
            frac = escape_fraction(inst, starts + inst.v_star[:, None], spec.horizon, spec.escape_radius)
            growth = float("nan")
            if saddle:
                # start on the most negative curvature direction of H and let transients die out
                direction = np.linalg.eigh(inst.H)[1][:, 0]
                trace = agd_simulate(inst, inst.v_star + spec.start_radius * direction, spec.growth_horizon)
                growth = trace.growth_ratio()
            rows.append(SweepRow(dim, inst.eta, gamma_c, inst.C, inst.L_max, lam, rhs, lam - rhs, frac,
                                 saddle, cplx, growth))
        except (SaddleError, EigenConvergenceError) as exc:
            nan = float("nan")
            rows.append(SweepRow(dim, inst.eta, gamma_c, inst.C, inst.L_max, nan, nan, nan, nan, saddle,
                                 False, str(exc)))
    return rows


@dataclass
class SweepSummary:
    n_saddle: int
    n_controls: int
    n_errors: int
    pass_rate: float
    min_margin: float
    escape_rate: float
    any_complex: bool
    max_growth_error: float

    def line(self) -> str:
        return (f"escape-bound pass rate {self.pass_rate:.1%} over {self.n_saddle} saddles "
                f"(min margin {self.min_margin:.3e}); escape rate {self.escape_rate:.1%}; "
                f"growth ratio within {self.max_growth_error:.2%} of lambda_max; "
                f"{self.n_controls} positive-definite controls excluded; {self.n_errors} errors")


def summarize(rows: Sequence[SweepRow], tolerance: float = 1e-10) -> SweepSummary:
    good = [r for r in rows if r.saddle and not r.error]
    errors = sum(1 for r in rows if r.error)
    margins = np.array([r.margin for r in good])
    return SweepSummary(
        n_saddle=sum(r.saddle for r in rows),
        n_controls=sum(not r.saddle for r in rows),
        n_errors=errors,
        pass_rate=float(np.mean(margins >= -tolerance)) if len(good) else 0.0,
        min_margin=float(margins.min()) if len(good) else float("nan"),
        escape_rate=float(np.mean([r.escaped for r in good])) if good else 0.0,
        any_complex=any(r.has_complex for r in good),
        max_growth_error=float(max((abs(r.growth_ratio - r.lambda_max) / r.lambda_max for r in good),
                                   default=float("nan"))),
    )


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    """CSV of the saddle rows only; controls do not enter the statistics."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in rows:
        if not r.saddle:
            continue
        writer.writerow([r.dim] + [repr(float(getattr(r, c))) for c in CSV_COLUMNS[1:]])
    return buf.getvalue()
