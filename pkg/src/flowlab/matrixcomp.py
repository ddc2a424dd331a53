"""Eigen-decomposition and Riccati comparison machinery for tiny symmetric matrices.

Everything here works on n x n symmetric matrices with n <= 3: closed forms
for n <= 2, cyclic Jacobi sweeps for n = 3.  The comparison bounds encode the
scalar consequences of a matrix path M(t) obeying dM/dt >= M^2 (+ PSD
forcing): directional Riccati lower bounds with finite-time poles, trace
bounds, a log-determinant style integral bound, and concavity of the
exponentiated directional profile.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .report import CheckReport

__all__ = [
    "MatrixShapeError",
    "sym_part",
    "pack_upper",
    "unpack_upper",
    "sym_eig",
    "quad_form",
    "riccati_lower_bound",
    "trace_lower_bound",
    "log_trace_lower_bound",
    "MatrixOdePath",
    "integrate_matrix_riccati",
    "check_matrix_ode",
    "concavity_profile",
    "cumulative_trapezoid",
]

MAX_DIM = 3


class MatrixShapeError(ValueError):
    """Matrix is not square symmetric with dimension <= 3."""


def _check_matrix(M) -> np.ndarray:
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise MatrixShapeError(f"expected a square matrix, got shape {M.shape}")
    if M.shape[0] > MAX_DIM or M.shape[0] < 1:
        raise MatrixShapeError(f"dimension must be 1..{MAX_DIM}, got {M.shape[0]}")
    if not np.all(np.isfinite(M)):
        raise MatrixShapeError("matrix contains non-finite entries")
    scale = max(1.0, np.abs(M).max())
    if np.abs(M - M.T).max() > 1e-10 * scale:
        raise MatrixShapeError("matrix is not symmetric")
    return 0.5 * (M + M.T)


def sym_part(M) -> np.ndarray:
    """Symmetric part (A + A^T) / 2."""
    M = np.asarray(M, dtype=np.float64)
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def pack_upper(M: np.ndarray) -> np.ndarray:
    """Row-major upper triangle of a symmetric matrix (or stack thereof)."""
    M = np.asarray(M)
    n = M.shape[-1]
    iu = np.triu_indices(n)
    return M[..., iu[0], iu[1]]


def unpack_upper(packed: np.ndarray, n: int) -> np.ndarray:
    """Inverse of :func:`pack_upper`."""
    packed = np.asarray(packed, dtype=np.float64)
    iu = np.triu_indices(n)
    out = np.zeros((*packed.shape[:-1], n, n))
    out[..., iu[0], iu[1]] = packed
    out[..., iu[1], iu[0]] = packed
    return out


def _fix_signs(vecs: np.ndarray) -> np.ndarray:
    # Deterministic orientation: first nonzero component of each column positive.
    for j in range(vecs.shape[1]):
        col = vecs[:, j]
        for comp in col:
            if comp != 0.0:
                if comp < 0.0:
                    vecs[:, j] = -col
                break
    return vecs


def _eig2(M: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a, b, c = M[0, 0], M[0, 1], M[1, 1]
    mean = 0.5 * (a + c)
    radius = 0.5 * math.hypot(a - c, 2.0 * b)
    lam1, lam2 = mean + radius, mean - radius
    if radius == 0.0:
        return np.array([lam1, lam2]), np.eye(2)
    # Eigenvector of lam1 from whichever row is better conditioned.
    v1 = np.array([b, lam1 - a]) if abs(lam1 - a) >= abs(lam1 - c) else np.array([lam1 - c, b])
    norm = np.hypot(v1[0], v1[1])
    if norm == 0.0:
        v1 = np.array([1.0, 0.0]) if a >= c else np.array([0.0, 1.0])
    else:
        v1 = v1 / norm
    v2 = np.array([-v1[1], v1[0]])
    return np.array([lam1, lam2]), np.column_stack([v1, v2])


def _jacobi(M: np.ndarray, sweeps: int = 64) -> tuple[np.ndarray, np.ndarray]:
    n = M.shape[0]
    A = M.copy()
    V = np.eye(n)
    scale = max(1.0, np.abs(A).max())
    for _ in range(sweeps):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                off = max(off, abs(A[p, q]))
        if off <= 1e-13 * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = 0.5 * (A[q, q] - A[p, p]) / apq
                t = math.copysign(1.0, theta) / (abs(theta) + math.hypot(theta, 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                A = rot.T @ A @ rot
                A[p, q] = A[q, p] = 0.0
                V = V @ rot
    return np.diag(A).copy(), V


def sym_eig(M) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (descending) and orthonormal eigenvectors (columns).

    Deterministic: closed form for n <= 2, cyclic Jacobi for n = 3, and a
    fixed sign convention (first nonzero component of each vector positive).
    """
    M = _check_matrix(M)
    n = M.shape[0]
    if n == 1:
        return np.array([M[0, 0]]), np.array([[1.0]])
    vals, vecs = _eig2(M) if n == 2 else _jacobi(M)
    order = np.argsort(-vals, kind="stable")
    return vals[order], _fix_signs(vecs[:, order])


def quad_form(M, w) -> float:
    """<w, M w> for a unit direction w (normalized defensively)."""
    M = _check_matrix(M)
    w = np.asarray(w, dtype=np.float64)
    norm = np.linalg.norm(w)
    if norm == 0.0 or not np.all(np.isfinite(w)):
        raise MatrixShapeError("direction must be a nonzero finite vector")
    w = w / norm
    return float(w @ M @ w)


def riccati_lower_bound(M0, w, t: float) -> float:
    """Scalar Riccati comparison value q0 / (1 - t q0), q0 = <w, M0 w>.

    Returns +inf at or beyond the pole t = 1/q0 (the bound is vacuous there).
    """
    q0 = quad_form(M0, w)
    if t < 0.0:
        raise ValueError(f"time must be >= 0, got {t}")
    denom = 1.0 - t * q0
    if denom <= 0.0:
        return math.inf
    return q0 / denom


def trace_lower_bound(M0, t: float) -> float:
    """Sum of lam_i / (1 - t lam_i) over the initial spectrum; +inf past a pole."""
    vals, _ = sym_eig(M0)
    if t < 0.0:
        raise ValueError(f"time must be >= 0, got {t}")
    out = 0.0
    for lam in vals:
        denom = 1.0 - t * lam
        if denom <= 0.0:
            return math.inf
        out += lam / denom
    return float(out)


def log_trace_lower_bound(M0, tau: float) -> float:
    """-sum_i log(1 - tau lam_i(M0)); +inf if any factor is nonpositive."""
    vals, _ = sym_eig(M0)
    out = 0.0
    for lam in vals:
        arg = 1.0 - tau * lam
        if arg <= 0.0:
            return math.inf
        out -= math.log(arg)
    return float(out)


def cumulative_trapezoid(times: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Cumulative trapezoid rule along the first axis, zero at the first node."""
    times = np.asarray(times, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dt = np.diff(times)
    pairs = 0.5 * (values[1:] + values[:-1])
    dt = dt.reshape((-1,) + (1,) * (values.ndim - 1))
    out = np.zeros_like(values)
    np.cumsum(pairs * dt, axis=0, out=out[1:])
    return out


@dataclass
class MatrixOdePath:
    """A sampled symmetric-matrix path with optional PSD forcing samples.

    ``values[i]`` is M(times[i]); ``forcing[i]``, when given, is the extra
    PSD term P(times[i]) in dM/dt >= M^2 + P.
    """

    times: np.ndarray
    values: np.ndarray
    forcing: np.ndarray | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.times.ndim != 1 or self.times.size < 3:
            raise MatrixShapeError("need at least 3 time samples")
        if np.any(np.diff(self.times) <= 0.0):
            raise MatrixShapeError("times must be strictly increasing")
        m = self.times.size
        if self.values.ndim != 3 or self.values.shape[0] != m:
            raise MatrixShapeError(f"values must be (m, n, n), got {self.values.shape}")
        n = self.values.shape[1]
        if self.values.shape[2] != n or n > MAX_DIM:
            raise MatrixShapeError(f"values must be (m, n, n) with n <= 3, got {self.values.shape}")
        if self.forcing is not None:
            self.forcing = np.asarray(self.forcing, dtype=np.float64)
            if self.forcing.shape != self.values.shape:
                raise MatrixShapeError("forcing must match values in shape")

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def duration(self) -> float:
        return float(self.times[-1] - self.times[0])


def integrate_matrix_riccati(M0, forcing, times, substeps: int = 32) -> MatrixOdePath:
    """RK4-integrate dM/dt = M^2 + P(t) and sample it on ``times``.

    ``forcing`` is a callable t -> (n, n) symmetric array, or None for the
    pure Riccati flow.  Used to manufacture synthetic certified paths.
    """
    M0 = _check_matrix(M0)
    times = np.asarray(times, dtype=np.float64)

    def P(t):
        if forcing is None:
            return np.zeros_like(M0)
        return sym_part(np.asarray(forcing(t), dtype=np.float64))

    def rhs(M, t):
        return M @ M + P(t)

    samples = np.empty((times.size, *M0.shape))
    samples[0] = M0
    M = M0.copy()
    for i in range(times.size - 1):
        h = (times[i + 1] - times[i]) / substeps
        t = times[i]
        for _ in range(substeps):
            k1 = rhs(M, t)
            k2 = rhs(M + 0.5 * h * k1, t + 0.5 * h)
            k3 = rhs(M + 0.5 * h * k2, t + 0.5 * h)
            k4 = rhs(M + h * k3, t + h)
            M = M + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            t += h
            if not np.all(np.isfinite(M)) or np.abs(M).max() > 1e12:
                raise FloatingPointError(f"matrix Riccati flow blew up near t={t:.6g}")
        samples[i + 1] = sym_part(M)
        M = samples[i + 1].copy()
    forcing_samples = None
    if forcing is not None:
        forcing_samples = np.stack([P(t) for t in times])
    return MatrixOdePath(times=times, values=samples, forcing=forcing_samples)


def _central_derivative(times: np.ndarray, values: np.ndarray, i: int) -> np.ndarray:
    # Three-point nonuniform first-derivative stencil at interior index i.
    h1 = times[i] - times[i - 1]
    h2 = times[i + 1] - times[i]
    w_prev = -h2 / (h1 * (h1 + h2))
    w_mid = (h2 - h1) / (h1 * h2)
    w_next = h1 / (h2 * (h1 + h2))
    return w_prev * values[i - 1] + w_mid * values[i] + w_next * values[i + 1]


def check_matrix_ode(path: MatrixOdePath, tol: float = 1e-4,
                     name: str = "matrix_ode") -> CheckReport:
    """Certify dM/dt - M^2 - P >= 0 (PSD) at interior samples.

    Time derivatives are second-order centered differences, so ``tol`` must
    absorb an O(dt^2) discretization term on top of the genuine slack.
    """
    times, values = path.times, path.values
    worst = math.inf
    witness: dict = {}
    for i in range(1, times.size - 1):
        dM = _central_derivative(times, values, i)
        residual = dM - values[i] @ values[i]
        if path.forcing is not None:
            residual = residual - path.forcing[i]
        vals, vecs = sym_eig(sym_part(residual))
        low = vals[-1]
        if low < worst:
            worst = low
            witness = {
                "time": float(times[i]),
                "min_eigenvalue": float(low),
                "direction": vecs[:, -1].tolist(),
            }
    return CheckReport.evaluate(
        name=name, worst_margin=worst, tolerance=tol, witness=witness,
        metrics={"interior_samples": int(times.size - 2)},
    )


def concavity_profile(path: MatrixOdePath, w, tol: float | None = None,
                      name: str = "concavity") -> CheckReport:
    """Certify concavity of c_w(t) = exp(-int_0^t <w, M w>) along the path.

    Works on second differences of the trapezoid-integrated profile; the
    automatic tolerance absorbs the O(dt^2) discretization of both steps.
    """
    times, values = path.times, path.values
    w = np.asarray(w, dtype=np.float64)
    w = w / np.linalg.norm(w)
    q = np.einsum("i,tij,j->t", w, values, w)
    profile = np.exp(-cumulative_trapezoid(times, q))

    if tol is None:
        dt = float(np.max(np.diff(times)))
        # c'' = c (q^2 - q'): second differences err like dt^2 * sup|c''''|,
        # estimated crudely through the derivative scale of M itself.
        dq = np.max(np.abs(np.gradient(q, times))) if times.size > 2 else 0.0
        scale = np.max(profile) * (1.0 + np.max(q * q) + dq)
        tol = 1e-10 + 0.5 * dt * dt * float(scale)

    worst = math.inf
    witness: dict = {}
    for i in range(1, times.size - 1):
        h1 = times[i] - times[i - 1]
        h2 = times[i + 1] - times[i]
        d2 = 2.0 * (h1 * profile[i + 1] - (h1 + h2) * profile[i] + h2 * profile[i - 1]) \
            / (h1 * h2 * (h1 + h2))
        margin = -d2
        if margin < worst:
            worst = margin
            witness = {"time": float(times[i]), "second_derivative": float(d2)}
    return CheckReport.evaluate(
        name=name, worst_margin=worst, tolerance=tol, witness=witness,
        metrics={"profile_start": float(profile[0]), "profile_end": float(profile[-1])},
    )
