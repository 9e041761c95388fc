"""Structured covariance matrices: the one-step matrix K~ and the block matrices psi_L^{k,l}."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericalError
from .model import ModelSpec, ProjectionFrame, as_theta

COND_LIMIT = 1e12


class ConditioningWarning(RuntimeWarning):
    pass


def pinv(A) -> np.ndarray:
    """Moore-Penrose inverse; singular values below s_max * max(dim) * 1e-14 count as zero."""
    A = np.asarray(A, dtype=float)
    if A.size == 0:
        return np.zeros(A.shape[::-1])
    return np.linalg.pinv(A, rcond=max(A.shape) * 1e-14)


def _t(M):
    return np.swapaxes(M, -1, -2)


def spd_inverse(M):
    """Inverse and log-determinant of (a stack of) SPD matrices via Cholesky.

    Falls back to an eigendecomposition with eigenvalues clamped at
    1e-12 * lambda_max, with a warning, when the factorization fails.
    """
    M = np.asarray(M, dtype=float)
    try:
        L = np.linalg.cholesky(M)
        Linv = np.linalg.inv(L)
        inv = _t(Linv) @ Linv
        logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
        return inv, logdet
    except np.linalg.LinAlgError:
        warnings.warn("Cholesky failed; using clamped eigendecomposition", ConditioningWarning, stacklevel=2)
        w, V = np.linalg.eigh(0.5 * (M + _t(M)))
        floor = 1e-12 * np.max(np.abs(w), axis=-1, keepdims=True)
        w = np.maximum(w, floor)
        inv = (V / w[..., None, :]) @ _t(V)
        return inv, np.sum(np.log(w), axis=-1)


# ---------------------------------------------------------------------------
# one-step covariance


def ktilde_arrays(aat, jb):
    """Dense K~, its blockwise inverse, S and log det K~ for stacked inputs.

    ``aat`` has shape (..., kappa, kappa) and ``jb`` shape (..., kappa, m - kappa).
    """
    aat = np.asarray(aat, dtype=float)
    jb = np.broadcast_to(np.asarray(jb, dtype=float), aat.shape[:-2] + jb.shape[-2:])
    try:
        np.linalg.cholesky(aat)
    except np.linalg.LinAlgError:
        raise NumericalError("a_tilde a_tilde^T is not positive definite") from None
    aat_inv = np.linalg.inv(aat)
    _, ld_a = np.linalg.slogdet(aat)
    if jb.shape[-1] == 0:
        return aat, aat_inv, np.zeros(aat.shape[:-2] + (0, 0)), ld_a
    psi = _t(jb) @ aat @ jb
    S = psi / 12.0
    w = np.linalg.eigvalsh(S)
    if np.any(w[..., 0] <= 1e-13 * np.abs(w[..., -1])):
        smin = float(np.min(np.linalg.svd(jb, compute_uv=False)))
        raise NumericalError(f"S is singular: smallest singular value of grad b_check is {smin:.3e}")
    S_inv = np.linalg.inv(S)
    _, ld_s = np.linalg.slogdet(S)
    c12 = 0.5 * aat @ jb
    dense = np.concatenate([np.concatenate([aat, c12], axis=-1),
                            np.concatenate([_t(c12), psi / 3.0], axis=-1)], axis=-2)
    jS = jb @ S_inv
    inv = np.concatenate([np.concatenate([aat_inv + 0.25 * jS @ _t(jb), -0.5 * jS], axis=-1),
                          np.concatenate([-0.5 * _t(jS), S_inv], axis=-1)], axis=-2)
    return dense, inv, S, ld_a + ld_s


@dataclass(eq=False)
class KTilde:
    kappa: int
    n_check: int
    aat: np.ndarray
    jb: np.ndarray
    S: np.ndarray
    dense: np.ndarray
    inv: np.ndarray
    logdet: float

    @property
    def blocks(self):
        k = self.kappa
        return self.dense[:k, :k], self.dense[:k, k:], self.dense[k:, k:]


def ktilde_build(spec: ModelSpec, z0, theta) -> KTilde:
    z0 = np.asarray(z0, dtype=float)
    th = as_theta(theta)
    aat = spec.aat(z0, th)
    jb = np.asarray(spec.jb(z0), dtype=float)
    dense, inv, S, logdet = ktilde_arrays(aat, jb)
    return KTilde(spec.kappa, spec.m - spec.kappa, aat, jb, S, dense, inv, float(logdet))


# ---------------------------------------------------------------------------
# block matrices for partial observations


def v_matrix(L: int) -> np.ndarray:
    if L < 1:
        raise ConfigError("v_matrix needs L >= 1")
    V = np.diag(np.full(L + 1, 2.0 / 3.0)) + np.diag(np.full(L, 1.0 / 6.0), 1) + np.diag(np.full(L, 1.0 / 6.0), -1)
    V[0, 0] = V[L, L] = 1.0 / 3.0
    return V


def psi_shape(frame: ProjectionFrame, k: int, l: int, L: int):
    base = L * frame.q
    return base + (k - 1) * frame.n_tail, base + (l - 1) * frame.n_tail


def psi_dense(A, frame: ProjectionFrame, k: int, l: int, L: int) -> np.ndarray:
    """Assemble psi_L^{k,l}(A) for A of shape (..., kappa, kappa)."""
    if (k, l) == (2, 1):
        return _t(psi_dense(A, frame, 1, 2, L))
    if k not in (1, 2) or l not in (1, 2):
        raise ConfigError("psi kinds are (k, l) in {1, 2}^2")
    A = np.asarray(A, dtype=float)
    Q1, Q2, Q3 = frame.Qt1, frame.Qt2, frame.Qt3

    def ups(Qi, Qj):
        return Qi @ A @ Qj.T

    U11, U12, U13 = ups(Q1, Q1), ups(Q1, Q2), ups(Q1, Q3)
    U21, U22, U23 = ups(Q2, Q1), ups(Q2, Q2), ups(Q2, Q3)
    U31, U32, U33 = ups(Q3, Q1), ups(Q3, Q2), ups(Q3, Q3)

    def blk(tl, tr, bl, br):
        return np.concatenate([np.concatenate([tl, tr], axis=-1), np.concatenate([bl, br], axis=-1)], axis=-2)

    xi1 = blk(U11, U12 / 2, U21 / 2, U22 / 3)
    xi3 = blk(U11, U12 / 2, U21 / 2, 2 * U22 / 3)
    xi2 = blk(np.zeros_like(U11), U12 / 2, np.zeros_like(U21), U22 / 6)
    q = frame.q
    rows, cols = psi_shape(frame, k, l, L)
    out = np.zeros(A.shape[:-2] + (rows, cols))
    for s in range(L):
        sl = slice(s * q, (s + 1) * q)
        out[..., sl, sl] = xi1 if s == 0 else xi3
        if s + 1 < L:
            nx = slice((s + 1) * q, (s + 2) * q)
            out[..., sl, nx] = xi2
            out[..., nx, sl] = _t(xi2)
    last = slice((L - 1) * q, L * q)
    tail = slice(L * q, None)
    if l == 2:
        out[..., last, tail] = np.concatenate([U13 / 2, U23 / 6], axis=-2)
    if k == 2:
        out[..., tail, last] = np.concatenate([U31 / 2, U32 / 6], axis=-1)
    if k == 2 and l == 2:
        out[..., tail, tail] = U33 / 3
    return out


@dataclass(eq=False)
class PsiMatrix:
    kind: tuple
    L: int
    frame: ProjectionFrame
    base: np.ndarray
    dense: np.ndarray


def psi_build(A, frame: ProjectionFrame, k: int, l: int, L: int) -> PsiMatrix:
    if L < 3:
        raise ConfigError("psi_build needs L >= 3")
    A = np.asarray(A, dtype=float)
    if A.shape != (frame.kappa, frame.kappa):
        raise ConfigError(f"A must be {frame.kappa} x {frame.kappa}")
    return PsiMatrix((k, l), L, frame, A.copy(), psi_dense(A, frame, k, l, L))


@dataclass
class SchurResult:
    left: np.ndarray
    right: np.ndarray
    discrepancy: float


def schur_quadratic(A1, A2, B, C) -> SchurResult:
    """Both sides of the partitioned-inverse identity for [[A1, B], [B^T, C]]."""
    A1, A2, B, C = (np.atleast_2d(np.asarray(x, dtype=float)) for x in (A1, A2, B, C))
    if np.linalg.cond(A1) > 1e14:
        raise NumericalError("A1 is singular")
    A1inv = np.linalg.inv(A1)
    schur = C - B.T @ A1inv @ B
    if np.linalg.cond(schur) > 1e14:
        raise NumericalError("Schur complement C - B^T A1^{-1} B is singular")
    M = np.block([[A1, B], [B.T, C]])
    left = A1inv @ np.hstack([A2, B]) @ np.linalg.solve(M, np.vstack([A2, B.T]))
    I = np.eye(A1.shape[0])
    P = A1inv @ A2
    right = P @ P + A1inv @ (A2 @ A1inv - I) @ B @ np.linalg.solve(schur, B.T @ (P - I))
    return SchurResult(left, right, float(np.max(np.abs(left - right))))


# ---------------------------------------------------------------------------
# trace statistic and its limit


def _full_state(spec: ModelSpec, x):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] == spec.m:
        return x
    if x.shape[-1] != spec.kappa:
        raise ConfigError("state must have length kappa or m")
    return np.concatenate([x, np.zeros(x.shape[:-1] + (spec.m - spec.kappa,))], axis=-1)


def _checked_inverse(M):
    w = np.linalg.eigvalsh(M)
    if w[0] <= 0 or w[-1] / w[0] > COND_LIMIT:
        cond = np.inf if w[0] <= 0 else w[-1] / w[0]
        raise NumericalError(f"psi is ill-conditioned (condition number {cond:.3e})")
    return spd_inverse(M)[0]


def _trace_parts(x, theta0, L, spec, frame):
    z = _full_state(spec, x)
    th = as_theta(theta0)
    A = spec.aat(z, th)
    dA = spec.daat(z, th)
    P = {kl: psi_dense(A, frame, kl[0], kl[1], L) for kl in ((1, 1), (1, 2), (2, 2))}
    P[(2, 1)] = P[(1, 2)].T
    J = {}
    for k in (1, 2):
        inv = _checked_inverse(P[(k, k)])
        J[k] = [-inv @ psi_dense(dA[i], frame, k, k, L) @ inv for i in range(spec.d)]
    return P, J


def _trace_from_parts(P, J, k, l, d):
    left = [Ji @ P[(k, l)] for Ji in J[k]]
    right = [Jj @ P[(l, k)] for Jj in J[l]]
    return np.array([[np.sum(left[i] * right[j].T) for j in range(d)] for i in range(d)])


def t_trace(x, theta0, k, l, L, spec: ModelSpec, frame: ProjectionFrame) -> np.ndarray:
    """The d x d trace statistic tr(d_i(psi^{kk})^{-1} psi^{kl} d_j(psi^{ll})^{-1} psi^{lk})."""
    P, J = _trace_parts(x, theta0, L, spec, frame)
    return _trace_from_parts(P, J, k, l, spec.d)


KINDS = ((1, 1), (1, 2), (2, 1), (2, 2))


@dataclass
class GLimit:
    g: np.ndarray
    per_kind: dict
    table: list = field(default_factory=list)
    converged: bool = True
    agree: bool = True

    def to_json(self):
        return dict(g=self.g.tolist(), converged=self.converged, agree=self.agree,
                    per_kind={f"{k}{l}": v.tolist() for (k, l), v in self.per_kind.items()},
                    table=self.table)


def g_limit(x, theta0, spec: ModelSpec, frame: ProjectionFrame, L_grid=(50, 100, 200, 400), tol=0.01) -> GLimit:
    """Extrapolate T_{k,l,L}/L to L = infinity (Richardson in 1/L on the two largest L)."""
    L_grid = [int(L) for L in L_grid]
    if len(L_grid) < 2 or any(b <= a for a, b in zip(L_grid, L_grid[1:])) or L_grid[-1] < 100:
        raise ConfigError("L_grid must be increasing with at least two entries and max >= 100")
    ratios = {kl: [] for kl in KINDS}
    for L in L_grid:
        P, J = _trace_parts(x, theta0, L, spec, frame)
        for kl in KINDS:
            ratios[kl].append(_trace_from_parts(P, J, kl[0], kl[1], spec.d) / L)
    L1, L2 = L_grid[-2], L_grid[-1]
    per_kind, table, converged = {}, [], True
    for kl in KINDS:
        v = ratios[kl]
        g = (L2 * v[-1] - L1 * v[-2]) / (L2 - L1)
        per_kind[kl] = g
        res = [float(np.max(np.abs(vi - g))) for vi in v]
        for L, vi, ri in zip(L_grid, v, res):
            table.append(dict(kind=f"{kl[0]}{kl[1]}", L=L, value=vi.tolist(), residual=ri))
        slack = 1e-12 * max(1.0, float(np.max(np.abs(g))))
        if any(b > a + slack for a, b in zip(res, res[1:])):
            converged = False
    g = sum(per_kind.values()) / len(per_kind)
    scale = max(1.0, float(np.max(np.abs(g))))
    agree = all(float(np.max(np.abs(per_kind[kl] - g))) <= tol * scale for kl in KINDS)
    return GLimit(g, per_kind, table, converged, agree)
