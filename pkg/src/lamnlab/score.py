"""Quadratic-form score statistics and log-likelihood-ratio expansions."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .blockcov import ktilde_arrays, psi_dense, spd_inverse
from .errors import ConfigError
from .model import ModelSpec, ProjectionFrame, as_theta
from .simulate import BlockLayout, ObservationSet, block_arrays, fmt, increments_from_states


def _t(M):
    return np.swapaxes(M, -1, -2)


def b_matrices(spec: ModelSpec, z, theta) -> np.ndarray:
    """Block-diagonal matrices B_i = diag(B~_i, C_i), shape (..., d, m, m)."""
    z = np.asarray(z, dtype=float)
    th = as_theta(theta)
    a = spec.a_tilde(z, th)
    a_pinv = _t(a) @ np.linalg.inv(a @ _t(a))
    Bt = spec.da(z, th) @ a_pinv[..., None, :, :]
    if not spec.degenerate:
        return Bt
    jb = spec.jb(z)[..., None, :, :]
    C = _t(jb) @ Bt @ jb @ np.linalg.inv(_t(jb) @ jb)
    k, m = spec.kappa, spec.m
    out = np.zeros(Bt.shape[:-2] + (m, m))
    out[..., :k, :k] = Bt
    out[..., k:, k:] = C
    return out


@dataclass(eq=False)
class BFamily:
    B: np.ndarray
    z0: np.ndarray
    theta: np.ndarray


def b_family(spec: ModelSpec, z0, theta) -> BFamily:
    z0 = np.asarray(z0, dtype=float)
    th = as_theta(theta)
    return BFamily(b_matrices(spec, z0, th), z0, th)


def complete_terms(spec: ModelSpec, X, Z, theta):
    """Per-increment scores ell (..., d) and conditional variances gamma (..., d, d).

    ``X`` holds normalized increments and ``Z`` the rotated evaluation states.
    """
    th = as_theta(theta)
    K, Kinv, _, _ = ktilde_arrays(spec.aat(Z, th), spec.jb(Z))
    B = b_matrices(spec, Z, th)
    BtKinv = _t(B) @ Kinv[..., None, :, :]
    X = np.asarray(X, dtype=float)
    quad = np.einsum("...a,...iab,...b->...i", X, BtKinv, X)
    ell = quad - np.trace(B, axis1=-2, axis2=-1)
    Phi = 0.5 * (BtKinv + _t(BtKinv))
    PK = Phi @ K[..., None, :, :]
    gam = 2.0 * np.einsum("...iab,...jba->...ij", PK, PK)
    return ell, gam


def lstat(u, z0, theta, spec: ModelSpec, i: int) -> float:
    ell, _ = complete_terms(spec, np.asarray(u, dtype=float), np.asarray(z0, dtype=float), theta)
    return float(ell[i])


def gamma_block(z0, theta0, spec: ModelSpec) -> np.ndarray:
    z0 = np.asarray(z0, dtype=float)
    _, gam = complete_terms(spec, np.zeros(spec.m), z0, theta0)
    return gam


@dataclass
class Expansion:
    lam: float
    score: np.ndarray
    T: np.ndarray
    blocks: int

    def to_json(self):
        return dict(lambda_hat=self.lam, score=self.score.tolist(), T=self.T.tolist(), blocks=self.blocks)


def _combine(h, score_sum, T_sum):
    h = as_theta(h)
    return float(h @ score_sum - 0.5 * h @ T_sum @ h)


def expansion_complete(obs: ObservationSet, spec: ModelSpec, theta0, h) -> Expansion:
    if obs.scheme.kind != "Complete":
        raise ConfigError("expansion_complete needs a Complete scheme")
    X, Z = increments_from_states(obs.y_rows, spec)
    ell, gam = complete_terms(spec, X, Z, theta0)
    n = obs.n
    score = ell.sum(axis=0) / math.sqrt(n)
    T = gam.sum(axis=0) / n
    return Expansion(_combine(h, score, T), score, T, n)


# ---------------------------------------------------------------------------
# partial observations


def _block_states(spec: ModelSpec, Ydot, Ycheck):
    return np.concatenate([Ydot, Ycheck], axis=-1)


def partial_terms(spec: ModelSpec, frame: ProjectionFrame, X, Zdot, theta, e: int):
    """Block scores U (..., d) and variances V (..., d, d) plus quasi-likelihood terms.

    Returns (U, V, logdet, quad) where logdet and quad are the Gaussian
    block contributions log det psi and X^T psi^{-1} X.
    """
    th = as_theta(theta)
    A = spec.aat(Zdot, th)
    dA = spec.daat(Zdot, th)
    Psi = psi_dense(A, frame, 1, 1, e)
    inv, logdet = spd_inverse(Psi)
    dPsi = psi_dense(dA, frame, 1, 1, e)
    M = inv[..., None, :, :] @ dPsi
    w = np.einsum("...ab,...b->...a", inv, X)
    quad_d = np.einsum("...a,...iab,...b->...i", w, dPsi, w)
    trM = np.trace(M, axis1=-2, axis2=-1)
    U = 0.5 * quad_d - 0.5 * trM
    V = 0.5 * np.einsum("...iab,...jba->...ij", M, M)
    quad = np.einsum("...a,...a->...", X, w)
    return U, V, logdet, quad


@dataclass
class ScoreBlock:
    j: int
    score: np.ndarray
    var: np.ndarray
    state: np.ndarray


def u_v_stats(X_j, Ydot_j, spec: ModelSpec, frame: ProjectionFrame, theta0, e_n: int,
              Ycheck_j=None, j: int = 0) -> ScoreBlock:
    Ydot_j = np.asarray(Ydot_j, dtype=float)
    yc = np.zeros(spec.m - spec.kappa) if Ycheck_j is None else np.asarray(Ycheck_j, dtype=float)
    z = _block_states(spec, Ydot_j, yc)
    U, V, _, _ = partial_terms(spec, frame, np.asarray(X_j, dtype=float), z, theta0, e_n)
    return ScoreBlock(j, U, V, z)


def observed_blocks(obs: ObservationSet, spec: ModelSpec, e_n: int, mode: str = "augmented"):
    """(X', full evaluation states) for every complete block of a partial observation set."""
    frame = obs.frame
    layout = BlockLayout(obs.n, e_n)
    q1 = frame.q1
    C = obs.rows[:, q1:]
    X, Ydot = block_arrays(obs.rows[:, :q1], C, obs.hidden, spec, frame, obs.n, e_n, mode)
    start = np.arange(layout.L) * e_n
    return X, _block_states(spec, Ydot, C[start])


def expansion_partial(obs: ObservationSet, spec: ModelSpec, frame: Optional[ProjectionFrame], theta0, h,
                      e_n: int, mode: str = "augmented") -> Expansion:
    if obs.scheme.kind != "Partial":
        raise ConfigError("expansion_partial needs a Partial scheme")
    frame = frame or obs.frame
    X, Z = observed_blocks(obs, spec, e_n, mode)
    U, V, _, _ = partial_terms(spec, frame, X, Z, theta0, e_n)
    n = obs.n
    score = U.sum(axis=0) / math.sqrt(n)
    T = V.sum(axis=0) / n
    return Expansion(_combine(h, score, T), score, T, X.shape[0])


def score_blocks(obs: ObservationSet, spec: ModelSpec, theta0, e_n: int, mode: str = "augmented") -> list:
    X, Z = observed_blocks(obs, spec, e_n, mode)
    U, V, _, _ = partial_terms(spec, obs.frame, X, Z, theta0, e_n)
    return [ScoreBlock(j, U[j], V[j], Z[j]) for j in range(X.shape[0])]


def write_score_blocks(blocks, fname: str) -> None:
    d = blocks[0].score.shape[0] if blocks else 0
    with open(fname, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(["j"] + [f"score{i + 1}" for i in range(d)] + ["trace_var"])
        for b in blocks:
            w.writerow([b.j] + [fmt(v) for v in b.score] + [fmt(np.trace(b.var))])
