"""Asymptotic Fisher information for complete and partial observations."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blockcov import GLimit, g_limit
from .errors import ConfigError, NumericalError
from .model import ModelSpec, ProjectionFrame, as_theta
from .simulate import PathSample

PARTIAL_BUILTINS = ("integrated", "stochvol-common", "stochvol-diagonal")


@dataclass
class InfoMatrix:
    matrix: np.ndarray
    provenance: str

    def __post_init__(self):
        M = np.atleast_2d(np.asarray(self.matrix, dtype=float))
        self.matrix = 0.5 * (M + M.T)

    @property
    def min_eig(self) -> float:
        return float(np.linalg.eigvalsh(self.matrix)[0])

    def to_json(self):
        return dict(matrix=self.matrix.tolist(), provenance=self.provenance, min_eig=self.min_eig)


def check_pd(gamma) -> tuple:
    M = gamma.matrix if isinstance(gamma, InfoMatrix) else np.atleast_2d(np.asarray(gamma, dtype=float))
    w = float(np.linalg.eigvalsh(0.5 * (M + M.T))[0])
    scale = max(1.0, float(np.max(np.abs(M))))
    return (w > 1e-10 * scale), w


def _pair_trace(Ainv, dA):
    P = Ainv[..., None, :, :] @ dA
    return np.einsum("...iab,...jba->...ij", P, P)


def gamma_terms_states(spec: ModelSpec, states, theta0):
    """Left-endpoint quadrature of both trace terms for rotated states (..., T, m).

    Returns (first, second), each of shape (..., d, d).
    """
    th = as_theta(theta0)
    z = np.asarray(states, dtype=float)[..., :-1, :]
    A = spec.aat(z, th)
    dA = spec.daat(z, th)
    try:
        np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        raise NumericalError("a_tilde a_tilde^T lost rank along the path") from None
    first = 0.5 * np.mean(_pair_trace(np.linalg.inv(A), dA), axis=-3)
    if not spec.degenerate:
        return first, np.zeros_like(first)
    jb = spec.jb(z)
    jbT = np.swapaxes(jb, -1, -2)
    Psi = jbT @ A @ jb
    dPsi = jbT[..., None, :, :] @ dA @ jb[..., None, :, :]
    try:
        np.linalg.cholesky(Psi)
    except np.linalg.LinAlgError:
        bad = np.argwhere(np.linalg.eigvalsh(Psi)[..., 0] <= 0)
        t = bad[0][-1] / (z.shape[-2]) if bad.size else float("nan")
        raise NumericalError(f"Psi is singular at t={t:.6g}") from None
    second = 0.5 * np.mean(_pair_trace(np.linalg.inv(Psi), dPsi), axis=-3)
    return first, second


def gamma_complete(path: PathSample, spec: ModelSpec, theta0, split: bool = False):
    first, second = gamma_terms_states(spec, path.states, theta0)
    total = InfoMatrix(first + second, "path-quadrature")
    if split:
        return total, InfoMatrix(first, "path-quadrature"), InfoMatrix(second, "path-quadrature")
    return total


def _interp_matrix(nodes, values, x):
    """Piecewise-linear interpolation of matrix-valued data (values: (K, d, d))."""
    d = values.shape[-1]
    if len(nodes) == 1:
        return np.broadcast_to(values[0], x.shape + (d, d))
    out = np.empty(x.shape + (d, d))
    for i in range(d):
        for j in range(d):
            out[..., i, j] = np.interp(x, nodes, values[:, i, j])
    return out


def g_on_path(path: PathSample, spec: ModelSpec, frame: ProjectionFrame, theta0, grid_points: int = 64,
              L_grid=(200, 400)):
    """Values of the psi-limit g along the left endpoints of the path's fine grid.

    With one diffusive coordinate g is tabulated on a uniform state grid
    spanning the path range; otherwise on uniformly spaced time nodes.
    Both are linearly interpolated.
    """
    k = spec.kappa
    ys = path.states[:-1, :k]
    T = ys.shape[0]
    if k == 1:
        lo, hi = float(ys.min()), float(ys.max())
        nodes = np.array([lo]) if hi - lo < 1e-12 else np.linspace(lo, hi, grid_points)
        vals = np.array([g_limit(np.array([x]), theta0, spec, frame, L_grid).g for x in nodes])
        return _interp_matrix(nodes, vals, ys[:, 0])
    idx = np.unique(np.linspace(0, T - 1, grid_points).round().astype(int))
    vals = np.array([g_limit(ys[i], theta0, spec, frame, L_grid).g for i in idx])
    return _interp_matrix(idx.astype(float), vals, np.arange(T, dtype=float))


def gamma_partial(path: PathSample, spec: ModelSpec, frame: ProjectionFrame, theta0, g="psi",
                  grid_points: int = 64, L_grid=(200, 400)) -> InfoMatrix:
    """Half the time integral of g along the diffusive part of the path.

    ``g`` may be a callable (z, theta) -> (..., d, d), a GLimit (constant g),
    or "psi" to compute g from the trace-statistic limit.
    """
    th = as_theta(theta0)
    z = path.states[:-1]
    if isinstance(g, GLimit):
        return InfoMatrix(0.5 * g.g, "psi-limit")
    if isinstance(g, str):
        if g != "psi":
            raise ConfigError("g must be a callable, a GLimit or 'psi'")
        vals = g_on_path(path, spec, frame, th, grid_points, L_grid)
        return InfoMatrix(0.5 * np.mean(vals, axis=0), "psi-limit")
    vals = np.broadcast_to(g(z, th), z.shape[:-1] + (spec.d, spec.d))
    return InfoMatrix(0.5 * np.mean(vals, axis=0), "path-quadrature")


def gamma_closed_form(name: str, path: PathSample, theta0, variant: str = "default") -> InfoMatrix:
    """Evaluate a builtin model's closed-form information integrand along the path.

    ``variant`` is "joint" (complete observations), "x-only" (diffusive
    coordinates only) or "partial"; "default" picks "partial" for the
    partial-observation builtins and "joint" otherwise.
    """
    spec = path.spec
    if spec.name != name:
        raise ConfigError(f"path was simulated under {spec.name!r}, not {name!r}")
    if variant == "default":
        variant = "partial" if name in PARTIAL_BUILTINS else "joint"
    key = {"joint": "gamma_integrand", "x-only": "gamma_integrand_x_only", "partial": "g_closed"}.get(variant)
    fn = spec.extras.get(key) if key else None
    if fn is None:
        raise ConfigError(f"no closed form for model {name!r} (variant {variant!r})")
    th = as_theta(theta0)
    z = path.states[:-1]
    vals = np.broadcast_to(fn(z, th), z.shape[:-1] + (spec.d, spec.d))
    factor = 0.5 if variant == "partial" else 1.0
    return InfoMatrix(factor * np.mean(vals, axis=0), "closed-form")
