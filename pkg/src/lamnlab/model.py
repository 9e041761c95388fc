"""Diffusion models in rotated coordinates, builtin examples and structural checks.

A model is stored in the rotated frame Y = U X, split as Y = (Y~, Y^) with
``kappa`` diffusive coordinates Y~ and ``m - kappa`` smooth coordinates Y^::

    dY~ = b_tilde(Y, theta) dt + a_tilde(Y, theta) dW
    dY^ = b_check(Y) dt

Coefficient callbacks take a state array ``z`` of shape ``(..., m)`` and a
parameter vector ``theta`` of shape ``(d,)`` and must broadcast over the
leading axes of ``z``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, NumericalError

EPS = np.finfo(float).eps
FD_STEP = EPS ** (1.0 / 3.0)
KERNEL_RTOL = 1e-10


def as_theta(theta) -> np.ndarray:
    return np.atleast_1d(np.asarray(theta, dtype=float)).copy()


def kernel_basis(A: np.ndarray) -> np.ndarray:
    """Orthonormal basis (as columns) of Ker(A), SVD with tolerance 1e-10 * s_max."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    ncol = A.shape[1]
    if A.size == 0:
        return np.eye(ncol)
    _, s, vt = np.linalg.svd(A)
    smax = s[0] if s.size else 0.0
    rank = int(np.sum(s > KERNEL_RTOL * smax)) if smax > 0 else 0
    return vt[rank:].T.copy()


@dataclass(frozen=True, eq=False)
class ModelSpec:
    name: str
    m: int
    kappa: int
    r: int
    d: int
    lower: np.ndarray
    upper: np.ndarray
    z_ini: np.ndarray
    U: np.ndarray
    a_tilde: Callable
    b_tilde: Callable
    b_check: Optional[Callable] = None
    da_tilde: Optional[Callable] = None
    grad_b_check: Optional[Callable] = None
    params: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (1 <= self.kappa <= self.m):
            raise ConfigError(f"need 1 <= kappa <= m, got kappa={self.kappa}, m={self.m}")
        if self.kappa < self.m and 2 * self.kappa < self.m:
            raise ConfigError(f"degenerate models need m/2 <= kappa < m, got kappa={self.kappa}, m={self.m}")
        if self.kappa < self.m and self.b_check is None:
            raise ConfigError("degenerate model without b_check")
        U = np.asarray(self.U, dtype=float)
        if U.shape != (self.m, self.m) or np.max(np.abs(U @ U.T - np.eye(self.m))) > 1e-12:
            raise ConfigError("U must be an m x m orthogonal matrix (U U^T = I within 1e-12)")
        lo, hi = np.asarray(self.lower, float), np.asarray(self.upper, float)
        if lo.shape != (self.d,) or hi.shape != (self.d,) or np.any(lo >= hi):
            raise ConfigError("theta box must have d components with lower < upper")
        if np.asarray(self.z_ini).shape != (self.m,):
            raise ConfigError(f"z_ini must have length m={self.m}")

    @property
    def degenerate(self) -> bool:
        return self.kappa < self.m

    @property
    def y_ini(self) -> np.ndarray:
        return self.U @ np.asarray(self.z_ini, dtype=float)

    def inside(self, theta) -> bool:
        th = as_theta(theta)
        return th.shape == (self.d,) and bool(np.all(th > self.lower) and np.all(th < self.upper))

    def check_theta(self, theta) -> np.ndarray:
        th = as_theta(theta)
        if not self.inside(th):
            raise ConfigError(f"theta={th.tolist()} outside the open box ({self.lower.tolist()}, {self.upper.tolist()})")
        return th

    def aat(self, z, theta) -> np.ndarray:
        a = self.a_tilde(np.asarray(z, dtype=float), as_theta(theta))
        return a @ np.swapaxes(a, -1, -2)

    def da(self, z, theta) -> np.ndarray:
        """All parameter derivatives of a_tilde, shape (..., d, kappa, r)."""
        z = np.asarray(z, dtype=float)
        th = as_theta(theta)
        if self.da_tilde is not None:
            return np.asarray(self.da_tilde(z, th), dtype=float)
        parts = []
        for i in range(self.d):
            h = FD_STEP * max(1.0, abs(th[i]))
            e = np.zeros(self.d)
            e[i] = h
            parts.append((self.a_tilde(z, th + e) - self.a_tilde(z, th - e)) / (2 * h))
        return np.stack(parts, axis=-3)

    def daat(self, z, theta) -> np.ndarray:
        """Parameter derivatives of a_tilde a_tilde^T, shape (..., d, kappa, kappa)."""
        a = self.a_tilde(np.asarray(z, dtype=float), as_theta(theta))[..., None, :, :]
        da = self.da(z, theta)
        prod = da @ np.swapaxes(a, -1, -2)
        return prod + np.swapaxes(prod, -1, -2)

    def jb(self, z) -> np.ndarray:
        """Gradient of b_check in the diffusive coordinates, shape (..., kappa, m - kappa)."""
        z = np.asarray(z, dtype=float)
        if not self.degenerate:
            return np.zeros(z.shape[:-1] + (self.kappa, 0))
        if self.grad_b_check is not None:
            return np.broadcast_to(self.grad_b_check(z), z.shape[:-1] + (self.kappa, self.m - self.kappa))
        rows = []
        for i in range(self.kappa):
            h = FD_STEP * np.maximum(1.0, np.abs(z[..., i]))
            zp, zm = z.copy(), z.copy()
            zp[..., i] += h
            zm[..., i] -= h
            rows.append((self.b_check(zp) - self.b_check(zm)) / (2 * h[..., None]))
        return np.stack(rows, axis=-2)


def theta_derivative(spec: ModelSpec, which: str, z, theta, i: int) -> np.ndarray:
    """Derivative of one coefficient in theta_i, analytic when available."""
    th = as_theta(theta)
    z = np.asarray(z, dtype=float)
    h = FD_STEP * max(1.0, abs(th[i]))
    e = np.zeros(spec.d)
    e[i] = h
    if not (spec.inside(th + e) and spec.inside(th - e)):
        raise ConfigError(f"theta +- step leaves the parameter box in component {i}")
    if which == "b_check":
        return np.zeros(spec.m - spec.kappa)
    if which == "a_tilde":
        if spec.da_tilde is not None:
            return spec.da(z, th)[..., i, :, :]
        fn = spec.a_tilde
    elif which == "b_tilde":
        fn = spec.b_tilde
    else:
        raise ConfigError(f"unknown coefficient id {which!r}")
    return (fn(z, th + e) - fn(z, th - e)) / (2 * h)


@dataclass(frozen=True, eq=False)
class SchemeSpec:
    kind: str
    Q: Optional[np.ndarray] = None
    B: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in ("Complete", "Partial"):
            raise ConfigError(f"scheme kind must be Complete or Partial, got {self.kind!r}")
        if self.kind == "Complete":
            return
        if self.Q is None or self.B is None:
            raise ConfigError("Partial scheme needs Q and B")
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        B = np.atleast_2d(np.asarray(self.B, dtype=float))
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "B", B)
        k = Q.shape[0]
        if Q.shape != (k, k):
            raise ConfigError("Q must be square")
        if B.shape[1] != k:
            raise ConfigError("B must have kappa columns")
        if np.max(np.abs(Q - Q.T)) > 1e-12 or np.max(np.abs(Q @ Q - Q)) > 1e-12:
            raise ConfigError("Q must be an orthogonal projection (Q^2 = Q = Q^T within 1e-12)")
        if np.linalg.eigvalsh(B @ B.T).min() <= 0:
            raise ConfigError("B B^T must be positive definite")
        N = kernel_basis(B)
        if N.size and np.max(np.abs(N - Q @ N)) > 1e-10:
            raise ConfigError("Ker(B) must be contained in Im(Q)")
        if self.q1 + self.q2 < k:
            raise ConfigError("need q = rank(Q) + (m - kappa) >= kappa")
        if self.q1 >= k:
            raise ConfigError("partial scheme needs rank(Q) < kappa")

    @property
    def kappa(self) -> int:
        return self.Q.shape[0]

    @property
    def q1(self) -> int:
        return int(round(np.trace(self.Q)))

    @property
    def q2(self) -> int:
        return self.B.shape[0]

    @property
    def q(self) -> int:
        return self.q1 + self.q2


def _sign_fix(v: np.ndarray) -> np.ndarray:
    k = int(np.argmax(np.abs(v) > np.abs(v).max() - 1e-12))
    return -v if v[k] < 0 else v


@dataclass(frozen=True, eq=False)
class ProjectionFrame:
    Qt1: np.ndarray
    Qt2: np.ndarray
    Qt3: np.ndarray
    B_pinv: np.ndarray

    @property
    def kappa(self) -> int:
        return self.Qt2.shape[1]

    @property
    def q1(self) -> int:
        return self.Qt1.shape[0]

    @property
    def q2(self) -> int:
        return self.Qt2.shape[0]

    @property
    def q(self) -> int:
        return self.q1 + self.q2

    @property
    def n_tail(self) -> int:
        return self.Qt3.shape[0]


def projection_frame(scheme: SchemeSpec) -> ProjectionFrame:
    if scheme.kind != "Partial":
        raise ConfigError("projection frame needs a Partial scheme")
    Q, B = scheme.Q, scheme.B
    k = Q.shape[0]
    w, V = np.linalg.eigh(Q)
    one = [_sign_fix(V[:, i]) for i in range(k) if w[i] > 0.5]
    zero = [_sign_fix(V[:, i]) for i in range(k) if w[i] <= 0.5]
    R1 = np.array(one).reshape(len(one), k)
    R3 = np.array(zero).reshape(len(zero), k)
    return ProjectionFrame(
        Qt1=R1 @ Q,
        Qt2=B.copy(),
        Qt3=R3 @ (np.eye(k) - Q),
        B_pinv=np.linalg.pinv(B),
    )


def check_compatible(spec: ModelSpec, scheme: SchemeSpec) -> None:
    """Dimension and structure checks tying a scheme to a model."""
    if scheme.kind == "Complete":
        return
    if scheme.kappa != spec.kappa or scheme.q2 != spec.m - spec.kappa:
        raise ConfigError("scheme dimensions do not match the model (Q is kappa x kappa, B is (m-kappa) x kappa)")
    z = spec.y_ini
    if np.max(np.abs(spec.jb(z) - scheme.B.T)) > 1e-8:
        raise ConfigError("partial scheme requires b_check(z) = B x")


@dataclass
class ConditionReport:
    rows: list
    passed: bool

    @property
    def worst(self) -> float:
        return max((max(r["kernel"], r["b_check"], r["commute"]) / r["scale"] for r in self.rows), default=0.0)


def validate_conditions(spec: ModelSpec, scheme: SchemeSpec, probes) -> ConditionReport:
    """Residuals of the kernel and commutation conditions at sample points."""
    probes = list(probes)
    if not probes:
        raise ConfigError("validate_conditions needs at least one probe")
    rows = []
    ok = True
    for z, theta in probes:
        th = spec.check_theta(theta)
        z = np.asarray(z, dtype=float)
        a = spec.a_tilde(z, th)
        da = spec.da(z, th)
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(da))):
            raise NumericalError(f"non-finite coefficient at z={z.tolist()}, theta={th.tolist()}")
        min_eig = float(np.linalg.eigvalsh(a @ a.T).min())
        a_pinv = np.linalg.pinv(a)
        Ka = kernel_basis(a)
        ker = max((float(np.linalg.norm(da[i] @ Ka)) for i in range(spec.d)), default=0.0) if Ka.size else 0.0
        Ms = [da[i] @ a_pinv for i in range(spec.d)]
        bres = 0.0
        if spec.degenerate:
            JbT = spec.jb(z).T
            W = kernel_basis(JbT)
            if W.size:
                bres = max(float(np.linalg.norm(JbT @ M @ W)) for M in Ms)
        com = 0.0
        if scheme.kind == "Partial":
            com = max(float(np.linalg.norm(scheme.Q @ M - M @ scheme.Q)) for M in Ms)
        scale = max(1.0, float(np.linalg.norm(da)) * max(1.0, float(np.linalg.norm(a_pinv))))
        passed = min_eig > 0 and max(ker, bres, com) <= 1e-8 * scale
        ok = ok and passed
        rows.append(dict(z=z.tolist(), theta=th.tolist(), min_eig_aat=min_eig, kernel=ker,
                         b_check=bres, commute=com, scale=scale, passed=passed))
    return ConditionReport(rows, ok)


# ---------------------------------------------------------------------------
# builtin models


def _state_factor(params):
    """Positive state modulation s(x) of the diffusion scale."""
    form = params.get("state", "const")
    amp = float(params.get("amp", 0.1))
    cap = float(params.get("cap", 4.0))
    if form == "const":
        return lambda x: np.ones_like(x)
    if form == "sine":
        if abs(amp) >= 1:
            raise ConfigError("state='sine' needs |amp| < 1 so the scale stays positive")
        return lambda x: 1.0 + amp * np.sin(x)
    if form == "sqrtquad":
        if cap <= 0:
            raise ConfigError("state='sqrtquad' needs cap > 0")
        return lambda x: np.sqrt(1.0 + cap * np.tanh(x * x / cap))
    raise ConfigError(f"unknown state form {form!r}")


def _box(params, d, default):
    lo = params.get("lower", default[0])
    hi = params.get("upper", default[1])
    return np.broadcast_to(np.asarray(lo, float), (d,)).copy(), np.broadcast_to(np.asarray(hi, float), (d,)).copy()


def _trace_pair(Ainv, dA):
    """Matrix [tr(Ainv dA_i Ainv dA_j)]_ij for dA of shape (..., d, k, k)."""
    P = Ainv[..., None, :, :] @ dA
    return np.einsum("...iab,...jba->...ij", P, P)


def _ones_dd(shape, d):
    return np.ones(shape + (d, d))


def _diag_scale(x, th, s, d, kappa):
    """Diagonal scale matrix, scalar (d=1) or one parameter per coordinate (d=kappa)."""
    if d == 1:
        vals = th[0] * s(x[..., :1]) * np.ones(x.shape[:-1] + (kappa,))
    else:
        vals = th * s(x)
    return vals


def _diag_scale_deriv(x, th, s, d, kappa):
    out = np.zeros(x.shape[:-1] + (d, kappa, kappa))
    if d == 1:
        v = s(x[..., 0])
        for k in range(kappa):
            out[..., 0, k, k] = v
    else:
        sx = s(x)
        for k in range(kappa):
            out[..., k, k, k] = sx[..., k]
    return out


def _diag_matrix(v):
    k = v.shape[-1]
    out = np.zeros(v.shape + (k,))
    idx = np.arange(k)
    out[..., idx, idx] = v
    return out


def _langevin_parts(params, name):
    kappa = int(params.get("kappa", 1))
    d = int(params.get("d", 1))
    if d not in (1, kappa):
        raise ConfigError("langevin models take d = 1 (common scale) or d = kappa (one scale per coordinate)")
    s = _state_factor(params)
    drift = float(params.get("drift", 0.0))
    lo, hi = _box(params, d, (0.1, 10.0))

    def c(z, th):
        return _diag_matrix(_diag_scale(z[..., :kappa], th, s, d, kappa))

    def dc(z, th):
        return _diag_scale_deriv(z[..., :kappa], th, s, d, kappa)

    def bt(z, th):
        return -drift * z[..., :kappa]

    def info_density(z, th):
        cc = c(z, th)
        A = cc @ np.swapaxes(cc, -1, -2)
        dcc = dc(z, th) @ np.swapaxes(cc, -1, -2)[..., None, :, :]
        dA = dcc + np.swapaxes(dcc, -1, -2)
        return _trace_pair(np.linalg.inv(A), dA)

    return kappa, d, c, dc, bt, lo, hi, info_density


def _langevin(params, name, scheme_kind):
    kappa, d, c, dc, bt, lo, hi, dens = _langevin_parts(params, name)
    x0 = float(params.get("x0", 0.0))
    if scheme_kind == "velocity":
        spec = ModelSpec(name, kappa, kappa, kappa, d, lo, hi, np.full(kappa, x0), np.eye(kappa),
                         c, bt, None, dc, None, dict(params),
                         extras=dict(gamma_integrand=lambda z, th: 0.5 * dens(z, th)))
        return spec, SchemeSpec("Complete")
    m = 2 * kappa
    eye = np.eye(kappa)
    extras = dict(gamma_integrand=dens, gamma_integrand_x_only=lambda z, th: 0.5 * dens(z, th), g_closed=dens)
    spec = ModelSpec(name, m, kappa, kappa, d, lo, hi, np.concatenate([np.full(kappa, x0), np.zeros(kappa)]),
                     np.eye(m), c, bt, lambda z: z[..., :kappa].copy(), dc, lambda z: eye, dict(params), extras)
    if scheme_kind == "integrated":
        return spec, SchemeSpec("Partial", np.zeros((kappa, kappa)), np.eye(kappa))
    return spec, SchemeSpec("Complete")


def _shared_noise(params):
    s = _state_factor(params)
    eamp = float(params.get("eamp", 0.5))
    if abs(eamp) >= 1:
        raise ConfigError("shared-noise needs |eamp| < 1 so the drift gradient stays away from zero")
    drift = float(params.get("drift", 0.0))
    lo, hi = _box(params, 1, (0.1, 10.0))
    r2 = np.sqrt(2.0)
    U = np.array([[1.0, 1.0], [1.0, -1.0]]) / r2

    def c(u, th):  # u = x + y
        return th[0] * s(u)

    def a(z, th):
        return (r2 * c(r2 * z[..., 0], th))[..., None, None]

    def da(z, th):
        return (r2 * s(r2 * z[..., 0]))[..., None, None, None]

    def e(u):
        return u + eamp * np.sin(u)

    def bt(z, th):
        u = r2 * z[..., 0]
        return ((2 * (-drift * u / 2) + e(u)) / r2)[..., None]

    def bc(z):
        return (e(r2 * z[..., 0]) / r2)[..., None]

    def gbc(z):
        return (1.0 + eamp * np.cos(r2 * z[..., 0]))[..., None, None]

    def dens(z, th):
        u = r2 * z[..., 0]
        v = 2.0 * s(u) / c(u, th)
        return (v * v)[..., None, None]

    x0 = np.asarray(params.get("z_ini", [0.0, 0.0]), float)
    spec = ModelSpec("shared-noise", 2, 1, 1, 1, lo, hi, x0, U, a, bt, bc, da, gbc, dict(params),
                     dict(gamma_integrand=dens))
    return spec, SchemeSpec("Complete")


def _default_A(m, kappa):
    i = np.arange(m)[:, None]
    j = np.arange(kappa)[None, :]
    return np.eye(m, kappa) + 0.3 * np.cos(1.0 + i + 2.0 * j) * (i != j)


def _check_full_rank(A, kappa, what):
    if np.linalg.matrix_rank(A) < kappa:
        raise ConfigError(f"{what} must have rank kappa={kappa}")


def _exp_factor(params, d):
    amp = float(params.get("amp", 0.0))
    if abs(amp) >= 1:
        raise ConfigError("factor models need |amp| < 1 so f stays positive")

    def f(x1, th):
        return np.exp(np.sum(th)) * (1.0 + amp * np.sin(x1))

    return f


def _factor(params):
    m = int(params.get("m", 3))
    kappa = int(params.get("kappa", 2))
    d = int(params.get("d", 1))
    if not (kappa < m <= 2 * kappa):
        raise ConfigError("factor model needs m/2 <= kappa < m")
    A = np.asarray(params.get("A", _default_A(m, kappa)), float)
    if A.shape != (m, kappa):
        raise ConfigError(f"factor model A must be {m} x {kappa}")
    _check_full_rank(A, kappa, "A")
    lam = float(params.get("drift", 1.0))
    P, sig, Qt = np.linalg.svd(A)
    U = P.T
    LV = np.diag(sig) @ Qt
    f = _exp_factor(params, d)
    lo, hi = _box(params, d, (-3.0, 3.0))
    J = np.eye(m - kappa, kappa)

    def x1(z):
        return z @ U[:, 0]  # first original coordinate X_1 = (U^T Y)_1

    def a(z, th):
        return f(x1(z), th)[..., None, None] * LV

    def da(z, th):
        return np.repeat(a(z, th)[..., None, :, :], d, axis=-3)

    def bt(z, th):
        return -lam * z[..., :kappa]

    def bc(z):
        return z[..., :kappa] @ J.T

    def dens(z, th):
        return 2.0 * m * _ones_dd(z.shape[:-1], d)

    spec = ModelSpec("factor", m, kappa, kappa, d, lo, hi, np.zeros(m), U, a, bt, bc, da, lambda z: J.T,
                     dict(params), dict(gamma_integrand=dens, A=A))
    return spec, SchemeSpec("Complete")


def _scaled_factor(params):
    kappa = int(params.get("kappa", 2))
    k2 = int(params.get("kappa2", 1))
    d = int(params.get("d", 1))
    if not (1 <= k2 <= kappa):
        raise ConfigError("scaled-factor needs 1 <= kappa2 <= kappa")
    m = kappa + k2
    A = np.asarray(params.get("A", np.eye(kappa) + 0.25 * np.tri(kappa, k=-1)), float)
    if A.shape != (kappa, kappa):
        raise ConfigError(f"scaled-factor A must be {kappa} x {kappa}")
    _check_full_rank(A, kappa, "A")
    f = _exp_factor(params, d)
    drift = float(params.get("drift", 0.0))
    lo, hi = _box(params, d, (-3.0, 3.0))
    Jb = np.eye(kappa, k2)

    def a(z, th):
        return f(z[..., 0], th)[..., None, None] * A

    def da(z, th):
        return np.repeat(a(z, th)[..., None, :, :], d, axis=-3)

    def bt(z, th):
        return -drift * z[..., :kappa]

    extras = dict(gamma_integrand=lambda z, th: 2.0 * m * _ones_dd(z.shape[:-1], d),
                  gamma_integrand_x_only=lambda z, th: 2.0 * kappa * _ones_dd(z.shape[:-1], d))
    spec = ModelSpec("scaled-factor", m, kappa, kappa, d, lo, hi, np.zeros(m), np.eye(m), a, bt,
                     lambda z: z[..., :k2].copy(), da, lambda z: Jb, dict(params), extras)
    return spec, SchemeSpec("Complete")


_SV_Q = np.array([[1.0, 0.0], [0.0, 0.0]])
_SV_B = np.array([[0.0, 1.0]])


def _stochvol_common(params):
    d = int(params.get("d", 1))
    A = np.asarray(params.get("A", [[1.0, 0.0], [0.5, 1.0]]), float)
    if A.shape != (2, 2):
        raise ConfigError("stochvol-common A must be 2 x 2")
    _check_full_rank(A, 2, "A")
    f = _exp_factor(params, d)
    drift = float(params.get("drift", 0.0))
    lo, hi = _box(params, d, (-3.0, 3.0))

    def a(z, th):
        return f(z[..., 0], th)[..., None, None] * A

    def da(z, th):
        return np.repeat(a(z, th)[..., None, :, :], d, axis=-3)

    def bt(z, th):
        return -drift * z[..., :2]

    def g(z, th):
        return 8.0 * _ones_dd(z.shape[:-1], d)

    spec = ModelSpec("stochvol-common", 3, 2, 2, d, lo, hi, np.zeros(3), np.eye(3), a, bt,
                     lambda z: z[..., 1:2].copy(), da, lambda z: _SV_B.T, dict(params), dict(g_closed=g))
    return spec, SchemeSpec("Partial", _SV_Q, _SV_B)


def _stochvol_diagonal(params):
    d = int(params.get("d", 1))
    if d not in (1, 2):
        raise ConfigError("stochvol-diagonal takes d = 1 or d = 2")
    s = _state_factor(params)
    c22 = float(params.get("c22", 1.0))
    if c22 <= 0:
        raise ConfigError("stochvol-diagonal needs c22 > 0")
    drift = float(params.get("drift", 0.0))
    lo, hi = _box(params, d, (0.1, 10.0))

    def diag(z, th):
        x1 = z[..., 0]
        if d == 1:
            return np.stack([th[0] * s(x1), np.full_like(x1, c22)], axis=-1)
        return np.stack([th[0] * s(x1), np.full_like(x1, th[1])], axis=-1)

    def ddiag(z, th):
        x1 = z[..., 0]
        out = np.zeros(z.shape[:-1] + (d, 2))
        out[..., 0, 0] = s(x1)
        if d == 2:
            out[..., 1, 1] = 1.0
        return out

    def a(z, th):
        return _diag_matrix(diag(z, th))

    def da(z, th):
        return _diag_matrix(ddiag(z, th))

    def bt(z, th):
        return -drift * z[..., :2]

    def g(z, th):
        ratio = ddiag(z, th) / diag(z, th)[..., None, :]
        return 4.0 * np.einsum("...ik,...jk->...ij", ratio, ratio)

    spec = ModelSpec("stochvol-diagonal", 3, 2, 2, d, lo, hi, np.zeros(3), np.eye(3), a, bt,
                     lambda z: z[..., 1:2].copy(), da, lambda z: _SV_B.T, dict(params), dict(g_closed=g))
    return spec, SchemeSpec("Partial", _SV_Q, _SV_B)


BUILTINS = {
    "langevin": lambda p: _langevin(p, "langevin", "complete"),
    "langevin-partial-velocity": lambda p: _langevin(p, "langevin-partial-velocity", "velocity"),
    "integrated": lambda p: _langevin(p, "integrated", "integrated"),
    "shared-noise": _shared_noise,
    "factor": _factor,
    "scaled-factor": _scaled_factor,
    "stochvol-common": _stochvol_common,
    "stochvol-diagonal": _stochvol_diagonal,
}


def builtin_model(name: str, params: Optional[dict] = None):
    """Return (ModelSpec, SchemeSpec) for a builtin model."""
    if name not in BUILTINS:
        raise ConfigError(f"unknown model {name!r}; choose from {sorted(BUILTINS)}")
    spec, scheme = BUILTINS[name](dict(params or {}))
    check_compatible(spec, scheme)
    return spec, scheme


def load_model(doc: dict):
    """Build (ModelSpec, SchemeSpec) from a JSON-style document."""
    allowed = {"name", "dims", "params", "scheme"}
    extra = set(doc) - allowed
    if extra:
        raise ConfigError(f"unknown model keys: {sorted(extra)}")
    if "name" not in doc:
        raise ConfigError("model document needs a name")
    spec, scheme = builtin_model(doc["name"], doc.get("params", {}))
    dims = doc.get("dims") or {}
    bad = set(dims) - {"m", "kappa", "r", "d"}
    if bad:
        raise ConfigError(f"unknown dims keys: {sorted(bad)}")
    for key, val in dims.items():
        if int(val) != getattr(spec, key):
            raise ConfigError(f"dims.{key}={val} does not match builtin {spec.name!r} ({getattr(spec, key)})")
    sch = doc.get("scheme")
    if sch:
        bad = set(sch) - {"kind", "Q", "B"}
        if bad:
            raise ConfigError(f"unknown scheme keys: {sorted(bad)}")
        kind = sch.get("kind", scheme.kind)
        if kind == "Complete":
            scheme = SchemeSpec("Complete")
        else:
            scheme = SchemeSpec(kind, sch.get("Q", scheme.Q), sch.get("B", scheme.B))
        check_compatible(spec, scheme)
    return spec, scheme
