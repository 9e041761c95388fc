"""Gaussian quasi-likelihood estimation of the diffusion parameter."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import minimize

from .blockcov import ktilde_arrays, psi_dense, spd_inverse
from .errors import ConfigError, NumericalError
from .information import gamma_terms_states, g_on_path
from .lamn_mc import _abs_crit, _rel_crit, map_paths
from .model import FD_STEP, ModelSpec, SchemeSpec, as_theta, projection_frame
from .score import complete_terms, observed_blocks, partial_terms
from .simulate import ObservationSet, PathSample, default_block_length, derive_seed, fmt, increments_from_states, \
    observations_from_rows, simulate_states

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class QuasiLikelihood:
    """Negative Gaussian quasi-log-likelihood (up to constants) and its analytic gradient."""

    def __init__(self, obs: ObservationSet, spec: ModelSpec, scheme: Optional[SchemeSpec] = None,
                 e_n: Optional[int] = None, mode: str = "augmented"):
        self.spec = spec
        self.scheme = scheme or obs.scheme
        self.partial = self.scheme.kind == "Partial"
        if self.partial:
            self.e = e_n or default_block_length(obs.n)
            self.frame = obs.frame if scheme is None else projection_frame(scheme)
            self.X, self.Z = observed_blocks(obs, spec, self.e, mode)
        else:
            self.X, self.Z = increments_from_states(obs.y_rows, spec)
            self.jb = spec.jb(self.Z)

    def value(self, theta) -> float:
        th = as_theta(theta)
        if self.partial:
            A = self.spec.aat(self.Z, th)
            inv, logdet = spd_inverse(psi_dense(A, self.frame, 1, 1, self.e))
        else:
            _, inv, _, logdet = ktilde_arrays(self.spec.aat(self.Z, th), self.jb)
        quad = np.einsum("...a,...ab,...b->...", self.X, inv, self.X)
        return float(np.sum(logdet + quad))

    def gradient(self, theta) -> np.ndarray:
        """Equals -2 times the summed score statistics."""
        th = as_theta(theta)
        if self.partial:
            U = partial_terms(self.spec, self.frame, self.X, self.Z, th, self.e)[0]
        else:
            U = complete_terms(self.spec, self.X, self.Z, th)[0]
        return -2.0 * U.sum(axis=0)


def quasi_nll(obs: ObservationSet, spec: ModelSpec, scheme: Optional[SchemeSpec], theta,
              e_n: Optional[int] = None, mode: str = "augmented") -> float:
    th = spec.check_theta(theta)
    return QuasiLikelihood(obs, spec, scheme, e_n, mode).value(th)


@dataclass
class EstimateReport:
    theta_hat: np.ndarray
    objective: float
    iterations: int
    converged: bool
    grad_norm: float
    history: list = field(default_factory=list)

    def to_json(self):
        return dict(theta_hat=self.theta_hat.tolist(), objective=self.objective, iterations=self.iterations,
                    converged=self.converged, grad_norm=self.grad_norm)


def _safe(f):
    def g(th):
        try:
            v = f(th)
        except (NumericalError, np.linalg.LinAlgError):
            return math.inf
        return v if math.isfinite(v) else math.inf
    return g


def _golden(f, lo, hi, tol, max_iter):
    a, b = lo, hi
    c, d = b - GOLDEN * (b - a), a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    best = min(fc, fd)
    history = [best]
    it = 0
    while b - a > tol and it < max_iter:
        it += 1
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = f(d)
        best = min(best, fc, fd)
        history.append(best)
    x, fx = (c, fc) if fc <= fd else (d, fd)
    return x, fx, it, b - a <= tol, history


def estimate(obs: ObservationSet, spec: ModelSpec, scheme: Optional[SchemeSpec], theta_init,
             options: Optional[dict] = None) -> EstimateReport:
    opts = dict(tol=1e-8, max_iter=500, newton_steps=3, e_n=None, mode="augmented")
    opts.update(options or {})
    th0 = spec.check_theta(theta_init)
    ql = QuasiLikelihood(obs, spec, scheme, opts["e_n"], opts["mode"])
    a0 = spec.a_tilde(ql.Z[0], th0)
    if not np.any(a0):
        raise ConfigError("a_tilde vanishes: the observations carry no information about theta")
    f = _safe(ql.value)
    tol, max_iter = opts["tol"], opts["max_iter"]
    lo, hi = spec.lower, spec.upper
    if spec.d == 1:
        x, fx, it, conv, history = _golden(lambda t: f(np.array([t])), lo[0], hi[0], tol, max_iter)
        theta = np.array([x])
        for _ in range(opts["newton_steps"]):
            g = ql.gradient(theta)[0]
            h = FD_STEP * max(1.0, abs(theta[0]))
            curv = (ql.gradient(theta + h)[0] - ql.gradient(theta - h)[0]) / (2 * h)
            if not (curv > 0 and math.isfinite(g)):
                break
            cand = theta - g / curv
            if not spec.inside(cand):
                break
            fc = f(cand)
            if fc > fx:
                break
            theta, fx = cand, fc
            history.append(fx)
    else:
        history = []
        span = hi - lo
        bounds = list(zip(lo + 1e-12 * span, hi - 1e-12 * span))

        def cb(xk):
            v = f(xk)
            history.append(min(v, history[-1]) if history else v)

        res = minimize(f, th0, method="Nelder-Mead", bounds=bounds, callback=cb,
                       options=dict(xatol=tol, fatol=tol, maxiter=max_iter, maxfev=20 * max_iter))
        theta, fx, it, conv = np.asarray(res.x, float), float(res.fun), int(res.nit), bool(res.success)
    gnorm = float(np.linalg.norm(ql.gradient(theta)))
    return EstimateReport(theta, float(fx), int(it), bool(conv), gnorm, history)


@dataclass
class StudyReport:
    theta0: np.ndarray
    n: int
    M: int
    theta_hats: np.ndarray
    emp_cov: np.ndarray
    ref_cov: np.ndarray
    gamma_mean: np.ndarray
    bias: np.ndarray
    bias_se: np.ndarray
    converged: int
    failures: int
    criteria: list

    @property
    def passed(self):
        return all(c.passed for c in self.criteria)

    def to_json(self):
        return dict(theta0=self.theta0.tolist(), n=self.n, M=self.M, emp_cov=self.emp_cov.tolist(),
                    ref_cov=self.ref_cov.tolist(), gamma_mean=self.gamma_mean.tolist(), bias=self.bias.tolist(),
                    bias_se=self.bias_se.tolist(), converged=self.converged, failures=self.failures,
                    criteria=[c.to_json() for c in self.criteria], passed=self.passed)

    def write_csv(self, fname):
        with open(fname, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\r\n")
            d = self.theta_hats.shape[1]
            w.writerow(["replication"] + [f"theta_hat{i + 1}" for i in range(d)])
            for i, row in enumerate(self.theta_hats):
                w.writerow([i] + [fmt(v) for v in row])


def estimator_study(spec: ModelSpec, scheme: SchemeSpec, theta0, n: int, M: int, seed: int,
                    substeps: int = 16, e_n: Optional[int] = None, threads: int = 1, mode: str = "augmented",
                    rtol: Optional[float] = None, options: Optional[dict] = None) -> StudyReport:
    if M < 500:
        raise ConfigError("estimator_study needs M >= 500")
    th = spec.check_theta(theta0)
    partial = scheme.kind == "Partial"
    e = (e_n or default_block_length(n)) if partial else None
    frame = projection_frame(scheme) if partial else None
    opts = dict(options or {})
    opts.update(e_n=e, mode=mode)
    g_fn = spec.extras.get("g_closed")
    d = spec.d

    def fn(a, b):
        states = simulate_states(spec, th, n, substeps, [derive_seed(seed, i) for i in range(a, b)])
        hats, conv, failed, gam = [], [], [], []
        for s in states:
            path = PathSample(spec, th, n, substeps, 0, s)
            Y = s[::substeps]
            if partial:
                k = spec.kappa
                rows = np.concatenate([Y[:, :k] @ frame.Qt1.T, Y[:, k:]], axis=1)
                obs = observations_from_rows(spec, scheme, rows, hidden=Y[:, :k] @ frame.Qt3.T)
                if g_fn is not None:
                    z = s[:-1]
                    gam.append(0.5 * np.broadcast_to(g_fn(z, th), z.shape[:-1] + (d, d)).mean(axis=0))
                else:
                    gam.append(0.5 * g_on_path(path, spec, frame, th).mean(axis=0))
            else:
                obs = observations_from_rows(spec, scheme, Y @ spec.U)
                f1, f2 = gamma_terms_states(spec, s, th)
                gam.append(f1 + f2)
            try:
                rep = estimate(obs, spec, scheme, th, opts)
                hats.append(rep.theta_hat)
                conv.append(rep.converged)
                failed.append(False)
            except NumericalError:
                hats.append(np.full(d, np.nan))
                conv.append(False)
                failed.append(True)
        return dict(theta=np.array(hats), conv=np.array(conv), failed=np.array(failed), gamma=np.array(gam))

    res = map_paths(fn, M, threads)
    nfail = int(res["failed"].sum())
    if nfail > 0.01 * M:
        raise NumericalError(f"{nfail} of {M} replications failed (budget 1%)")
    ok = ~res["failed"]
    hats = res["theta"][ok]
    z = math.sqrt(n) * (hats - th)
    emp = np.atleast_2d(np.cov(z.T, ddof=1))
    gmean = res["gamma"].mean(axis=0)
    ref = np.linalg.inv(gmean)
    bias = hats.mean(axis=0) - th
    bias_se = hats.std(axis=0, ddof=1) / math.sqrt(hats.shape[0])
    if rtol is None:
        rtol = 0.15 if partial else 0.10
    crit = []
    for i in range(d):
        crit.append(_rel_crit(f"var[{i}]", emp[i, i], ref[i, i], rtol))
        crit.append(_abs_crit(f"bias[{i}]", bias[i], 0.0, 3 * bias_se[i]))
    return StudyReport(th, n, M, res["theta"], emp, ref, gmean, bias, bias_se, int(res["conv"].sum()), nfail, crit)


def block_length_sweep(spec: ModelSpec, scheme: SchemeSpec, theta0, n: int, M: int, seed: int, e_grid,
                       substeps: int = 16, threads: int = 1, mode: str = "augmented",
                       options: Optional[dict] = None) -> list:
    """Estimator variance against the inverse information for several block lengths on the same paths."""
    if scheme.kind != "Partial":
        raise ConfigError("block-length sweep needs a Partial scheme")
    rows = []
    for e in e_grid:
        e = int(e)
        if e < 1 or (n - 1) // e < 1:
            raise ConfigError(f"block length {e} leaves no complete block for n={n}")
        rep = estimator_study(spec, scheme, theta0, n, M, seed, substeps, e, threads, mode, options=options)
        d = spec.d
        rows.append(dict(e_n=e, blocks=(n - 1) // e, emp_var=[float(rep.emp_cov[i, i]) for i in range(d)],
                         ref_var=[float(rep.ref_cov[i, i]) for i in range(d)],
                         ratio=[float(rep.emp_cov[i, i] / rep.ref_cov[i, i]) for i in range(d)],
                         bias=rep.bias.tolist(), failures=rep.failures))
    return rows


def write_sweep_csv(rows: list, fname: str) -> None:
    d = len(rows[0]["ratio"]) if rows else 0
    with open(fname, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(["e_n", "blocks"] + [f"{k}{i + 1}" for k in ("emp_var", "ref_var", "ratio") for i in range(d)])
        for r in rows:
            w.writerow([r["e_n"], r["blocks"]] + [fmt(v) for k in ("emp_var", "ref_var", "ratio") for v in r[k]])
