"""Monte Carlo checks of the likelihood-ratio expansion and the information relations."""
from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import stats

from .errors import ConfigError, NumericalError
from .information import gamma_terms_states, g_on_path
from .model import ModelSpec, SchemeSpec, as_theta, builtin_model, projection_frame
from .score import complete_terms, partial_terms
from .simulate import PathSample, block_arrays, default_block_length, derive_seed, fmt, increments_from_states, \
    simulate_states

CHUNK = 128
FAILURE_BUDGET = 0.01


def map_paths(fn, M: int, threads: int = 1):
    """Apply ``fn(start, stop)`` to fixed-size index chunks and stack the results in order.

    Chunk boundaries do not depend on ``threads``, so the output is
    bitwise identical for any worker count.
    """
    bounds = [(s, min(s + CHUNK, M)) for s in range(0, M, CHUNK)]
    if threads <= 1:
        parts = [fn(a, b) for a, b in bounds]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda ab: fn(*ab), bounds))
    return {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}


def _guarded(fn):
    """Run a chunk; on numerical failure retry path by path and mark failures with NaN."""
    def run(a, b):
        try:
            out = fn(a, b)
            out["failed"] = np.zeros(b - a, dtype=bool)
            return out
        except NumericalError:
            rows, failed = [], []
            for i in range(a, b):
                try:
                    rows.append(fn(i, i + 1))
                    failed.append(False)
                except NumericalError:
                    rows.append(None)
                    failed.append(True)
            ok = next((r for r in rows if r is not None), None)
            if ok is None:
                raise
            filled = [r if r is not None else {k: np.full_like(v, np.nan) for k, v in ok.items()} for r in rows]
            out = {k: np.concatenate([r[k] for r in filled]) for k in ok}
            out["failed"] = np.array(failed)
            return out
    return run


def _check_failures(res, M):
    nfail = int(res["failed"].sum())
    if nfail > FAILURE_BUDGET * M:
        raise NumericalError(f"{nfail} of {M} paths failed (budget {FAILURE_BUDGET:.0%})")
    return nfail


# ---------------------------------------------------------------------------
# per-chunk kernels


def _complete_chunk(spec, th, n, substeps, seed):
    def fn(a, b):
        states = simulate_states(spec, th, n, substeps, [derive_seed(seed, i) for i in range(a, b)])
        X, Z = increments_from_states(states[:, ::substeps], spec)
        ell, gam = complete_terms(spec, X, Z, th)
        first, second = gamma_terms_states(spec, states, th)
        return dict(score=ell.sum(axis=1) / math.sqrt(n), T=gam.sum(axis=1) / n, gamma=first + second,
                    terms=ell / math.sqrt(n))
    return fn


def _partial_observation(states, substeps, spec, frame):
    Y = states[:, ::substeps]
    k = spec.kappa
    return Y[..., :k] @ frame.Qt1.T, Y[..., k:], Y[..., :k] @ frame.Qt3.T


def _partial_chunk(spec, scheme, th, n, substeps, seed, e, mode):
    frame = projection_frame(scheme)
    g_fn = spec.extras.get("g_closed")

    def fn(a, b):
        states = simulate_states(spec, th, n, substeps, [derive_seed(seed, i) for i in range(a, b)])
        P1, C, hidden = _partial_observation(states, substeps, spec, frame)
        X, Ydot = block_arrays(P1, C, hidden, spec, frame, n, e, mode)
        start = np.arange(X.shape[1]) * e
        Z = np.concatenate([Ydot, C[:, start]], axis=-1)
        U, V, _, _ = partial_terms(spec, frame, X, Z, th, e)
        if g_fn is not None:
            z = states[:, :-1]
            gvals = np.broadcast_to(g_fn(z, th), z.shape[:-1] + (spec.d, spec.d))
            gamma = 0.5 * gvals.mean(axis=1)
        else:
            gamma = np.array([0.5 * g_on_path(PathSample(spec, th, n, substeps, 0, s), spec, frame, th).mean(axis=0)
                              for s in states])
        return dict(score=U.sum(axis=1) / math.sqrt(n), T=V.sum(axis=1) / n, gamma=gamma,
                    terms=U / math.sqrt(n))
    return fn


# ---------------------------------------------------------------------------
# report


@dataclass
class Criterion:
    name: str
    value: float
    target: float
    tolerance: float
    rule: str
    passed: bool

    def to_json(self):
        return dict(name=self.name, value=self.value, target=self.target, tolerance=self.tolerance,
                    rule=self.rule, passed=self.passed)


@dataclass
class LamnReport:
    M: int
    n: int
    h: list
    scheme: str
    e_n: Optional[int]
    lambda_mean: float
    lambda_var: float
    lambda_se: float
    exp_mean: float
    exp_se: float
    score_var: float
    T_bar: np.ndarray
    gamma_ref: np.ndarray
    failures: int
    ks_stat: Optional[float]
    ks_pvalue: Optional[float]
    max_block_term: float
    criteria: list = field(default_factory=list)
    lambdas: Optional[np.ndarray] = None
    scores: Optional[np.ndarray] = None

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.criteria)

    def to_json(self):
        return dict(M=self.M, n=self.n, h=self.h, scheme=self.scheme, e_n=self.e_n,
                    lambda_mean=self.lambda_mean, lambda_var=self.lambda_var, lambda_se=self.lambda_se,
                    exp_mean=self.exp_mean, exp_se=self.exp_se, score_var=self.score_var,
                    T_bar=self.T_bar.tolist(), gamma_ref=self.gamma_ref.tolist(), failures=self.failures,
                    ks_stat=self.ks_stat, ks_pvalue=self.ks_pvalue, max_block_term=self.max_block_term,
                    criteria=[c.to_json() for c in self.criteria], passed=self.passed)

    def to_text(self):
        lines = [f"LAMN check: scheme={self.scheme} n={self.n} M={self.M} h={self.h} failures={self.failures}",
                 f"{'criterion':<14}{'value':>16}{'target':>16}{'tolerance':>14}  rule        result"]
        for c in self.criteria:
            lines.append(f"{c.name:<14}{c.value:>16.8g}{c.target:>16.8g}{c.tolerance:>14.6g}  {c.rule:<10}  "
                         f"{'pass' if c.passed else 'FAIL'}")
        return "\n".join(lines) + "\n"


def _abs_crit(name, value, target, tol):
    return Criterion(name, float(value), float(target), float(tol), "abs", bool(abs(value - target) <= tol))


def _rel_crit(name, value, target, rtol):
    if target == 0:
        return Criterion(name, float(value), 0.0, 1e-12, "abs", bool(abs(value) <= 1e-12))
    return Criterion(name, float(value), float(target), float(rtol), "rel",
                     bool(abs(value - target) <= rtol * abs(target)))


def build_report(res, h, n, scheme_kind, e_n, tolerances):
    tol = dict(score_var_rtol=0.05, T_rtol=0.02, ks_level=0.01, se_mult=3.0)
    tol.update(tolerances or {})
    ok = ~res["failed"]
    score, T, gamma = res["score"][ok], res["T"][ok], res["gamma"][ok]
    M = int(ok.sum())
    hv = as_theta(h)
    lam = score @ hv - 0.5 * np.einsum("i,pij,j->p", hv, T, hv)
    gbar = gamma.mean(axis=0)
    Tbar = T.mean(axis=0)
    sigma2 = float(hv @ gbar @ hv)
    mean = float(lam.mean())
    se = float(lam.std(ddof=1) / math.sqrt(M))
    e = np.exp(lam)
    exp_mean, exp_se = float(e.mean()), float(e.std(ddof=1) / math.sqrt(M))
    hs = score @ hv
    score_var = float(hs.var(ddof=1))
    k = tol["se_mult"]
    crit = [
        _abs_crit("lambda_mean", mean, -0.5 * sigma2, k * se),
        _rel_crit("score_var", score_var, sigma2, tol["score_var_rtol"]),
        _abs_crit("exp_mean", exp_mean, 1.0, k * exp_se),
    ]
    scale = max(float(np.max(np.abs(gbar))), 1e-300)
    tdiff = float(np.max(np.abs(Tbar - gbar)))
    crit.append(Criterion("T_bar", float(np.trace(Tbar)), float(np.trace(gbar)), tol["T_rtol"], "rel",
                          bool(tdiff <= tol["T_rtol"] * scale) if scale > 1e-300 else tdiff <= 1e-12))
    ks_stat = ks_p = None
    spread = float(np.max(np.abs(gamma - gbar))) if M else 0.0
    if sigma2 > 0 and spread <= 1e-9 * max(1.0, scale):
        z = (lam + 0.5 * sigma2) / math.sqrt(sigma2)
        ks = stats.kstest(z, "norm")
        ks_stat, ks_p = float(ks.statistic), float(ks.pvalue)
        if scheme_kind == "Complete":
            crit.append(Criterion("ks_normal", ks_p, tol["ks_level"], tol["ks_level"], "p>level",
                                  bool(ks_p > tol["ks_level"])))
    terms = res["terms"][ok]
    max_term = float(np.max(np.abs(terms @ hv))) if terms.size else 0.0
    return LamnReport(M, n, hv.tolist(), scheme_kind, e_n, mean, float(lam.var(ddof=1)), se, exp_mean, exp_se,
                      score_var, Tbar, gbar, int(res["failed"].sum()), ks_stat, ks_p, max_term, crit, lam, score)


def run_lamn_mc(spec: ModelSpec, scheme: SchemeSpec, theta0, h, n: int, M: int, seed: int,
                e_n: Optional[int] = None, substeps: int = 16, threads: int = 1, mode: str = "augmented",
                tolerances: Optional[dict] = None) -> LamnReport:
    if M < 500:
        raise ConfigError("run_lamn_mc needs M >= 500")
    th = spec.check_theta(theta0)
    if scheme.kind == "Complete":
        fn = _complete_chunk(spec, th, n, substeps, seed)
        e = None
    else:
        e = e_n or default_block_length(n)
        fn = _partial_chunk(spec, scheme, th, n, substeps, seed, e, mode)
        if tolerances is None:
            tolerances = dict(score_var_rtol=0.07)
    res = map_paths(_guarded(fn), M, threads)
    _check_failures(res, M)
    return build_report(res, h, n, scheme.kind, e, tolerances)


def write_lambdas(report: LamnReport, fname: str) -> None:
    with open(fname, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        d = report.scores.shape[1]
        w.writerow(["path", "lambda_hat"] + [f"score{i + 1}" for i in range(d)])
        for i, (lam, sc) in enumerate(zip(report.lambdas, report.scores)):
            w.writerow([i, fmt(lam)] + [fmt(v) for v in sc])


# ---------------------------------------------------------------------------
# factor of two


@dataclass
class FactorTwoReport:
    score_var: dict
    closed_form: dict
    ratios: dict
    criteria: list

    @property
    def passed(self):
        return all(c.passed for c in self.criteria)

    def to_json(self):
        return dict(score_var=self.score_var, closed_form=self.closed_form, ratios=self.ratios,
                    criteria=[c.to_json() for c in self.criteria], passed=self.passed)


def factor_two_experiment(theta0, n: int, M: int, seed: int, substeps: int = 16, e_n: Optional[int] = None,
                          threads: int = 1, params: Optional[dict] = None, rtol: float = 0.10) -> FactorTwoReport:
    """Score variances for joint, velocity-only and integrated observation of one Langevin path set."""
    params = dict(params or {})
    if int(params.get("kappa", 1)) != 1 or int(params.get("d", 1)) != 1:
        raise ConfigError("factor-two experiment uses the scalar Langevin model")
    lspec, _ = builtin_model("langevin", params)
    vspec, _ = builtin_model("langevin-partial-velocity", params)
    ispec, ischeme = builtin_model("integrated", params)
    frame = projection_frame(ischeme)
    th = lspec.check_theta(theta0)
    e = e_n or default_block_length(n)
    g_fn = ispec.extras["g_closed"]

    def fn(a, b):
        states = simulate_states(lspec, th, n, substeps, [derive_seed(seed, i) for i in range(a, b)])
        Y = states[:, ::substeps]
        X, Z = increments_from_states(Y, lspec)
        joint = complete_terms(lspec, X, Z, th)[0].sum(axis=1)
        Xv, Zv = increments_from_states(Y[..., :1], vspec)
        xonly = complete_terms(vspec, Xv, Zv, th)[0].sum(axis=1)
        P1, C, hidden = _partial_observation(states, substeps, ispec, frame)
        Xb, Ydot = block_arrays(P1, C, hidden, ispec, frame, n, e)
        start = np.arange(Xb.shape[1]) * e
        Zb = np.concatenate([Ydot, C[:, start]], axis=-1)
        integ = partial_terms(ispec, frame, Xb, Zb, th, e)[0].sum(axis=1)
        first, second = gamma_terms_states(lspec, states, th)
        z = states[:, :-1]
        gp = 0.5 * np.broadcast_to(g_fn(z, th), z.shape[:-1] + (1, 1)).mean(axis=1)
        return dict(joint=joint[:, 0] / math.sqrt(n), xonly=xonly[:, 0] / math.sqrt(n),
                    integrated=integ[:, 0] / math.sqrt(n), g_joint=(first + second)[:, 0, 0],
                    g_x=first[:, 0, 0], g_int=gp[:, 0, 0])

    res = map_paths(fn, M, threads)
    var = {k: float(res[k].var(ddof=1)) for k in ("joint", "xonly", "integrated")}
    closed = {"joint": float(res["g_joint"].mean()), "xonly": float(res["g_x"].mean()),
              "integrated": float(res["g_int"].mean())}
    # scaled-factor example: kappa = 2 diffusive coordinates, one integrated
    sf, _ = builtin_model("scaled-factor", {"kappa": 2, "kappa2": 1})
    sf_states = simulate_states(sf, [0.0], 8, 1, [derive_seed(seed, M)])[0][:-1]
    sf_joint = float(np.mean(sf.extras["gamma_integrand"](sf_states, np.zeros(1))))
    sf_x = float(np.mean(sf.extras["gamma_integrand_x_only"](sf_states, np.zeros(1))))
    ratios = {
        "empirical_joint_over_integrated": var["joint"] / var["integrated"],
        "empirical_joint_over_xonly": var["joint"] / var["xonly"],
        "closed_joint_over_integrated": closed["joint"] / closed["integrated"],
        "closed_joint_over_xonly": closed["joint"] / closed["xonly"],
        "scaled_factor_joint_over_xonly": sf_joint / sf_x,
    }
    crit = [
        _rel_crit("emp_joint/int", ratios["empirical_joint_over_integrated"], 2.0, rtol),
        _rel_crit("emp_joint/x", ratios["empirical_joint_over_xonly"], 2.0, rtol),
        _rel_crit("closed_joint/int", ratios["closed_joint_over_integrated"], 2.0, 1e-9),
        _rel_crit("closed_joint/x", ratios["closed_joint_over_xonly"], 2.0, 1e-9),
        _rel_crit("scaled_factor", ratios["scaled_factor_joint_over_xonly"], 1.5, 1e-12),
    ]
    return FactorTwoReport(var, closed, ratios, crit)


# ---------------------------------------------------------------------------
# convergence of the conditional variance


def tn_convergence(spec: ModelSpec, theta0, n_grid, M: int, seed: int, substeps: int = 16,
                   threads: int = 1) -> list:
    """RMS over paths of |T_n - Gamma| for each n in ``n_grid``."""
    n_grid = [int(v) for v in n_grid]
    if any(b <= a for a, b in zip(n_grid, n_grid[1:])):
        raise ConfigError("n_grid must be increasing")
    th = spec.check_theta(theta0)
    table = []
    for n in n_grid:
        res = map_paths(_complete_chunk(spec, th, n, substeps, seed), M, threads)
        diff = res["T"] - res["gamma"]
        err = np.sqrt(np.sum(diff ** 2, axis=(1, 2)))
        T = res["T"]
        sym = bool(np.all(np.abs(T - np.swapaxes(T, 1, 2)) <= 1e-12 * max(1.0, float(np.abs(T).max()))))
        psd = bool(np.all(np.linalg.eigvalsh(0.5 * (T + np.swapaxes(T, 1, 2)))[:, 0] >= -1e-10))
        table.append(dict(n=n, rms=float(np.sqrt(np.mean(err ** 2))), max_abs=float(err.max()),
                          symmetric=sym, psd=psd))
    return table
