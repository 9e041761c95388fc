"""Command-line front end: one experiment per invocation, one output directory per experiment.

Exit codes: 0 success, 1 failed check, 2 configuration error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import copy
import json
import os
import sys

import numpy as np
import scipy

from . import __version__
from .blockcov import g_limit, psi_dense, v_matrix
from .errors import ConfigError, NumericalError
from .information import PARTIAL_BUILTINS, check_pd, gamma_closed_form, gamma_complete, gamma_partial
from .lamn_mc import factor_two_experiment, run_lamn_mc, write_lambdas
from .model import load_model, projection_frame
from .qmle import block_length_sweep, estimate, estimator_study, write_sweep_csv
from .simulate import default_block_length, fmt, observe, simulate_path, write_observations, write_path

COMMANDS = ("simulate", "psi", "info", "lamn-check", "factor-two", "estimate", "study")
OUT_ENV = "LAMNLAB_OUT"

DEFAULTS = {
    "command": None,
    "model": "langevin",
    "params": {},
    "scheme": None,
    "n": 400,
    "M": 1000,
    "substeps": 16,
    "e_n": None,
    "e_grid": None,
    "seed": 7,
    "h": None,
    "theta0": None,
    "theta_init": None,
    "L": 10,
    "A": None,
    "L_grid": [50, 100, 200, 400],
    "grid_points": 64,
    "mode": "augmented",
    "tolerances": {},
}
RUNTIME_KEYS = ("out", "threads")


def _vector(val, name):
    arr = np.atleast_1d(np.asarray(val, dtype=float))
    if arr.ndim != 1 or not np.all(np.isfinite(arr)):
        raise ConfigError(f"{name} must be a finite number or list of numbers")
    return [float(v) for v in arr]


def _int(cfg, key, lo):
    val = cfg[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)) or int(val) != val or val < lo:
        raise ConfigError(f"{key} must be an integer >= {lo}, got {val!r}")
    cfg[key] = int(val)


def resolve_config(raw: dict):
    """Fill defaults, validate, and return (resolved config, model spec, scheme)."""
    raw = dict(raw)
    raw.pop("versions", None)
    unknown = set(raw) - set(DEFAULTS) - set(RUNTIME_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = copy.deepcopy(DEFAULTS)
    cfg.update({k: v for k, v in raw.items() if k not in RUNTIME_KEYS})
    if cfg["command"] not in COMMANDS:
        raise ConfigError(f"command must be one of {COMMANDS}, got {cfg['command']!r}")
    if not isinstance(cfg["params"], dict) or not isinstance(cfg["tolerances"], dict):
        raise ConfigError("params and tolerances must be JSON objects")
    doc = {"name": cfg["model"], "params": cfg["params"]}
    if cfg["scheme"]:
        doc["scheme"] = cfg["scheme"]
    spec, scheme = load_model(doc)
    _int(cfg, "n", 2)
    _int(cfg, "M", 1)
    _int(cfg, "substeps", 1)
    _int(cfg, "seed", 0)
    _int(cfg, "L", 3)
    _int(cfg, "grid_points", 1)
    if cfg["command"] in ("lamn-check", "study") and cfg["M"] < 500:
        raise ConfigError("lamn-check and study need M >= 500")
    if cfg["mode"] not in ("augmented", "proxy"):
        raise ConfigError("mode must be 'augmented' or 'proxy'")
    if scheme.kind == "Partial":
        if cfg["e_n"] is None:
            cfg["e_n"] = default_block_length(cfg["n"])
        _int(cfg, "e_n", 1)
        if (cfg["n"] - 1) // cfg["e_n"] < 1:
            raise ConfigError("n is too small for one block of length e_n")
    else:
        cfg["e_n"] = None
    if cfg["e_grid"] is not None:
        if scheme.kind != "Partial" or cfg["command"] != "study":
            raise ConfigError("e_grid is a block-length sweep for the study command under a Partial scheme")
        grid = cfg["e_grid"]
        if not isinstance(grid, list) or not grid or any(isinstance(v, bool) or not isinstance(v, (int, float))
                                                         or int(v) != v or v < 1 for v in grid):
            raise ConfigError("e_grid must be a non-empty list of positive integers")
        cfg["e_grid"] = [int(v) for v in grid]
        if any((cfg["n"] - 1) // v < 1 for v in cfg["e_grid"]):
            raise ConfigError("every e_grid entry must leave at least one complete block")
    if cfg["theta0"] is None:
        cfg["theta0"] = [1.0 if spec.inside(np.ones(spec.d)) else 0.0] * spec.d
    cfg["theta0"] = _vector(cfg["theta0"], "theta0")
    spec.check_theta(cfg["theta0"])
    if cfg["theta_init"] is None:
        cfg["theta_init"] = list(cfg["theta0"])
    cfg["theta_init"] = _vector(cfg["theta_init"], "theta_init")
    spec.check_theta(cfg["theta_init"])
    cfg["h"] = _vector([1.0] * spec.d if cfg["h"] is None else cfg["h"], "h")
    if len(cfg["h"]) != spec.d:
        raise ConfigError(f"h must have d={spec.d} components")
    cfg["L_grid"] = [int(v) for v in cfg["L_grid"]]
    if cfg["A"] is not None:
        A = np.asarray(cfg["A"], dtype=float)
        if A.shape != (spec.kappa, spec.kappa) or np.max(np.abs(A - A.T)) > 0:
            raise ConfigError(f"A must be a symmetric {spec.kappa} x {spec.kappa} matrix")
        cfg["A"] = A.tolist()
    cfg["params"] = dict(sorted(cfg["params"].items()))
    return cfg, spec, scheme


def manifest(cfg: dict) -> str:
    doc = dict(cfg)
    doc["versions"] = {"lamnlab": __version__, "numpy": np.__version__, "scipy": scipy.__version__}
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _dump(obj, fname):
    with open(fname, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_matrix(M, fname):
    with open(fname, "w", newline="") as fh:
        for row in np.atleast_2d(M):
            fh.write(",".join(fmt(v) for v in row) + "\r\n")


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg, spec, scheme, out, threads):
    path = simulate_path(spec, cfg["theta0"], cfg["n"], cfg["substeps"], cfg["seed"])
    write_path(path, os.path.join(out, "path"))
    write_observations(observe(path, scheme, cfg["n"]), os.path.join(out, "observations.csv"))
    _dump({"final_state": path.states[-1].tolist(), "fine_steps": path.states.shape[0] - 1}, os.path.join(out, "summary.json"))
    return 0


def cmd_psi(cfg, spec, scheme, out, threads):
    if scheme.kind != "Partial":
        raise ConfigError("psi needs a Partial scheme")
    frame = projection_frame(scheme)
    A = np.asarray(cfg["A"]) if cfg["A"] is not None else spec.aat(spec.y_ini, cfg["theta0"])
    L = cfg["L"]
    P = psi_dense(A, frame, 2, 2, L)
    _write_matrix(P, os.path.join(out, "psi.csv"))
    summary = {"L": L, "shape": list(P.shape), "symmetric_error": float(np.max(np.abs(P - P.T)))}
    status = 0
    if frame.q1 == 0 and frame.q2 == frame.kappa and np.allclose(frame.Qt2, np.eye(frame.kappa), atol=0):
        err = float(np.max(np.abs(P - np.kron(v_matrix(L), A))))
        ok = err < 1e-12
        summary["kronecker_error"] = err
        summary["kronecker"] = "pass" if ok else "fail"
        print(f"kronecker: {'pass' if ok else 'fail'}")
        status = 0 if ok else 1
    _dump(summary, os.path.join(out, "summary.json"))
    return status


def cmd_info(cfg, spec, scheme, out, threads):
    th = cfg["theta0"]
    path = simulate_path(spec, th, cfg["n"], cfg["substeps"], cfg["seed"])
    res = {}
    if scheme.kind == "Complete":
        total, first, second = gamma_complete(path, spec, th, split=True)
        res["gamma"] = total.to_json()
        res["first_term"] = first.to_json()
        res["second_term"] = second.to_json()
        main = total
    else:
        frame = projection_frame(scheme)
        glim = g_limit(spec.y_ini[:spec.kappa], th, spec, frame, cfg["L_grid"])
        _dump(glim.to_json(), os.path.join(out, "g_limit.json"))
        main = gamma_partial(path, spec, frame, th, "psi", cfg["grid_points"], cfg["L_grid"][-2:])
        res["gamma_prime"] = main.to_json()
    if spec.name in PARTIAL_BUILTINS or "gamma_integrand" in spec.extras:
        try:
            res["closed_form"] = gamma_closed_form(spec.name, path, th).to_json()
        except ConfigError:
            pass
    flag, w = check_pd(main)
    res["positive_definite"] = bool(flag)
    res["min_eig"] = w
    _dump(res, os.path.join(out, "info.json"))
    return 0


def cmd_lamn(cfg, spec, scheme, out, threads):
    tol = dict(cfg["tolerances"]) or None
    rep = run_lamn_mc(spec, scheme, cfg["theta0"], cfg["h"], cfg["n"], cfg["M"], cfg["seed"], cfg["e_n"],
                      cfg["substeps"], threads, cfg["mode"], tol)
    _dump(rep.to_json(), os.path.join(out, "report.json"))
    with open(os.path.join(out, "report.txt"), "w") as fh:
        fh.write(rep.to_text())
    write_lambdas(rep, os.path.join(out, "lambda.csv"))
    print(rep.to_text(), end="")
    return 0 if rep.passed else 1


def cmd_factor_two(cfg, spec, scheme, out, threads):
    rtol = float(cfg["tolerances"].get("ratio_rtol", 0.10))
    rep = factor_two_experiment(cfg["theta0"], cfg["n"], cfg["M"], cfg["seed"], cfg["substeps"], cfg["e_n"],
                                threads, cfg["params"], rtol)
    _dump(rep.to_json(), os.path.join(out, "factor_two.json"))
    for c in rep.criteria:
        print(f"{c.name:<18}{c.value:>14.8g}{c.target:>10.4g}  {'pass' if c.passed else 'FAIL'}")
    return 0 if rep.passed else 1


def cmd_estimate(cfg, spec, scheme, out, threads):
    path = simulate_path(spec, cfg["theta0"], cfg["n"], cfg["substeps"], cfg["seed"])
    obs = observe(path, scheme, cfg["n"])
    rep = estimate(obs, spec, scheme, cfg["theta_init"], {"e_n": cfg["e_n"], "mode": cfg["mode"]})
    _dump(rep.to_json(), os.path.join(out, "estimate.json"))
    print(json.dumps(rep.to_json(), sort_keys=True))
    return 0


def cmd_study(cfg, spec, scheme, out, threads):
    rtol = cfg["tolerances"].get("var_rtol")
    rep = estimator_study(spec, scheme, cfg["theta0"], cfg["n"], cfg["M"], cfg["seed"], cfg["substeps"],
                          cfg["e_n"], threads, cfg["mode"], rtol)
    _dump(rep.to_json(), os.path.join(out, "study.json"))
    rep.write_csv(os.path.join(out, "study.csv"))
    for c in rep.criteria:
        print(f"{c.name:<10}{c.value:>16.8g}{c.target:>12.6g}  {'pass' if c.passed else 'FAIL'}")
    if cfg["e_grid"]:
        rows = block_length_sweep(spec, scheme, cfg["theta0"], cfg["n"], cfg["M"], cfg["seed"], cfg["e_grid"],
                                  cfg["substeps"], threads, cfg["mode"])
        _dump(rows, os.path.join(out, "sweep.json"))
        write_sweep_csv(rows, os.path.join(out, "sweep.csv"))
        for r in rows:
            print(f"e_n={r['e_n']:<4} var/ref=" + ",".join(f"{v:.4f}" for v in r["ratio"]))
    return 0 if rep.passed else 1


DISPATCH = {"simulate": cmd_simulate, "psi": cmd_psi, "info": cmd_info, "lamn-check": cmd_lamn,
            "factor-two": cmd_factor_two, "estimate": cmd_estimate, "study": cmd_study}


def run(raw: dict, out=None, threads: int = 1) -> int:
    """Resolve ``raw``, write the manifest and artifacts under ``out``, return the exit status."""
    try:
        cfg, spec, scheme = resolve_config(raw)
        if isinstance(threads, bool) or not isinstance(threads, int) or threads < 1:
            raise ConfigError("threads must be a positive integer")
        out = out or os.path.join(os.environ.get(OUT_ENV, "lamnlab-out"), cfg["command"])
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "manifest.json"), "w") as fh:
            fh.write(manifest(cfg))
        return DISPATCH[cfg["command"]](cfg, spec, scheme, out, threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


def _json_arg(text, name):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"--{name} is not valid JSON: {exc}") from None


def build_parser():
    p = argparse.ArgumentParser(prog="lamnlab", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON config file (flags override its values)")
    p.add_argument("--model")
    p.add_argument("--params", help="JSON object of model parameters")
    p.add_argument("--scheme", help="JSON object {kind, Q, B}")
    for name in ("n", "M", "substeps", "e-n", "seed", "L", "grid-points"):
        p.add_argument(f"--{name}", type=int)
    for name in ("h", "theta0", "theta-init"):
        p.add_argument(f"--{name}", help="number or comma-separated list")
    p.add_argument("--A", help="JSON kappa x kappa matrix for psi")
    p.add_argument("--L-grid", help="comma-separated increasing list")
    p.add_argument("--e-grid", help="comma-separated block lengths for a study sweep")
    p.add_argument("--mode", choices=("augmented", "proxy"))
    p.add_argument("--tolerances", help="JSON object of tolerance overrides")
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<command>)")
    p.add_argument("--threads", type=int, default=1)
    return p


def _floats(text):
    return [float(v) for v in text.split(",")]


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        raw = {}
        if args.config:
            with open(args.config) as fh:
                raw = json.load(fh)
            if not isinstance(raw, dict):
                raise ConfigError("config file must hold a JSON object")
        raw["command"] = args.command
        simple = {"model": args.model, "n": args.n, "M": args.M, "substeps": args.substeps, "e_n": args.e_n,
                  "seed": args.seed, "L": args.L, "grid_points": args.grid_points, "mode": args.mode}
        raw.update({k: v for k, v in simple.items() if v is not None})
        for key, attr in (("params", "params"), ("scheme", "scheme"), ("A", "A"), ("tolerances", "tolerances")):
            val = getattr(args, attr)
            if val is not None:
                raw[key] = _json_arg(val, attr)
        for key, attr in (("h", "h"), ("theta0", "theta0"), ("theta_init", "theta_init"), ("L_grid", "L_grid"),
                          ("e_grid", "e_grid")):
            val = getattr(args, attr)
            if val is not None:
                raw[key] = _floats(val)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    return run(raw, args.out, args.threads)


if __name__ == "__main__":
    sys.exit(main())
