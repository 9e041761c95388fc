"""Path simulation, observation schemes, normalized increments and block data."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, NumericalError
from .model import ModelSpec, ProjectionFrame, SchemeSpec, as_theta, projection_frame

MASK64 = (1 << 64) - 1
GOLDEN64 = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> int:
    z = (x + GOLDEN64) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(master_seed: int, index: int) -> int:
    """Per-path seed: splitmix64 of the master seed offset by the path index."""
    return splitmix64((int(master_seed) + int(index) * GOLDEN64) & MASK64)


def fmt(x) -> str:
    return format(float(x), ".17g")


# ---------------------------------------------------------------------------
# simulation


def _matvec(a, v):
    """a @ v over the last axis, summed in a fixed order."""
    out = a[..., :, 0] * v[..., None, 0]
    for l in range(1, a.shape[-1]):
        out = out + a[..., :, l] * v[..., None, l]
    return out


def _draws(seeds, n_steps, r):
    return np.stack([np.random.default_rng(s).standard_normal((n_steps, 2, r)) for s in seeds])


def simulate_states(spec: ModelSpec, theta, n: int, substeps: int, seeds) -> np.ndarray:
    """Simulate one path per seed; returns rotated states of shape (P, n*substeps + 1, m).

    Each fine step draws the Brownian increment together with its time
    integral, so linear smooth coordinates are advanced exactly in law.
    """
    th = as_theta(theta)
    if n < 2 or substeps < 1:
        raise ConfigError("simulation needs n >= 2 and substeps >= 1")
    n_steps = n * substeps
    dt = 1.0 / n_steps
    sq = math.sqrt(dt)
    c_int = dt * sq
    k = spec.kappa
    xi = _draws(seeds, n_steps, spec.r)
    P = len(seeds)
    out = np.empty((P, n_steps + 1, spec.m))
    y = np.tile(spec.y_ini, (P, 1))
    out[:, 0] = y
    for step in range(n_steps):
        a = spec.a_tilde(y, th)
        bt = spec.b_tilde(y, th)
        x1 = xi[:, step, 0]
        dW = sq * x1
        new = np.empty_like(y)
        new[:, :k] = y[:, :k] + bt * dt + _matvec(a, dW)
        if spec.degenerate:
            integral = c_int * (0.5 * x1 + xi[:, step, 1] / (2.0 * math.sqrt(3.0)))
            incr = bt * (0.5 * dt * dt) + _matvec(a, integral)
            jb = spec.jb(y)
            new[:, k:] = y[:, k:] + spec.b_check(y) * dt + _matvec(np.swapaxes(jb, -1, -2), incr)
        if not np.all(np.isfinite(new)):
            raise NumericalError(f"non-finite state at fine step {step + 1} (t={(step + 1) * dt:.6g})")
        y = new
        out[:, step + 1] = y
    return out


@dataclass(eq=False)
class PathSample:
    spec: ModelSpec
    theta: np.ndarray
    n: int
    substeps: int
    seed: int
    states: np.ndarray

    @property
    def model(self) -> str:
        return self.spec.name

    @property
    def fine_times(self) -> np.ndarray:
        return np.arange(self.states.shape[0]) / (self.states.shape[0] - 1)

    @property
    def x_states(self) -> np.ndarray:
        """States in the original coordinates X = U^T Y."""
        return self.states @ self.spec.U


def simulate_path(spec: ModelSpec, theta, n: int, substeps: int = 16, seed: int = 0) -> PathSample:
    th = spec.check_theta(theta)
    states = simulate_states(spec, th, n, substeps, [int(seed)])[0]
    return PathSample(spec, th, n, substeps, int(seed), states)


# ---------------------------------------------------------------------------
# observation


@dataclass(eq=False)
class ObservationSet:
    n: int
    scheme: SchemeSpec
    rows: np.ndarray
    times: np.ndarray
    spec: ModelSpec
    y_rows: Optional[np.ndarray] = None
    hidden: Optional[np.ndarray] = None
    frame: Optional[ProjectionFrame] = None


def observation_stride(n_fine: int, n: int) -> int:
    if n < 1 or n_fine % n != 0:
        raise ConfigError(f"n={n} does not divide the path's {n_fine} fine steps")
    return n_fine // n


def observe(path: PathSample, scheme: SchemeSpec, n: int) -> ObservationSet:
    stride = observation_stride(path.states.shape[0] - 1, n)
    Y = path.states[::stride]
    times = np.arange(n + 1) / n
    spec = path.spec
    if scheme.kind == "Complete":
        return ObservationSet(n, scheme, Y @ spec.U, times, spec, y_rows=Y)
    frame = projection_frame(scheme)
    k = spec.kappa
    rows = np.concatenate([Y[:, :k] @ frame.Qt1.T, Y[:, k:]], axis=1)
    return ObservationSet(n, scheme, rows, times, spec, hidden=Y[:, :k] @ frame.Qt3.T, frame=frame)


def observations_from_rows(spec: ModelSpec, scheme: SchemeSpec, rows, hidden=None) -> ObservationSet:
    """Wrap externally supplied observation rows (original coordinates for Complete)."""
    rows = np.asarray(rows, dtype=float)
    n = rows.shape[0] - 1
    times = np.arange(n + 1) / n
    if scheme.kind == "Complete":
        return ObservationSet(n, scheme, rows, times, spec, y_rows=rows @ spec.U.T)
    hid = None if hidden is None else np.asarray(hidden, dtype=float)
    return ObservationSet(n, scheme, rows, times, spec, hidden=hid, frame=projection_frame(scheme))


def increments_from_states(Y, spec: ModelSpec):
    """Normalized increments and previous states for rotated observations Y (..., n+1, m)."""
    n = Y.shape[-2] - 1
    k = spec.kappa
    prev = Y[..., :-1, :]
    dY = np.diff(Y, axis=-2)
    X = np.empty_like(dY)
    X[..., :k] = math.sqrt(n) * dY[..., :k]
    if spec.degenerate:
        X[..., k:] = n ** 1.5 * (dY[..., k:] - spec.b_check(prev) / n)
    return X, prev


def normalized_increments_complete(obs: ObservationSet, spec: Optional[ModelSpec] = None) -> np.ndarray:
    if obs.scheme.kind != "Complete":
        raise ConfigError("normalized increments need a Complete scheme")
    spec = spec or obs.spec
    if obs.y_rows.shape[1] != spec.m:
        raise ConfigError("observation dimension does not match the model")
    return increments_from_states(obs.y_rows, spec)[0]


# ---------------------------------------------------------------------------
# blocks for partial observations


def default_block_length(n: int) -> int:
    return max(3, int(round(math.log(n))))


@dataclass(frozen=True)
class BlockLayout:
    n: int
    e_n: int

    def __post_init__(self):
        if self.e_n < 1:
            raise ConfigError("block length e_n must be >= 1")
        if self.L < 1:
            raise ConfigError(f"n={self.n} leaves no complete block of length {self.e_n}")

    @property
    def L(self) -> int:
        return (self.n - 1) // self.e_n

    def t(self, j: int, k: int) -> float:
        return (k + j * self.e_n) / self.n


@dataclass(eq=False)
class PartialBlocks:
    X: np.ndarray      # (L, q * e_n)
    Ydot: np.ndarray   # (L, kappa)
    layout: BlockLayout
    mode: str


def block_arrays(P1, C, hidden, spec: ModelSpec, frame: ProjectionFrame, n: int, e: int, mode: str = "augmented"):
    """Block vectors X'_j and plug-in states Ydot_j for stacked observations.

    ``P1`` holds Q~1 Y~ (..., n+1, q1), ``C`` holds Y^ (..., n+1, q2) and
    ``hidden`` holds Q~3 Y~ (..., n+1, kappa-q1), read only at block starts.
    In ``augmented`` mode the drift correction of the first block entry
    uses the state at the block start; in ``proxy`` mode it uses Ydot_j.
    """
    if mode not in ("augmented", "proxy"):
        raise ConfigError("block mode must be 'augmented' or 'proxy'")
    if mode == "augmented" and hidden is None:
        raise ConfigError("augmented blocks need the block-start values of the unobserved coordinates")
    L = (n - 1) // e
    start = np.arange(L) * e
    win = start[:, None] + np.arange(e + 1)[None, :]
    dP = np.diff(P1[..., win, :], axis=-2)
    dC = np.diff(C[..., win, :], axis=-2)
    y_ini = spec.y_ini[:spec.kappa]
    base = P1[..., start, :] @ frame.Qt1
    slope = n * (C[..., start, :] - C[..., start - 1, :])
    Ydot = base + slope @ frame.B_pinv.T @ frame.Qt3.T @ frame.Qt3
    Ydot[..., 0, :] = y_ini
    if mode == "augmented":
        anchor = base + hidden[..., start, :] @ frame.Qt3
        anchor[..., 0, :] = y_ini
    else:
        anchor = Ydot
    sec = dC.copy()
    sec[..., 1:, :] = dC[..., 1:, :] - dC[..., :-1, :]
    sec[..., 0, :] = dC[..., 0, :] - anchor @ frame.Qt2.T / n
    X = np.concatenate([math.sqrt(n) * dP, n ** 1.5 * sec], axis=-1)
    return X.reshape(X.shape[:-2] + (e * frame.q,)), Ydot


def partial_blocks(obs: ObservationSet, layout: BlockLayout, spec: Optional[ModelSpec] = None,
                   scheme: Optional[SchemeSpec] = None, mode: str = "augmented") -> PartialBlocks:
    if obs.scheme.kind != "Partial":
        raise ConfigError("partial blocks need a Partial scheme")
    spec = spec or obs.spec
    frame = projection_frame(scheme) if scheme is not None else obs.frame
    if layout.n != obs.n:
        raise ConfigError("block layout and observations disagree on n")
    q1 = frame.q1
    X, Ydot = block_arrays(obs.rows[:, :q1], obs.rows[:, q1:], obs.hidden, spec, frame, obs.n, layout.e_n, mode)
    return PartialBlocks(X, Ydot, layout, mode)


# ---------------------------------------------------------------------------
# persistence


def _write_rows(fname, header, rows):
    with open(fname, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def write_path(path: PathSample, stem: str) -> None:
    """Write ``stem.csv`` (time and rotated states) and ``stem.json`` sidecar."""
    m = path.spec.m
    header = ["t"] + [f"y{i + 1}" for i in range(m)]
    _write_rows(stem + ".csv", header, np.column_stack([path.fine_times, path.states]))
    meta = dict(seed=path.seed, n=path.n, substeps=path.substeps, theta=path.theta.tolist(),
                model=path.model, params=path.spec.params)
    with open(stem + ".json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_path(stem: str, spec: ModelSpec) -> PathSample:
    with open(stem + ".json") as fh:
        meta = json.load(fh)
    data = np.loadtxt(stem + ".csv", delimiter=",", skiprows=1, ndmin=2)
    return PathSample(spec, as_theta(meta["theta"]), int(meta["n"]), int(meta["substeps"]), int(meta["seed"]),
                      data[:, 1:])


def write_observations(obs: ObservationSet, fname: str) -> None:
    width = obs.rows.shape[1]
    header = ["t"] + [f"obs{i + 1}" for i in range(width)]
    cols = [obs.times, obs.rows]
    if obs.hidden is not None:
        header += [f"hidden{i + 1}" for i in range(obs.hidden.shape[1])]
        cols.append(obs.hidden)
    _write_rows(fname, header, np.column_stack(cols))
