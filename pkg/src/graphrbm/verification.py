"""Manufactured solutions, error metrics and convergence sweeps.

The reference case uses ``y = p_e x(1-x) e^{-t}`` on every edge of length
one, with ``f = p_e (2 - x + x^2) e^{-t}`` and ``y0 = p_e x(1-x)``.  The
coefficients ``p`` are chosen so the outgoing slopes balance at every
junction.

For a separable exact solution ``y(x, t) = phi(t) Y(x)`` the squared L2
error of a P1 field with coefficients ``c`` expands as

    c^T E c - 2 phi(t) b^T c + phi(t)^2 ||Y||^2,   b_j = (Y, psi_j),

which is what the 5-point Gauss rule on each element returns as well (the
integrand is a polynomial of degree four), but costs one sparse product.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .fem import FemSystem, Mesh1D, assemble, assemble_load, project_initial, _quadrature
from .graph import MetricGraph, build_paper_graph
from .rbm import Decomposition, sample_schedule
from .timestep import (DensePropagators, SeparableLoad, TimeGrid, Trajectory, run_ensemble,
                       solve_full, steps_per_batch)

log = logging.getLogger(__name__)

PAPER_P = (1.0, -1.0, -1.0, 1.0, -1.0, -1.0, -1.0, 2.0, -1.0, -1.0)
SWEEP_HEADER = ["h", "delta", "err_rbm", "err_full", "time_rbm_s", "time_full_s",
                "speedup", "realizations", "seed"]
DENSE_CUTOFF = 400
# "mean_of_errors": max_t E||y_R - y||;  "error_of_mean": max_t ||E[y_R] - y||
_METRICS = ("mean_of_errors", "error_of_mean")


@dataclass(frozen=True)
class ManufacturedCase:
    p: Mapping[int, float]
    T: float = 1.0
    L: float = 1.0

    # shape Y(x) = x(1-x) and its companions; time factor e^{-t}
    def y0(self, e: int, x, t=0.0):
        return self.p[e] * x * (1.0 - x)

    def f(self, e: int, x, t):
        return self.p[e] * (2.0 - x + x * x) * math.exp(-t)

    def exact(self, e: int, x, t):
        return self.p[e] * x * (1.0 - x) * math.exp(-t)

    def slope(self, e: int, x, t):
        return self.p[e] * (1.0 - 2.0 * x) * math.exp(-t)

    def residual(self, e: int, x, t):
        """``y_t - y_xx - f``; zero for this family."""
        y_t = -self.exact(e, x, t)
        y_xx = -2.0 * self.p[e] * math.exp(-t)
        return y_t - y_xx - self.f(e, x, t)

    def load(self, system: FemSystem) -> SeparableLoad:
        return SeparableLoad(assemble_load(system, self.f, 0.0, order=5), lambda t: math.exp(-t))


def paper_case(T: float = 1.0) -> ManufacturedCase:
    return ManufacturedCase({i + 1: p for i, p in enumerate(PAPER_P)}, T, 1.0)


def interval_case(p: float = 1.0, T: float = 1.0) -> ManufacturedCase:
    return ManufacturedCase({1: p}, T, 1.0)


class ErrorEvaluator:
    """L2 distance between a coefficient vector and the exact solution at ``t``."""

    def __init__(self, system: FemSystem, case: ManufacturedCase):
        self.system, self.case = system, case
        self.E = system.E.tocsr()
        self.b = assemble_load(system, case.y0, 0.0, order=5)
        x, w, _, _ = _quadrature(system, 5)
        self.c = sum(float(((case.y0(e.id, x)) ** 2 * w).sum()) for e in system.graph.edges)

    def __call__(self, t: float, y: np.ndarray) -> float:
        return math.sqrt(max(self.squared(t, y), 0.0))

    def squared(self, t: float, y):
        """Squared error; ``y`` may be a matrix of column states."""
        phi = math.exp(-t)
        Ey = self.E @ y
        return (y * Ey).sum(axis=0) - 2.0 * phi * (self.b @ y) + phi * phi * self.c


def l2_error_quadrature(system: FemSystem, y: np.ndarray, exact, t: float) -> float:
    """Element-wise 5-point Gauss L2 error against ``exact(edge, x, t)``."""
    x, w, phi_l, phi_r = _quadrature(system, 5)
    total = 0.0
    for e in system.graph.edges:
        nodes = system.dofs.edge_nodes[e.id]
        vals = np.where(nodes >= 0, y[np.maximum(nodes, 0)], 0.0)
        uh = vals[:-1, None] * phi_l + vals[1:, None] * phi_r
        total += float((((uh - exact(e.id, x, t)) ** 2) @ w).sum())
    return math.sqrt(total)


def exact_error(traj: Trajectory, case: ManufacturedCase, system: FemSystem) -> float:
    """Max over stored times of the L2 error."""
    ev = ErrorEvaluator(system, case)
    return max(ev(t, traj.states[:, j]) for j, t in enumerate(traj.times))


@dataclass
class CompatibilityReport:
    kirchhoff: dict[int, float]
    continuity: dict[int, float]     # spread of vertex values across incident edges

    @property
    def ok(self) -> bool:
        return all(abs(v) < 1e-12 for v in self.kirchhoff.values()) and \
            all(v < 1e-12 for v in self.continuity.values())


def check_compatibility(case: ManufacturedCase, graph: MetricGraph, t: float = 0.0) -> CompatibilityReport:
    """Signed outward slope sums and value mismatches at interior vertices."""
    kirch, cont = {}, {}
    for v in sorted(graph.interior):
        total, vals = 0.0, []
        for e in graph.incident(v):
            x = 0.0 if v == e.tail else e.length
            outward = -1.0 if v == e.tail else 1.0
            total += outward * case.slope(e.id, x, t)
            vals.append(case.exact(e.id, x, t))
        kirch[v] = total
        cont[v] = max(vals) - min(vals)
    return CompatibilityReport(kirch, cont)


# -- reference setups---------------------------------------------------------

def paper_system(N: int, L: float = 1.0) -> FemSystem:
    return assemble(build_paper_graph(L), Mesh1D.for_length(L, N))


def full_error(system: FemSystem, case: ManufacturedCase, grid: TimeGrid) -> tuple[float, float]:
    """(max-in-time L2 error, solve seconds) of the deterministic solve."""
    ev = ErrorEvaluator(system, case)
    worst = [ev(0.0, project_initial(system, case.y0))]
    traj = solve_full(system, case.load(system), case.y0, grid, stride=None,
                      observer=lambda n, t, y: worst.append(ev(t, y)))
    return max(worst), traj.solve_seconds


@dataclass
class EnsembleErrors:
    mean_of_errors: float            # max_t E||y_R(t) - y(t)||
    error_of_mean: float             # max_t ||E[y_R](t) - y(t)||
    per_realization: np.ndarray      # max_t ||y_R(t) - y(t)|| for each realization
    seconds: float                   # mean solve time per realization

    def metric(self, name: str) -> float:
        if name not in _METRICS:
            raise ValueError(f"unknown metric {name!r}; choose from {_METRICS}")
        return getattr(self, name)


def rbm_error(system: FemSystem, dec: Decomposition, case: ManufacturedCase, delta: float,
              grid: TimeGrid, n_real: int, seed: int, jobs: int = 1) -> EnsembleErrors:
    ev = ErrorEvaluator(system, case)
    res = run_ensemble(system, dec, delta, grid, case.y0, case.load(system), n_real, seed,
                       error=ev, jobs=jobs, stride=1, variance_of="error")
    of_mean = max(ev(t, res.mean[:, j]) for j, t in enumerate(res.times))
    return EnsembleErrors(float(res.errors.mean(axis=0).max()), float(of_mean),
                          res.errors.max(axis=1), float(res.solve_seconds.mean()))


def dense_errors(system: FemSystem, dec: Decomposition | None, case: ManufacturedCase, delta: float,
                 grid: TimeGrid, n_real: int, seed: int) -> tuple[dict[str, float], float]:
    """Both ensemble metrics through dense step maps, plus seconds per run.

    ``dec=None`` runs the deterministic scheme (both metrics coincide).
    """
    ev = ErrorEvaluator(system, case)
    load = case.load(system)
    props = DensePropagators(system, dec, grid.dt, load)
    y0 = project_initial(system, case.y0)
    if dec is None:
        Y = y0[:, None]
        omega, q = None, 1
    else:
        q = steps_per_batch(delta, grid)
        omega = np.stack([sample_schedule(dec, delta, grid.T, seed, k).omega for k in range(n_real)])
        Y = np.repeat(y0[:, None], n_real, axis=1)
    worst = np.zeros(2)

    def obs(n, t, Yn):
        a = np.sqrt(np.maximum(ev.squared(t, Yn), 0.0)).mean()
        b = math.sqrt(max(float(ev.squared(t, Yn.mean(axis=1))), 0.0))
        np.maximum(worst, (a, b), out=worst)
    obs(0, 0.0, Y)
    tic = time.perf_counter()
    props.run(Y, omega, q, grid.steps, obs)
    secs = time.perf_counter() - tic
    return dict(zip(_METRICS, map(float, worst))), secs / (1 if dec is None else n_real)


# -- sweeps ------------------------------------------------------------------

def delta_for(h: float, epsilon: float) -> float:
    return h ** (7.0 / (1.0 - epsilon))


def align_dt(delta: float, dt_target: float) -> tuple[float, int]:
    q = max(1, math.ceil(delta / dt_target - 1e-12))
    return delta / q, q


@dataclass
class SweepConfig:
    N_list: Sequence[int] = (1, 2, 3, 4, 6)
    epsilon: float = 1e-4
    realizations: int = 30
    seed: int = 0
    preset: str = "paper_overlap_3"
    T: float = 1.0
    L: float = 1.0
    dt_target: float = 0.005
    max_dof: int = 20_000
    jobs: int = 1
    metric: str = "error_of_mean"

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.realizations < 1:
            raise ValueError("need at least one realization")
        if self.metric not in _METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")


@dataclass
class SweepRow:
    h: float
    delta: float
    err_rbm: float
    err_full: float
    time_rbm_s: float
    time_full_s: float
    speedup: float
    realizations: int
    seed: int
    dt: float = 0.0
    horizon: float = 0.0


def run_convergence_sweep(cfg: SweepConfig, decomposition: Callable[[FemSystem], Decomposition] | None = None,
                          case: ManufacturedCase | None = None) -> list[SweepRow]:
    from .decompose import preset as make_preset
    rows = []
    for N in sorted(cfg.N_list):
        system = paper_system(N, cfg.L)
        if system.n_dof > cfg.max_dof:
            raise ValueError(f"N={N} gives {system.n_dof} dofs, above the cap {cfg.max_dof}")
        case_ = case or paper_case(cfg.T)
        dec = decomposition(system) if decomposition else make_preset(cfg.preset, system)
        h = system.h
        delta = delta_for(h, cfg.epsilon)
        dt, q = align_dt(delta, cfg.dt_target)
        grid = TimeGrid.from_dt(dt, cfg.T)
        log.info("h=%.3e delta=%.3e dt=%.3e (q=%d) steps=%d horizon=%.12g",
                 h, delta, dt, q, grid.steps, grid.T)
        if system.n_dof <= DENSE_CUTOFF:
            e_full, t_full = dense_errors(system, None, case_, delta, grid, 1, cfg.seed)
            e_full = e_full["error_of_mean"]
            errs, t_rbm = dense_errors(system, dec, case_, delta, grid, cfg.realizations, cfg.seed)
            e_rbm = errs[cfg.metric]
        else:
            e_full, t_full = full_error(system, case_, grid)
            res = rbm_error(system, dec, case_, delta, grid, cfg.realizations, cfg.seed, cfg.jobs)
            e_rbm, t_rbm = res.metric(cfg.metric), res.seconds
        rows.append(SweepRow(h, delta, e_rbm, e_full, t_rbm, t_full,
                             t_full / t_rbm if t_rbm > 0 else float("nan"),
                             cfg.realizations, cfg.seed, dt, grid.T))
    return rows


def write_sweep_csv(rows: Sequence[SweepRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_HEADER)
        for r in rows:
            d = asdict(r)
            w.writerow([f"{d[k]:.6e}" if isinstance(d[k], float) else d[k] for k in SWEEP_HEADER])


@dataclass
class OrderFit:
    slope: float
    intercept: float
    used: int
    excluded_coarsest: bool


def fit_observed_order(errors: Sequence[float], deltas: Sequence[float],
                       exclude_coarsest: bool | None = None) -> OrderFit:
    """Least-squares slope of ``log(error)`` against ``log(delta)``.

    By default the coarsest point is dropped when the deltas span more than
    three decades.
    """
    e = np.asarray(errors, dtype=float)
    d = np.asarray(deltas, dtype=float)
    if e.shape != d.shape or e.size < 3:
        raise ValueError("need at least three (error, delta) pairs")
    if np.any(e <= 0) or np.any(d <= 0):
        raise ValueError("errors and deltas must be positive")
    if np.ptp(np.log(d)) == 0:
        raise ValueError("all deltas are equal")
    if exclude_coarsest is None:
        exclude_coarsest = math.log10(d.max() / d.min()) > 3 and e.size > 3
    if exclude_coarsest:
        keep = d != d.max()
        log.info("order fit: excluding coarsest delta %.3e", d.max())
        e, d = e[keep], d[keep]
    slope, intercept = np.polyfit(np.log(d), np.log(e), 1)
    return OrderFit(float(slope), float(intercept), int(e.size), bool(exclude_coarsest))


def count_inversions(values: Sequence[float]) -> int:
    """Adjacent increases in a sequence expected to decrease."""
    v = list(values)
    return sum(1 for a, b in zip(v, v[1:]) if b > a)
