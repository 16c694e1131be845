"""Implicit Euler for ``E y' + R y = F`` and its random-batch counterpart.

The random system replaces ``R`` and ``F`` on the ``k``-th subinterval by
``R_rb`` and ``F_rb`` of the drawn subset.  Rows of ``R_rb``/``F_rb`` outside
the active set ``A`` vanish, so the step equations on the rest ``r`` read
``E_rA dA + E_rr dr = 0`` with ``d = y^{n+1} - y^n``.  Eliminating ``dr``
leaves a system on ``A`` only,

    (S_A + dt B_AA) y_A^{n+1} = S_A y_A^n + dt F_A,
    S_A = E_AA - E_Ar E_rr^{-1} E_rA,

after which ``y_r += -E_rr^{-1} E_rA dA``.  ``E_rA`` is nonzero only in the
few columns of ``A`` adjacent to ``r`` (one per cut edge end), so the Schur
correction is a small dense block and the coupling update is a thin matrix
``Z`` times a handful of interface increments.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fem import EdgeField, FemSystem, assemble_load, l2_norm, project_initial, reconstruct
from .rbm import BatchSchedule, Decomposition, sample_schedule

log = logging.getLogger(__name__)

ALIGN_RTOL = 1e-9


class NumericalError(RuntimeError):
    pass


@dataclass(frozen=True)
class TimeGrid:
    T: float
    zeta: int

    def __post_init__(self):
        if self.zeta < 2:
            raise ValueError(f"need at least two collocation points, got zeta={self.zeta}")
        if not self.T > 0:
            raise ValueError(f"horizon must be positive, got T={self.T}")

    @property
    def dt(self) -> float:
        return self.T / (self.zeta - 1)

    @property
    def steps(self) -> int:
        return self.zeta - 1

    def times(self) -> np.ndarray:
        return np.arange(self.zeta) * self.dt

    def t(self, n: int) -> float:
        return n * self.dt

    @classmethod
    def from_dt(cls, dt: float, T: float) -> "TimeGrid":
        """Grid with step exactly ``dt`` covering ``[0, T]``.

        When ``T`` is not a multiple of ``dt`` the horizon is stretched to
        the next multiple.
        """
        steps = max(1, math.ceil(T / dt - 1e-9))
        return cls(steps * dt, steps + 1)


def steps_per_batch(delta: float, grid: TimeGrid) -> int:
    q = delta / grid.dt
    qi = round(q)
    if qi < 1 or abs(q - qi) > ALIGN_RTOL * max(1.0, q):
        raise ValueError(f"delta={delta} is not an integer multiple of dt={grid.dt}")
    return qi


# -- loads -------------------------------------------------------------------

class Load:
    """Load vector ``F(t)`` in coefficient space."""

    def __call__(self, t: float) -> np.ndarray:
        raise NotImplementedError


class ZeroLoad(Load):
    def __init__(self, n: int):
        self.n = n

    def __call__(self, t):
        return np.zeros(self.n)


class SeparableLoad(Load):
    """``F(t) = phi(t) F0``; lets small problems precompute whole step maps."""

    def __init__(self, F0: np.ndarray, phi: Callable[[float], float]):
        self.F0 = np.asarray(F0, dtype=float)
        self.phi = phi

    def __call__(self, t):
        return self.phi(t) * self.F0


class AssembledLoad(Load):
    def __init__(self, system: FemSystem, f: EdgeField, order: int = 3):
        self.system, self.f, self.order = system, f, order

    def __call__(self, t):
        return assemble_load(self.system, self.f, t, self.order)


def as_load(system: FemSystem, f) -> Load:
    if f is None:
        return ZeroLoad(system.n_dof)
    if isinstance(f, Load):
        return f
    if isinstance(f, np.ndarray):
        return SeparableLoad(f, lambda t: 1.0)
    return AssembledLoad(system, f)


def as_initial(system: FemSystem, y0) -> np.ndarray:
    if y0 is None:
        return np.zeros(system.n_dof)
    if callable(y0):
        return project_initial(system, y0)
    y0 = np.asarray(y0, dtype=float)
    if y0.shape != (system.n_dof,):
        raise ValueError(f"initial vector has shape {y0.shape}, expected ({system.n_dof},)")
    return y0.copy()


# -- trajectories ------------------------------------------------------------

@dataclass
class Trajectory:
    grid: TimeGrid
    states: np.ndarray            # (n_dof, number of stored times)
    index: np.ndarray             # stored step numbers
    solve_seconds: float = 0.0

    @property
    def times(self) -> np.ndarray:
        return self.index * self.grid.dt

    @property
    def final(self) -> np.ndarray:
        return self.states[:, -1]

    def probes(self, system: FemSystem, points: Sequence[tuple[int, float]]) -> list[tuple]:
        rows = []
        for j, t in enumerate(self.times):
            for edge, x in points:
                rows.append((t, edge, x, reconstruct(system, self.states[:, j], edge, x)))
        return rows


Observer = Callable[[int, float, np.ndarray], None]


class _Recorder:
    def __init__(self, grid: TimeGrid, y0: np.ndarray, stride: int | None, observer: Observer | None):
        self.stride = stride
        self.observer = observer
        self.cols, self.idx = [], []
        self.last = grid.steps
        self(0, 0.0, y0)

    def __call__(self, n, t, y):
        if self.observer is not None:
            self.observer(n, t, y)
        if self.stride and (n % self.stride == 0 or n == self.last):
            self.cols.append(y.copy())
            self.idx.append(n)

    def trajectory(self, grid, y, seconds) -> Trajectory:
        if not self.idx:
            self.cols.append(y.copy())
            self.idx.append(grid.steps)
        return Trajectory(grid, np.column_stack(self.cols), np.array(self.idx), seconds)


def _factor(A: sp.spmatrix):
    try:
        lu = spla.splu(sp.csc_matrix(A))
    except RuntimeError as exc:
        raise NumericalError(f"factorization failed: {exc}") from exc
    return lu


def solve_full(system: FemSystem, f, y0, grid: TimeGrid, *, stride: int | None = 1,
               observer: Observer | None = None) -> Trajectory:
    """Implicit Euler with the load at the end of each step.

    ``stride`` controls which states are kept (``None`` keeps only the
    last); ``observer(n, t_n, y^n)`` sees every step.
    """
    load = as_load(system, f)
    y = as_initial(system, y0)
    dt = grid.dt
    E = system.E.tocsr()
    lu = _factor(E + dt * system.R)
    rec = _Recorder(grid, y, stride, observer)
    tic = time.perf_counter()
    for n in range(grid.steps):
        t1 = (n + 1) * dt
        y = lu.solve(E @ y + dt * load(t1))
        if not np.all(np.isfinite(y)):
            raise NumericalError(f"non-finite state at step {n + 1}")
        rec(n + 1, t1, y)
    return rec.trajectory(grid, y, time.perf_counter() - tic)


@dataclass
class _Reduced:
    A: np.ndarray                  # active dofs
    r: np.ndarray                  # the rest
    S: sp.csr_matrix               # Schur-reduced mass on A
    lu: object                     # factor of S + dt B_AA
    w: np.ndarray                  # load weights restricted to A
    J: np.ndarray                  # positions in A of interface dofs
    Z: np.ndarray                  # E_rr^{-1} E_rA[:, J]


class ReducedStepper:
    """Per-subset reduced factorizations, built lazily and cached."""

    def __init__(self, system: FemSystem, dec: Decomposition, dt: float):
        if dec.n_dof != system.n_dof:
            raise ValueError("decomposition and system sizes differ")
        self.system, self.dec, self.dt = system, dec, dt
        self.E = system.E.tocsr()
        self._cache: dict[int, _Reduced] = {}

    def block(self, i: int) -> _Reduced:
        if i not in self._cache:
            self._cache[i] = self._build(i)
        return self._cache[i]

    def _build(self, i: int) -> _Reduced:
        n = self.system.n_dof
        A = self.dec.support(i)
        mask = np.zeros(n, dtype=bool)
        mask[A] = True
        r = np.flatnonzero(~mask)
        B = self.dec.batch_matrix_for(i)[A][:, A]
        w = self.dec.batch_weights_for(i)[A]
        E_AA = self.E[A][:, A]
        if r.size == 0:
            S = E_AA.tocsr()
            J = np.zeros(0, dtype=int)
            Z = np.zeros((0, 0))
        else:
            E_rA = self.E[r][:, A].tocsc()
            J = np.flatnonzero(np.diff(E_rA.indptr))
            Z = _factor(self.E[r][:, r]).solve(E_rA[:, J].toarray())
            corr = E_rA[:, J].T @ Z
            P = sp.csr_matrix((np.ones(J.size), (J, np.arange(J.size))), shape=(A.size, J.size))
            S = (E_AA - P @ sp.csr_matrix(corr) @ P.T).tocsr()
        S.sort_indices()
        return _Reduced(A, r, S, _factor(S + self.dt * B), w, J, np.atleast_2d(Z))

    def step(self, y: np.ndarray, i: int, F: np.ndarray) -> None:
        """Advance ``y`` one implicit-Euler step in place."""
        blk = self.block(i)
        yA = y[blk.A]
        new = blk.lu.solve(blk.S @ yA + self.dt * blk.w * F[blk.A])
        if blk.r.size:
            y[blk.r] -= blk.Z @ (new[blk.J] - yA[blk.J])
        y[blk.A] = new

    def max_active(self) -> int:
        return max(self.dec.support(i).size for i in range(len(self.dec.subsets)))


def solve_rbm(system: FemSystem, dec: Decomposition, schedule: BatchSchedule, y0, grid: TimeGrid,
              f=None, *, stride: int | None = 1, observer: Observer | None = None,
              stepper: ReducedStepper | None = None) -> Trajectory:
    """Random-batch implicit Euler through the reduced active-block solves."""
    q = steps_per_batch(schedule.delta, grid)
    need = math.ceil(grid.steps / q)
    if schedule.K < need:
        raise ValueError(f"schedule has {schedule.K} subintervals, grid needs {need}")
    load = as_load(system, f)
    y = as_initial(system, y0)
    stepper = stepper or ReducedStepper(system, dec, grid.dt)
    rec = _Recorder(grid, y, stride, observer)
    tic = time.perf_counter()
    for n in range(grid.steps):
        t1 = (n + 1) * grid.dt
        stepper.step(y, int(schedule.omega[n // q]), load(t1))
        if not np.all(np.isfinite(y)):
            raise NumericalError(f"non-finite state at step {n + 1}")
        rec(n + 1, t1, y)
    return rec.trajectory(grid, y, time.perf_counter() - tic)


def solve_rbm_naive(system: FemSystem, dec: Decomposition, schedule: BatchSchedule, y0,
                    grid: TimeGrid, f=None) -> np.ndarray:
    """Dense full-dimension implicit Euler of the random system; final state only."""
    q = steps_per_batch(schedule.delta, grid)
    load = as_load(system, f)
    y = as_initial(system, y0)
    E = system.E.toarray()
    dt = grid.dt
    for n in range(grid.steps):
        i = int(schedule.omega[n // q])
        B = dec.batch_matrix_for(i).toarray()
        w = dec.batch_weights_for(i)
        y = np.linalg.solve(E + dt * B, E @ y + dt * w * load((n + 1) * dt))
    return y


# -- ensembles ---------------------------------------------------------------

@dataclass
class EnsembleResult:
    realizations: int
    seed: int
    times: np.ndarray
    mean: np.ndarray                    # (n_dof, stored times)
    variance: np.ndarray                # per stored time; see ``variance_of``
    variance_of: str                    # "state" or "error"
    errors: np.ndarray | None = None    # (realizations, stored times) L2 errors
    solve_seconds: np.ndarray = field(default_factory=lambda: np.zeros(0))
    schedules: list = field(default_factory=list)

    @property
    def mean_error_curve(self) -> np.ndarray | None:
        return None if self.errors is None else self.errors.mean(axis=0)

    @property
    def expected_error(self) -> float | None:
        """Max over time of the mean L2 error."""
        c = self.mean_error_curve
        return None if c is None else float(c.max())


ErrorFn = Callable[[float, np.ndarray], float]


def run_ensemble(system: FemSystem, dec: Decomposition, delta: float, grid: TimeGrid, y0, f,
                 n_real: int, seed: int, *, error: ErrorFn | None = None, jobs: int = 1,
                 stride: int | None = 1, variance_of: str = "state") -> EnsembleResult:
    """``n_real`` independent random solves, reduced in realization order.

    ``error(t, y)`` (optional) is applied at every step; the per-realization
    curves are kept at the stored times while the running maxima use all
    steps.  ``variance_of`` selects the sample variance of the state (summed
    over dofs in the E-norm) or of the error.
    """
    if n_real < 1:
        raise ValueError("need at least one realization")
    if variance_of not in ("state", "error"):
        raise ValueError("variance_of must be 'state' or 'error'")
    if variance_of == "error" and error is None:
        raise ValueError("variance of the error needs an error function")
    load = as_load(system, f)
    y_init = as_initial(system, y0)

    def one(k: int):
        sched = sample_schedule(dec, delta, grid.T, seed, k)
        errs = []

        def obs(n, t, y):
            if error is not None and (stride and (n % stride == 0 or n == grid.steps)):
                errs.append(error(t, y))
        stepper = ReducedStepper(system, dec, grid.dt)
        traj = solve_rbm(system, dec, sched, y_init, grid, load, stride=stride, observer=obs,
                         stepper=stepper)
        return sched, traj, np.array(errs)

    # reduce on the fly in realization order: running sum for the mean,
    # Welford updates for the E-weighted state variance
    total = running = m2 = None
    errors, seconds, schedules, times = [], [], [], None

    def consume(k, item):
        nonlocal total, running, m2, times
        sched, traj, errs = item
        x = traj.states
        if total is None:
            total, running, m2 = x.copy(), x.copy(), np.zeros(x.shape[1])
            times = traj.times
        else:
            total += x
            d_old = x - running
            running += d_old / (k + 1)
            m2 += (d_old * (system.E @ (x - running))).sum(axis=0)
        errors.append(errs)
        seconds.append(traj.solve_seconds)
        schedules.append(sched)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            for k, item in enumerate(pool.map(one, range(n_real))):
                consume(k, item)
    else:
        for k in range(n_real):
            consume(k, one(k))

    mean = total / n_real
    errs = np.stack(errors) if error is not None else None
    if variance_of == "state":
        var = m2 / (n_real - 1) if n_real > 1 else np.zeros_like(m2)
    else:
        var = errs.var(axis=0, ddof=1) if n_real > 1 else np.zeros(errs.shape[1])
    return EnsembleResult(n_real, seed, times, mean, var, variance_of, errs,
                          np.array(seconds), schedules)


# -- dense batched path for small separable problems ---------------------------

class DensePropagators:
    """Exact one-step maps ``y -> P_i y + phi(t) g_i`` for each subset.

    Only for small systems with :class:`SeparableLoad`; all realizations of
    an ensemble are advanced together.
    """

    def __init__(self, system: FemSystem, dec: Decomposition | None, dt: float, load: SeparableLoad):
        E = system.E.toarray()
        mats = ([system.R.toarray()] if dec is None else
                [dec.batch_matrix_for(i).toarray() for i in range(len(dec.subsets))])
        wts = ([np.ones(system.n_dof)] if dec is None else
               [dec.batch_weights_for(i) for i in range(len(dec.subsets))])
        self.P, self.g = [], []
        for B, w in zip(mats, wts):
            cf = sla.cho_factor(E + dt * B)
            self.P.append(sla.cho_solve(cf, E))
            self.g.append(sla.cho_solve(cf, dt * w * load.F0))
        self.P = np.stack(self.P)
        self.g = np.stack(self.g)
        self.phi = load.phi
        self.dt = dt

    def run(self, Y: np.ndarray, omega: np.ndarray | None, q: int, steps: int,
            observer: Callable[[int, float, np.ndarray], None]) -> np.ndarray:
        """Advance columns of ``Y``; ``omega`` is (realizations, K) or None."""
        Y = Y.copy()
        cols = np.arange(Y.shape[1])
        n_sub = self.P.shape[0]
        for n in range(steps):
            t1 = (n + 1) * self.dt
            c = self.phi(t1)
            if omega is None or n_sub == 1:
                Y = self.P[0] @ Y + c * self.g[0][:, None]
            else:
                idx = omega[:, n // q]
                if n % q == 0:
                    groups = [(i, cols[idx == i]) for i in range(n_sub)]
                    groups = [(i, g) for i, g in groups if g.size]
                for i, g in groups:
                    Y[:, g] = self.P[i] @ Y[:, g] + c * self.g[i][:, None]
            observer(n + 1, t1, Y)
        return Y


def write_trajectory_csv(traj: Trajectory, path: str | Path) -> None:
    n = traj.states.shape[0]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"dof_{i}" for i in range(n)])
        for j, t in enumerate(traj.times):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in traj.states[:, j]])


def write_probes_csv(rows, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "edge", "x", "value"])
        for t, e, x, v in rows:
            w.writerow([repr(float(t)), e, repr(float(x)), repr(float(v))])


def energy_norms(system: FemSystem, traj: Trajectory) -> np.ndarray:
    return np.array([l2_norm(system, traj.states[:, j]) for j in range(traj.states.shape[1])])
