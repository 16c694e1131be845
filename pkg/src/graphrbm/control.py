"""Linear-quadratic control of the discrete heat system.

The control is a coefficient vector ``F^n`` at every collocation time and
enters the state as the Galerkin load ``E F``:

    (E + dt B_n) y^{n+1} = E y^n + dt E F^{n+1},     y^0 = projected initial data,

with ``B_n = R`` (deterministic) or the batch matrix of the step's
subinterval (random).  The cost is the trapezoidal sum

    J(F) = 1/2 sum_n w_n (|F^n|_E^2 + |y^n - y_d|_E^2),   w_0 = w_last = dt/2, else dt.

Gradients are exact for this discrete cost (discretize-then-optimize).
With ``A_n = E + dt B_n`` and ``g^n = w_n E (y^n - y_d)`` the adjoint runs
backwards as

    p^last = A^{-1} g^last,    p^n = A_{n-1}^{-1} (g^n + E p^{n+1}),

and the gradient with respect to the weighted inner product
``<F, G> = sum_n w_n F^n . E G^n`` is ``F^n + (dt / w_n) p^n`` (``F^0``
does not reach the state, so its gradient is ``F^0``).
"""
from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fem import FemSystem, project_initial
from .rbm import BatchSchedule, Decomposition, sample_schedule
from .timestep import NumericalError, TimeGrid, steps_per_batch

log = logging.getLogger(__name__)

ARMIJO = 1e-4
MAX_HALVINGS = 60


@dataclass
class ControlProblem:
    system: FemSystem
    grid: TimeGrid
    y_d: np.ndarray          # target coefficients
    y0: np.ndarray           # initial coefficients
    dec: Decomposition | None = None
    schedule: BatchSchedule | None = None
    _lus: dict = field(default_factory=dict, repr=False)

    @classmethod
    def build(cls, system: FemSystem, grid: TimeGrid, y_d=None, y0=None) -> "ControlProblem":
        return cls(system, grid, _coefficients(system, y_d), _coefficients(system, y0))

    def randomized(self, dec: Decomposition, schedule: BatchSchedule) -> "ControlProblem":
        steps_per_batch(schedule.delta, self.grid)
        return ControlProblem(self.system, self.grid, self.y_d, self.y0, dec, schedule)

    @property
    def n_dof(self) -> int:
        return self.system.n_dof

    @property
    def shape(self) -> tuple[int, int]:
        return self.system.n_dof, self.grid.zeta

    @property
    def weights(self) -> np.ndarray:
        w = np.full(self.grid.zeta, self.grid.dt)
        w[0] = w[-1] = self.grid.dt / 2
        return w

    def factor(self, n: int):
        """Factor of ``A_n`` used to reach step ``n + 1``."""
        if self.dec is None:
            key = -1
        else:
            key = int(self.schedule.omega[n // steps_per_batch(self.schedule.delta, self.grid)])
        if key not in self._lus:
            B = self.system.R if key < 0 else self.dec.batch_matrix_for(key)
            try:
                self._lus[key] = spla.splu(sp.csc_matrix(self.system.E + self.grid.dt * B))
            except RuntimeError as exc:
                raise NumericalError(f"factorization failed: {exc}") from exc
        return self._lus[key]

    def zeros(self) -> np.ndarray:
        return np.zeros(self.shape)


def _coefficients(system: FemSystem, v) -> np.ndarray:
    if v is None:
        return np.zeros(system.n_dof)
    if callable(v):
        return project_initial(system, v)
    v = np.broadcast_to(np.asarray(v, dtype=float), (system.n_dof,))
    return v.copy()


def inner(problem: ControlProblem, a: np.ndarray, b: np.ndarray) -> float:
    """Weighted ``L2``-in-time, ``E``-in-space inner product of two controls."""
    Eb = problem.system.E @ b
    return float(((a * Eb).sum(axis=0) * problem.weights).sum())


def norm(problem: ControlProblem, a: np.ndarray) -> float:
    return math.sqrt(max(inner(problem, a, a), 0.0))


def solve_state(problem: ControlProblem, control: np.ndarray) -> np.ndarray:
    E, dt = problem.system.E, problem.grid.dt
    Y = np.empty(problem.shape)
    Y[:, 0] = problem.y0
    EF = E @ control
    for n in range(problem.grid.steps):
        Y[:, n + 1] = problem.factor(n).solve(E @ Y[:, n] + dt * EF[:, n + 1])
    return Y


def solve_adjoint(problem: ControlProblem, state: np.ndarray) -> np.ndarray:
    E = problem.system.E
    w = problem.weights
    G = (E @ (state - problem.y_d[:, None])) * w
    P = np.zeros(problem.shape)
    last = problem.grid.steps
    P[:, last] = problem.factor(last - 1).solve(G[:, last])
    for n in range(last - 1, 0, -1):
        P[:, n] = problem.factor(n - 1).solve(G[:, n] + E @ P[:, n + 1])
    return P


def _cost(problem: ControlProblem, control: np.ndarray, state: np.ndarray) -> float:
    E = problem.system.E
    d = state - problem.y_d[:, None]
    q = (control * (E @ control)).sum(axis=0) + (d * (E @ d)).sum(axis=0)
    return 0.5 * float((q * problem.weights).sum())


def evaluate_functional(problem: ControlProblem, control: np.ndarray) -> float:
    control = _check(problem, control)
    return _cost(problem, control, solve_state(problem, control))


def _gradient_from(problem, control, adjoint):
    g = control.copy()
    w = problem.weights
    g[:, 1:] += (problem.grid.dt / w[1:]) * adjoint[:, 1:]
    return g


def gradient(problem: ControlProblem, control: np.ndarray) -> np.ndarray:
    """Riesz gradient in the weighted inner product (see :func:`inner`)."""
    control = _check(problem, control)
    return _gradient_from(problem, control, solve_adjoint(problem, solve_state(problem, control)))


def _check(problem, control):
    control = np.asarray(control, dtype=float)
    if control.shape != problem.shape:
        raise ValueError(f"control has shape {control.shape}, expected {problem.shape}")
    return control


@dataclass
class ControlIterate:
    control: np.ndarray
    state: np.ndarray
    adjoint: np.ndarray
    J: float
    grad_norm: float
    iterations: int
    converged: bool
    log: list = field(default_factory=list)   # (iter, J, grad_norm, step)


def solve_deterministic(problem: ControlProblem, tol: float = 1e-8, max_iter: int = 500,
                        start: np.ndarray | None = None) -> ControlIterate:
    """Gradient descent with Barzilai-Borwein trial steps and Armijo backtracking.

    Stops once two consecutive controls differ by less than ``tol`` in the
    weighted norm; reaching ``max_iter`` returns ``converged=False``.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    F = problem.zeros() if start is None else _check(problem, start).copy()
    Y = solve_state(problem, F)
    P = solve_adjoint(problem, Y)
    J = _cost(problem, F, Y)
    g = _gradient_from(problem, F, P)
    gnorm = norm(problem, g)
    history = [(0, J, gnorm, 0.0)]
    if gnorm == 0.0:
        return ControlIterate(F, Y, P, J, gnorm, 0, True, history)
    alpha = 1.0
    converged = False
    it = 0
    while it < max_iter:
        it += 1
        step = alpha
        for _ in range(MAX_HALVINGS):
            F_new = F - step * g
            Y_new = solve_state(problem, F_new)
            J_new = _cost(problem, F_new, Y_new)
            if J_new <= J - ARMIJO * step * gnorm ** 2:
                break
            step *= 0.5
        else:
            log.warning("line search failed at iteration %d", it)
            break
        P_new = solve_adjoint(problem, Y_new)
        g_new = _gradient_from(problem, F_new, P_new)
        s = F_new - F
        change = norm(problem, s)
        yk = g_new - g
        sy = inner(problem, s, yk)
        alpha = inner(problem, s, s) / sy if sy > 0 else 1.0
        F, Y, P, J, g = F_new, Y_new, P_new, J_new, g_new
        gnorm = norm(problem, g)
        history.append((it, J, gnorm, step))
        if change < tol or gnorm == 0.0:
            converged = True
            break
    return ControlIterate(F, Y, P, J, gnorm, it, converged, history)


@dataclass
class ControlEnsemble:
    realizations: int
    seed: int
    delta: float
    mean_control: np.ndarray
    mean_state: np.ndarray
    iterates: list
    schedules: list

    @property
    def all_converged(self) -> bool:
        return all(it.converged for it in self.iterates)


def solve_random(problem: ControlProblem, dec: Decomposition, delta: float, tol: float = 1e-8,
                 max_iter: int = 500, n_real: int = 20, seed: int = 0, jobs: int = 1) -> ControlEnsemble:
    """One fixed batch schedule per realization for all its state and adjoint solves."""
    if n_real < 1:
        raise ValueError("need at least one realization")
    steps_per_batch(delta, problem.grid)

    def one(k):
        sched = sample_schedule(dec, delta, problem.grid.T, seed, k)
        return sched, solve_deterministic(problem.randomized(dec, sched), tol, max_iter)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            out = list(pool.map(one, range(n_real)))
    else:
        out = [one(k) for k in range(n_real)]
    ctrl = sum(it.control for _, it in out) / n_real
    state = sum(it.state for _, it in out) / n_real
    return ControlEnsemble(n_real, seed, delta, ctrl, state, [it for _, it in out], [s for s, _ in out])


def write_convergence_log(iterate: ControlIterate, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "J", "grad_norm", "step"])
        for it, J, g, s in iterate.log:
            w.writerow([it, repr(float(J)), repr(float(g)), repr(float(s))])
