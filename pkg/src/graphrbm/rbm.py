"""Random batch law over a splitting of the stiffness matrix.

A :class:`Decomposition` holds parts ``R_m`` summing to ``R`` together with a
sparse batch law: subsets ``S_i`` of part indices with probabilities ``p_i``
(zero-probability subsets are simply not stored).  On the ``k``-th
subinterval of length ``delta`` the dynamics use

    R_rb = sum_{m in S_{omega_k}} R_m / pi_m,   pi_m = sum_{i: m in S_i} p_i,

so that ``E[R_rb] = R``.  The load is split the same way through per-dof
weights ``w_m`` with ``sum_m w_m = 1``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)

SUM_RTOL = 1e-12
PROB_ATOL = 1e-14


class DecompositionError(ValueError):
    pass


@dataclass(frozen=True)
class Decomposition:
    parts: tuple[sp.csr_matrix, ...]
    force_weights: np.ndarray          # shape (M, n_dof)
    subsets: tuple[frozenset[int], ...]  # 0-based part indices
    probs: np.ndarray
    pi: np.ndarray
    R: sp.csr_matrix
    labels: tuple[str, ...] = ()

    @property
    def M(self) -> int:
        return len(self.parts)

    @property
    def n_dof(self) -> int:
        return self.R.shape[0]

    def batch_matrix_for(self, i: int) -> sp.csr_matrix:
        """``sum_{m in S_i} R_m / pi_m`` for stored subset ``i``."""
        out = sp.csr_matrix(self.R.shape)
        for m in sorted(self.subsets[i]):
            out = out + self.parts[m] * (1.0 / self.pi[m])
        out.sort_indices()
        return out

    def batch_weights_for(self, i: int) -> np.ndarray:
        w = np.zeros(self.n_dof)
        for m in sorted(self.subsets[i]):
            w += self.force_weights[m] / self.pi[m]
        return w

    def support(self, i: int) -> np.ndarray:
        """Sorted dofs touched by the parts (and load weights) of subset ``i``."""
        mask = np.zeros(self.n_dof, dtype=bool)
        for m in self.subsets[i]:
            P = self.parts[m].tocoo()
            nz = P.data != 0
            mask[P.row[nz]] = True
            mask[P.col[nz]] = True
            mask |= self.force_weights[m] != 0
        return np.flatnonzero(mask)

    @property
    def is_degenerate(self) -> bool:
        """True when every draw reproduces the full matrix."""
        return all(len(s) == self.M for s, p in zip(self.subsets, self.probs) if p > 0)


def make_decomposition(parts: Sequence, force_weights=None, subsets=None,
                       R=None, labels: Sequence[str] = ()) -> Decomposition:
    """Validate a splitting and its batch law and compute ``pi``.

    ``subsets`` is a sequence of ``(S_i, p_i)`` with ``S_i`` 0-based part
    indices; the default is the uniform law over singletons.
    ``force_weights`` defaults to the diagonal share of each part,
    ``diag(R_m) / diag(R)``.
    """
    parts = tuple(sp.csr_matrix(P, dtype=float) for P in parts)
    if not parts:
        raise DecompositionError("need at least one part")
    n = parts[0].shape[0]
    for P in parts:
        if P.shape != (n, n):
            raise DecompositionError(f"part shape {P.shape} differs from {(n, n)}")
    total = parts[0].copy()
    for P in parts[1:]:
        total = total + P
    if R is None:
        R = total
    R = sp.csr_matrix(R, dtype=float)
    R.sort_indices()
    diff = abs(total - R)
    scale = abs(R).max() if R.nnz else 1.0
    if diff.nnz and diff.max() > SUM_RTOL * scale:
        d = diff.tocoo()
        k = int(np.argmax(d.data))
        raise DecompositionError(
            f"parts do not sum to R: worst entry ({d.row[k]}, {d.col[k]}) off by {d.data[k]:.3e}")

    M = len(parts)
    if subsets is None:
        subsets = [({m}, 1.0 / M) for m in range(M)]
    sets, probs = [], []
    for S, p in subsets:
        S = frozenset(int(m) for m in S)
        if not S or min(S) < 0 or max(S) >= M:
            raise DecompositionError(f"subset {sorted(S)} is not a nonempty subset of 0..{M - 1}")
        if p < 0:
            raise DecompositionError(f"negative probability {p} for subset {sorted(S)}")
        if p > 0:
            sets.append(S)
            probs.append(float(p))
    probs = np.array(probs)
    if abs(probs.sum() - 1.0) > PROB_ATOL * max(1, len(probs)):
        raise DecompositionError(f"probabilities sum to {probs.sum():.17g}, not 1")
    pi = np.zeros(M)
    for S, p in zip(sets, probs):
        for m in S:
            pi[m] += p
    for m in range(M):
        if pi[m] <= 0:
            raise DecompositionError(f"part {m} is never drawn (pi_{m} = 0)")

    if force_weights is None:
        dR = R.diagonal()
        safe = np.where(dR != 0, dR, 1.0)
        force_weights = np.array([np.where(dR != 0, P.diagonal() / safe, 1.0 / M) for P in parts])
    force_weights = np.asarray(force_weights, dtype=float)
    if force_weights.shape != (M, n):
        raise DecompositionError(f"force weights must have shape {(M, n)}")
    if np.abs(force_weights.sum(axis=0) - 1.0).max() > 1e-12:
        raise DecompositionError("force weights do not sum to one on every dof")
    return Decomposition(parts, force_weights, tuple(sets), probs, pi, R, tuple(labels))


def trivial_decomposition(R) -> Decomposition:
    """``M = 1``: the batch matrix is always ``R`` itself."""
    R = sp.csr_matrix(R, dtype=float)
    return make_decomposition([R], np.ones((1, R.shape[0])), [({0}, 1.0)], R=R, labels=("all",))


# -- schedules ---------------------------------------------------------------

@dataclass(frozen=True)
class BatchSchedule:
    delta: float
    T: float
    omega: np.ndarray   # stored-subset index per subinterval
    seed: int
    realization: int = 0

    @property
    def K(self) -> int:
        return len(self.omega)

    def index(self, t: float) -> int:
        if not 0.0 <= t < self.T:
            raise ValueError(f"t={t} outside [0, {self.T})")
        return min(int(math.floor(t / self.delta + 1e-12)), self.K - 1)


def n_subintervals(delta: float, T: float) -> int:
    # the last subinterval is truncated at T
    return max(1, math.ceil(T / delta - 1e-9))


def rng_for(seed: int, realization: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[int(seed) & (2**64 - 1), int(realization)]))


def sample_schedule(dec: Decomposition, delta: float, T: float, seed: int,
                    realization: int = 0) -> BatchSchedule:
    """Draw ``omega_k`` i.i.d. with law ``p`` from a stream keyed by (seed, realization).

    Draw ``k`` always consumes the ``k``-th uniform of that stream, so
    prefixes agree across horizons and nothing depends on execution order.
    """
    if not delta > 0 or not T > 0:
        raise ValueError("delta and T must be positive")
    K = n_subintervals(delta, T)
    u = rng_for(seed, realization).random(K)
    cdf = np.cumsum(dec.probs)
    cdf[-1] = 1.0
    omega = np.searchsorted(cdf, u, side="right")
    return BatchSchedule(delta, T, omega.astype(int), seed, realization)


def batch_matrix(dec: Decomposition, schedule: BatchSchedule, t: float) -> sp.csr_matrix:
    return dec.batch_matrix_for(int(schedule.omega[schedule.index(t)]))


def batch_force(dec: Decomposition, schedule: BatchSchedule, t: float, F: np.ndarray) -> np.ndarray:
    """Random load ``sum_{m in S} w_m F / pi_m`` given the full load ``F(t)``."""
    return dec.batch_weights_for(int(schedule.omega[schedule.index(t)])) * F


# -- variance ----------------------------------------------------------------

def spectral_norm(A, tol: float = 1e-10, maxiter: int = 10_000, seed: int = 0) -> float:
    """Operator 2-norm of a symmetric matrix by power iteration on ``A^2``.

    Falls back to Lanczos when the iteration cap is hit (clustered spectra
    at large dimension converge too slowly for plain power iteration).
    """
    A = sp.csr_matrix(A)
    n = A.shape[0]
    if A.nnz == 0 or not np.any(A.data):
        return 0.0
    v = np.random.default_rng(seed).standard_normal(n)
    v /= np.linalg.norm(v)
    mu = 0.0
    for _ in range(maxiter):
        w = A @ v
        mu_new = float(w @ w)
        u = A.T @ w
        nu = np.linalg.norm(u)
        if nu == 0:
            return 0.0
        v = u / nu
        if abs(mu_new - mu) <= tol * mu_new:
            return math.sqrt(mu_new)
        mu = mu_new
    log.debug("power iteration hit %d iterations; switching to Lanczos", maxiter)
    lam = spla.eigsh(A, k=1, which="LM", tol=tol, return_eigenvectors=False)[0]
    return abs(float(lam))


def deviation(dec: Decomposition, i: int) -> sp.csr_matrix:
    return dec.R - dec.batch_matrix_for(i)


def variance(dec: Decomposition, norm: str = "spectral") -> float:
    """``Var[R_rb] = sum_i p_i ||R - sum_{m in S_i} R_m/pi_m||^2``.

    ``norm="fro"`` swaps in the Frobenius norm.
    """
    total = 0.0
    for i, p in enumerate(dec.probs):
        D = deviation(dec, i)
        D.eliminate_zeros()
        if norm == "spectral":
            nrm = spectral_norm(D)
        elif norm == "fro":
            nrm = spla.norm(D, "fro") if D.nnz else 0.0
        else:
            raise ValueError(f"unknown norm {norm!r}")
        total += p * nrm**2
    return total


def scaled(dec: Decomposition, factor: float) -> Decomposition:
    """Same law with every part multiplied by ``factor``."""
    return Decomposition(tuple(P * factor for P in dec.parts), dec.force_weights,
                         dec.subsets, dec.probs, dec.pi, dec.R * factor, dec.labels)


def c_of_m(dec: Decomposition, h: float | None = None) -> float:
    """Variance of the ``h``-free splitting ``{h R_m}``.

    With ``h`` given, ``dec`` is taken at mesh step ``h`` and rescaled;
    otherwise it is assumed to already be the unit-``h`` splitting.
    """
    if h is not None:
        dec = scaled(dec, h)
    return variance(dec)


# -- error bounds --------------------------------------------------------------

@dataclass
class BoundReport:
    kind: str
    factors: dict[str, float]
    rhs: float
    shape_terms: dict[str, float] = field(default_factory=dict)
    notes: dict[str, str] = field(default_factory=dict)

    def as_lines(self) -> list[str]:
        lines = [f"bound.kind={self.kind}", f"bound.rhs={self.rhs:.17g}"]
        lines += [f"bound.factor.{k}={v:.17g}" for k, v in self.factors.items()]
        lines += [f"bound.shape.{k}={v:.17g}" for k, v in self.shape_terms.items()]
        lines += [f"bound.note.{k}={v}" for k, v in self.notes.items()]
        return lines


def inv_mass_stiffness_norm(E, R, tol: float = 1e-10, maxiter: int = 2000) -> float:
    """``||E^{-1} R||_2`` by power iteration on ``(E^{-1}R)^T (E^{-1}R)``."""
    E = sp.csc_matrix(E)
    R = sp.csr_matrix(R)
    n = E.shape[0]
    if n <= 400:
        return float(np.linalg.norm(np.linalg.solve(E.toarray(), R.toarray()), 2))
    lu = spla.splu(E)
    v = np.random.default_rng(0).standard_normal(n)
    v /= np.linalg.norm(v)
    mu = 0.0
    for _ in range(maxiter):
        w = lu.solve(R @ v)
        u = R.T @ lu.solve(w, trans="T")
        mu_new = float(w @ w)
        v = u / np.linalg.norm(u)
        if abs(mu_new - mu) <= tol * mu_new:
            break
        mu = mu_new
    return math.sqrt(mu_new)


def bound_trajectory(*, lam_min_E: float, norm_Einv_R: float, norm_Einv_y0: float,
                     norm_Einv_f_L1: float, var: float, delta: float, T: float,
                     h: float | None = None, c_m: float | None = None) -> BoundReport:
    """Right-hand side of the mean-square trajectory estimate.

        (||E^{-1}R|| T^2 + 2T)(||E^{-1}y0|| + ||E^{-1}f||_{L1})^2 Var / lambda_min(E)^2 * delta

    With ``h`` and ``c_m`` given, also reports the explicit part
    ``delta / h^7 * C(M)`` of the combined FEM+RBM estimate; its ``h^4``
    companion carries an unknown constant and is only reported as ``h^4``.
    """
    growth = norm_Einv_R * T**2 + 2.0 * T
    data = (norm_Einv_y0 + norm_Einv_f_L1) ** 2
    spread = var / lam_min_E**2 if var > 0 else 0.0
    rhs = growth * data * spread * delta
    report = BoundReport("trajectory",
                         {"growth": growth, "data": data, "var": var,
                          "lambda_min_E": lam_min_E, "delta": delta, "T": T},
                         rhs)
    if h is not None and c_m is not None:
        report.shape_terms = {"delta_over_h7_CM": delta / h**7 * c_m, "h4": h**4}
        report.notes["h4"] = "multiplied by an unknown constant C"
    return report


def bound_control(*, lam_min_E: float, norm_E: float, norm_Einv_R: float,
                  norm_Einv_y0: float, norm_Einv_f: float, norm_yd: float,
                  var: float, delta: float, T: float,
                  h: float | None = None, c_m: float | None = None) -> BoundReport:
    """Mean-square estimate for the randomized optimal control with ``D = Q = E``.

        C_oc (1 + ||E^{-1}||^2 T) Var / (lambda_min(D)^2 lambda_min(E)^2) * delta
        C_oc = 2||D||^2 ((1+T)(||E^{-1}y0|| + ||E^{-1}f||)^2 + ||y_d||^2)
               ||E^{-1}||^2 (||E^{-1}R|| T^2 + 2T)
    """
    inv_E = 1.0 / lam_min_E
    growth = norm_Einv_R * T**2 + 2.0 * T
    c_oc = (2.0 * norm_E**2 * ((1.0 + T) * (norm_Einv_y0 + norm_Einv_f) ** 2 + norm_yd**2)
            * inv_E**2 * growth)
    spread = var / (lam_min_E**2 * lam_min_E**2) if var > 0 else 0.0
    rhs = c_oc * (1.0 + inv_E**2 * T) * spread * delta
    report = BoundReport("control",
                         {"C_oc": c_oc, "growth": growth, "var": var,
                          "lambda_min_E": lam_min_E, "norm_D": norm_E,
                          "delta": delta, "T": T},
                         rhs)
    if h is not None and c_m is not None:
        report.shape_terms = {"delta_over_h11_CM": delta / h**11 * c_m}
    return report


def summary_lines(dec: Decomposition, c_m: float | None = None) -> list[str]:
    """Flat ``key=value`` report of the law and its variance."""
    lines = [f"M={dec.M}"]
    for i, (S, p) in enumerate(zip(dec.subsets, dec.probs)):
        lines.append(f"subset.{i}.parts={','.join(str(m + 1) for m in sorted(S))}")
        lines.append(f"subset.{i}.p={p:.17g}")
    for m, val in enumerate(dec.pi):
        lines.append(f"pi.{m + 1}={val:.17g}")
    lines.append(f"var={variance(dec):.17g}")
    if c_m is not None:
        lines.append(f"C(M)={c_m:.17g}")
    return lines


# -- stability of the batch dynamics -------------------------------------------

def min_generalized_eigenvalue(B, E) -> float:
    """Smallest ``mu`` with ``B v = mu E v``; negative means ``B`` is indefinite."""
    n = B.shape[0]
    if n <= 800:
        import scipy.linalg as sla
        return float(sla.eigh(sp.csr_matrix(B).toarray(), sp.csr_matrix(E).toarray(),
                              eigvals_only=True, subset_by_index=[0, 0])[0])
    return float(spla.eigsh(sp.csc_matrix(B), k=1, M=sp.csc_matrix(E), which="SA",
                            return_eigenvectors=False, tol=1e-8, maxiter=20 * n)[0])


def stability_lines(dec: Decomposition, E, dt: float) -> list[str]:
    """Per-subset ``mu_min`` and the implicit-Euler growth factor ``1/|1 + dt mu|``.

    A splitting whose parts are indefinite (``mu_min < 0``) can make single
    random steps expansive; a factor above one flags that regime.
    """
    lines = []
    worst = 0.0
    for i in range(len(dec.subsets)):
        mu = min_generalized_eigenvalue(dec.batch_matrix_for(i), E)
        growth = 1.0 / abs(1.0 + dt * mu) if mu < 0 else 1.0
        worst = max(worst, growth)
        lines.append(f"stability.subset.{i}.mu_min={mu:.6g}")
        lines.append(f"stability.subset.{i}.ie_growth={growth:.6g}")
    lines.append(f"stability.max_ie_growth={worst:.6g}")
    if worst > 1.0 + 1e-9:
        log.warning("batch steps can amplify by up to %.3g per step (indefinite parts)", worst)
    return lines
