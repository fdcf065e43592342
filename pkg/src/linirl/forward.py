"""Forward quantities ``z`` and ``dz/dtheta`` by sparse LU, plus a value-iteration baseline.

Every destination group ``D^n`` contributes one column to ``Z``; all groups
share ``I - M`` so one factorization serves the ``z`` solve and the ``T``
Jacobian solves.
"""

from __future__ import annotations

import logging
import math
import time
import warnings
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConvergenceError, NumericalError, SingularSystemError, ValidationError
from .mdp import Mdp, build_m, build_m_grads, check_condition_i

log = logging.getLogger(__name__)

RESIDUAL_TOL = 1e-10
# z entries below this (relative to max |z|) are treated as round-off
_NEG_TOL = 1e-12


@dataclass
class SolveStats:
    """Counters collected while a :func:`count_solves` block is active."""

    factorizations: int = 0
    solve_batches: int = 0
    factor_time: float = 0.0
    solve_time: float = 0.0


_active_stats: list[SolveStats] = []


@contextmanager
def count_solves():
    """Count factorizations and right-hand-side batches issued inside the block."""
    stats = SolveStats()
    _active_stats.append(stats)
    try:
        yield stats
    finally:
        _active_stats.remove(stats)


def _record(attr, amount):
    for stats in _active_stats:
        setattr(stats, attr, getattr(stats, attr) + amount)


class LuFactors:
    """Sparse LU factors of a square matrix ``A`` with a residual-checked solve.

    ``perm_r @ A @ perm_c == L @ U`` in the scipy/SuperLU convention.
    """

    def __init__(self, A: sp.csc_matrix, lu):
        self.A = A
        self._lu = lu

    @property
    def shape(self):
        return self.A.shape

    @property
    def L(self):
        return self._lu.L

    @property
    def U(self):
        return self._lu.U

    @property
    def perm_r(self):
        return self._lu.perm_r

    @property
    def perm_c(self):
        return self._lu.perm_c

    def solve(self, B, tol=RESIDUAL_TOL):
        """Solve ``A X = B`` (one batch); raise if the residual is too large."""
        B = np.asarray(B, dtype=float)
        t0 = time.perf_counter()
        if B.size == 0:
            X = np.zeros_like(B)
        else:
            X = self._lu.solve(B)
        _record("solve_time", time.perf_counter() - t0)
        _record("solve_batches", 1)
        if B.size:
            resid = np.max(np.abs(self.A @ X - B))
            scale = 1.0 + np.max(np.abs(B))
            if not np.isfinite(resid) or resid > tol * scale:
                raise NumericalError(
                    f"linear solve residual {resid:.3e} exceeds {tol:.0e} * (1 + |b|); "
                    "I - M is numerically singular or badly conditioned")
        return X


def factorize(M) -> LuFactors:
    """LU-factorize ``I - M``.

    Column ordering is fixed (COLAMD) so results are reproducible for a
    given input.  Pivots stay on the diagonal unless it is tiny: for
    ``rho(M) < 1`` the matrix is an M-matrix and diagonal elimination keeps
    the factors sign-structured, so small ``z`` entries keep their relative
    accuracy.
    """
    M = sp.csr_matrix(M)
    n = M.shape[0]
    A = (sp.identity(n, format="csc") - M.tocsc()).tocsc()
    A.sort_indices()
    t0 = time.perf_counter()
    try:
        lu = spla.splu(A, permc_spec="COLAMD", diag_pivot_thresh=0.01,
                       options={"SymmetricMode": True})
    except RuntimeError as exc:
        raise SingularSystemError(
            f"I - M singular; neither invertibility condition (acyclic support, row sums below 1) holds ({exc})") from exc
    _record("factor_time", time.perf_counter() - t0)
    _record("factorizations", 1)
    return LuFactors(A, lu)


def destination_matrix(n_states: int, dest_sets) -> np.ndarray:
    """``B[s, n] = 1`` iff ``s`` is in the ``n``-th destination set."""
    B = np.zeros((n_states, len(dest_sets)))
    for n, D in enumerate(dest_sets):
        B[list(D), n] = 1.0
    return B


def _check_nonnegative(Z):
    if Z.size == 0:
        return
    floor = -_NEG_TOL * max(1.0, float(np.max(np.abs(Z))))
    if Z.min() < floor:
        s, n = np.unravel_index(int(np.argmin(Z)), Z.shape)
        raise NumericalError(
            f"z[{s}, group {n}] = {Z[s, n]:.3e} < 0: the spectral radius of M is at "
            "least 1 (neither invertibility condition holds at this theta)")


def solve_z(factors: LuFactors, B, check_sign=True) -> np.ndarray:
    """Solve ``(I - M) Z = B``."""
    Z = factors.solve(B)
    if check_sign:
        _check_nonnegative(Z)
    return Z


def jacobian_z(factors: LuFactors, M, features, Z, dM=None) -> np.ndarray:
    """``dZ/dtheta_t`` for each feature, stacked as ``(T, n_states, n_groups)``.

    Solves ``(I - M) X = (M o F^t) Z`` on the existing factors, one batch per
    feature.  ``dM`` may pass precomputed ``M o F^t`` matrices.
    """
    M = sp.csr_matrix(M)
    if dM is None:
        dM = [M.multiply(sp.csr_matrix(F)).tocsr() for F in features]
    Z = np.asarray(Z, dtype=float)
    out = np.empty((len(dM),) + Z.shape)
    for t, U in enumerate(dM):
        out[t] = factors.solve(U @ Z)
    return out


@dataclass
class ForwardSolution:
    """``Z`` (one column per destination group) and its Jacobian ``J``."""

    Z: np.ndarray
    J: np.ndarray
    dest_sets: tuple
    theta: np.ndarray
    M: sp.csr_matrix = field(repr=False)
    factors: LuFactors | None = field(default=None, repr=False)

    def column(self, dest_set) -> int:
        return self.dest_sets.index(frozenset(dest_set))


def _check_destinations(mdp: Mdp, dest_sets) -> list[tuple[int, int]]:
    """Validate destination sets; return ``(column, state)`` for transient destinations.

    A destination set is either made of absorbing states or is a single
    transient state ``u``.  The latter is the first-passage problem of
    reaching ``u``; see :func:`_first_passage`.
    """
    transient = []
    for n, D in enumerate(dest_sets):
        if not D:
            raise ValidationError("empty destination set")
        if D <= mdp.absorbing:
            continue
        if len(D) != 1:
            missing = sorted(set(D) - mdp.absorbing)
            raise ValidationError(
                f"destination states {missing[:10]} are not absorbing in the MDP; only "
                "single-state destination sets may be transient")
        transient.append((n, next(iter(D))))
    return transient


def _first_passage(Z, J, transient):
    """Rescale, in place, columns solved for a transient destination ``u``.

    With ``y = (I - M)^{-1} e_u`` the partition function of paths that stop
    at their first visit to ``u`` is ``y / y_u``: removing the outgoing
    transitions of ``u`` is a rank-one update of ``I - M`` (Sherman-Morrison),
    so the shared factorization still applies.
    """
    if not transient:
        return
    cols = np.array([n for n, _ in transient])
    us = np.array([u for _, u in transient])
    yu = Z[us, cols]
    if not np.all(yu > 0):
        k = int(np.argmin(yu))
        raise NumericalError(f"first-passage normalizer y[{us[k]}] = {yu[k]:.3e} is not positive")
    z = Z[:, cols] / yu
    if J is not None:
        J[:, :, cols] = (J[:, :, cols] - J[:, us, cols][:, None, :] * z[None]) / yu
    Z[:, cols] = z


def _warn_tiny(Z, theta):
    tiny = (Z > 0) & (Z < 1e-300)
    if np.any(tiny):
        log.debug("%d z entries below 1e-300 at theta=%s", int(tiny.sum()), theta.tolist())
        warnings.warn("z entries below 1e-300; probabilities may underflow",
                      RuntimeWarning, stacklevel=3)


def forward_solve(mdp: Mdp, theta, dest_sets) -> ForwardSolution:
    """``Z`` and its Jacobian from one factorization of ``I - M`` and ``T + 1`` solve batches."""
    theta = mdp.check_theta(theta)
    dest_sets = tuple(frozenset(int(s) for s in D) for D in dest_sets)
    transient = _check_destinations(mdp, dest_sets)
    M = build_m(mdp, theta)
    factors = factorize(M)
    B = destination_matrix(mdp.n_states, dest_sets)
    Z = solve_z(factors, B)
    J = jacobian_z(factors, M, None, Z, dM=build_m_grads(mdp, theta))
    _first_passage(Z, J, transient)
    _warn_tiny(Z, theta)
    return ForwardSolution(Z, J, dest_sets, theta, M, factors)


# ----------------------------------------------------------------------
# value iteration baseline


def value_iteration(M, b, z0=None, eps=1e-10, k_max=None, check=True, callback=None):
    """Iterate ``z <- M z + b`` until ``max|z_new - z| < eps``.

    Returns ``(z, iterations)``.  ``b`` may be a matrix (one column per
    group).  Defaults: ``z0 = b``, ``k_max = 10 |S| + 1000``.  If given,
    ``callback(k, z)`` is called with every iterate ``z^k``.
    """
    if eps <= 0:
        raise ValidationError("eps must be positive")
    M = sp.csr_matrix(M)
    b = np.asarray(b, dtype=float)
    n = M.shape[0]
    if k_max is None:
        k_max = 10 * n + 1000
    if check:
        row_max = float(np.max(np.asarray(M.sum(axis=1)).ravel(), initial=0.0))
        if row_max >= 1.0 and not _acyclic(M):
            warnings.warn("neither invertibility condition holds; value iteration may diverge",
                          RuntimeWarning, stacklevel=2)
    z = b.copy() if z0 is None else np.array(z0, dtype=float)
    diff = np.inf
    for k in range(1, k_max + 1):
        z_new = M @ z + b
        diff = float(np.max(np.abs(z_new - z), initial=0.0))
        z = z_new
        if callback is not None:
            callback(k, z)
        if diff < eps:
            return z, k
        if not np.isfinite(diff):
            break
    raise ConvergenceError(
        f"value iteration did not converge in {k_max} iterations (last change {diff:.3e})",
        residual=diff, iterate=z)


def _acyclic(M) -> bool:
    coo = sp.coo_matrix(M)
    mask = coo.data != 0
    fake = Mdp.from_edges(M.shape[0], coo.row[mask], coo.col[mask], np.zeros((mask.sum(), 0)))
    return check_condition_i(fake)


def iteration_bound(tau: float, eps: float) -> int:
    """``ceil(ln eps / ln tau)``: iterations after which ``|z^k - z*| < eps``."""
    if not 0 < tau < 1:
        raise ValidationError(f"iteration bound needs 0 < tau < 1, got tau={tau}")
    if not 0 < eps < 1:
        raise ValidationError(f"iteration bound needs 0 < eps < 1, got eps={eps}")
    return math.ceil(math.log(eps) / math.log(tau))


def forward_solve_vi(mdp: Mdp, theta, dest_sets, eps=1e-10, k_max=None) -> ForwardSolution:
    """Value-iteration counterpart of :func:`forward_solve`.

    ``Z`` is iterated to a fixed point first, then all Jacobian columns are
    iterated jointly via ``J_t <- M J_t + (M o F^t) Z``.
    """
    theta = mdp.check_theta(theta)
    dest_sets = tuple(frozenset(int(s) for s in D) for D in dest_sets)
    transient = _check_destinations(mdp, dest_sets)
    M = build_m(mdp, theta)
    B = destination_matrix(mdp.n_states, dest_sets)
    Z, _ = value_iteration(M, B, eps=eps, k_max=k_max)
    dM = build_m_grads(mdp, theta)
    T, N = len(dM), B.shape[1]
    H = np.hstack([U @ Z for U in dM]) if T else np.zeros((mdp.n_states, 0))
    Jflat, _ = value_iteration(M, H, eps=eps, k_max=k_max, check=False)
    J = np.ascontiguousarray(Jflat.reshape(mdp.n_states, T, N).transpose(1, 0, 2))
    _first_passage(Z, J, transient)
    return ForwardSolution(Z, J, dest_sets, theta, M, None)
