"""Local action probabilities and the log-likelihood of observed trajectories.

The policy is ``P(a|s) = sum_s2 p(s2|a,s) exp(r(s2|s)) z_s2 / z_s`` and a
trajectory's log-likelihood is the sum of ``ln P(a_i|s_i)`` over its
observed steps.  Everything here is vectorized over all kernel rows and all
destination groups at once; the scalar helpers exist for tests and callers
that want a single probability.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .data import Trajectory
from .errors import NumericalError, ValidationError
from .forward import ForwardSolution, forward_solve, forward_solve_vi
from .mdp import Mdp, exp_rewards

log = logging.getLogger(__name__)

# z below the smallest normal double has lost its relative precision; such
# states are treated as unable to reach the destination
Z_FLOOR = np.finfo(float).tiny


@dataclass
class LogLik:
    """Log-likelihood value and gradient, plus infeasibility diagnostics.

    A trajectory with zero probability makes ``value`` equal ``-inf``;
    ``grad`` then sums the remaining trajectories only, and ``infeasible``
    lists the offending trajectory indices.
    """

    value: float
    grad: np.ndarray
    n_infeasible: int = 0
    reasons: list = field(default_factory=list)
    infeasible: tuple = ()

    def __add__(self, other):
        return LogLik(self.value + other.value, self.grad + other.grad,
                      self.n_infeasible + other.n_infeasible, self.reasons + other.reasons,
                      tuple(sorted(set(self.infeasible) | set(other.infeasible))))


# ----------------------------------------------------------------------
# single-state helpers


def _sa_weights(mdp: Mdp, row: int, theta):
    lo, hi = mdp.kernel.indptr[row], mdp.kernel.indptr[row + 1]
    w = mdp.k_prob[lo:hi] * exp_rewards(mdp, theta)[lo:hi]
    return w, mdp.k_col[lo:hi], mdp.k_feat[lo:hi]


def action_prob(mdp: Mdp, s, a, z, theta) -> float:
    z = np.asarray(z, dtype=float)
    if not z[s] >= Z_FLOOR:
        raise NumericalError(f"state {s} is unreachable to destination (z = {z[s]:.3g})")
    w, cols, _ = _sa_weights(mdp, mdp.sa_row(s, a), theta)
    return float(w @ z[cols] / z[s])


def action_prob_grad(mdp: Mdp, s, a, z, Jz, theta) -> np.ndarray:
    """Gradient of :func:`action_prob` w.r.t. theta.

    ``Jz`` has shape ``(n_states, T)``.  The quotient rule gives::

        dP/dt = (1/z_s) sum_s2 p w (f_t z_s2 + J_s2,t) - (sum_s2 p w z_s2) J_s,t / z_s^2
    """
    z = np.asarray(z, dtype=float)
    Jz = np.asarray(Jz, dtype=float)
    if not z[s] >= Z_FLOOR:
        raise NumericalError(f"state {s} is unreachable to destination (z = {z[s]:.3g})")
    w, cols, feat = _sa_weights(mdp, mdp.sa_row(s, a), theta)
    num = w @ z[cols]
    dnum = (w * z[cols]) @ feat + w @ Jz[cols]
    return (dnum - (num / z[s]) * Jz[s]) / z[s]


# ----------------------------------------------------------------------
# vectorized policy


def _weighted_kernel(mdp: Mdp, values) -> sp.csr_matrix:
    K = mdp.kernel
    return sp.csr_matrix((values, K.indices, K.indptr), shape=K.shape)


def policy(mdp: Mdp, theta, Z) -> np.ndarray:
    """``P[i, n]`` = probability of kernel row ``i`` under group ``n``.

    Rows whose state has ``z = 0`` (cannot reach the destination, or ``z``
    underflowed below :data:`Z_FLOOR`) get 0.
    """
    Z = np.asarray(Z, dtype=float)
    squeeze = Z.ndim == 1
    Z = Z.reshape(mdp.n_states, -1)
    w = mdp.k_prob * exp_rewards(mdp, theta)
    num = _weighted_kernel(mdp, w) @ Z
    zs = Z[mdp.sa_state]
    with np.errstate(divide="ignore", invalid="ignore"):
        P = np.where(zs >= Z_FLOOR, num / zs, 0.0)
    return P[:, 0] if squeeze else P


def policy_grad(mdp: Mdp, theta, Z, J):
    """Policy and its gradient for every kernel row and group.

    ``Z`` is ``(n_states, N)``, ``J`` is ``(T, n_states, N)``.  Returns
    ``P`` of shape ``(n_sa, N)`` and ``dP`` of shape ``(T, n_sa, N)``.
    """
    Z = np.asarray(Z, dtype=float)
    w = mdp.k_prob * exp_rewards(mdp, theta)
    Kw = _weighted_kernel(mdp, w)
    num = Kw @ Z
    zs = Z[mdp.sa_state]
    ok = zs >= Z_FLOOR
    safe = np.where(ok, zs, 1.0)
    P = np.where(ok, num / safe, 0.0)
    T = mdp.n_features
    dP = np.empty((T,) + P.shape)
    for t in range(T):
        dnum = _weighted_kernel(mdp, w * mdp.k_feat[:, t]) @ Z + Kw @ J[t]
        # dnum / z - num J_s / z^2, written so that z^2 cannot underflow
        dP[t] = np.where(ok, (dnum - P * J[t][mdp.sa_state]) / safe, 0.0)
    return P, dP


# ----------------------------------------------------------------------
# datasets


@dataclass
class CompiledData:
    """Flat index arrays describing a dataset against one MDP.

    ``step_*`` arrays hold every observed (state, action) step; ``gap_*``
    arrays every missing segment.  Groups are ordered by first appearance.
    """

    dest_sets: tuple
    n_traj: int
    traj_group: np.ndarray
    step_traj: np.ndarray
    step_row: np.ndarray
    step_group: np.ndarray
    gap_traj: np.ndarray
    gap_u: np.ndarray
    gap_v: np.ndarray
    gap_group: np.ndarray

    @property
    def n_gaps(self) -> int:
        return self.gap_u.size


def compile_dataset(trajectories, mdp: Mdp, gaps: str = "error", validate=True) -> CompiledData:
    """Index a dataset.

    ``gaps`` is ``"error"`` (complete data required), ``"ignore"`` (keep only
    observed runs) or ``"include"``.
    """
    if gaps not in ("error", "ignore", "include"):
        raise ValueError(f"bad gaps mode {gaps!r}")
    groups: dict = {}
    traj_group, st, sr, sg, gt, gu, gv, gg = [], [], [], [], [], [], [], []
    for i, traj in enumerate(trajectories):
        if not isinstance(traj, Trajectory):
            raise ValidationError(f"trajectory {i} has type {type(traj).__name__}")
        if validate:
            traj.validate(mdp)
        if traj.gaps and gaps == "error":
            raise ValidationError(f"trajectory {i} has missing segments; use a missing-data mode")
        g = groups.setdefault(frozenset(traj.dest), len(groups))
        traj_group.append(g)
        for s, a in traj.observed_steps():
            st.append(i)
            sr.append(mdp.sa_row(s, a))
            sg.append(g)
        if gaps == "include":
            for gap in traj.gaps:
                gt.append(i)
                gu.append(gap.u)
                gv.append(gap.v)
                gg.append(g)
    ints = lambda x: np.asarray(x, dtype=np.int64)  # noqa: E731
    return CompiledData(tuple(groups), len(traj_group), ints(traj_group), ints(st), ints(sr),
                        ints(sg), ints(gt), ints(gu), ints(gv), ints(gg))


def _accumulate(n_traj, traj_idx, prob, dprob, ok_traj=None):
    """Sum ``ln prob`` and ``dprob / prob`` per trajectory, dropping infeasible ones.

    Returns ``(per-trajectory values, per-trajectory grads, feasible mask)``.
    """
    T = dprob.shape[0]
    feasible = np.ones(n_traj, dtype=bool) if ok_traj is None else ok_traj.copy()
    bad = prob <= 0
    if np.any(bad):
        feasible[traj_idx[bad]] = False
    safe = np.where(bad, 1.0, prob)
    vals = np.bincount(traj_idx, weights=np.log(safe), minlength=n_traj)
    grads = np.zeros((n_traj, T))
    for t in range(T):
        grads[:, t] = np.bincount(traj_idx, weights=dprob[t] / safe, minlength=n_traj)
    return vals, grads, feasible


def step_policy(mdp: Mdp, theta, Z, J, rows, groups):
    """Policy and its gradient at selected ``(kernel row, group)`` pairs only.

    Same quantities as :func:`policy_grad` restricted to the pairs a
    likelihood actually needs, which is much cheaper when there are many
    groups.  Returns ``p`` of shape ``(K,)`` and ``dp`` of shape ``(T, K)``.
    """
    rows = np.asarray(rows, dtype=np.int64)
    groups = np.asarray(groups, dtype=np.int64)
    T = mdp.n_features
    if rows.size == 0:
        return np.zeros(0), np.zeros((T, 0))
    indptr = mdp.kernel.indptr
    counts = indptr[rows + 1] - indptr[rows]
    owner = np.repeat(np.arange(rows.size), counts)
    # position of every kernel entry of every selected row
    offsets = np.arange(owner.size) - np.repeat(np.cumsum(counts) - counts, counts)
    k = indptr[rows][owner] + offsets
    g = groups[owner]
    w = mdp.k_prob[k] * exp_rewards(mdp, theta)[k]
    zk = Z[mdp.k_col[k], g]
    zs = Z[mdp.sa_state[rows], groups]
    ok = zs >= Z_FLOOR
    safe = np.where(ok, zs, 1.0)
    num = np.bincount(owner, weights=w * zk, minlength=rows.size)
    p = np.where(ok, num / safe, 0.0)
    dp = np.empty((T, rows.size))
    for t in range(T):
        dnum = np.bincount(owner, weights=w * (mdp.k_feat[k, t] * zk + J[t][mdp.k_col[k], g]),
                           minlength=rows.size)
        dp[t] = np.where(ok, (dnum - p * J[t][mdp.sa_state[rows], groups]) / safe, 0.0)
    return p, dp


def observed_terms(compiled: CompiledData, mdp: Mdp, sol: ForwardSolution):
    """Per-trajectory sums of ``ln P`` and ``dP/P`` over observed steps.

    Repeated ``(row, group)`` pairs are evaluated once.
    """
    key = compiled.step_row * max(len(compiled.dest_sets), 1) + compiled.step_group
    uniq, first, inverse = np.unique(key, return_index=True, return_inverse=True)
    p, dp = step_policy(mdp, sol.theta, sol.Z, sol.J, compiled.step_row[first],
                        compiled.step_group[first])
    return _accumulate(compiled.n_traj, compiled.step_traj, p[inverse], dp[:, inverse])


def finish(vals, grads, feasible, T) -> LogLik:
    idx = np.flatnonzero(~feasible)
    reasons = [f"trajectory {i}: zero-probability observation" for i in idx[:20]]
    if idx.size:
        log.debug("%d trajectories have zero likelihood", idx.size)
    value = -np.inf if idx.size else float(vals.sum())
    grad = grads[feasible].sum(axis=0) if feasible.any() else np.zeros(T)
    return LogLik(value, grad, int(idx.size), reasons, tuple(idx.tolist()))


def trajectory_loglik(traj: Trajectory, sol: ForwardSolution, mdp: Mdp) -> LogLik:
    """Log-likelihood of one complete trajectory given a forward solution."""
    if traj.gaps:
        raise ValidationError("trajectory has gaps; use missing.incomplete_dataset_loglik")
    n = sol.column(traj.dest)
    z = sol.Z[:, n]
    Jz = sol.J[:, :, n].T
    T = mdp.n_features
    value, grad = 0.0, np.zeros(T)
    for s, a in traj.observed_steps():
        if not z[s] >= Z_FLOOR:
            return LogLik(-np.inf, np.zeros(T), 1, [f"state {s} cannot reach {traj.dest}"], (0,))
        p = action_prob(mdp, s, a, z, sol.theta)
        if p <= 0:
            return LogLik(-np.inf, np.zeros(T), 1, [f"action {a} at {s} has zero probability"], (0,))
        value += np.log(p)
        grad += action_prob_grad(mdp, s, a, z, Jz, sol.theta) / p
    return LogLik(value, grad)


def loglik_observed(compiled: CompiledData, mdp: Mdp, theta, solver="lu") -> LogLik:
    """Observed-step log-likelihood of a compiled dataset (gaps are not scored).

    ``solver="vi"`` computes ``Z`` and its Jacobian by value iteration
    instead of the direct solve; used for timing comparisons.
    """
    T = mdp.n_features
    if compiled.n_traj == 0:
        return LogLik(0.0, np.zeros(T))
    if solver == "lu":
        sol = forward_solve(mdp, theta, compiled.dest_sets)
    elif solver == "vi":
        sol = forward_solve_vi(mdp, theta, compiled.dest_sets)
    else:
        raise ValueError(f"unknown solver {solver!r}")
    return finish(*observed_terms(compiled, mdp, sol), T)


def dataset_loglik(trajectories, mdp: Mdp, theta, solver="lu") -> LogLik:
    """Log-likelihood and gradient of complete trajectories.

    One factorization and ``T + 1`` solve batches regardless of the number
    of trajectories.
    """
    theta = mdp.check_theta(theta)
    return loglik_observed(compile_dataset(trajectories, mdp), mdp, theta, solver)
