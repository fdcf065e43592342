"""Reach probabilities for missing segments and the incomplete-data likelihood.

For a destination group with policy ``P(a|s)``, the matrix ``Q0`` has

    Q0[s, s'] = sum_a p(s|a, s') P(a|s')          for s, s' in S

plus an artificial last row and column of zeros.  Stacking one column per
missing pair ``(u_k, v_k)`` in ``D`` (ones at ``u_k`` and at the artificial
index), a single solve of ``(I - Q0) Pi = D`` yields every
``P(v_k|u_k) = Pi[v_k, k]``; the gradients reuse the same factorization.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import NumericalError, ValidationError
from .forward import LuFactors, factorize, forward_solve
from .likelihood import (CompiledData, LogLik, _accumulate, compile_dataset, finish,
                         observed_terms, policy_grad)
from .mdp import Mdp

log = logging.getLogger(__name__)

CLAMP_TOL = 1e-9


@dataclass(frozen=True)
class MissingPair:
    u: int
    v: int
    group: int = 0

    def __post_init__(self):
        if self.u == self.v:
            raise ValidationError("missing pair endpoints must differ")


@dataclass
class ReachSolution:
    """``Pi`` of shape ``(|S|+1, K)`` and optionally ``J`` of shape ``(T, |S|+1, K)``."""

    Pi: np.ndarray
    factors: LuFactors = field(repr=False)
    J: np.ndarray | None = None

    def prob(self, v, k) -> float:
        return float(self.Pi[v, k])


def _check_normalized(mdp: Mdp, P, tol=1e-8):
    sums = np.bincount(mdp.sa_state, weights=P, minlength=mdp.n_states)
    has_rows = np.bincount(mdp.sa_state, minlength=mdp.n_states) > 0
    bad = has_rows & (np.abs(sums - 1.0) > tol) & (np.abs(sums) > tol)
    if np.any(bad):
        s = int(np.flatnonzero(bad)[0])
        raise ValidationError(f"policy at state {s} sums to {sums[s]:.12g}, not 1")


def _state_transitions(mdp: Mdp, weights):
    """Aggregate per-kernel-entry weights onto unique (s, s2) pairs."""
    return np.bincount(mdp.pair_index, weights=weights, minlength=mdp.pair_src.size)


def _augmented(mdp: Mdp, pair_values) -> sp.csr_matrix:
    n = mdp.n_states + 1
    # Q0 is indexed [successor, predecessor]
    return sp.csr_matrix((pair_values, (mdp.pair_dst, mdp.pair_src)), shape=(n, n))


def transition_probs(mdp: Mdp, P) -> np.ndarray:
    """``sum_a p(s2|a,s) P(a|s)`` for every unique transition pair of ``mdp``."""
    return _state_transitions(mdp, mdp.k_prob * P[mdp.k_row])


def build_q0(mdp: Mdp, P, check=True) -> sp.csr_matrix:
    """Sparse ``(|S|+1) x (|S|+1)`` matrix ``Q0`` for one group's policy ``P`` (per kernel row)."""
    P = np.asarray(P, dtype=float)
    if P.shape != (mdp.n_sa,):
        raise ValidationError(f"policy must have one entry per kernel row ({mdp.n_sa})")
    if check:
        _check_normalized(mdp, P)
    return _augmented(mdp, transition_probs(mdp, P))


def build_q0_grads(mdp: Mdp, dP) -> list[sp.csr_matrix]:
    """``dQ0/dtheta_t`` assembled from the policy gradients ``dP`` of shape ``(T, n_sa)``."""
    return [_augmented(mdp, _state_transitions(mdp, mdp.k_prob * dP[t][mdp.k_row]))
            for t in range(dP.shape[0])]


def build_d(sources, n_states: int) -> np.ndarray:
    """``D[s, k] = 1`` if ``s`` is the artificial state or ``s = u_k``."""
    sources = [p.u if isinstance(p, MissingPair) else int(p) for p in sources]
    D = np.zeros((n_states + 1, len(sources)))
    if sources:
        D[n_states, :] = 1.0
        D[sources, np.arange(len(sources))] = 1.0
    return D


def solve_reach(Q0, D) -> ReachSolution:
    """Factorize ``I - Q0`` once and solve ``(I - Q0) Pi = D``."""
    try:
        factors = factorize(Q0)
        Pi = factors.solve(D)
    except NumericalError as exc:
        raise NumericalError(f"reach system failed (is the policy normalized?): {exc}") from exc
    return ReachSolution(Pi, factors)


def solve_reach_single(mdp: Mdp, P, u: int) -> np.ndarray:
    """Per-source reach vector: ``(I - Q^u) pi = e_u`` with row ``u`` of ``Q^u`` zeroed."""
    Q = build_q0(mdp, P)[:mdp.n_states, :mdp.n_states].tolil()
    Q[u, :] = 0.0
    d = np.zeros(mdp.n_states)
    d[u] = 1.0
    return factorize(Q.tocsr()).solve(d)


def reach_grad(factors: LuFactors, dQ0, Pi) -> np.ndarray:
    """``dPi/dtheta_t = (I - Q0)^{-1} (dQ0/dtheta_t) Pi``, one solve batch per feature."""
    out = np.empty((len(dQ0),) + Pi.shape)
    for t, dQ in enumerate(dQ0):
        out[t] = factors.solve(dQ @ Pi)
    return out


def _clamp(prob):
    """Clamp round-off excursions outside [0, 1]; values above 1 + tol are kept."""
    prob = prob.copy()
    low = prob < 0
    if np.any(prob < -CLAMP_TOL):
        raise NumericalError(f"negative reach probability {prob.min():.3e}")
    near_one = (prob > 1.0) & (prob <= 1.0 + CLAMP_TOL)
    if np.any(low) or np.any(near_one):
        mag = max(float(-prob[low].min()) if low.any() else 0.0,
                  float(prob[near_one].max() - 1.0) if near_one.any() else 0.0)
        log.debug("clamped %d reach probabilities (max excursion %.2e)",
                  int(low.sum() + near_one.sum()), mag)
    prob[low] = 0.0
    prob[near_one] = 1.0
    return prob


def group_reach(mdp: Mdp, P, dP, pairs_u, pairs_v):
    """Reach probabilities and gradients for all gaps of one destination group.

    Gaps sharing a source share a column of ``D``.  Returns
    ``(prob, dprob)`` with shapes ``(K,)`` and ``(T, K)``.
    """
    sources, col = np.unique(pairs_u, return_inverse=True)
    Q0 = build_q0(mdp, P)
    sol = solve_reach(Q0, build_d(sources, mdp.n_states))
    J = reach_grad(sol.factors, build_q0_grads(mdp, dP), sol.Pi)
    prob = _clamp(sol.Pi[pairs_v, col])
    return prob, J[:, pairs_v, col]


def composition_loglik(compiled: CompiledData, mdp: Mdp, theta) -> LogLik:
    """Incomplete-data log-likelihood of a compiled dataset.

    Solves ``(T + 1)`` batches for ``Z`` and its Jacobian, then ``(T + 1)``
    batches per destination group that has missing segments.
    """
    T = mdp.n_features
    if compiled.n_traj == 0:
        return LogLik(0.0, np.zeros(T))
    sol = forward_solve(mdp, theta, compiled.dest_sets)
    vals, grads, feasible = observed_terms(compiled, mdp, sol)
    if compiled.n_gaps:
        gap_groups = np.unique(compiled.gap_group)
        P, dP = policy_grad(mdp, sol.theta, sol.Z[:, gap_groups], sol.J[:, :, gap_groups])
        prob = np.empty(compiled.n_gaps)
        dprob = np.empty((T, compiled.n_gaps))
        for col, g in enumerate(gap_groups):
            idx = np.flatnonzero(compiled.gap_group == g)
            try:
                prob[idx], dprob[:, idx] = group_reach(
                    mdp, P[:, col], dP[:, :, col], compiled.gap_u[idx], compiled.gap_v[idx])
            except ValidationError as exc:
                # the policy comes from z, so a normalization failure is round-off
                raise NumericalError(f"policy not normalized at theta={sol.theta.tolist()}: "
                                     f"{exc}") from exc
        gvals, ggrads, feasible = _accumulate(compiled.n_traj, compiled.gap_traj, prob, dprob,
                                              feasible)
        vals = vals + gvals
        grads = grads + ggrads
    return finish(vals, grads, feasible, T)


def incomplete_dataset_loglik(trajectories, mdp: Mdp, theta) -> LogLik:
    """Log-likelihood and gradient of trajectories with missing segments."""
    theta = mdp.check_theta(theta)
    return composition_loglik(compile_dataset(trajectories, mdp, gaps="include"), mdp, theta)
