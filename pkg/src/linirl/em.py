"""EM training baseline with depth-limited breadth-first path enumeration (EM-BFS-H).

Each missing segment ``(u, v)`` is replaced by the set of all ``u -> v``
paths with at most ``H`` transitions.  The E-step weights those paths by
their probability under the current policy (normalized over the enumerated
set); the M-step maximizes observed-step log-probabilities plus the
weighted log-probabilities of the enumerated paths.  Gaps with no
enumerated path are left out of training: the trajectory is cut there and
the observed run before such a gap is scored as a trajectory ending at the
gap's first state, exactly as in connected-segments training.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .forward import forward_solve
from .likelihood import (LogLik, _accumulate, compile_dataset, finish, observed_terms,
                         policy, policy_grad)
from .mdp import Mdp
from .missing import transition_probs

log = logging.getLogger(__name__)

MAX_PATHS = 100_000


@dataclass
class GapPathSet:
    """Enumerated paths for one missing pair and their current posterior weights."""

    traj: int
    u: int
    v: int
    group: int
    paths: list
    pair_ids: list = field(repr=False, default_factory=list)
    weights: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def active(self) -> bool:
        return bool(self.paths) and self.weights.size == len(self.paths) and self.weights.sum() > 0


def _distance_to(mdp: Mdp, v: int) -> np.ndarray:
    """Shortest number of transitions from every state to ``v`` (inf if unreachable)."""
    dist = np.full(mdp.n_states, np.inf)
    dist[v] = 0
    preds = [[] for _ in range(mdp.n_states)]
    for s, s2 in zip(mdp.pair_src.tolist(), mdp.pair_dst.tolist()):
        preds[s2].append(s)
    queue = deque([v])
    while queue:
        x = queue.popleft()
        for p in preds[x]:
            if dist[p] == np.inf:
                dist[p] = dist[x] + 1
                queue.append(p)
    return dist


def bfs_paths(mdp: Mdp, u: int, v: int, H: int, max_paths: int = MAX_PATHS) -> list[tuple]:
    """All ``u -> v`` paths with at most ``H`` transitions, in breadth-first order.

    States may repeat (no visited marking).  Successors are expanded in
    ascending index order.  Partial paths that cannot reach ``v`` within
    the remaining depth are pruned, which does not change the result.
    """
    if H < 1:
        raise ValidationError("BFS depth must be at least 1")
    dist = _distance_to(mdp, v)
    found = []
    if dist[u] > H:
        return found
    frontier = [(u,)]
    for depth in range(1, H + 1):
        nxt = []
        remaining = H - depth
        for path in frontier:
            for s2 in mdp.successors(path[-1]).tolist():
                if dist[s2] > remaining:
                    continue
                p2 = path + (s2,)
                if s2 == v:
                    found.append(p2)
                    if len(found) > max_paths:
                        raise ValidationError(
                            f"more than {max_paths} paths between {u} and {v} at depth {H}")
                nxt.append(p2)
        frontier = nxt
    return found


def enumerate_gaps(trajectories, mdp: Mdp, H: int, compiled=None, cache=None) -> list[GapPathSet]:
    """Enumerate paths for every gap; ``cache`` maps ``(u, v)`` to known path lists."""
    if compiled is None:
        compiled = compile_dataset(trajectories, mdp, gaps="include")
    cache = {} if cache is None else cache
    out = []
    for traj, u, v, g in zip(compiled.gap_traj.tolist(), compiled.gap_u.tolist(),
                             compiled.gap_v.tolist(), compiled.gap_group.tolist()):
        if (u, v) not in cache:
            cache[(u, v)] = bfs_paths(mdp, u, v, H)
        paths = cache[(u, v)]
        ids = [np.array([mdp.pair_id(a, b) for a, b in zip(p, p[1:])], dtype=np.int64)
               for p in paths]
        out.append(GapPathSet(traj, u, v, g, paths, ids))
    n_empty = sum(1 for gs in out if not gs.paths)
    if n_empty:
        log.info("%d of %d gaps have no path within depth %d and are omitted",
                 n_empty, len(out), H)
    return out


def _group_transitions(mdp: Mdp, sol, gapsets) -> dict:
    """State-transition probabilities for every group that has an enumerated gap."""
    groups = sorted({gs.group for gs in gapsets if gs.paths})
    if not groups:
        return {}
    P = policy(mdp, sol.theta, sol.Z[:, groups])
    return {g: transition_probs(mdp, P[:, col]) for col, g in enumerate(groups)}


def _path_probs(gs: GapPathSet, trans) -> np.ndarray:
    return np.array([np.prod(trans[ids]) for ids in gs.pair_ids])


def e_step(gapsets: list[GapPathSet], mdp: Mdp, theta, dest_sets) -> list[GapPathSet]:
    """Set each gap's path weights to their normalized policy probabilities at ``theta``."""
    if not gapsets:
        return gapsets
    sol = forward_solve(mdp, theta, dest_sets)
    trans = _group_transitions(mdp, sol, gapsets)
    for gs in gapsets:
        if not gs.paths:
            gs.weights = np.zeros(0)
            continue
        probs = _path_probs(gs, trans[gs.group])
        total = probs.sum()
        if total <= 0:
            log.warning("gap (%d, %d): every enumerated path has zero probability; omitted",
                        gs.u, gs.v)
            gs.weights = np.zeros(len(gs.paths))
        else:
            gs.weights = probs / total
    return gapsets


def _pair_counts(gapsets, n_groups, n_pairs):
    counts = np.zeros((n_groups, n_pairs))
    for gs in gapsets:
        if not gs.active:
            continue
        for w, ids in zip(gs.weights, gs.pair_ids):
            if w > 0:
                np.add.at(counts[gs.group], ids, w)
    return counts


def m_step_objective(compiled, gapsets, mdp: Mdp):
    """Surrogate maximized by the M-step, as a ``theta -> LogLik`` callable.

    Value: observed-step log-likelihood of the connected runs plus
    ``sum_gaps sum_h w_h ln P(path_h | theta)``.
    """
    counts = _pair_counts(gapsets, len(compiled.dest_sets), mdp.pair_src.size)
    used = [np.flatnonzero(counts[g]) for g in range(counts.shape[0])]
    T = mdp.n_features

    def fun(theta) -> LogLik:
        if compiled.n_traj == 0:
            return LogLik(0.0, np.zeros(T))
        sol = forward_solve(mdp, theta, compiled.dest_sets)
        out = finish(*observed_terms(compiled, mdp, sol), T)
        groups = [g for g, ids in enumerate(used) if ids.size]
        if groups:
            P, dP = policy_grad(mdp, sol.theta, sol.Z[:, groups], sol.J[:, :, groups])
        for col, g in enumerate(groups):
            ids = used[g]
            tr = transition_probs(mdp, P[:, col])[ids]
            dtr = np.array([transition_probs(mdp, dP[t, :, col])[ids] for t in range(T)])
            c = counts[g, ids]
            if np.any(tr <= 0):
                return LogLik(-np.inf, np.zeros(T), 1, ["weighted path has zero probability"])
            out.value += float(c @ np.log(tr))
            out.grad = out.grad + dtr @ (c / tr)
        return out

    return fun


def m_step(compiled, gapsets, mdp: Mdp, theta0, config):
    """Maximize the surrogate starting at ``theta0``; returns the optimizer result."""
    from .trainer import feature_scale, maximize
    return maximize(m_step_objective(compiled, gapsets, mdp), theta0, config,
                    scale=feature_scale(mdp))


def enumerated_loglik(compiled, gapsets, mdp: Mdp, theta) -> float:
    """Observed log-likelihood plus ``ln sum_h P(path_h)`` for every non-empty gap.

    This is the incomplete-data likelihood restricted to the enumerated
    paths; with exhaustive enumeration on acyclic graphs it equals the
    composition likelihood.
    """
    sol = forward_solve(mdp, theta, compiled.dest_sets)
    T = mdp.n_features
    vals, grads, feasible = observed_terms(compiled, mdp, sol)
    active = [gs for gs in gapsets if gs.paths]
    if active:
        trans = _group_transitions(mdp, sol, active)
        probs = np.array([_path_probs(gs, trans[gs.group]).sum() for gs in active])
        tidx = np.array([gs.traj for gs in active], dtype=np.int64)
        gvals, _, feasible = _accumulate(compiled.n_traj, tidx, probs,
                                         np.zeros((T, probs.size)), feasible)
        vals = vals + gvals
    return finish(vals, grads, feasible, T).value


def split_unreachable(trajectories, mdp: Mdp, H: int, cache=None) -> list:
    """Cut trajectories at gaps with no path of at most ``H`` transitions.

    Pieces without an observed action or a remaining gap carry no
    information and are dropped.
    """
    cache = {} if cache is None else cache

    def no_path(_j, gap):
        if (gap.u, gap.v) not in cache:
            cache[(gap.u, gap.v)] = bfs_paths(mdp, gap.u, gap.v, H)
        return not cache[(gap.u, gap.v)]

    pieces = [p for t in trajectories for p in t.split(no_path)]
    n_cut = len(pieces) - len(trajectories)
    if n_cut:
        log.info("%d gaps have no path within depth %d; their trajectories are cut there",
                 n_cut, H)
    return [p for p in pieces if p.observed_steps() or p.gaps]


def em_train(trajectories, mdp: Mdp, H: int, outer_iters: int, theta0, config=None):
    """Alternate E- and M-steps until ``max|theta_new - theta| < config.em_tol``.

    Returns a :class:`~linirl.trainer.TrainReport` whose trace has one
    entry per outer iteration (surrogate value, enumerated log-likelihood).
    """
    from .trainer import TrainConfig, TrainReport
    if outer_iters < 1:
        raise ValidationError("outer_iters must be at least 1")
    config = config or TrainConfig(mode="em_bfs", bfs_depth=H)
    pieces = split_unreachable(trajectories, mdp, H, cache := {})
    compiled = compile_dataset(pieces, mdp, gaps="include")
    observed_only = compile_dataset(pieces, mdp, gaps="ignore", validate=False)
    gapsets = enumerate_gaps(pieces, mdp, H, compiled, cache)
    theta = mdp.check_theta(theta0)
    trace, eval_times, factor_times = [], [], []
    converged = False
    res = None
    it = 0
    for it in range(1, outer_iters + 1):
        e_step(gapsets, mdp, theta, compiled.dest_sets)
        res = m_step(observed_only, gapsets, mdp, theta, config)
        eval_times += res.eval_times
        factor_times += res.factor_times
        change = float(np.max(np.abs(res.theta - theta), initial=0.0))
        theta = res.theta
        trace.append({"iter": it, "surrogate": res.value, "theta_change": change,
                      "inner_iters": res.iterations,
                      "loglik": enumerated_loglik(observed_only, gapsets, mdp, theta)})
        if change < config.em_tol or not any(gs.paths for gs in gapsets):
            converged = True
            break
    message = "theta change below tolerance" if converged else "outer_iters reached"
    return TrainReport(theta, it, trace[-1]["loglik"], converged, message, "em_bfs",
                       eval_times, factor_times, trace)
