"""Synthetic road networks, trajectory sampling and missing-segment generation."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse import csgraph

from .data import Gap, Observed, Trajectory
from .errors import NumericalError, ValidationError
from .forward import forward_solve
from .likelihood import policy
from .mdp import Mdp, check_condition_i, check_condition_ii

log = logging.getLogger(__name__)

FEATURES = ("left_turn", "u_turn", "incidence", "travel_time")
FEATURE_KINDS = ("bool", "bool", "bool", "real")
TRAVEL_TIME_RANGE = (10.0, 120.0)
MAX_RESAMPLES = 100


@dataclass(frozen=True)
class GridNetwork:
    """Directed links of an ``rows x cols`` grid; every link is one MDP state."""

    rows: int
    cols: int
    link_nodes: np.ndarray  # (n_links, 2) tail and head intersection ids
    travel_time: np.ndarray  # seconds, per link

    @property
    def n_links(self) -> int:
        return self.link_nodes.shape[0]

    def node_xy(self, node):
        return node % self.cols, node // self.cols


def _turn(net: GridNetwork, l1: int, l2: int) -> str:
    a, b = net.link_nodes[l1]
    _, c = net.link_nodes[l2]
    ax, ay = net.node_xy(a)
    bx, by = net.node_xy(b)
    cx, cy = net.node_xy(c)
    d1 = (bx - ax, by - ay)
    d2 = (cx - bx, cy - by)
    if d2 == (-d1[0], -d1[1]):
        return "u"
    cross = d1[0] * d2[1] - d1[1] * d2[0]
    if cross > 0:
        return "left"
    if cross < 0:
        return "right"
    return "straight"


def gen_grid(n: int, m: int, rng_seed: int = 0):
    """Grid road network with ``n x m`` intersections.

    States are directed links.  A transition joins every link to every link
    leaving its head node, U-turns included, so the network is cyclic.
    Features per transition: left-turn and U-turn indicators, a constant
    incidence of 1 and the travel time of the entered link.
    """
    if n < 2 or m < 2:
        raise ValidationError("grid needs at least 2 rows and 2 columns")
    rng = np.random.default_rng(rng_seed)
    links = []
    for i in range(n):
        for j in range(m):
            a = i * m + j
            if j + 1 < m:
                links += [(a, a + 1), (a + 1, a)]
            if i + 1 < n:
                links += [(a, a + m), (a + m, a)]
    link_nodes = np.array(links, dtype=np.int64)
    tt = rng.uniform(*TRAVEL_TIME_RANGE, size=len(links))
    net = GridNetwork(n, m, link_nodes, tt)

    out_links = [[] for _ in range(n * m)]
    for lid, (a, _) in enumerate(links):
        out_links[a].append(lid)
    src, dst, feats = [], [], []
    for l1, (_, b) in enumerate(links):
        for l2 in out_links[b]:
            kind = _turn(net, l1, l2)
            src.append(l1)
            dst.append(l2)
            feats.append([float(kind == "left"), float(kind == "u"), 1.0, tt[l2]])
    mdp = Mdp.from_edges(len(links), src, dst, np.array(feats), FEATURES)
    return net, mdp


def random_od_pairs(mdp: Mdp, n_dest: int, n_pairs: int, rng_seed: int = 0):
    """Random origin-destination pairs with ``n_dest`` distinct destinations.

    Returns ``(od_pairs, absorbing_mdp)``; the destinations are made
    absorbing in the returned MDP.  Pairs whose origin cannot reach the
    destination in that MDP are redrawn.
    """
    rng = np.random.default_rng(rng_seed)
    dests = rng.choice(mdp.n_states, size=n_dest, replace=False)
    amdp = mdp.with_absorbing(dests.tolist())
    candidates = np.setdiff1d(np.arange(mdp.n_states), dests)
    reaches = {int(d): _can_reach(amdp, int(d)) for d in dests}
    if not any(r[candidates].any() for r in reaches.values()):
        raise ValidationError("no origin can reach any destination")
    pairs = []
    for _ in range(n_pairs):
        o, d = int(rng.choice(candidates)), int(rng.choice(dests))
        while not reaches[d][o]:
            # other destinations, now absorbing, can cut an origin off: redraw the pair
            o, d = int(rng.choice(candidates)), int(rng.choice(dests))
        pairs.append((o, d))
    return pairs, amdp


def _can_reach(mdp: Mdp, d: int) -> np.ndarray:
    """Boolean mask of states from which ``d`` is reachable."""
    A = sp.csr_matrix((np.ones(mdp.pair_src.size), (mdp.pair_dst, mdp.pair_src)),
                      shape=(mdp.n_states, mdp.n_states))
    order = csgraph.breadth_first_order(A, d, directed=True, return_predecessors=False)
    mask = np.zeros(mdp.n_states, dtype=bool)
    mask[order] = True
    return mask


def sample_trajectories(mdp: Mdp, theta, N: int, od_pairs, rng_seed: int = 0,
                        check=True) -> list[Trajectory]:
    """Sample ``N`` complete trajectories by walking the policy at ``theta``.

    Each trajectory picks an OD pair uniformly from ``od_pairs`` and stops on
    reaching the destination.  Walks longer than ``10 |S|`` steps are
    resampled.
    """
    theta = mdp.check_theta(theta)
    if check and not check_condition_i(mdp):
        ok, tau = check_condition_ii(mdp, theta)
        if not ok:
            raise ValidationError(
                f"theta gives max row sum tau={tau:.4g} >= 1 on a cyclic network; "
                "use more negative rewards")
    if N == 0:
        return []
    od_pairs = [(int(o), int(d)) for o, d in od_pairs]
    if not od_pairs:
        raise ValidationError("no OD pairs given")
    dests = sorted({d for _, d in od_pairs})
    sol = forward_solve(mdp, theta, [{d} for d in dests])
    P = policy(mdp, theta, sol.Z)
    for o, d in od_pairs:
        if sol.Z[o, dests.index(d)] <= 0:
            raise ValidationError(f"destination {d} is unreachable from origin {o}")

    order = np.argsort(mdp.sa_state, kind="stable")
    starts = np.searchsorted(mdp.sa_state[order], np.arange(mdp.n_states + 1))
    K = mdp.kernel
    rng = np.random.default_rng(rng_seed)
    cap = 10 * mdp.n_states
    out = []
    for _ in range(N):
        o, d = od_pairs[rng.integers(len(od_pairs))]
        g = dests.index(d)
        for _attempt in range(MAX_RESAMPLES):
            s, steps = o, []
            while s != d and len(steps) < cap:
                rows = order[starts[s]:starts[s + 1]]
                p = P[rows, g]
                i = rows[np.searchsorted(np.cumsum(p), rng.random() * p.sum(), side="right")
                         .clip(max=rows.size - 1)]
                lo, hi = K.indptr[i], K.indptr[i + 1]
                q = K.data[lo:hi]
                j = np.searchsorted(np.cumsum(q), rng.random() * q.sum(), side="right")
                steps.append((s, int(mdp.sa_action[i])))
                s = int(K.indices[lo + min(j, hi - lo - 1)])
            if s == d:
                out.append(Trajectory.complete(steps + [(d, None)], d))
                break
        else:
            raise NumericalError(
                f"{MAX_RESAMPLES} walks from {o} exceeded {cap} steps; use more negative theta")
    return out


def apply_missing(dataset, p: float, rng_seed: int = 0) -> list[Trajectory]:
    """Remove one consecutive window of interior states from each trajectory.

    For a trajectory of ``l`` states the window length is drawn from
    ``Binomial(l - 2, p)`` and its position uniformly among the placements
    that keep origin and destination.  The window is replaced by a gap.
    """
    if not 0 <= p <= 1:
        raise ValidationError(f"missing probability must lie in [0, 1], got {p}")
    rng = np.random.default_rng(rng_seed)
    out = []
    for traj in dataset:
        if not traj.is_complete:
            raise ValidationError("apply_missing expects complete trajectories")
        steps = traj.segments[0].steps
        l = len(steps)
        if l < 3:
            out.append(traj)
            continue
        L = int(rng.binomial(l - 2, p))
        if L == 0:
            out.append(traj)
            continue
        start = int(rng.integers(1, l - L))
        u_i, v_i = start - 1, start + L
        if steps[u_i][0] == steps[v_i][0]:
            # a gap needs distinct endpoints; try the other placements in random order
            options = [st for st in range(1, l - L) if steps[st - 1][0] != steps[st + L][0]]
            if not options:
                out.append(traj)
                continue
            start = options[int(rng.integers(len(options)))]
            u_i, v_i = start - 1, start + L
        u, v = steps[u_i][0], steps[v_i][0]
        first = Observed(tuple(steps[:u_i]) + ((u, None),))
        rest = Observed(tuple(steps[v_i:]))
        out.append(Trajectory((first, Gap(u, v), rest), traj.dest))
    return out
