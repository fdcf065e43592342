"""MDP representation, linear-in-parameters rewards and the M matrix.

States are integers ``0..n_states-1``.  The transition kernel is stored as a
sparse matrix with one row per available (state, action) pair, so stochastic
and deterministic kernels share one code path.  Features are pairwise,
``f(s'|s)``, one sparse ``n_states x n_states`` matrix per feature.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import NumericalError, UnknownTransitionError, ValidationError

# exp(709.78) overflows a double
_MAX_EXPONENT = 700.0


def _frozen(a, dtype=None):
    a = np.ascontiguousarray(a, dtype=dtype)
    a.setflags(write=False)
    return a


class Mdp:
    """Finite MDP with a sparse kernel, pairwise features and absorbing states.

    Parameters
    ----------
    n_states
        Number of states.
    sa_state, sa_action
        State and action id of every kernel row.
    kernel
        Sparse ``(n_sa, n_states)`` matrix; row ``i`` holds ``p(.|a_i, s_i)``.
    features
        Sequence of ``T`` sparse ``(n_states, n_states)`` matrices with
        ``F[t][s, s2] = f(s2|s)_t``.  Entries outside the support read as 0.
    feature_names
        Optional names, one per feature.
    absorbing
        Zero-reward absorbing states.  They must have no kernel rows.
    """

    def __init__(self, n_states: int, sa_state, sa_action, kernel, features: Sequence,
                 feature_names: Sequence[str] | None = None, absorbing: Iterable[int] = ()):
        n_states = int(n_states)
        if n_states < 0:
            raise ValidationError("n_states must be non-negative")
        self.n_states = n_states
        self.sa_state = _frozen(sa_state, np.int64)
        self.sa_action = _frozen(sa_action, np.int64)
        n_sa = self.sa_state.shape[0]
        if self.sa_action.shape != (n_sa,):
            raise ValidationError("sa_state and sa_action must have equal length")
        if n_sa and (self.sa_state.min() < 0 or self.sa_state.max() >= n_states):
            raise ValidationError("sa_state entries out of range")

        kernel = sp.csr_matrix(kernel, dtype=float, shape=(n_sa, n_states))
        kernel.sum_duplicates()
        kernel.sort_indices()
        kernel.eliminate_zeros()
        if kernel.nnz and (kernel.data.min() < 0 or kernel.data.max() > 1 + 1e-12):
            raise ValidationError("transition probabilities must lie in [0, 1]")
        row_sums = np.asarray(kernel.sum(axis=1)).ravel()
        bad = np.flatnonzero(np.abs(row_sums - 1.0) > 1e-9)
        if bad.size:
            i = bad[0]
            raise ValidationError(
                f"kernel row for (s={self.sa_state[i]}, a={self.sa_action[i]}) sums to {row_sums[i]}")
        self.kernel = kernel

        self._sa_index = {}
        for i, key in enumerate(zip(self.sa_state.tolist(), self.sa_action.tolist())):
            if key in self._sa_index:
                raise ValidationError(f"duplicate (state, action) pair {key}")
            self._sa_index[key] = i

        feats = [sp.csr_matrix(F, dtype=float, shape=(n_states, n_states)) for F in features]
        for F in feats:
            F.sum_duplicates()
            F.sort_indices()
        self.features = tuple(feats)
        if feature_names is None:
            feature_names = [f"feat_{t + 1}" for t in range(len(feats))]
        if len(feature_names) != len(feats):
            raise ValidationError("one name per feature is required")
        self.feature_names = tuple(feature_names)

        self.absorbing = frozenset(int(s) for s in absorbing)
        for s in self.absorbing:
            if not 0 <= s < n_states:
                raise ValidationError(f"absorbing state {s} out of range")
        if n_sa and self.absorbing:
            leaking = sorted(self.absorbing & set(self.sa_state.tolist()))
            if leaking:
                raise ValidationError(
                    f"absorbing states have outgoing transitions: {leaking[:10]}")

        # one entry per stored kernel probability, in CSR order
        k = kernel.tocoo()
        self.k_row = _frozen(k.row, np.int64)
        self.k_col = _frozen(k.col, np.int64)
        self.k_prob = _frozen(k.data, float)
        self.k_src = _frozen(self.sa_state[self.k_row], np.int64)
        feat = np.zeros((self.k_row.size, len(feats)))
        for t, F in enumerate(feats):
            if self.k_row.size:
                feat[:, t] = np.asarray(F[self.k_src, self.k_col]).ravel()
        self.k_feat = _frozen(feat)

        # unique (s, s2) transition pairs, sorted row-major
        keys = self.k_src * n_states + self.k_col
        ukeys, inverse = np.unique(keys, return_inverse=True)
        self.pair_src = _frozen(ukeys // max(n_states, 1), np.int64)
        self.pair_dst = _frozen(ukeys % max(n_states, 1), np.int64)
        self.pair_index = _frozen(inverse.ravel(), np.int64)
        self._pair_lookup = {int(key): i for i, key in enumerate(ukeys.tolist())}
        indptr = np.zeros(n_states + 1, dtype=np.int64)
        np.add.at(indptr, self.pair_src + 1, 1)
        self._pair_indptr = _frozen(np.cumsum(indptr))

    # ------------------------------------------------------------------
    # constructors

    @classmethod
    def from_edges(cls, n_states, src, dst, feature_values, feature_names=None, absorbing=()):
        """Deterministic MDP: every directed edge is one action.

        The action id of edge ``s -> s2`` is ``s2``.  ``feature_values`` has
        shape ``(n_edges, T)``.
        """
        src = np.asarray(src, dtype=np.int64)
        dst = np.asarray(dst, dtype=np.int64)
        fv = np.asarray(feature_values, dtype=float)
        if fv.ndim == 1:
            fv = fv[:, None]
        if not (src.shape == dst.shape and fv.shape[0] == src.shape[0]):
            raise ValidationError("edge arrays have inconsistent lengths")
        n_edges = src.size
        if n_edges and (min(src.min(), dst.min()) < 0 or max(src.max(), dst.max()) >= n_states):
            raise ValidationError("edge endpoint out of range")
        keys = src * n_states + dst
        if np.unique(keys).size != n_edges:
            raise ValidationError("duplicate edges")
        order = np.argsort(keys, kind="stable")
        src, dst, fv = src[order], dst[order], fv[order]
        kernel = sp.csr_matrix((np.ones(n_edges), (np.arange(n_edges), dst)),
                               shape=(n_edges, n_states))
        feats = [sp.csr_matrix((fv[:, t], (src, dst)), shape=(n_states, n_states))
                 for t in range(fv.shape[1])]
        return cls(n_states, src, dst, kernel, feats, feature_names, absorbing)

    @classmethod
    def from_transitions(cls, n_states, transitions, features, feature_names=None, absorbing=()):
        """General MDP from ``(s, a, s2, prob)`` tuples and sparse feature matrices."""
        rows = {}
        r_idx, c_idx, vals = [], [], []
        for s, a, s2, p in transitions:
            key = (int(s), int(a))
            if key not in rows:
                rows[key] = len(rows)
            r_idx.append(rows[key])
            c_idx.append(int(s2))
            vals.append(float(p))
        keys = list(rows)
        sa_state = [k[0] for k in keys]
        sa_action = [k[1] for k in keys]
        kernel = sp.csr_matrix((vals, (r_idx, c_idx)), shape=(len(keys), n_states))
        return cls(n_states, sa_state, sa_action, kernel, features, feature_names, absorbing)

    def with_absorbing(self, states) -> "Mdp":
        """Copy with ``states`` made absorbing (their outgoing rows are dropped)."""
        states = frozenset(int(s) for s in states) | self.absorbing
        keep = ~np.isin(self.sa_state, list(states))
        return Mdp(self.n_states, self.sa_state[keep], self.sa_action[keep],
                   self.kernel[keep], self.features, self.feature_names, states)

    # ------------------------------------------------------------------
    # queries

    @property
    def n_features(self) -> int:
        return len(self.features)

    @property
    def n_sa(self) -> int:
        return self.sa_state.size

    def sa_row(self, s, a) -> int:
        try:
            return self._sa_index[(int(s), int(a))]
        except KeyError:
            raise ValidationError(f"action {a} is not available at state {s}") from None

    def has_sa(self, s, a) -> bool:
        return (int(s), int(a)) in self._sa_index

    def actions(self, s) -> list[int]:
        return [int(a) for a in self.sa_action[self.sa_state == s]]

    def pair_id(self, s, s2) -> int:
        i = self._pair_lookup.get(int(s) * self.n_states + int(s2))
        if i is None:
            raise UnknownTransitionError(s, s2)
        return i

    def successors(self, s) -> np.ndarray:
        """States reachable in one step from ``s``, ascending."""
        return self.pair_dst[self._pair_indptr[s]:self._pair_indptr[s + 1]]

    def kernel_entry(self, row, s2) -> float:
        """``kernel[row, s2]`` read straight from the sorted CSR row."""
        k = self.kernel
        lo, hi = k.indptr[row], k.indptr[row + 1]
        j = lo + int(np.searchsorted(k.indices[lo:hi], s2))
        return float(k.data[j]) if j < hi and k.indices[j] == s2 else 0.0

    def transition_prob(self, s, a, s2) -> float:
        return self.kernel_entry(self.sa_row(s, a), s2)

    def feature_vector(self, s, s2) -> np.ndarray:
        return np.array([F[s, s2] for F in self.features])

    def check_theta(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float).ravel()
        if theta.shape != (self.n_features,):
            raise ValidationError(
                f"theta has length {theta.size}, expected {self.n_features}")
        if not np.all(np.isfinite(theta)):
            raise ValidationError("theta has non-finite entries")
        return theta

    def __repr__(self):
        return (f"Mdp(n_states={self.n_states}, n_sa={self.n_sa}, "
                f"n_features={self.n_features}, n_absorbing={len(self.absorbing)})")


def reward(mdp: Mdp, s: int, s2: int, theta) -> float:
    """``theta . f(s2|s)`` for a transition in the kernel support."""
    mdp.pair_id(s, s2)
    theta = mdp.check_theta(theta)
    return float(mdp.feature_vector(s, s2) @ theta)


def exp_rewards(mdp: Mdp, theta) -> np.ndarray:
    """``exp(r)`` for every stored kernel entry."""
    theta = mdp.check_theta(theta)
    r = mdp.k_feat @ theta
    if r.size and r.max() > _MAX_EXPONENT:
        i = int(np.argmax(r))
        raise NumericalError(
            f"reward {r[i]:.4g} on transition ({mdp.k_src[i]}, {mdp.k_col[i]}) overflows exp; "
            "rewards are expected to be mostly negative (costs)")
    return np.exp(r)


def _pair_matrix(mdp: Mdp, values) -> sp.csr_matrix:
    data = np.bincount(mdp.pair_index, weights=values, minlength=mdp.pair_src.size)
    indptr = np.asarray(mdp._pair_indptr)
    return sp.csr_matrix((data, mdp.pair_dst.copy(), indptr.copy()),
                         shape=(mdp.n_states, mdp.n_states))


def build_m(mdp: Mdp, theta) -> sp.csr_matrix:
    """``M[s, s2] = sum_a p(s2|a, s) exp(r(s2|s))`` in CSR form."""
    return _pair_matrix(mdp, mdp.k_prob * exp_rewards(mdp, theta))


def build_m_grads(mdp: Mdp, theta) -> list[sp.csr_matrix]:
    """``dM/dtheta_t = M o F^t`` for every feature, sharing M's sparsity."""
    w = mdp.k_prob * exp_rewards(mdp, theta)
    return [_pair_matrix(mdp, w * mdp.k_feat[:, t]) for t in range(mdp.n_features)]


def check_condition_i(mdp: Mdp) -> bool:
    """True iff the transition support graph is acyclic (self-loops count as cycles)."""
    n = mdp.n_states
    if np.any(mdp.pair_src == mdp.pair_dst):
        return False
    indeg = np.bincount(mdp.pair_dst, minlength=n)
    stack = list(np.flatnonzero(indeg == 0))
    seen = 0
    while stack:
        s = stack.pop()
        seen += 1
        for s2 in mdp.successors(s):
            indeg[s2] -= 1
            if indeg[s2] == 0:
                stack.append(s2)
    return seen == n


def check_condition_ii(mdp: Mdp, theta) -> tuple[bool, float]:
    """Return ``(tau < 1, tau)`` where ``tau`` is the largest row sum of M."""
    M = build_m(mdp, theta)
    tau = float(np.max(np.asarray(M.sum(axis=1)).ravel(), initial=0.0))
    return tau < 1.0, tau
