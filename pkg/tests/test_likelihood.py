import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from linirl.data import Trajectory
from linirl.errors import NumericalError, ValidationError
from linirl.forward import count_solves, forward_solve
from linirl.likelihood import (action_prob, action_prob_grad, compile_dataset, dataset_loglik,
                               policy, policy_grad, step_policy, trajectory_loglik)
from linirl.mdp import Mdp

from oracles import (brute_policy, chain, diamond, fd_grad, path_prob, random_dag,
                     random_trajectories, rel_err)

ASYM = 1 / (1 + np.exp(-1))  # 0.73106


def asymmetric_diamond():
    return diamond(r12=-1.0, r13=-2.0)


def prob_at(inst, s, a, theta=None):
    theta = inst.theta if theta is None else theta
    z = forward_solve(inst.mdp, theta, [inst.dest]).Z[:, 0]
    return action_prob(inst.mdp, s, a, z, theta)


class TestActionProb:
    def test_single_action(self):
        assert prob_at(chain(4), 1, 2) == pytest.approx(1.0, abs=1e-15)

    def test_symmetric_diamond(self):
        assert prob_at(diamond(), 0, 1) == pytest.approx(0.5, abs=1e-15)

    def test_asymmetric_diamond(self):
        assert prob_at(asymmetric_diamond(), 0, 1) == pytest.approx(0.73106, abs=5e-6)
        assert prob_at(asymmetric_diamond(), 0, 1) == pytest.approx(ASYM, rel=1e-14)

    def test_unreachable_state_errors(self):
        mdp = Mdp.from_edges(4, [0, 1], [1, 3], np.ones((2, 1)), absorbing=[2, 3])
        z = forward_solve(mdp, [-1.0], [{2}]).Z[:, 0]
        with pytest.raises(NumericalError, match="unreachable"):
            action_prob(mdp, 0, 1, z, [-1.0])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10**6), st.booleans())
    def test_normalized_and_matches_oracle(self, seed, stochastic):
        inst = random_dag(np.random.default_rng(seed), stochastic=stochastic)
        sol = forward_solve(inst.mdp, inst.theta, [inst.dest])
        P = policy(inst.mdp, inst.theta, sol.Z)[:, 0]
        ref = brute_policy(inst)
        sums = np.bincount(inst.mdp.sa_state, weights=P, minlength=inst.n)
        for s in range(inst.n):
            if sol.Z[s, 0] > 0 and inst.mdp.actions(s):
                assert sums[s] == pytest.approx(1.0, abs=1e-10)
        for i, (s, a) in enumerate(zip(inst.mdp.sa_state, inst.mdp.sa_action)):
            assert P[i] == pytest.approx(ref.get((s, a), 0.0), abs=1e-10)


class TestActionProbGrad:
    def test_single_action_zero(self):
        inst = chain(4)
        sol = forward_solve(inst.mdp, [-0.7], [inst.dest])
        g = action_prob_grad(inst.mdp, 0, 1, sol.Z[:, 0], sol.J[:, :, 0].T, [-0.7])
        np.testing.assert_allclose(g, 0, atol=1e-15)

    def test_symmetric_diamond_shared_feature(self):
        inst = diamond()
        sol = forward_solve(inst.mdp, [1.3], [inst.dest])
        g = action_prob_grad(inst.mdp, 0, 1, sol.Z[:, 0], sol.J[:, :, 0].T, [1.3])
        np.testing.assert_allclose(g, 0, atol=1e-15)
        np.testing.assert_allclose(fd_grad(lambda th: prob_at(inst, 0, 1, th), [1.3]), 0,
                                   atol=1e-9)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10**6), st.booleans())
    def test_matches_finite_differences(self, seed, stochastic):
        inst = random_dag(np.random.default_rng(seed), stochastic=stochastic, n_dest=2)
        groups = [{d} for d in sorted(inst.dest)]
        sol = forward_solve(inst.mdp, inst.theta, groups)
        P, dP = policy_grad(inst.mdp, inst.theta, sol.Z, sol.J)
        fd = fd_grad(lambda th: policy(inst.mdp, th, forward_solve(inst.mdp, th, groups).Z),
                     inst.theta)
        assert rel_err(dP, fd) < 1e-6

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10**6))
    def test_scalar_vectorized_and_sparse_agree(self, seed):
        inst = random_dag(np.random.default_rng(seed), stochastic=True)
        sol = forward_solve(inst.mdp, inst.theta, [inst.dest])
        P, dP = policy_grad(inst.mdp, inst.theta, sol.Z, sol.J)
        rows = np.arange(inst.mdp.n_sa)
        p, dp = step_policy(inst.mdp, inst.theta, sol.Z, sol.J, rows, np.zeros_like(rows))
        np.testing.assert_allclose(p, P[:, 0], rtol=1e-13, atol=1e-300)
        np.testing.assert_allclose(dp, dP[:, :, 0], rtol=1e-12, atol=1e-14)
        for i, (s, a) in enumerate(zip(inst.mdp.sa_state, inst.mdp.sa_action)):
            if sol.Z[s, 0] > 0:
                g = action_prob_grad(inst.mdp, s, a, sol.Z[:, 0], sol.J[:, :, 0].T, inst.theta)
                np.testing.assert_allclose(g, dP[:, i, 0], rtol=1e-12, atol=1e-14)


class TestTrajectoryLoglik:
    def test_chain_zero(self):
        inst = chain(5)
        sol = forward_solve(inst.mdp, [-1.0], [inst.dest])
        ll = trajectory_loglik(Trajectory.from_states(range(5)), sol, inst.mdp)
        assert ll.value == pytest.approx(0.0, abs=1e-15)

    def test_symmetric_diamond_via_two(self):
        inst = diamond()
        sol = forward_solve(inst.mdp, [1.0], [inst.dest])
        ll = trajectory_loglik(Trajectory.from_states([0, 1, 3]), sol, inst.mdp)
        assert ll.value == pytest.approx(np.log(0.5), rel=1e-14)

    def test_two_trajectories_asymmetric_diamond(self):
        inst = asymmetric_diamond()
        data = [Trajectory.from_states([0, 1, 3]), Trajectory.from_states([0, 2, 3])]
        ll = dataset_loglik(data, inst.mdp, [1.0])
        expected = np.log(path_prob(inst, [0, 1, 3])) + np.log(path_prob(inst, [0, 2, 3]))
        assert ll.value == pytest.approx(expected, rel=1e-13)
        assert ll.value == pytest.approx(np.log(ASYM) + np.log(1 - ASYM), rel=1e-13)

    @pytest.mark.filterwarnings("ignore:z entries below")
    def test_underflowed_state_gives_minus_inf(self):
        # z_0 = exp(-798) is below the smallest normal double
        inst = chain(400, r=-2.0)
        sol = forward_solve(inst.mdp, [-2.0], [inst.dest])
        ll = trajectory_loglik(Trajectory.from_states(range(400)), sol, inst.mdp)
        assert ll.value == -np.inf and ll.n_infeasible == 1

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10**6))
    def test_path_measure_equivalence(self, seed):
        rng = np.random.default_rng(seed)
        inst = random_dag(rng)
        for traj in random_trajectories(inst, rng, 3):
            sol = forward_solve(inst.mdp, inst.theta, [traj.dest])
            ll = trajectory_loglik(traj, sol, inst.mdp)
            assert np.exp(ll.value) == pytest.approx(path_prob(inst, traj.states()), abs=1e-10)


class TestDatasetLoglik:
    def test_empty(self):
        ll = dataset_loglik([], diamond().mdp, [1.0])
        assert ll.value == 0.0
        np.testing.assert_array_equal(ll.grad, [0.0])

    def test_both_arms_symmetric_diamond(self):
        data = [Trajectory.from_states([0, 1, 3]), Trajectory.from_states([0, 2, 3])]
        assert dataset_loglik(data, diamond().mdp, [1.0]).value == pytest.approx(2 * np.log(0.5))

    def test_additive_over_copies(self):
        inst = asymmetric_diamond()
        one = dataset_loglik([Trajectory.from_states([0, 2, 3])], inst.mdp, [0.8])
        many = dataset_loglik([Trajectory.from_states([0, 2, 3])] * 7, inst.mdp, [0.8])
        assert many.value == pytest.approx(7 * one.value, rel=1e-14)
        np.testing.assert_allclose(many.grad, 7 * one.grad, rtol=1e-14)

    def test_gaps_rejected(self):
        from oracles import with_gap
        traj = with_gap(Trajectory.from_states([0, 1, 2]), 0, 2)
        with pytest.raises(ValidationError, match="missing"):
            dataset_loglik([traj], chain(3).mdp, [-1.0])

    @pytest.mark.filterwarnings("ignore:z entries below")
    def test_infeasible_trajectory_makes_value_minus_inf(self):
        inst = chain(400, r=-2.0)
        short = Trajectory.from_states(range(390, 400))
        long = Trajectory.from_states(range(400))
        ok = dataset_loglik([short], inst.mdp, [-2.0])
        ll = dataset_loglik([short, long, short], inst.mdp, [-2.0])
        assert ll.value == -np.inf
        assert ll.infeasible == (1,)
        np.testing.assert_allclose(ll.grad, 2 * ok.grad)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10**6))
    def test_gradient_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        inst = random_dag(rng, n_dest=2)
        data = random_trajectories(inst, rng, 5)
        ll = dataset_loglik(data, inst.mdp, inst.theta)
        fd = fd_grad(lambda th: dataset_loglik(data, inst.mdp, th).value, inst.theta)
        assert rel_err(ll.grad, fd) < 1e-6

    @pytest.mark.parametrize("k", [1, 10, 100])
    def test_solve_count_independent_of_size(self, k):
        rng = np.random.default_rng(k)
        inst = random_dag(rng, n=10, T=3, n_dest=2)
        data = random_trajectories(inst, rng, k)
        with count_solves() as stats:
            dataset_loglik(data, inst.mdp, inst.theta)
        assert stats.factorizations == 1
        assert stats.solve_batches == 3 + 1

    def test_compile_groups_by_destination(self):
        inst = random_dag(np.random.default_rng(4), n=9, n_dest=2)
        data = random_trajectories(inst, np.random.default_rng(0), 20)
        c = compile_dataset(data, inst.mdp)
        assert set(c.dest_sets) == {frozenset(t.dest) for t in data}
        assert c.step_row.size == sum(len(t.observed_steps()) for t in data)
