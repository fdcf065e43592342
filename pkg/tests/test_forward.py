import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from linirl.errors import ConvergenceError, NumericalError, ValidationError
from linirl.forward import (count_solves, destination_matrix, factorize, forward_solve,
                            forward_solve_vi, iteration_bound, jacobian_z, solve_z,
                            value_iteration)
from linirl.mdp import Mdp, build_m, check_condition_ii

from oracles import brute_z, chain, diamond, fd_grad, random_dag, rel_err


def z_of(inst, theta, dest=None):
    dest = inst.dest if dest is None else dest
    return forward_solve(inst.mdp, theta, [dest]).Z[:, 0]


class TestFactorize:
    def test_zero_matrix_gives_identity_factors(self):
        f = factorize(sp.csr_matrix((3, 3)))
        np.testing.assert_array_equal(f.L.toarray(), np.eye(3))
        np.testing.assert_array_equal(f.U.toarray(), np.eye(3))

    def test_two_by_two_back_substitution(self):
        M = sp.csr_matrix(np.array([[0.0, 0.5], [0.0, 0.0]]))
        z = factorize(M).solve(np.array([0.0, 1.0]))
        np.testing.assert_array_equal(z, [0.5, 1.0])

    def test_cyclic_expanding_matrix_flagged(self):
        e = np.exp(0.5)
        M = sp.csr_matrix(np.array([[0.0, e], [e, 0.0]]))
        with pytest.raises(NumericalError):
            solve_z(factorize(M), np.array([[1.0], [0.0]]))

    def test_exactly_singular(self):
        M = sp.csr_matrix(np.array([[0.0, 1.0], [1.0, 0.0]]))
        with pytest.raises(NumericalError, match="singular"):
            factorize(M).solve(np.ones(2))

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10**6))
    def test_factors_reproduce_permuted_matrix(self, seed):
        inst = random_dag(np.random.default_rng(seed), stochastic=True)
        f = factorize(build_m(inst.mdp, inst.theta))
        A = f.A.toarray()
        Pr = np.zeros_like(A)
        Pr[f.perm_r, np.arange(A.shape[0])] = 1
        Pc = np.zeros_like(A)
        Pc[np.arange(A.shape[0]), f.perm_c] = 1
        LU = (f.L @ f.U).toarray()
        np.testing.assert_allclose(LU, Pr @ A @ Pc, atol=1e-12 * np.abs(A).max())

    def test_deterministic_for_fixed_input(self):
        inst = random_dag(np.random.default_rng(3), n=12)
        M = build_m(inst.mdp, inst.theta)
        a, b = factorize(M), factorize(M)
        np.testing.assert_array_equal(a.perm_c, b.perm_c)
        np.testing.assert_array_equal(a.solve(np.eye(12)), b.solve(np.eye(12)))


class TestSolveZ:
    def test_zero_matrix(self):
        z = solve_z(factorize(sp.csr_matrix((3, 3))), destination_matrix(3, [{2}]))
        np.testing.assert_array_equal(z[:, 0], [0, 0, 1])

    def test_chain(self):
        np.testing.assert_allclose(z_of(chain(3), [-1.0]),
                                   [np.exp(-2), np.exp(-1), 1.0], rtol=1e-14)

    def test_diamond(self):
        z = z_of(diamond(), [1.0])
        np.testing.assert_allclose(z, [2 * np.exp(-2), np.exp(-1), np.exp(-1), 1.0], rtol=1e-14)

    def test_multiple_groups_share_one_factorization(self):
        inst = random_dag(np.random.default_rng(5), n=10, n_dest=3)
        groups = [{d} for d in sorted(inst.dest)] + [set(inst.dest)]
        with count_solves() as stats:
            sol = forward_solve(inst.mdp, inst.theta, groups)
        assert stats.factorizations == 1
        assert stats.solve_batches == inst.mdp.n_features + 1
        for n, D in enumerate(groups):
            np.testing.assert_allclose(sol.Z[:, n], brute_z(inst, dest=D), atol=1e-12)
            for d in D:
                assert sol.Z[d, n] == 1.0

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10**6), st.booleans())
    def test_matches_path_enumeration(self, seed, stochastic):
        inst = random_dag(np.random.default_rng(seed), stochastic=stochastic)
        np.testing.assert_allclose(z_of(inst, inst.theta), brute_z(inst), rtol=0, atol=1e-10)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10**6))
    def test_fixed_point_residual(self, seed):
        inst = random_dag(np.random.default_rng(seed), stochastic=True)
        M = build_m(inst.mdp, inst.theta)
        b = destination_matrix(inst.n, [inst.dest])[:, 0]
        z = z_of(inst, inst.theta)
        assert np.max(np.abs(z - (M @ z + b))) <= 1e-10 * (1 + np.max(np.abs(b)))
        assert z.min() >= 0

    def test_transient_destination_is_first_passage(self):
        # 0 -> 1 -> 2 -> 3 plus 1 -> 3: reaching 2 first stops there
        mdp = Mdp.from_edges(4, [0, 1, 1, 2], [1, 2, 3, 3], np.ones((4, 1)), absorbing=[3])
        sol = forward_solve(mdp, [-1.0], [{2}])
        np.testing.assert_allclose(sol.Z[:, 0], [np.exp(-2), np.exp(-1), 1.0, 0.0], atol=1e-15)
        J = fd_grad(lambda th: forward_solve(mdp, th, [{2}]).Z[:, 0], [-1.0])
        assert rel_err(sol.J[:, :, 0], J) < 1e-6

    def test_transient_destination_on_cycle(self):
        # 0 <-> 1 -> 2 (absorbing); first passage to 1 from 0 is one step, not the loop sum
        mdp = Mdp.from_edges(3, [0, 1, 1], [1, 0, 2], np.ones((3, 1)), absorbing=[2])
        sol = forward_solve(mdp, [-1.0], [{1}])
        np.testing.assert_allclose(sol.Z[:, 0], [np.exp(-1), 1.0, 0.0], atol=1e-15)

    def test_transient_multi_state_set_rejected(self):
        with pytest.raises(ValidationError, match="not absorbing"):
            forward_solve(chain(4).mdp, [-1.0], [{1, 2}])


class TestJacobian:
    def test_zero_features(self):
        inst = chain(3)
        M = build_m(inst.mdp, [-1.0])
        f = factorize(M)
        Z = solve_z(f, destination_matrix(3, [{2}]))
        J = jacobian_z(f, M, [sp.csr_matrix((3, 3))], Z)
        np.testing.assert_array_equal(J, 0)

    def test_chain_analytic(self):
        J = forward_solve(chain(3).mdp, [-1.0], [{2}]).J[0, :, 0]
        np.testing.assert_allclose(J, [2 * np.exp(-2), np.exp(-1), 0.0], rtol=1e-14)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10**6), st.booleans())
    def test_matches_finite_differences(self, seed, stochastic):
        inst = random_dag(np.random.default_rng(seed), stochastic=stochastic, n_dest=2)
        groups = [{d} for d in sorted(inst.dest)]
        sol = forward_solve(inst.mdp, inst.theta, groups)
        fd = fd_grad(lambda th: forward_solve(inst.mdp, th, groups).Z, inst.theta)
        assert rel_err(sol.J, fd) < 1e-6


class TestValueIteration:
    def test_zero_matrix_one_iteration(self):
        b = np.array([0.0, 0.0, 1.0])
        z, k = value_iteration(sp.csr_matrix((3, 3)), b)
        assert k == 1
        np.testing.assert_array_equal(z, b)

    def test_dag_of_five_states(self):
        inst = random_dag(np.random.default_rng(11), n=5)
        M = build_m(inst.mdp, inst.theta)
        b = destination_matrix(5, [inst.dest])[:, 0]
        z, k = value_iteration(M, b)
        assert k <= 6
        np.testing.assert_allclose(z, z_of(inst, inst.theta), atol=1e-12)

    def test_condition_ii_iteration_bound(self):
        # cycle 0 -> 1 -> 0 plus exits to 2, every row sum exactly e^-1
        e = np.exp(-1)
        M = sp.csr_matrix(np.array([[0, e / 2, e / 2], [e / 2, 0, e / 2], [0, 0, 0]]))
        b = np.array([0.0, 0.0, 1.0])
        assert iteration_bound(e, 1e-6) == 14
        z_star = factorize(M).solve(b)
        errs = []
        value_iteration(M, b, eps=1e-6, callback=lambda k, z: errs.append(np.abs(z - z_star).max()))
        assert all(err < 1e-6 for err in errs[14:])
        assert len(errs) <= 15

    def test_non_convergence_reports_residual(self):
        M = sp.csr_matrix(np.array([[0.0, 0.9], [0.9, 0.0]]))
        with pytest.raises(ConvergenceError) as info:
            value_iteration(M, np.array([0.0, 1.0]), eps=1e-12, k_max=5)
        assert info.value.residual > 0

    def test_warns_when_no_condition_holds(self):
        M = sp.csr_matrix(np.array([[0.0, 1.5], [0.2, 0.0]]))
        with pytest.warns(RuntimeWarning, match="invertibility"):
            value_iteration(M, np.array([1.0, 0.0]), k_max=2000)

    def test_condition_i_alone_allows_z_above_one(self):
        # two parallel paths of weight e^-0.1 each: z_0 = 2 e^-0.1 > 1
        mdp = Mdp.from_edges(4, [0, 0, 1, 2], [1, 2, 3, 3], [[0.1], [0.0], [0.0], [0.1]],
                             absorbing=[3])
        z = forward_solve(mdp, [-1.0], [{3}]).Z[:, 0]
        assert z[0] == pytest.approx(2 * np.exp(-0.1)) and z[0] > 1

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10**6))
    def test_condition_i_finite_convergence_from_any_start(self, seed):
        rng = np.random.default_rng(seed)
        inst = random_dag(rng, stochastic=bool(seed % 2))
        M = build_m(inst.mdp, inst.theta)
        b = destination_matrix(inst.n, [inst.dest])[:, 0]
        z0 = rng.uniform(0, 5, size=inst.n)
        z, k = value_iteration(M, b, z0=z0, eps=1e-12)
        assert k <= inst.n + 1
        np.testing.assert_allclose(z, z_of(inst, inst.theta), atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10**6))
    def test_condition_ii_contraction(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(3, 15))
        # dense random cyclic graph scaled so that every row sums to below 1
        A = rng.random((n, n)) * (rng.random((n, n)) < 0.5)
        A[-1] = 0
        A *= rng.uniform(0.3, 0.95) / np.maximum(A.sum(axis=1, keepdims=True), 1e-12)
        M = sp.csr_matrix(A)
        tau = float(A.sum(axis=1).max())
        b = np.zeros(n)
        b[-1] = 1
        z_star = factorize(M).solve(b)
        iters = []
        value_iteration(M, b, z0=rng.uniform(0, 1, n), eps=1e-13,
                        callback=lambda k, z: iters.append(np.abs(z - z_star).max()))
        errs = np.array(iters)
        assert np.all(errs[1:] <= tau * errs[:-1] + 1e-15)

    def test_forward_solve_vi_matches_direct(self):
        inst = random_dag(np.random.default_rng(2), n=10, stochastic=True)
        a = forward_solve(inst.mdp, inst.theta, [inst.dest])
        b = forward_solve_vi(inst.mdp, inst.theta, [inst.dest], eps=1e-14)
        np.testing.assert_allclose(b.Z, a.Z, atol=1e-12)
        np.testing.assert_allclose(b.J, a.J, atol=1e-12)


class TestIterationBound:
    @pytest.mark.parametrize("tau, eps, k", [(0.5, 0.5, 1), (np.exp(-1), 1e-6, 14),
                                             (0.9, 1e-3, 66)])
    def test_examples(self, tau, eps, k):
        assert iteration_bound(tau, eps) == k

    def test_tau_at_least_one_rejected(self):
        with pytest.raises(ValidationError):
            iteration_bound(1.0, 0.1)

    def test_grid_tau(self):
        from linirl.datagen import gen_grid
        _, mdp = gen_grid(3, 3, 0)
        ok, tau = check_condition_ii(mdp, [-0.8, -4.0, -1.0, -0.02])
        assert ok and tau < 1
