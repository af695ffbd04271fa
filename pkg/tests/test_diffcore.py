import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from mdnf import diffcore as dc

from helpers import assert_grads_close, fd_grad, random_composite_graph, trace_grads


def one_hot(i, k):
    v = np.zeros(k)
    v[i] = 1.0
    return v


class TestTemperature:
    def test_positive_required(self):
        with pytest.raises(ValueError):
            dc.Temperature(0.0)
        with pytest.raises(ValueError):
            dc.Temperature(-1.0)
        with pytest.raises(ValueError):
            dc.Temperature(float("nan"))
        assert dc.Temperature(2.5).tau == 2.5


class TestSoftmaxTemp:
    def test_symmetry(self):
        out = dc.softmax_temp(dc.param(np.zeros(2)), 1.0)
        assert_allclose(out.value, [0.5, 0.5], atol=1e-15)
        out = dc.softmax_temp(dc.param(np.full(3, 4.2)), 0.37)
        assert_allclose(out.value, np.full(3, 1 / 3), atol=1e-15)

    def test_direct_evaluation(self):
        out = dc.softmax_temp(dc.param(np.array([1.0, 0.0])), 1.0)
        e = math.e
        assert_allclose(out.value, [e / (e + 1), 1 / (e + 1)], rtol=1e-12)

    def test_simplex_output(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            z = rng.normal(0, 3, rng.integers(1, 9))
            out = dc.softmax_temp(dc.param(z), float(rng.uniform(0.1, 20)))
            assert np.all(out.value > 0)
            assert abs(out.value.sum() - 1.0) < 1e-12

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            dc.softmax_temp(dc.param(np.array([1.0, np.inf])), 1.0)


class TestStraightThrough:
    def test_argmax_discretization(self):
        assert_allclose(dc.straight_through(dc.const([0.7, 0.3])).value, [1, 0])
        assert_allclose(dc.straight_through(dc.const([0.2, 0.5, 0.3])).value, [0, 1, 0])

    def test_ties_take_lowest_index(self):
        assert_allclose(dc.straight_through(dc.const([0.5, 0.5])).value, [1, 0])
        assert_allclose(dc.straight_through(dc.const([0.2, 0.4, 0.4])).value, [0, 1, 0])

    def test_always_exact_one_hot(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            k = int(rng.integers(1, 10))
            p = rng.random(k)
            out = dc.straight_through(dc.const(p / p.sum())).value
            assert set(np.unique(out)) <= {0.0, 1.0}
            assert out.sum() == 1.0

    def test_backward_is_identity(self):
        lam = dc.param(np.array([0.3, -0.2, 0.1]))
        hard = dc.straight_through(lam)
        root = dc.log_lookup(hard, np.array([1.0, 2.0, 3.0]))
        dc.reverse_sweep(root)
        # upstream gradient of the lookup is the table itself; ST passes it through
        assert_allclose(lam.grad, [1.0, 2.0, 3.0])


class TestCircularConvolve:
    def test_one_hot_addition_mod_k(self):
        out = dc.circular_convolve(dc.const(one_hot(3, 5)), dc.const(one_hot(2, 5)))
        assert_allclose(out.value, one_hot(0, 5))

    def test_identity_element(self):
        b = np.array([0.2, 0.5, 0.3])
        out = dc.circular_convolve(dc.const(one_hot(0, 3)), dc.const(b))
        assert_allclose(out.value, b)

    def test_hand_expansion(self):
        out = dc.circular_convolve(dc.const([0.5, 0.5, 0.0]), dc.const(one_hot(1, 3)))
        assert_allclose(out.value, [0.0, 0.5, 0.5])

    def test_exhaustive_one_hots(self):
        for k in range(1, 17):
            for i in range(k):
                for j in range(k):
                    out = dc.circular_convolve(dc.const(one_hot(i, k)),
                                               dc.const(one_hot(j, k)))
                    assert_allclose(out.value, one_hot((i + j) % k, k))

    def test_mass_multiplies(self):
        rng = np.random.default_rng(2)
        for _ in range(25):
            k = int(rng.integers(1, 9))
            a, b = rng.normal(0, 1, k), rng.normal(0, 1, k)
            out = dc.circular_convolve(dc.const(a), dc.const(b))
            assert_allclose(out.value.sum(), a.sum() * b.sum(), rtol=1e-10, atol=1e-12)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            dc.circular_convolve(dc.const(np.zeros(3)), dc.const(np.zeros(4)))

    def test_batched_matches_per_row(self):
        rng = np.random.default_rng(3)
        a = rng.random((4, 6, 5))
        b = rng.random((6, 5))
        out = dc.circular_convolve(dc.const(a), dc.const(b)).value
        for i in range(4):
            for j in range(6):
                row = dc.circular_convolve(dc.const(a[i, j]), dc.const(b[j])).value
                assert_allclose(out[i, j], row, rtol=1e-12)


class TestLogLookup:
    def test_selection(self):
        t = np.log(np.array([0.3, 0.7]))
        assert_allclose(dc.log_lookup(dc.const(one_hot(1, 2)), t).value, math.log(0.7))
        assert_allclose(dc.log_lookup(dc.const(one_hot(0, 2)), [0.0, 5.0]).value, 0.0)

    def test_inner_product(self):
        out = dc.log_lookup(dc.const([0.5, 0.5]), np.array([0.0, 2.0]))
        assert_allclose(out.value, 1.0)

    def test_minus_inf_support_returns_minus_inf(self):
        t = np.array([0.0, -np.inf])
        out = dc.log_lookup(dc.const([0.5, 0.5]), t)
        assert out.value == -np.inf

    def test_zero_weight_ignores_minus_inf(self):
        t = np.array([math.log(0.4), -np.inf])
        out = dc.log_lookup(dc.const(one_hot(0, 2)), t)
        assert_allclose(out.value, math.log(0.4))

    def test_gradient_is_table(self):
        table = np.array([-0.5, 1.5, 2.5])
        x = dc.param(np.array([0.2, 0.3, 0.5]))
        dc.reverse_sweep(dc.log_lookup(x, table))
        assert_allclose(x.grad, table)


class TestReverseSweep:
    def test_softmax_lookup_matches_fd(self):
        table = np.log(np.array([0.2, 0.5, 0.3]))

        def build(vals, params=None):
            nodes = params if params is not None else [dc.param(v) for v in vals]
            return dc.log_lookup(dc.softmax_temp(nodes[0], 1.0), table)

        values = [np.array([0.4, -0.3, 0.9])]
        assert_grads_close(trace_grads(build, values), fd_grad(build, values),
                           rtol=1e-5)

    def test_constant_root_zero_gradient(self):
        lam = dc.param(np.array([1.0, 2.0]))
        root = dc.sum_(dc.mul(dc.const(np.zeros(2)), lam))
        dc.reverse_sweep(root)
        assert_allclose(lam.grad, [0.0, 0.0])

    def test_independent_subgraphs_add(self):
        table = np.array([0.3, -0.7])
        lam = np.array([0.1, 0.2])

        def single(vals, params=None):
            nodes = params if params is not None else [dc.param(v) for v in vals]
            return dc.log_lookup(dc.softmax_temp(nodes[0], 2.0), table)

        def double(vals, params=None):
            nodes = params if params is not None else [dc.param(v) for v in vals]
            a = dc.log_lookup(dc.softmax_temp(nodes[0], 2.0), table)
            b = dc.log_lookup(dc.softmax_temp(nodes[0], 2.0), table)
            return dc.add(a, b)

        (g1,) = trace_grads(single, [lam.copy()])
        (g2,) = trace_grads(double, [lam.copy()])
        assert_allclose(g2, 2.0 * g1, rtol=1e-12)

    def test_scalar_root_required(self):
        with pytest.raises(ValueError):
            dc.reverse_sweep(dc.param(np.zeros(3)))

    def test_two_sweeps_identical(self):
        lam = dc.param(np.array([0.5, -0.5, 0.1]))
        root = dc.sum_(dc.mul(dc.softmax_temp(lam, 1.0), dc.const([1.0, 2.0, 3.0])))
        dc.reverse_sweep(root)
        first = lam.grad.copy()
        dc.reverse_sweep(root)
        assert_allclose(lam.grad, first, rtol=0, atol=0)

    def test_cycle_detected(self):
        a = dc.param(np.ones(2))
        b = dc.neg(a)
        a.parents = (b,)  # deliberately corrupt the DAG
        with pytest.raises(RuntimeError):
            dc.reverse_sweep(dc.sum_(b))


class TestFiniteDifferenceProperty:
    def test_fifty_random_soft_graphs(self):
        for seed in range(50):
            build, values = random_composite_graph(seed)
            ga = trace_grads(build, [v.copy() for v in values])
            gf = fd_grad(build, [v.copy() for v in values])
            assert_grads_close(ga, gf, rtol=1e-4)


class TestBatchedHelpers:
    def test_take0_scatter_gradient(self):
        mu = dc.param(np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]]))
        picked = dc.take0(mu, [0, 2, 2, 1])
        root = dc.sum_(dc.mul(picked, dc.const(np.ones((4, 2)))))
        dc.reverse_sweep(root)
        assert_allclose(mu.grad, [[1, 1], [1, 1], [2, 2]])

    def test_permute_last_rejects_non_permutation(self):
        with pytest.raises(ValueError):
            dc.permute_last(dc.const(np.zeros(3)), [0, 0, 2])

    def test_prod_matches_fd(self):
        def build(vals, params=None):
            nodes = params if params is not None else [dc.param(v) for v in vals]
            return dc.sum_(dc.prod_(dc.softmax_temp(nodes[0], 1.0), axis=-1))

        values = [np.array([[0.4, -0.3, 0.9], [1.2, 0.0, -0.5]])]
        assert_grads_close(trace_grads(build, values), fd_grad(build, values),
                           rtol=1e-5)

    def test_prod_zero_entry_cofactor_gradient(self):
        # one zero factor: gradient there is the product of the others,
        # gradient elsewhere is exactly zero (no 0/0 from division tricks)
        v = dc.param(np.array([2.0, 0.0, 3.0]))
        dc.reverse_sweep(dc.prod_(v))
        assert_allclose(v.grad, [0.0, 6.0, 0.0])

    def test_prod_middle_axis(self):
        x = np.arange(1.0, 13.0).reshape(2, 3, 2)
        out = dc.prod_(dc.const(x), axis=1)
        assert_allclose(out.value, x.prod(axis=1), rtol=1e-12)
        node = dc.param(x)
        dc.reverse_sweep(dc.sum_(dc.prod_(node, axis=1)))
        h = 1e-6
        bumped = x.copy()
        bumped[1, 2, 0] += h
        fd = (bumped.prod(axis=1).sum() - x.prod(axis=1).sum()) / h
        assert_allclose(node.grad[1, 2, 0], fd, rtol=1e-4)

    def test_logsumexp_stable_and_correct(self):
        from scipy.special import logsumexp as sp_lse
        rng = np.random.default_rng(4)
        x = rng.normal(0, 50, (5, 7))
        out = dc.logsumexp_(dc.const(x), axis=-1)
        assert_allclose(out.value, sp_lse(x, axis=-1), rtol=1e-12)

    def test_logsumexp_all_minus_inf_rows(self):
        x = np.full((2, 3), -np.inf)
        out = dc.logsumexp_(dc.const(x), axis=-1)
        assert np.all(out.value == -np.inf)

    def test_masked_lookup_reduces_trailing_axes(self):
        x = np.zeros((2, 2, 3))
        x[0, 0, 1] = 1.0
        x[0, 1, 2] = 1.0
        x[1, 0, 0] = 1.0
        x[1, 1, 0] = 1.0
        table = np.log(np.array([[0.2, 0.3, 0.5], [0.6, 0.1, 0.3]]))
        out = dc.masked_lookup(dc.const(x), table, n_reduce=2)
        expect = [math.log(0.3) + math.log(0.3), math.log(0.2) + math.log(0.6)]
        assert_allclose(out.value, expect, rtol=1e-12)

    def test_cpt_select_one_hot_reads_entry(self):
        cpt = np.log(np.array([[0.8, 0.2], [0.1, 0.9]]))
        out = dc.cpt_select(cpt, [dc.const(one_hot(1, 2)), dc.const(one_hot(0, 2))])
        assert_allclose(out.value, math.log(0.1), rtol=1e-12)

    def test_cpt_select_batched_rows(self):
        cpt = np.log(np.array([[0.8, 0.2], [0.1, 0.9]]))
        batch = np.array([one_hot(0, 2), one_hot(1, 2)])
        out = dc.cpt_select(cpt, [dc.const(batch), dc.const(one_hot(1, 2))])
        assert_allclose(out.value, [math.log(0.2), math.log(0.9)], rtol=1e-12)

    def test_cpt_select_zero_weight_masks_minus_inf(self):
        cpt = np.array([[0.0, -np.inf], [-np.inf, 0.0]])
        out = dc.cpt_select(cpt, [dc.const(one_hot(0, 2)), dc.const(one_hot(0, 2))])
        assert out.value == 0.0

    def test_table_contract_marginalizes(self):
        t = np.array([[0.8, 0.2], [0.1, 0.9]])
        v = np.array([0.25, 0.75])
        out = dc.table_contract(t, [dc.const(v)])
        assert_allclose(out.value, v @ t, rtol=1e-12)

    def test_subset_replace_values_and_grads(self):
        def build(vals, params=None):
            nodes = params if params is not None else [dc.param(v) for v in vals]
            soft = dc.softmax_temp(nodes[0], 1.0)
            pair = dc.softmax_temp(nodes[1], 1.0)
            patched = dc.subset_replace(soft, [1, 3], pair)
            return dc.log_lookup(patched, np.array([0.1, 0.2, 0.3, 0.4, 0.5]))

        values = [np.array([0.3, -0.1, 0.2, 0.0, 0.7]), np.array([0.4, -0.4])]
        out = build(values)
        soft = dc.softmax_temp(dc.const(values[0]), 1.0).value
        pair = dc.softmax_temp(dc.const(values[1]), 1.0).value
        manual = soft.copy()
        manual[[1, 3]] = pair
        assert_allclose(out.value, manual @ np.array([0.1, 0.2, 0.3, 0.4, 0.5]))
        assert_grads_close(trace_grads(build, values), fd_grad(build, values))

    def test_take_axis1_slices_and_scatters(self):
        def build(vals, params=None):
            node = params[0] if params is not None else dc.param(vals[0])
            soft = dc.softmax_temp(node, 1.0)
            row = dc.take_axis1(soft, 1)
            return dc.log_lookup(dc.sum_(row, axis=0), np.array([0.2, 1.4, -0.7]))

        values = [np.random.default_rng(0).normal(size=(2, 3, 3))]
        out = build(values)
        assert out.value.shape == ()
        assert_grads_close(trace_grads(build, values), fd_grad(build, values))

    def test_reshape_round_trips_gradients(self):
        def build(vals, params=None):
            node = params[0] if params is not None else dc.param(vals[0])
            soft = dc.softmax_temp(node, 1.0)
            wide = dc.reshape_(soft, (2, 1, 3))
            table = np.arange(6, dtype=np.float64).reshape(2, 1, 3)
            return dc.masked_lookup(wide, table, n_reduce=3)

        values = [np.array([[0.3, -0.2, 0.5], [0.1, 0.0, -0.4]])]
        out = build(values)
        assert out.value.shape == ()
        assert_grads_close(trace_grads(build, values), fd_grad(build, values))
