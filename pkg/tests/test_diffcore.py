import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from connectoflow import diffcore as dc
from conftest import check_gradients


def rand_mat(rng, rows, cols, lo=-2.0, hi=2.0):
    return rng.uniform((rows, cols)) * (hi - lo) + lo


class TestMatmul:
    def test_identity(self, rng):
        m = dc.leaf(rand_mat(rng, 2, 2))
        out = dc.matmul(dc.constant(np.eye(2)), m)
        np.testing.assert_array_equal(out.data, m.data)

    def test_hand_computed(self):
        a = dc.leaf([[1.0, 2.0], [3.0, 4.0]])
        b = dc.leaf([[5.0, 6.0], [7.0, 8.0]])
        np.testing.assert_allclose(dc.matmul(a, b).data, [[19.0, 22.0], [43.0, 50.0]])

    def test_shape_mismatch_names_both_shapes(self):
        a = dc.leaf(np.zeros((2, 3)))
        b = dc.leaf(np.zeros((2, 3)))
        with pytest.raises(dc.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            dc.matmul(a, b)

    def test_gradient_vs_finite_differences(self, rng):
        a = dc.leaf(rand_mat(rng, 3, 4))
        b = dc.leaf(rand_mat(rng, 4, 2))
        err = check_gradients(lambda: dc.sum_all(dc.matmul(a, b)), [a, b], rtol=1e-5)
        assert err < 1e-5


class TestElementwise:
    def test_sigmoid_zero(self):
        assert dc.sigmoid(dc.leaf(0.0)).item() == 0.5

    def test_sigmoid_extremes_stable(self):
        out = dc.sigmoid(dc.leaf([[-800.0, 800.0]]))
        assert np.all(np.isfinite(out.data))
        assert out.data[0, 0] == pytest.approx(0.0, abs=1e-300)
        assert out.data[0, 1] == pytest.approx(1.0)

    def test_softplus_positive(self, rng):
        x = dc.leaf(rand_mat(rng, 4, 5, -20, 20))
        assert np.all(dc.softplus(x).data > 0)

    def test_tanh_derivative_finite_difference(self):
        x = dc.leaf(0.3)
        dc.backward(dc.tanh(x))
        h = 1e-6
        fd = (math.tanh(0.3 + h) - math.tanh(0.3 - h)) / (2 * h)
        assert abs(x.grad[0, 0] - fd) < 1e-6

    def test_log_domain_error(self):
        with pytest.raises(dc.DomainError):
            dc.log(dc.leaf([[1.0, -0.5]]))

    def test_broadcast_row_and_col(self, rng):
        a = dc.leaf(rand_mat(rng, 3, 4))
        row = dc.leaf(rand_mat(rng, 1, 4))
        col = dc.leaf(rand_mat(rng, 3, 1))
        out = dc.mul(dc.add(a, row), col)
        expected = (a.data + row.data) * col.data
        np.testing.assert_allclose(out.data, expected)
        check_gradients(lambda: dc.sum_all(dc.mul(dc.add(a, row), col)), [a, row, col])

    def test_incompatible_broadcast_raises(self):
        with pytest.raises(dc.ShapeError):
            dc.add(dc.leaf(np.zeros((2, 3))), dc.leaf(np.zeros((2, 2))))

    @pytest.mark.parametrize(
        "op",
        [dc.sigmoid, dc.tanh, dc.relu, dc.softplus, dc.exp, dc.neg],
    )
    def test_unary_gradients(self, op, rng):
        x = dc.leaf(rand_mat(rng, 3, 3) + 0.05)  # keep relu away from its kink
        check_gradients(lambda: dc.sum_all(op(x)), [x])

    def test_log_gradient(self, rng):
        x = dc.leaf(rand_mat(rng, 3, 3, 0.2, 2.0))
        check_gradients(lambda: dc.sum_all(dc.log(x)), [x])


class TestStructuralOps:
    def test_reshape_transpose_roundtrip(self, rng):
        x = dc.leaf(rand_mat(rng, 2, 6))
        out = dc.transpose(dc.reshape(x, 3, 4))
        assert out.data.shape == (4, 3)
        check_gradients(lambda: dc.sum_all(dc.transpose(dc.reshape(x, 3, 4))), [x])

    def test_col_max_and_mean(self):
        z = dc.leaf([[0.0, 1.0], [2.0, 3.0]])
        np.testing.assert_array_equal(dc.col_max(z).data, [[2.0, 3.0]])
        np.testing.assert_array_equal(dc.col_mean(z).data, [[1.0, 2.0]])

    def test_col_max_gradient_routes_to_argmax(self):
        z = dc.leaf([[0.0, 5.0], [2.0, 3.0]])
        dc.backward(dc.sum_all(dc.col_max(z)))
        np.testing.assert_array_equal(z.grad, [[0.0, 1.0], [1.0, 0.0]])

    def test_gather_rows_with_repeats(self, rng):
        x = dc.leaf(rand_mat(rng, 4, 3))
        out = dc.gather_rows(x, [2, 0, 2])
        np.testing.assert_array_equal(out.data, x.data[[2, 0, 2]])
        check_gradients(lambda: dc.sum_all(dc.mul(dc.gather_rows(x, [2, 0, 2]), dc.gather_rows(x, [2, 0, 2]))), [x])

    def test_concat_cols_and_rows(self, rng):
        a = dc.leaf(rand_mat(rng, 2, 2))
        b = dc.leaf(rand_mat(rng, 2, 3))
        out = dc.concat_cols([a, b])
        assert out.data.shape == (2, 5)
        check_gradients(lambda: dc.sum_all(dc.mul(dc.concat_cols([a, b]), dc.concat_cols([a, b]))), [a, b])
        c = dc.leaf(rand_mat(rng, 3, 2))
        assert dc.concat_rows([a, c]).data.shape == (5, 2)

    def test_clip_gradient_zero_outside(self):
        x = dc.leaf([[-10.0, 0.0, 10.0]])
        dc.backward(dc.sum_all(dc.clip(x, -5.0, 2.0)))
        np.testing.assert_array_equal(x.grad, [[0.0, 1.0, 0.0]])

    def test_dropout_scales_survivors(self, rng):
        x = dc.leaf(np.ones((50, 50)))
        out = dc.dropout(x, 0.5, rng)
        kept = out.data[out.data != 0]
        assert np.allclose(kept, 2.0)
        assert 0.4 < (out.data != 0).mean() < 0.6


class TestBackward:
    def test_square_analytic(self):
        x = dc.leaf(3.0)
        dc.backward(dc.mul(x, x))
        assert x.grad[0, 0] == pytest.approx(6.0)

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(dc.ContractError):
            dc.backward(dc.leaf([[1.0, 2.0]]))

    def test_composite_vs_finite_differences(self, rng):
        W = dc.leaf(rand_mat(rng, 4, 3))
        x = dc.leaf(rand_mat(rng, 3, 1))
        err = check_gradients(lambda: dc.sum_all(dc.sigmoid(dc.matmul(W, x))), [W, x], rtol=1e-4)
        assert err < 1e-4

    def test_double_backward_doubles_gradient(self, rng):
        x = dc.leaf(rand_mat(rng, 2, 2))
        loss = dc.sum_all(dc.mul(x, x))
        dc.backward(loss)
        once = x.grad.copy()
        dc.backward(loss)
        np.testing.assert_array_equal(x.grad, 2.0 * once)

    def test_unreachable_parameter_grad_is_none(self):
        x = dc.leaf(1.0)
        y = dc.leaf(1.0)
        dc.backward(dc.mul(x, x))
        assert y.grad is None

    def test_constant_gets_no_grad(self):
        c = dc.constant([[2.0]])
        x = dc.leaf(3.0)
        dc.backward(dc.mul(c, x))
        assert c.grad is None
        assert x.grad[0, 0] == pytest.approx(2.0)

    def test_shared_subexpression_fanout(self):
        x = dc.leaf(2.0)
        y = dc.mul(x, x)          # x^2
        loss = dc.add(dc.mul(y, y), y)  # x^4 + x^2 -> d/dx = 4x^3 + 2x = 36
        dc.backward(loss)
        assert x.grad[0, 0] == pytest.approx(36.0)


class TestAdamW:
    def test_zero_grad_zero_decay_is_fixed_point(self):
        store = dc.ParamStore()
        p = store.register("p", [[1.5]])
        store.adamw_step(lr=0.001, weight_decay=0.0)
        assert p.data[0, 0] == 1.5

    def test_single_step_hand_computed(self):
        store = dc.ParamStore()
        p = store.register("p", [[1.0]])
        p.grad = np.array([[1.0]])
        store.adamw_step(lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0)
        # m_hat = 1, v_hat = 1 -> p = 1 - 0.001 * 1/(1 + 1e-8)
        assert abs(p.data[0, 0] - 0.999) < 1e-6

    def test_quadratic_convergence(self):
        store = dc.ParamStore()
        p = store.register("p", [[1.0]])
        for _ in range(200):
            loss = dc.mul(dc.addc(p, -5.0), dc.addc(p, -5.0))
            dc.backward(loss)
            store.adamw_step(lr=0.05, weight_decay=0.0)
        assert abs(p.data[0, 0] - 5.0) < 0.05

    def test_weight_decay_zero_matches_adam_recurrence(self, rng):
        store = dc.ParamStore()
        p = store.register("p", rand_mat(rng, 2, 3))
        ref = p.data.copy()
        m = np.zeros_like(ref)
        v = np.zeros_like(ref)
        for t in range(1, 6):
            g = rand_mat(rng, 2, 3)
            p.grad = g.copy()
            store.adamw_step(lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0)
            m = (1 - 0.1) * m + (1 - 0.9) * g
            v = (1 - 0.001) * v + (1 - 0.999) * g * g
            m_hat = m / (1 - 0.9 ** t)
            v_hat = v / (1 - 0.999 ** t)
            ref = ref - 0.01 * (m_hat / (np.sqrt(v_hat) + 1e-8))
        np.testing.assert_array_equal(p.data, ref)

    def test_nonfinite_gradient_names_parameter(self):
        store = dc.ParamStore()
        p = store.register("enc.W", [[1.0]])
        p.grad = np.array([[np.nan]])
        with pytest.raises(dc.TrainingError, match="enc.W"):
            store.adamw_step(lr=0.001)

    def test_step_zeroes_gradients(self):
        store = dc.ParamStore()
        p = store.register("p", [[1.0]])
        p.grad = np.array([[1.0]])
        store.adamw_step(lr=0.001)
        assert p.grad is None


class TestRandomStream:
    def test_same_seed_identical_normals(self):
        a = dc.RandomStream(42).normal(1000)
        b = dc.RandomStream(42).normal(1000)
        np.testing.assert_array_equal(a, b)

    def test_different_seeds_differ(self):
        a = dc.RandomStream(1).normal(10)
        b = dc.RandomStream(2).normal(10)
        assert not np.array_equal(a, b)

    def test_normal_moments(self):
        z = dc.RandomStream(7).normal(100_000)
        assert abs(z.mean()) < 0.02
        assert abs(z.std() - 1.0) < 0.02

    def test_uniform_range_and_mean(self):
        u = dc.RandomStream(9).uniform(100_000)
        assert u.min() >= 0.0 and u.max() < 1.0
        assert abs(u.mean() - 0.5) < 0.01

    def test_permutation_is_permutation(self):
        perm = dc.RandomStream(3).permutation(100)
        assert sorted(perm.tolist()) == list(range(100))

    def test_spawn_streams_independent_and_reproducible(self):
        root = dc.RandomStream(5)
        a1 = root.spawn("fold", 0).normal(5)
        a2 = dc.RandomStream(5).spawn("fold", 0).normal(5)
        b = dc.RandomStream(5).spawn("fold", 1).normal(5)
        np.testing.assert_array_equal(a1, a2)
        assert not np.array_equal(a1, b)

    def test_randint_bounds(self):
        vals = dc.RandomStream(11).randint(6, 10_000)
        assert vals.min() >= 0 and vals.max() <= 5
        assert set(vals.tolist()) == set(range(6))


class TestCsvIo:
    def test_roundtrip_bit_exact(self, tmp_path, rng):
        arr = rand_mat(rng, 5, 7) * 1e-3
        path = tmp_path / "m.csv"
        dc.save_matrix_csv(arr, path)
        back = dc.load_matrix_csv(path)
        np.testing.assert_array_equal(back, arr)

    def test_format_no_header_dot_decimal(self, tmp_path):
        path = tmp_path / "m.csv"
        dc.save_matrix_csv(np.array([[1.5, -2.0]]), path)
        assert path.read_text() == "1.5,-2.0\n"


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=1, max_value=5), st.integers(min_value=1, max_value=5), st.integers(0, 2**32 - 1))
def test_property_no_nan_through_pipeline(rows, cols, seed):
    rng = dc.RandomStream(seed)
    x = dc.leaf(rng.normal((rows, cols)) * 2)
    out = dc.softplus(dc.tanh(dc.sigmoid(x)))
    assert np.all(np.isfinite(out.data))
    dc.backward(dc.sum_all(out))
    assert np.all(np.isfinite(x.grad))


@settings(max_examples=20, deadline=None)
@given(st.integers(min_value=1, max_value=4), st.integers(min_value=1, max_value=4), st.integers(0, 2**31))
def test_property_matmul_grad_matches_fd(m, k, seed):
    rng = dc.RandomStream(seed)
    a = dc.leaf(rng.uniform((m, k)) * 4 - 2)
    b = dc.leaf(rng.uniform((k, m)) * 4 - 2)
    check_gradients(lambda: dc.sum_all(dc.matmul(a, b)), [a, b], rtol=1e-4)
