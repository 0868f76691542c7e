import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from anchorret import numcore as nc
from conftest import GRAD_CASES, TOL, gradcheck

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


class TestOps:
    def test_matmul_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(nc.matmul(nc.constant(np.eye(2)), nc.constant(a)).value, a)

    def test_matmul_hand_expansion(self):
        out = nc.matmul(nc.constant([[1.0, 2.0]]), nc.constant([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.value, [[11.0]])

    def test_matmul_zero(self):
        out = nc.matmul(nc.constant(np.ones((2, 3))), nc.constant(np.zeros((3, 4))))
        assert not out.value.any()

    def test_matmul_shape_mismatch(self):
        with pytest.raises(nc.ShapeError):
            nc.matmul(nc.constant(np.ones((2, 3))), nc.constant(np.ones((2, 3))))

    def test_add_shape_mismatch(self):
        with pytest.raises(nc.ShapeError):
            nc.add(nc.constant(np.ones((2, 3))), nc.constant(np.ones((3, 2))))

    def test_l2_normalize_examples(self):
        np.testing.assert_allclose(nc.l2_normalize(nc.constant([3.0, 4.0])).value, [0.6, 0.8])
        np.testing.assert_array_equal(nc.l2_normalize(nc.constant([2.0, 0.0, 0.0])).value, [1.0, 0.0, 0.0])
        u = np.array([0.6, 0.8])
        np.testing.assert_allclose(nc.l2_normalize(nc.constant(u)).value, u, atol=1e-15)

    def test_l2_normalize_zero_vector(self):
        with pytest.raises(nc.DegenerateVectorError):
            nc.l2_normalize(nc.constant([0.0, 0.0]))
        with pytest.raises(nc.DegenerateVectorError):
            nc.l2_normalize(nc.constant([[1.0, 0.0], [0.0, 1e-13]]))

    def test_elementwise(self):
        assert nc.elementwise(nc.constant([-1.0]), "relu").item() == 0.0
        assert nc.elementwise(nc.constant([0.0]), "tanh").item() == 0.0
        x = np.array([1.5, -2.0])
        np.testing.assert_array_equal(nc.elementwise(nc.constant(x), "scale", 1.0).value, x)
        with pytest.raises(ValueError):
            nc.elementwise(nc.constant(x), "sigmoid")


class TestBackward:
    def test_sum_grad_is_ones(self):
        x = nc.parameter([1.0, -2.0, 3.0])
        nc.backward(nc.total(x))
        np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])

    def test_half_square_grad_is_x(self):
        v = np.array([0.5, -1.5, 2.0])
        x = nc.parameter(v)
        nc.backward(nc.scale(nc.total(nc.mul(x, x)), 0.5))
        np.testing.assert_allclose(x.grad, v)

    def test_non_scalar_root(self):
        with pytest.raises(nc.ContractError):
            nc.backward(nc.parameter([1.0, 2.0]) * 2.0)

    def test_accumulates_across_calls(self):
        x = nc.parameter([1.0, 2.0])
        nc.backward(nc.total(x))
        nc.backward(nc.total(x))
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])
        x.zero_grad()
        assert not x.grad.any()

    def test_shared_subexpression(self):
        # y used twice: d(y + y)/dx = 2 dy/dx
        x = nc.parameter([0.3, -0.7])
        y = nc.tanh(x)
        nc.backward(nc.total(y + y))
        np.testing.assert_allclose(x.grad, 2 * (1 - np.tanh([0.3, -0.7]) ** 2))

    def test_constants_get_no_grad(self):
        c = nc.constant([1.0, 2.0])
        x = nc.parameter([3.0, 4.0])
        contributed = nc.backward(nc.total(nc.mul(c, x)))
        assert not c.grad.any()
        assert set(contributed) == {x}

    @pytest.mark.parametrize("name", sorted(GRAD_CASES))
    def test_gradcheck(self, name):
        for seed in range(2):
            assert gradcheck(name, seed) <= TOL

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)), elements=finite))
    def test_grad_shape_matches_value(self, x):
        p = nc.parameter(x)
        w = nc.parameter(np.ones((x.shape[1], 2)))
        nc.backward(nc.total(nc.tanh(nc.matmul(p, w))))
        assert p.grad.shape == p.value.shape
        assert w.grad.shape == w.value.shape

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, st.integers(1, 8), elements=finite))
    def test_normalize_is_unit(self, x):
        if np.linalg.norm(x) < 1e-6:
            return
        u = nc.l2_normalize(nc.constant(x)).value
        assert abs(np.linalg.norm(u) - 1.0) <= 1e-9


class TestAdamW:
    def test_zero_grad_no_decay_keeps_params(self):
        p = nc.parameter([1.0, -2.0])
        opt = nc.AdamW([p], lr=0.1, weight_decay=0.0)
        opt.step()
        np.testing.assert_array_equal(p.value, [1.0, -2.0])

    def test_first_step_is_sign_step(self):
        # m_hat = g and v_hat = g^2 after one step, so the update is lr * g / (|g| + eps)
        g = np.array([0.5, -3.0, 1e-2])
        p = nc.parameter(np.zeros(3))
        opt = nc.AdamW([p], lr=1e-3, weight_decay=0.0)
        opt.step([g])
        np.testing.assert_allclose(p.value, -1e-3 * g / (np.abs(g) + 1e-8), rtol=1e-12)
        np.testing.assert_allclose(p.value, -1e-3 * np.sign(g), rtol=1e-5)

    def test_pure_decay_shrinks(self):
        p = nc.parameter([2.0, -4.0])
        opt = nc.AdamW([p], lr=0.1, weight_decay=0.5)
        opt.step([np.zeros(2)])
        np.testing.assert_allclose(p.value, np.array([2.0, -4.0]) * (1 - 0.1 * 0.5))

    def test_two_steps_against_reference(self):
        lr, b1, b2, eps, wd = 0.01, 0.9, 0.999, 1e-8, 0.1
        g1, g2 = np.array([1.0, -2.0]), np.array([0.5, 0.5])
        p = nc.parameter([1.0, 1.0])
        opt = nc.AdamW([p], lr=lr, betas=(b1, b2), eps=eps, weight_decay=wd)
        opt.step([g1])
        opt.step([g2])
        # hand-unrolled
        x = np.array([1.0, 1.0])
        m = v = np.zeros(2)
        for t, g in ((1, g1), (2, g2)):
            x = x - lr * wd * x
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            x = x - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        np.testing.assert_allclose(p.value, x, rtol=1e-14)
        assert opt.t == 2

    def test_functional_wrapper(self):
        p = nc.parameter([1.0])
        opt = nc.AdamW([p], lr=0.1, weight_decay=0.0)
        nc.adamw_step([p], [np.array([1.0])], opt)
        assert p.value[0] == pytest.approx(0.9)
        with pytest.raises(nc.ContractError):
            nc.adamw_step([nc.parameter([1.0])], [np.array([1.0])], opt)

    def test_bad_grad_shape(self):
        opt = nc.AdamW([nc.parameter([1.0, 2.0])], lr=0.1)
        with pytest.raises(nc.ShapeError):
            opt.step([np.zeros(3)])

    def test_non_positive_lr(self):
        with pytest.raises(ValueError):
            nc.AdamW([nc.parameter([1.0])], lr=0.0)
