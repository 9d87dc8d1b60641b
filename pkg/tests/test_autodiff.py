import numpy as np
import pytest

from tpt import autodiff as ad
from tpt.autodiff import Tape, Tensor


def rand(shape, seed=0, grad=True):
    rng = np.random.default_rng(seed)
    return Tensor(rng.normal(size=shape), requires_grad=grad)


class TestMatmul:
    def test_identity(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
        out = ad.matmul(Tensor(np.eye(2)), x)
        np.testing.assert_array_equal(out.data, x.data)

    def test_hand_checked(self):
        a = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
        b = Tensor(np.array([[1.0], [1.0]]))
        np.testing.assert_array_equal(ad.matmul(a, b).data, [[3.0], [7.0]])

    def test_shape_mismatch_names_shapes(self):
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
            ad.matmul(rand((2, 3)), rand((2, 3)))

    def test_gradcheck(self):
        x = rand((3, 4), seed=1)
        b = rand((4, 2), seed=2, grad=False)
        w = rand((3, 2), seed=3, grad=False)

        def f(t):
            return ad.sum_all(ad.mul(ad.matmul(t, b), w))

        assert ad.finite_diff_check(f, x) <= 1e-6


class TestSoftmax:
    def test_symmetry(self):
        out = ad.softmax_rows(Tensor(np.array([[0.0, 0.0]])))
        np.testing.assert_allclose(out.data, [[0.5, 0.5]], atol=1e-15)

    def test_no_overflow(self):
        out = ad.softmax_rows(Tensor(np.array([[1000.0, 0.0]])))
        assert np.all(np.isfinite(out.data))
        np.testing.assert_allclose(out.data[0, 0], 1.0)

    def test_scalar_oracle(self):
        out = ad.softmax_rows(Tensor(np.array([[5.0, 1.0]])))
        expected = np.exp(4.0) / (np.exp(4.0) + 1.0)
        np.testing.assert_allclose(out.data[0], [expected, 1.0 - expected],
                                   rtol=1e-12)
        np.testing.assert_allclose(out.data[0], [0.9820, 0.0180], atol=5e-5)

    def test_rows_sum_to_one_large_magnitude(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.normal(scale=1e3, size=(20, 6)))
        out = ad.softmax_rows(x)
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-12)


class TestLayerNorm:
    def test_constant_row_zero_before_affine(self):
        x = Tensor(np.full((2, 4), 3.7))
        out = ad.layer_norm(x, Tensor(np.ones((1, 4))), Tensor(np.zeros((1, 4))))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_already_normalized(self):
        x = Tensor(np.array([[1.0, -1.0]]))
        out = ad.layer_norm(x, Tensor(np.ones((1, 2))), Tensor(np.zeros((1, 2))),
                            eps=1e-15)
        np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-7)

    def test_gradcheck(self):
        x = rand((2, 8), seed=4)
        gain = rand((1, 8), seed=5, grad=False)
        bias = rand((1, 8), seed=6, grad=False)
        w = rand((2, 8), seed=7, grad=False)

        def f(t):
            return ad.sum_all(ad.mul(ad.layer_norm(t, gain, bias), w))

        assert ad.finite_diff_check(f, x) <= 1e-5


class TestElementwiseOps:
    def test_gelu_zero(self):
        assert ad.gelu(Tensor(np.zeros((1, 1)))).data[0, 0] == 0.0

    def test_l2_normalize_345(self):
        out = ad.l2_normalize_rows(Tensor(np.array([[3.0, 4.0]])))
        np.testing.assert_allclose(out.data, [[0.6, 0.8]], rtol=1e-15)

    @pytest.mark.parametrize("seed", range(20))
    @pytest.mark.parametrize("op,positive", [
        (ad.gelu, False), (ad.l2_normalize_rows, False), (ad.mean_rows, False),
        (ad.log, True), (ad.softmax_rows, False),
    ])
    def test_gradcheck_all_ops_20_seeds(self, op, positive, seed):
        rng = np.random.default_rng(seed)
        data = rng.uniform(0.5, 2.0, (3, 4)) if positive else rng.normal(size=(3, 4))
        x = Tensor(data, requires_grad=True)
        w = Tensor(rng.normal(size=op(Tensor(data.copy())).data.shape))

        def f(t):
            return ad.sum_all(ad.mul(op(t), w))

        assert ad.finite_diff_check(f, x) <= 1e-5


class TestBackward:
    def test_sum_grad_is_ones(self):
        p = rand((3, 2), seed=8)
        with Tape() as tape:
            loss = ad.sum_all(p)
            tape.backward(loss)
        np.testing.assert_array_equal(p.grad, np.ones((3, 2)))

    def test_independent_leaf_gets_zero(self):
        p = rand((2, 2), seed=9)
        q = rand((2, 2), seed=10)
        with Tape() as tape:
            loss = ad.sum_all(ad.mul(p, p))
            tape.backward(loss)
        np.testing.assert_array_equal(q.grad, 0.0)

    def test_non_scalar_loss_rejected(self):
        p = rand((2, 2), seed=11)
        with Tape() as tape:
            out = ad.mul(p, p)
            with pytest.raises(ValueError, match="scalar"):
                tape.backward(out)

    def test_repeated_backward_accumulates_on_leaves(self):
        p = rand((2, 2), seed=12)
        with Tape() as tape:
            loss = ad.sum_all(p)
            tape.backward(loss)
            tape.backward(loss)
        np.testing.assert_array_equal(p.grad, 2.0 * np.ones((2, 2)))

    def test_backward_deterministic(self):
        grads = []
        for _ in range(2):
            p = rand((4, 4), seed=13)
            with Tape() as tape:
                h = ad.gelu(ad.matmul(p, p))
                loss = ad.sum_all(ad.mul(ad.softmax_rows(h), h))
                tape.backward(loss)
            grads.append(p.grad.copy())
        np.testing.assert_array_equal(grads[0], grads[1])


class TestFiniteDiffCheck:
    def test_quadratic_exact(self):
        x = Tensor(np.array([[1.0, 2.0]]), requires_grad=True)

        def f(t):
            return ad.sum_all(ad.mul(t, t))

        err = ad.finite_diff_check(f, x)
        assert err <= 1e-9
        np.testing.assert_allclose(x.grad, [[2.0, 4.0]], atol=1e-12)

    def test_entropy_of_softmax(self):
        x = rand((1, 5), seed=14)

        def f(t):
            p = ad.softmax_rows(t)
            return ad.neg(ad.sum_all(ad.mul(p, ad.log(p))))

        assert ad.finite_diff_check(f, x) <= 1e-6

    def test_sharp_softmax(self):
        x = rand((1, 5), seed=15)

        def f(t):
            p = ad.softmax_rows(ad.scale(t, 100.0))
            return ad.neg(ad.sum_all(ad.mul(p, ad.log(p))))

        assert ad.finite_diff_check(f, x) <= 1e-4


def test_data_stays_finite_through_ops():
    rng = np.random.default_rng(16)
    x = Tensor(rng.normal(scale=1e3, size=(4, 6)))
    for out in (ad.softmax_rows(x), ad.gelu(x), ad.l2_normalize_rows(x),
                ad.log(ad.softmax_rows(x)),
                ad.layer_norm(x, Tensor(np.ones((1, 6))), Tensor(np.zeros((1, 6))))):
        assert np.all(np.isfinite(out.data))


def test_tensor_invariant_grad_shape():
    t = Tensor(np.zeros((3, 5)), requires_grad=True)
    assert t.grad.shape == t.data.shape
    assert Tensor(np.zeros((2, 2))).grad is None
