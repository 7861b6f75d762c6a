import math

import numpy as np
import pytest

from asap import tensor as T
from asap.tensor import GraphError, ShapeError, Tensor

from conftest import fd_grad, rel_err


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.eye(2))
        b = Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(T.matmul(a, b).data, b.data)

    def test_row_times_column(self):
        out = T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        assert np.array_equal(out.data, [[11.0]])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
        with pytest.raises(ShapeError):
            T.matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 2))))

    def test_gradient_vs_finite_differences(self):
        rng = np.random.default_rng(0)
        a_val = rng.normal(size=(3, 4))
        b_val = rng.normal(size=(4, 2))
        a = Tensor(a_val, requires_grad=True)
        b = Tensor(b_val, requires_grad=True)
        T.tsum(T.matmul(a, b)).backward()

        fd_a = fd_grad(lambda: float((a_val @ b_val).sum()), a_val)
        fd_b = fd_grad(lambda: float((a_val @ b_val).sum()), b_val)
        assert rel_err(a.grad, fd_a) < 1e-6
        assert rel_err(b.grad, fd_b) < 1e-6

    def test_batched_gradient(self):
        rng = np.random.default_rng(1)
        a_val = rng.normal(size=(2, 3, 4))
        b_val = rng.normal(size=(2, 4, 3))
        a = Tensor(a_val, requires_grad=True)
        b = Tensor(b_val, requires_grad=True)
        T.tsum(T.mul(out := T.matmul(a, b), out)).backward()

        fd_a = fd_grad(lambda: float(((a_val @ b_val) ** 2).sum()), a_val)
        assert rel_err(a.grad, fd_a) < 1e-6


class TestSoftmax:
    def test_symmetry(self):
        out = T.softmax(Tensor([0.0, 0.0, 0.0]))
        assert np.allclose(out.data, [1 / 3, 1 / 3, 1 / 3], atol=1e-12)

    def test_no_overflow(self):
        out = T.softmax(Tensor([1000.0, 0.0])).data
        assert np.all(np.isfinite(out))
        assert out[0] > 1.0 - 1e-12 and out[1] < 1e-12

    def test_log_inputs(self):
        out = T.softmax(Tensor([math.log(1), math.log(2), math.log(3)]))
        assert np.allclose(out.data, [1 / 6, 2 / 6, 3 / 6], atol=1e-12)

    def test_sums_to_one_across_magnitudes(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            scale = 10.0 ** rng.uniform(-4, 4)
            x = rng.normal(size=(3, 5)) * scale
            x = np.clip(x, -1e4, 1e4)
            s = T.softmax(Tensor(x), axis=-1).data.sum(axis=-1)
            assert np.all(np.abs(s - 1.0) <= 1e-9)

    def test_gradient(self):
        rng = np.random.default_rng(3)
        x_val = rng.normal(size=(2, 4))
        w = rng.normal(size=(2, 4))
        x = Tensor(x_val, requires_grad=True)
        T.tsum(T.mul(T.softmax(x, axis=-1), Tensor(w))).backward()

        def f():
            e = np.exp(x_val - x_val.max(axis=-1, keepdims=True))
            return float((e / e.sum(axis=-1, keepdims=True) * w).sum())

        assert rel_err(x.grad, fd_grad(f, x_val)) < 1e-4


class TestSoftplus:
    def test_at_zero(self):
        assert abs(T.softplus(Tensor(0.0)).item() - math.log(2)) < 1e-12

    def test_asymptote(self):
        assert abs(T.softplus(Tensor(50.0)).item() - 50.0) < 1e-9
        assert np.isfinite(T.softplus(Tensor(1e4)).item())

    def test_beta_scaling(self):
        beta = 2.5
        assert abs(T.softplus(Tensor(0.0), beta=beta).item() - beta * math.log(2)) < 1e-12

    def test_always_positive(self):
        x = np.linspace(-1e4, 1e4, 2001)
        assert np.all(T.softplus(Tensor(x)).data > 0.0)

    def test_derivative_at_zero(self):
        x = Tensor(0.0, requires_grad=True)
        T.softplus(x).backward()
        assert abs(x.grad - 0.5) < 1e-12

    def test_gradient(self):
        rng = np.random.default_rng(4)
        x_val = rng.normal(size=7) * 3
        x = Tensor(x_val, requires_grad=True)
        T.tsum(T.softplus(x, beta=1.5)).backward()
        f = lambda: float(1.5 * np.logaddexp(0.0, x_val / 1.5).sum())
        assert rel_err(x.grad, fd_grad(f, x_val)) < 1e-4

    def test_rejects_nonpositive_beta(self):
        with pytest.raises(ValueError):
            T.softplus(Tensor(1.0), beta=0.0)


class TestLayerNorm:
    def test_constant_row_returns_bias(self):
        x = Tensor(np.full((2, 4), 7.0))
        gain = Tensor(np.ones(4))
        bias = Tensor([1.0, 2.0, 3.0, 4.0])
        out = T.layer_norm(x, gain, bias).data
        assert np.allclose(out, np.tile(bias.data, (2, 1)), atol=1e-9)

    def test_two_point_row(self):
        out = T.layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
        assert np.allclose(out, [[-1.0, 1.0]], atol=1e-4)

    def test_gradient(self):
        rng = np.random.default_rng(5)
        x_val = rng.normal(size=(3, 6))
        g_val = rng.normal(size=6)
        b_val = rng.normal(size=6)
        w = rng.normal(size=(3, 6))
        x = Tensor(x_val, requires_grad=True)
        gain = Tensor(g_val, requires_grad=True)
        bias = Tensor(b_val, requires_grad=True)
        T.tsum(T.mul(T.layer_norm(x, gain, bias), Tensor(w))).backward()

        def f():
            mu = x_val.mean(axis=-1, keepdims=True)
            var = ((x_val - mu) ** 2).mean(axis=-1, keepdims=True)
            xhat = (x_val - mu) / np.sqrt(var + 1e-5)
            return float(((xhat * g_val + b_val) * w).sum())

        assert rel_err(x.grad, fd_grad(f, x_val)) < 1e-5
        assert rel_err(gain.grad, fd_grad(f, g_val)) < 1e-5
        assert rel_err(bias.grad, fd_grad(f, b_val)) < 1e-5


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        T.tsum(x).backward()
        assert np.array_equal(x.grad, np.ones((2, 3)))

    def test_quadratic(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        T.tsum(T.mul(x, x)).backward()
        assert np.array_equal(x.grad, [2.0, 4.0])

    def test_non_scalar_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(GraphError):
            T.mul(x, x).backward()

    def test_repeated_backward_accumulates_leaves(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        T.tsum(T.mul(x, x)).backward()
        T.tsum(T.mul(x, x)).backward()
        assert np.array_equal(x.grad, [4.0, 8.0])

    def test_shared_subexpression(self):
        # y = x*x reused twice: d(sum(y)+sum(y))/dx = 4x
        x = Tensor([1.0, 3.0], requires_grad=True)
        y = T.mul(x, x)
        T.add(T.tsum(y), T.tsum(y)).backward()
        assert np.array_equal(x.grad, [4.0, 12.0])

    def test_nonparticipating_param_grad_is_zero(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        unused = Tensor([5.0], requires_grad=True)
        T.tsum(x).backward()
        assert np.array_equal(unused.grad, [0.0])


class TestElementwiseAndShapeOps:
    def test_add_broadcast(self):
        a = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor(np.ones(3), requires_grad=True)
        T.tsum(T.add(a, b)).backward()
        assert np.array_equal(a.grad, np.ones((2, 3)))
        assert np.array_equal(b.grad, [2.0, 2.0, 2.0])

    def test_relu(self):
        x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
        out = T.relu(x)
        assert np.array_equal(out.data, [0.0, 0.0, 2.0])
        T.tsum(out).backward()
        assert np.array_equal(x.grad, [0.0, 0.0, 1.0])

    def test_log(self):
        x = Tensor([1.0, math.e], requires_grad=True)
        out = T.log(x)
        assert np.allclose(out.data, [0.0, 1.0], atol=1e-12)
        T.tsum(out).backward()
        assert np.allclose(x.grad, [1.0, 1.0 / math.e], atol=1e-12)

    def test_concat_backward(self):
        a = Tensor(np.ones((2, 2)), requires_grad=True)
        b = Tensor(np.ones((1, 2)), requires_grad=True)
        out = T.concat([a, b], axis=0)
        assert out.data.shape == (3, 2)
        T.tsum(T.mul(out, Tensor(np.arange(6.0).reshape(3, 2)))).backward()
        assert np.array_equal(a.grad, [[0.0, 1.0], [2.0, 3.0]])
        assert np.array_equal(b.grad, [[4.0, 5.0]])

    def test_slice_backward(self):
        x = Tensor(np.arange(12.0).reshape(3, 4), requires_grad=True)
        T.tsum(T.take(x, (slice(None), slice(1, 3)))).backward()
        expect = np.zeros((3, 4))
        expect[:, 1:3] = 1.0
        assert np.array_equal(x.grad, expect)

    def test_transpose_reshape(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        out = T.reshape(T.transpose(x, (1, 0)), (6,))
        T.tsum(T.mul(out, out)).backward()
        assert rel_err(x.grad, 2 * x.data) == 0.0

    def test_mean_backward(self):
        x = Tensor(np.ones((2, 5)), requires_grad=True)
        T.mean(x).backward()
        assert np.allclose(x.grad, np.full((2, 5), 0.1), atol=1e-15)

    def test_gather_rows_accumulates_duplicates(self):
        table = Tensor(np.zeros((4, 2)), requires_grad=True)
        T.tsum(T.gather_rows(table, [0, 0, 3])).backward()
        assert np.array_equal(table.grad, [[2, 2], [0, 0], [0, 0], [1, 1]])

    def test_pick(self):
        p = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        out = T.pick(p, [0, 1], [2, 0])
        assert np.array_equal(out.data, [2.0, 3.0])
        T.tsum(out).backward()
        assert np.array_equal(p.grad, [[0, 0, 1], [1, 0, 0]])


class TestRandomizedGradients:
    # one gradient check per op per seed, 50 seeds
    def test_many_seeds(self):
        for seed in range(50):
            rng = np.random.default_rng(seed)
            x_val = rng.normal(size=(3, 4))
            y_val = rng.normal(size=(3, 4))
            w_val = rng.normal(size=(4, 3))

            cases = {
                "add": (lambda x, y, w: T.tsum(T.mul(s := T.add(x, y), s)),
                        lambda: float(((x_val + y_val) ** 2).sum())),
                "mul": (lambda x, y, w: T.tsum(T.mul(x, y)),
                        lambda: float((x_val * y_val).sum())),
                "relu": (lambda x, y, w: T.tsum(T.mul(T.relu(x), y)),
                         lambda: float((np.maximum(x_val, 0) * y_val).sum())),
                "matmul": (lambda x, y, w: T.tsum(T.matmul(x, w)),
                           lambda: float((x_val @ w_val).sum())),
                "softmax": (lambda x, y, w: T.tsum(T.mul(T.softmax(x, axis=-1), y)),
                            lambda: float((np.exp(x_val) / np.exp(x_val).sum(-1, keepdims=True) * y_val).sum())),
                "softplus": (lambda x, y, w: T.tsum(T.softplus(x)),
                             lambda: float(np.logaddexp(0, x_val).sum())),
                "mean": (lambda x, y, w: T.mean(T.mul(x, x)),
                         lambda: float((x_val ** 2).mean())),
            }
            for name, (build, ref) in cases.items():
                x = Tensor(x_val, requires_grad=True)
                y = Tensor(y_val)
                w = Tensor(w_val)
                build(x, y, w).backward()
                err = rel_err(x.grad, fd_grad(ref, x_val))
                assert err < 1e-4, f"{name} seed {seed}: rel err {err}"


class TestDropout:
    def test_identity_when_not_training(self):
        x = Tensor(np.ones((3, 3)))
        assert T.dropout(x, 0.5, train=False) is x

    def test_identity_at_p_zero(self):
        x = Tensor(np.ones((3, 3)))
        assert T.dropout(x, 0.0, rng=np.random.default_rng(0), train=True) is x

    def test_deterministic_given_seed(self):
        x = Tensor(np.ones((8, 8)))
        a = T.dropout(x, 0.4, rng=np.random.default_rng(9), train=True).data
        b = T.dropout(x, 0.4, rng=np.random.default_rng(9), train=True).data
        assert np.array_equal(a, b)

    def test_inverted_scaling(self):
        x = Tensor(np.ones(200_000))
        out = T.dropout(x, 0.3, rng=np.random.default_rng(1), train=True).data
        kept = out[out != 0]
        assert np.allclose(kept, 1.0 / 0.7, atol=1e-12)
        assert abs(out.mean() - 1.0) < 0.01

    def test_requires_rng_in_train_mode(self):
        with pytest.raises(ValueError):
            T.dropout(Tensor(np.ones(3)), 0.5, train=True)

    def test_mask_applied_to_gradient(self):
        x = Tensor(np.ones(1000), requires_grad=True)
        out = T.dropout(x, 0.5, rng=np.random.default_rng(3), train=True)
        T.tsum(out).backward()
        assert np.array_equal((x.grad != 0), (out.data != 0))


class TestNumericalHygiene:
    def test_finite_after_extreme_softmax_softplus(self):
        x = Tensor(np.array([[1e4, -1e4, 0.0]]), requires_grad=True)
        sm = T.softmax(x, axis=-1)
        sp = T.softplus(x)
        assert np.all(np.isfinite(sm.data)) and np.all(np.isfinite(sp.data))
        T.add(T.tsum(sm), T.tsum(sp)).backward()
        assert np.all(np.isfinite(x.grad))
