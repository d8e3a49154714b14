import numpy as np
import pytest

from stylediff import tensor as T
from stylediff.errors import ShapeError
from stylediff.rng import make_rng


def fd_grad(fn, tensors, which, h=1e-5):
    """Central finite differences of fn(*tensors) w.r.t. tensors[which]."""
    base = tensors[which].data
    g = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn(*tensors).item()
        flat[i] = orig - h
        dn = fn(*tensors).item()
        flat[i] = orig
        gflat[i] = (up - dn) / (2 * h)
    return g


def assert_fd_matches(fn, tensors, rtol=1e-4):
    loss = fn(*tensors)
    grads = T.gradient(loss, tensors)
    for i, t in enumerate(tensors):
        num = fd_grad(fn, tensors, i)
        ana = grads[i].data
        denom = np.maximum(np.maximum(np.abs(num), np.abs(ana)), 1e-6)
        rel = np.abs(num - ana) / denom
        assert rel.max() < rtol, f"input {i}: max rel err {rel.max():.2e}"


def randt(rng, *shape, lo=-1.0, hi=1.0):
    return T.Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True, dtype=np.float64)


class TestMatmul:
    def test_identity(self):
        a = T.Tensor(np.eye(2))
        b = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(T.matmul(a, b).data, b.data)

    def test_row_times_column_against_loop_oracle(self):
        a = np.array([[1.0, 2.0]])
        b = np.array([[3.0], [4.0]])
        oracle = np.zeros((1, 1))
        for i in range(1):
            for j in range(1):
                for k in range(2):
                    oracle[i, j] += a[i, k] * b[k, j]
        out = T.matmul(T.Tensor(a), T.Tensor(b)).data
        np.testing.assert_allclose(out, oracle)
        assert out[0, 0] == 11.0

    def test_zero_left_operand(self):
        rng = make_rng(0, "mmz")
        b = T.Tensor(rng.standard_normal((3, 4)))
        out = T.matmul(T.Tensor(np.zeros((2, 3))), b)
        np.testing.assert_array_equal(out.data, np.zeros((2, 4)))

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 4\)"):
            T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((2, 4))))

    @pytest.mark.parametrize("seed", range(5))
    def test_associativity_float64(self, seed):
        rng = make_rng(seed, "assoc")
        a, b, c = (T.Tensor(rng.standard_normal((4, 4))) for _ in range(3))
        left = T.matmul(T.matmul(a, b), c).data
        right = T.matmul(a, T.matmul(b, c)).data
        np.testing.assert_allclose(left, right, atol=1e-10)


class TestSoftmax:
    def test_symmetry(self):
        out = T.softmax(T.Tensor([0.0, 0.0]), axis=0).data
        np.testing.assert_allclose(out, [0.5, 0.5])

    def test_analytic(self):
        out = T.softmax(T.Tensor([0.0, np.log(2.0)]), axis=0).data
        np.testing.assert_allclose(out, [1 / 3, 2 / 3], atol=1e-7)

    def test_large_inputs_stable(self):
        out = T.softmax(T.Tensor([1000.0, 1000.0]), axis=0).data
        np.testing.assert_allclose(out, [0.5, 0.5])
        assert np.all(np.isfinite(out))

    def test_rows_sum_to_one(self):
        rng = make_rng(1, "sm")
        out = T.softmax(T.Tensor(rng.standard_normal((5, 7))), axis=1).data
        np.testing.assert_allclose(out.sum(axis=1), np.ones(5), atol=1e-6)
        assert np.all(out >= 0)

    def test_empty_axis_errors(self):
        with pytest.raises(ShapeError):
            T.softmax(T.Tensor(np.zeros((3, 0))), axis=1)

    @pytest.mark.parametrize("seed", range(5))
    def test_permutation_equivariance(self, seed):
        rng = make_rng(seed, "perm")
        x = rng.standard_normal(6)
        p = rng.permutation(6)
        direct = T.softmax(T.Tensor(x[p]), axis=0).data
        permuted = T.softmax(T.Tensor(x), axis=0).data[p]
        np.testing.assert_allclose(direct, permuted, atol=1e-12)


class TestConv2d:
    def test_one_by_one_identity_kernel(self):
        rng = make_rng(2, "cv")
        x = T.Tensor(rng.standard_normal((1, 4, 4)))
        k = T.Tensor(np.ones((1, 1, 1, 1)))
        np.testing.assert_allclose(T.conv2d(x, k).data, x.data)

    def test_all_ones_kernel_on_constant_image(self):
        c = 0.7
        x = T.Tensor(np.full((1, 5, 5), c))
        k = T.Tensor(np.ones((1, 1, 3, 3)))
        out = T.conv2d(x, k, padding=1).data
        # nested-loop oracle over the zero-padded 5x5 grid
        oracle = np.zeros((5, 5))
        padded = np.pad(np.full((5, 5), c), 1)
        for i in range(5):
            for j in range(5):
                oracle[i, j] = padded[i : i + 3, j : j + 3].sum()
        np.testing.assert_allclose(out[0], oracle, rtol=1e-6)
        assert np.isclose(out[0, 2, 2], 9 * c)

    def test_zero_kernel(self):
        rng = make_rng(3, "cv0")
        x = T.Tensor(rng.standard_normal((2, 4, 4)))
        k = T.Tensor(np.zeros((3, 2, 3, 3)))
        out = T.conv2d(x, k, padding=1).data
        np.testing.assert_array_equal(out, np.zeros((3, 4, 4)))

    def test_channel_mismatch_errors(self):
        with pytest.raises(ShapeError, match="channel"):
            T.conv2d(T.Tensor(np.zeros((2, 4, 4))), T.Tensor(np.zeros((1, 3, 3, 3))))

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
    def test_against_loop_oracle(self, stride, padding):
        rng = make_rng(stride * 10 + padding, "cvloop")
        x = rng.standard_normal((1, 2, 6, 6))
        w = rng.standard_normal((3, 2, 3, 3))
        out = T.conv2d(T.Tensor(x), T.Tensor(w), stride=stride, padding=padding).data
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        ho = (xp.shape[2] - 3) // stride + 1
        wo = (xp.shape[3] - 3) // stride + 1
        oracle = np.zeros((1, 3, ho, wo))
        for co in range(3):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[0, :, i * stride : i * stride + 3, j * stride : j * stride + 3]
                    oracle[0, co, i, j] = (patch * w[co]).sum()
        np.testing.assert_allclose(out, oracle, rtol=1e-10)


class TestGradient:
    def test_sum_of_squares_matches_analytic(self):
        w = T.Tensor([1.0, 2.0], requires_grad=True, dtype=np.float64)
        loss = T.sum_(T.mul(w, w))
        (g,) = T.gradient(loss, [w])
        np.testing.assert_allclose(g.data, [2.0, 4.0])

    def test_unused_input_gets_exact_zeros(self):
        w = T.Tensor([1.0, 2.0], requires_grad=True)
        u = T.Tensor([3.0, 4.0], requires_grad=True)
        loss = T.sum_(T.mul(w, w))
        grads = T.gradient(loss, [w, u])
        assert np.all(grads[1].data == 0.0)

    def test_non_scalar_loss_errors(self):
        w = T.Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ShapeError, match="scalar"):
            T.gradient(T.mul(w, w), [w])

    def test_tape_visits_each_recorded_op_once(self):
        w = T.Tensor([1.0, 2.0], requires_grad=True, dtype=np.float64)
        a = T.mul(w, w)
        b = T.add(a, a)  # diamond: a consumed twice
        loss = T.sum_(b)
        tape = T.GradientTape(loss).run()
        assert tape.visited == len(tape.operations)
        np.testing.assert_allclose(tape.grad(w), [4.0, 8.0])

    def test_no_grad_suppresses_recording(self):
        w = T.Tensor([1.0, 2.0], requires_grad=True)
        with T.no_grad():
            out = T.mul(w, w)
        assert not out.requires_grad
        assert out._parents == ()


UNARY_OPS = [
    ("exp", T.exp, (-1.0, 1.0)),
    ("log", T.log, (0.5, 2.0)),
    ("sqrt", T.sqrt, (0.5, 2.0)),
    ("sigmoid", T.sigmoid, (-2.0, 2.0)),
    ("silu", T.silu, (-2.0, 2.0)),
    ("tanh", T.tanh, (-2.0, 2.0)),
    ("erf", T.erf, (-2.0, 2.0)),
    ("pow", lambda x: T.power(x, 3.0), (0.5, 2.0)),
    ("relu", T.relu, (0.2, 2.0)),  # away from the kink
    ("neg", T.neg, (-1.0, 1.0)),
]


class TestFiniteDifferences:
    """Randomized FD checks for every differentiable op (>= 50 cases total)."""

    @pytest.mark.parametrize("name,op,rng_range", UNARY_OPS)
    @pytest.mark.parametrize("seed", range(3))
    def test_unary(self, name, op, rng_range, seed):
        rng = make_rng(seed, "fd", name)
        x = randt(rng, 2, 3, lo=rng_range[0], hi=rng_range[1])
        w = rng.standard_normal((2, 3))
        assert_fd_matches(lambda t: T.sum_(T.mul(op(t), T.Tensor(w))), [x])

    @pytest.mark.parametrize("op", [T.add, T.sub, T.mul, T.div])
    @pytest.mark.parametrize("seed", range(2))
    def test_binary_broadcast(self, op, seed):
        rng = make_rng(seed, "fdbin")
        a = randt(rng, 2, 3, lo=0.5, hi=2.0)
        b = randt(rng, 1, 3, lo=0.5, hi=2.0)
        w = rng.standard_normal((2, 3))
        assert_fd_matches(lambda x, y: T.sum_(T.mul(op(x, y), T.Tensor(w))), [a, b])

    @pytest.mark.parametrize("seed", range(3))
    def test_matmul_2d(self, seed):
        rng = make_rng(seed, "fdmm")
        a = randt(rng, 3, 4)
        b = randt(rng, 4, 2)
        w = rng.standard_normal((3, 2))
        assert_fd_matches(lambda x, y: T.sum_(T.mul(T.matmul(x, y), T.Tensor(w))), [a, b])

    @pytest.mark.parametrize("seed", range(2))
    def test_matmul_batched(self, seed):
        rng = make_rng(seed, "fdbmm")
        a = randt(rng, 2, 3, 4)
        b = randt(rng, 2, 4, 2)
        w = rng.standard_normal((2, 3, 2))
        assert_fd_matches(lambda x, y: T.sum_(T.mul(T.matmul(x, y), T.Tensor(w))), [a, b])

    @pytest.mark.parametrize("seed", range(3))
    def test_softmax(self, seed):
        rng = make_rng(seed, "fdsm")
        x = randt(rng, 3, 5)
        w = rng.standard_normal((3, 5))
        assert_fd_matches(lambda t: T.sum_(T.mul(T.softmax(t, axis=1), T.Tensor(w))), [x])

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
    @pytest.mark.parametrize("seed", range(2))
    def test_conv2d(self, stride, padding, seed):
        rng = make_rng(seed, "fdcv", stride, padding)
        x = randt(rng, 2, 2, 4, 4)
        k = randt(rng, 3, 2, 3, 3)

        def f(xx, kk):
            out = T.conv2d(xx, kk, stride=stride, padding=padding)
            w = make_rng(seed, "fdcvw", stride, padding).standard_normal(out.shape)
            return T.sum_(T.mul(out, T.Tensor(w)))

        assert_fd_matches(f, [x, k])

    @pytest.mark.parametrize("seed", range(2))
    def test_reductions_and_shape_ops(self, seed):
        rng = make_rng(seed, "fdred")
        x = randt(rng, 2, 3, 4)
        w1 = rng.standard_normal((2, 4))
        assert_fd_matches(
            lambda t: T.sum_(T.mul(T.mean(t, axis=1), T.Tensor(w1))), [x]
        )
        w2 = rng.standard_normal((3, 2, 4))
        assert_fd_matches(
            lambda t: T.sum_(T.mul(T.swapaxes(t, 0, 1), T.Tensor(w2))), [x]
        )
        w3 = rng.standard_normal((4, 3, 2))
        assert_fd_matches(
            lambda t: T.sum_(T.mul(T.transpose(t, (2, 1, 0)), T.Tensor(w3))), [x]
        )
        w4 = rng.standard_normal(24)
        assert_fd_matches(
            lambda t: T.sum_(T.mul(T.reshape(t, 24), T.Tensor(w4))), [x]
        )

    @pytest.mark.parametrize("seed", range(2))
    def test_concat_slice_embedding(self, seed):
        rng = make_rng(seed, "fdcat")
        a = randt(rng, 2, 3)
        b = randt(rng, 4, 3)
        w = rng.standard_normal((6, 3))
        assert_fd_matches(
            lambda x, y: T.sum_(T.mul(T.concat([x, y], axis=0), T.Tensor(w))), [a, b]
        )
        w2 = rng.standard_normal((2, 2))
        assert_fd_matches(
            lambda x: T.sum_(T.mul(x[:, 1:3], T.Tensor(w2))), [a]
        )
        table = randt(rng, 5, 3)
        ids = np.array([0, 2, 2, 4])
        w3 = rng.standard_normal((4, 3))
        assert_fd_matches(
            lambda t: T.sum_(T.mul(T.embedding(t, ids), T.Tensor(w3))), [table]
        )

    @pytest.mark.parametrize("seed", range(2))
    def test_pooling_and_upsampling(self, seed):
        rng = make_rng(seed, "fdpool")
        x = randt(rng, 1, 2, 4, 4)
        w = rng.standard_normal((1, 2, 2, 2))
        assert_fd_matches(lambda t: T.sum_(T.mul(T.avg_pool2d(t), T.Tensor(w))), [x])
        w2 = rng.standard_normal((1, 2, 8, 8))
        assert_fd_matches(lambda t: T.sum_(T.mul(T.upsample2x(t), T.Tensor(w2))), [x])

    @pytest.mark.parametrize("seed", range(2))
    def test_layer_norm(self, seed):
        rng = make_rng(seed, "fdln")
        x = randt(rng, 2, 5)
        gamma = randt(rng, 5, lo=0.5, hi=1.5)
        beta = randt(rng, 5)
        w = rng.standard_normal((2, 5))
        assert_fd_matches(
            lambda t, g, b: T.sum_(T.mul(T.layer_norm_affine(t, g, b), T.Tensor(w))),
            [x, gamma, beta],
        )

    @pytest.mark.parametrize("seed", range(2))
    def test_group_norm(self, seed):
        rng = make_rng(seed, "fdgn")
        x = randt(rng, 2, 4, 3, 3)
        gamma = randt(rng, 4, lo=0.5, hi=1.5)
        beta = randt(rng, 4)
        w = rng.standard_normal((2, 4, 3, 3))
        assert_fd_matches(
            lambda t, g, b: T.sum_(T.mul(T.group_norm_affine(t, g, b, groups=2), T.Tensor(w))),
            [x, gamma, beta],
        )

    @pytest.mark.parametrize("seed", range(2))
    def test_clip(self, seed):
        rng = make_rng(seed, "fdclip")
        x = randt(rng, 3, 3, lo=-2.0, hi=2.0)
        # keep inputs away from the clip boundaries so FD is smooth
        x.data[np.abs(np.abs(x.data) - 1.0) < 0.05] = 0.5
        w = rng.standard_normal((3, 3))
        assert_fd_matches(
            lambda t: T.sum_(T.mul(T.clip(t, -1.0, 1.0), T.Tensor(w))), [x]
        )
