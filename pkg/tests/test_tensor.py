import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spliceloc.tensor import (
    ShapeError,
    Tensor,
    absolute,
    avg_pool2,
    bilinear_upsample,
    combine,
    concat,
    conv2d,
    global_avg_pool,
    gradcheck,
    matmul,
    relu,
    sigmoid,
    softmax,
)


# ---------------------------------------------------------------------------
# oracles: straight-line reference implementations, independent of tensor.py
# ---------------------------------------------------------------------------

def matmul_oracle(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            for l in range(k):
                out[i, j] += a[i, l] * b[l, j]
    return out


def softmax_oracle(x: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(x)
    return e / e.sum(axis=axis, keepdims=True)


def conv2d_oracle(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    b, c, h, win = x.shape
    o, _, kh, kw = w.shape
    xp = np.zeros((b, c, h + 2 * pad, win + 2 * pad), dtype=np.float64)
    xp[:, :, pad:pad + h, pad:pad + win] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (win + 2 * pad - kw) // stride + 1
    out = np.zeros((b, o, ho, wo), dtype=np.float64)
    for bi in range(b):
        for oi in range(o):
            for y in range(ho):
                for xj in range(wo):
                    acc = 0.0
                    for ci in range(c):
                        for ky in range(kh):
                            for kx in range(kw):
                                acc += (xp[bi, ci, y * stride + ky, xj * stride + kx]
                                        * w[oi, ci, ky, kx])
                    out[bi, oi, y, xj] = acc
    return out


def bilinear_oracle(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Per-pixel closed form of align-corners=false interpolation."""
    b, c, h, w = x.shape
    out = np.zeros((b, c, out_h, out_w), dtype=np.float64)
    for bi in range(b):
        for ci in range(c):
            for i in range(out_h):
                for j in range(out_w):
                    sy = (i + 0.5) * h / out_h - 0.5
                    sx = (j + 0.5) * w / out_w - 0.5
                    y0 = math.floor(sy)
                    x0 = math.floor(sx)
                    fy, fx = sy - y0, sx - x0
                    y0c = min(max(y0, 0), h - 1)
                    y1c = min(max(y0 + 1, 0), h - 1)
                    x0c = min(max(x0, 0), w - 1)
                    x1c = min(max(x0 + 1, 0), w - 1)
                    out[bi, ci, i, j] = (
                        x[bi, ci, y0c, x0c] * (1 - fy) * (1 - fx)
                        + x[bi, ci, y0c, x1c] * (1 - fy) * fx
                        + x[bi, ci, y1c, x0c] * fy * (1 - fx)
                        + x[bi, ci, y1c, x1c] * fy * fx
                    )
    return out


def central_diff(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Numeric gradient of scalar-valued f at x, coordinate by coordinate."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return g


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

class TestMatmul:
    def test_identity(self):
        a = Tensor(np.eye(2))
        b = Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert np.allclose(matmul(a, b).data, [[1, 2], [3, 4]])

    def test_zeros_annihilate(self):
        z = Tensor(np.zeros((2, 3)))
        b = Tensor(np.arange(12.0).reshape(3, 4))
        out = matmul(z, b)
        assert out.shape == (2, 4)
        assert np.all(out.data == 0)

    def test_against_triple_loop(self):
        rng = np.random.default_rng(7)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        out = matmul(Tensor(a), Tensor(b))
        assert np.allclose(out.data, matmul_oracle(a, b), atol=1e-6)

    @pytest.mark.parametrize("seed", range(100))
    def test_random_shapes_match_oracle(self, seed):
        rng = np.random.default_rng(seed)
        m, k, n = rng.integers(1, 7, size=3)
        a = rng.normal(size=(m, k))
        b = rng.normal(size=(k, n))
        out = matmul(Tensor(a), Tensor(b))
        assert np.allclose(out.data, matmul_oracle(a, b), atol=1e-6)

    def test_mismatch_names_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))

    def test_batched_broadcast_gradients(self):
        rng = np.random.default_rng(11)
        a = Tensor(rng.normal(size=(2, 3)), requires_grad=True, dtype=np.float64)
        b = Tensor(rng.normal(size=(4, 3, 5)), requires_grad=True, dtype=np.float64)
        err = gradcheck(lambda: matmul(a, b).sum(), [a, b])
        assert err < 1e-6


# ---------------------------------------------------------------------------
# softmax
# ---------------------------------------------------------------------------

class TestSoftmax:
    def test_closed_form_rows(self):
        x = Tensor([[0.0, 0.0], [math.log(2.0), 0.0]])
        out = softmax(x, axis=-1)
        assert np.allclose(out.data, [[0.5, 0.5], [2 / 3, 1 / 3]], atol=1e-7)

    def test_single_element_axis(self):
        x = Tensor(np.random.default_rng(0).normal(size=(5, 1)))
        assert np.allclose(softmax(x, axis=-1).data, 1.0)

    @pytest.mark.parametrize("axis", [-1, -2])
    def test_random_matches_exp_sum_oracle(self, axis):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(4, 4))
        out = softmax(Tensor(x), axis=axis)
        assert np.allclose(out.data, softmax_oracle(x, axis), atol=1e-6)
        sums = out.data.sum(axis=axis)
        assert np.allclose(sums, 1.0, atol=1e-6)

    @given(st.floats(min_value=-50, max_value=50),
           st.integers(min_value=0, max_value=2 ** 32 - 1))
    @settings(max_examples=60, deadline=None)
    def test_shift_invariance(self, c, seed):
        x = np.random.default_rng(seed).normal(size=(3, 5))
        a = softmax(Tensor(x), axis=-1).data
        b = softmax(Tensor(x + c), axis=-1).data
        assert np.allclose(a, b, atol=1e-6)

    def test_gradient(self):
        x = Tensor(np.random.default_rng(5).normal(size=(3, 4)),
                   requires_grad=True, dtype=np.float64)
        w = np.random.default_rng(6).normal(size=(3, 4))
        err = gradcheck(lambda: (softmax(x, axis=-1) * Tensor(w)).sum(), [x])
        assert err < 1e-6


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------

class TestConv2d:
    def test_one_by_one_identity(self):
        x = Tensor(np.arange(9.0).reshape(1, 1, 3, 3))
        k = Tensor(np.ones((1, 1, 1, 1)))
        assert np.array_equal(conv2d(x, k).data, x.data)

    def test_all_ones_sums(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        k = Tensor(np.ones((1, 1, 3, 3)))
        out = conv2d(x, k, stride=1, pad=0)
        assert out.shape == (1, 1, 1, 1)
        assert out.data.reshape(()) == pytest.approx(9.0)

    def test_strided_padded_matches_oracle(self):
        rng = np.random.default_rng(21)
        x = rng.normal(size=(1, 2, 5, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        out = conv2d(Tensor(x), Tensor(w), stride=2, pad=1)
        assert np.allclose(out.data, conv2d_oracle(x, w, 2, 1), atol=1e-6)

    @pytest.mark.parametrize("seed", range(100))
    def test_random_cases_match_oracle(self, seed):
        rng = np.random.default_rng(1000 + seed)
        b = int(rng.integers(1, 3))
        c = int(rng.integers(1, 4))
        o = int(rng.integers(1, 4))
        h = int(rng.integers(3, 8))
        w = int(rng.integers(3, 8))
        kh = int(rng.integers(1, min(h, 4) + 1))
        kw = int(rng.integers(1, min(w, 4) + 1))
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, 2))
        x = rng.normal(size=(b, c, h, w))
        k = rng.normal(size=(o, c, kh, kw))
        out = conv2d(Tensor(x), Tensor(k), stride=stride, pad=pad)
        assert np.allclose(out.data, conv2d_oracle(x, k, stride, pad), atol=1e-6)

    def test_kernel_too_large(self):
        x = Tensor(np.zeros((1, 1, 3, 3)))
        k = Tensor(np.zeros((1, 1, 5, 5)))
        with pytest.raises(ShapeError):
            conv2d(x, k, stride=1, pad=0)

    def test_gradients(self):
        rng = np.random.default_rng(9)
        x = Tensor(rng.normal(size=(1, 2, 5, 5)), requires_grad=True,
                   dtype=np.float64)
        k = Tensor(rng.normal(size=(2, 2, 3, 3)), requires_grad=True,
                   dtype=np.float64)
        err = gradcheck(lambda: (conv2d(x, k, stride=2, pad=1)
                                 * conv2d(x, k, stride=2, pad=1)).sum(), [x, k])
        assert err < 1e-6


# ---------------------------------------------------------------------------
# pointwise ops
# ---------------------------------------------------------------------------

class TestPointwise:
    def test_relu_values(self):
        out = relu(Tensor([-1.0, 0.0, 2.0]))
        assert np.array_equal(out.data, [0.0, 0.0, 2.0])

    def test_sigmoid_at_zero(self):
        assert sigmoid(Tensor([0.0])).data[0] == pytest.approx(0.5)

    @pytest.mark.parametrize("x0", [-2.0, 0.0, 3.0])
    def test_sigmoid_grad_matches_finite_difference(self, x0):
        x = Tensor(np.array([x0]), requires_grad=True, dtype=np.float64)
        out = sigmoid(x).sum()
        out.backward()
        numeric = central_diff(
            lambda a: float(1 / (1 + np.exp(-a[0]))), np.array([x0]))
        assert abs(x.grad[0] - numeric[0]) < 1e-6

    def test_add_const_and_scale(self):
        x = Tensor([1.0, 2.0])
        assert np.allclose((x + 3.0).data, [4.0, 5.0])
        assert np.allclose((x * 2.0).data, [2.0, 4.0])

    def test_scalar_ops_preserve_dtype(self):
        x = Tensor(np.ones(3, dtype=np.float32))
        assert (x * 0.5).dtype == np.float32
        assert (x + 0.5).dtype == np.float32

    def test_abs_gradient(self):
        x = Tensor(np.array([-2.0, 3.0]), requires_grad=True, dtype=np.float64)
        absolute(x).sum().backward()
        assert np.array_equal(x.grad, [-1.0, 1.0])


# ---------------------------------------------------------------------------
# combine
# ---------------------------------------------------------------------------

class TestCombine:
    def test_add_zero_identity(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(3, 3))
        out = combine([Tensor(x), Tensor(np.zeros((3, 3)))], mode="add")
        assert np.array_equal(out.data, x)

    def test_concat_block_layout(self):
        a = np.arange(6.0).reshape(2, 3)
        b = np.arange(10.0).reshape(2, 5)
        out = concat([Tensor(a), Tensor(b)], axis=1)
        assert out.shape == (2, 8)
        assert np.array_equal(out.data[:, :3], a)
        assert np.array_equal(out.data[:, 3:], b)

    def test_concat_shape_mismatch(self):
        with pytest.raises(ShapeError):
            concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3)))], axis=1)

    def test_add_shape_mismatch(self):
        with pytest.raises(ShapeError):
            combine([Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4)))], mode="add")

    def test_mul_backward_is_other_operand(self):
        rng = np.random.default_rng(4)
        xv = rng.normal(size=(2, 2))
        yv = rng.normal(size=(2, 2))
        x = Tensor(xv.copy(), requires_grad=True, dtype=np.float64)
        y = Tensor(yv.copy(), requires_grad=True, dtype=np.float64)
        combine([x, y], mode="mul").sum().backward()
        numeric = central_diff(lambda a: float((a * yv).sum()), xv.copy())
        assert np.allclose(x.grad, numeric, atol=1e-6)
        assert np.allclose(x.grad, yv, atol=1e-12)

    def test_concat_gradients_route(self):
        a = Tensor(np.ones((2, 2)), requires_grad=True, dtype=np.float64)
        b = Tensor(np.ones((2, 3)), requires_grad=True, dtype=np.float64)
        w = Tensor(np.arange(10.0).reshape(2, 5))
        (concat([a, b], axis=1) * w).sum().backward()
        assert np.array_equal(a.grad, w.data[:, :2])
        assert np.array_equal(b.grad, w.data[:, 2:])


# ---------------------------------------------------------------------------
# pooling and upsampling
# ---------------------------------------------------------------------------

class TestPooling:
    def test_constant_map(self):
        x = Tensor(np.full((2, 3, 4, 5), 1.7))
        out = global_avg_pool(x)
        assert out.shape == (2, 3, 1, 1)
        assert np.allclose(out.data, 1.7)

    def test_small_mean(self):
        x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2))
        assert global_avg_pool(x).data.reshape(()) == pytest.approx(2.5)

    def test_gradient_spreads_uniformly(self):
        rng = np.random.default_rng(8)
        xv = rng.normal(size=(1, 2, 3, 3))
        x = Tensor(xv.copy(), requires_grad=True, dtype=np.float64)
        wv = rng.normal(size=(1, 2, 1, 1))
        (global_avg_pool(x) * Tensor(wv)).sum().backward()
        numeric = central_diff(
            lambda a: float((a.mean(axis=(2, 3), keepdims=True) * wv).sum()),
            xv.copy())
        assert np.allclose(x.grad, numeric, atol=1e-6)
        assert np.allclose(x.grad, np.broadcast_to(wv / 9.0, xv.shape))

    def test_avg_pool2(self):
        x = Tensor(np.arange(16.0).reshape(1, 1, 4, 4))
        out = avg_pool2(x)
        assert out.shape == (1, 1, 2, 2)
        assert np.array_equal(out.data.reshape(2, 2),
                              [[2.5, 4.5], [10.5, 12.5]])


class TestBilinearUpsample:
    def test_identity_when_dims_equal(self):
        x = np.random.default_rng(1).normal(size=(1, 2, 3, 3))
        out = bilinear_upsample(Tensor(x), 3, 3)
        assert np.array_equal(out.data, x)

    def test_constant_stays_constant(self):
        x = Tensor(np.full((1, 1, 2, 3), 4.2))
        out = bilinear_upsample(x, 7, 9)
        assert np.allclose(out.data, 4.2, atol=1e-12)

    def test_2x2_to_4x4_matches_scalar_reference(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(1, 1, 2, 2))
        out = bilinear_upsample(Tensor(x), 4, 4)
        assert np.allclose(out.data, bilinear_oracle(x, 4, 4), atol=1e-6)

    @pytest.mark.parametrize("seed", range(10))
    def test_random_sizes_match_reference(self, seed):
        rng = np.random.default_rng(300 + seed)
        h, w = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        oh = int(rng.integers(h, 9))
        ow = int(rng.integers(w, 9))
        x = rng.normal(size=(1, 2, h, w))
        out = bilinear_upsample(Tensor(x), oh, ow)
        assert np.allclose(out.data, bilinear_oracle(x, oh, ow), atol=1e-6)

    def test_rejects_bad_targets(self):
        x = Tensor(np.zeros((1, 1, 2, 2)))
        with pytest.raises(ValueError):
            bilinear_upsample(x, 0, 4)
        with pytest.raises(ValueError):
            bilinear_upsample(x, 1, 4)

    def test_gradient(self):
        x = Tensor(np.random.default_rng(13).normal(size=(1, 1, 2, 3)),
                   requires_grad=True, dtype=np.float64)
        w = Tensor(np.random.default_rng(14).normal(size=(1, 1, 5, 7)))
        err = gradcheck(lambda: (bilinear_upsample(x, 5, 7) * w).sum(), [x])
        assert err < 1e-6


# ---------------------------------------------------------------------------
# backward pass semantics
# ---------------------------------------------------------------------------

class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.random.default_rng(0).normal(size=(3, 2)),
                   requires_grad=True)
        x.sum().backward()
        assert np.array_equal(x.grad, np.ones((3, 2), dtype=np.float32))

    def test_quadratic(self):
        xv = np.random.default_rng(1).normal(size=(4,))
        x = Tensor(xv, requires_grad=True, dtype=np.float64)
        ((x * x).sum() * 0.5).backward()
        assert np.allclose(x.grad, xv, atol=1e-12)

    def test_reuse_accumulates(self):
        x = Tensor(np.zeros(3), requires_grad=True)
        (x + x).sum().backward()
        assert np.array_equal(x.grad, 2 * np.ones(3, dtype=np.float32))

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.zeros((2, 2)), requires_grad=True)
        with pytest.raises(ValueError):
            (x + x).backward()

    def test_off_graph_tensor_keeps_zero_grad(self):
        x = Tensor(np.ones(2), requires_grad=True)
        y = Tensor(np.ones(2), requires_grad=True)
        x.sum().backward()
        assert np.array_equal(y.grad, np.zeros(2, dtype=np.float32))


# ---------------------------------------------------------------------------
# gradcheck itself
# ---------------------------------------------------------------------------

class TestGradcheck:
    def test_linear_function_is_exact(self):
        x = Tensor(np.random.default_rng(2).normal(size=(3,)),
                   requires_grad=True, dtype=np.float64)
        w = Tensor(np.array([1.0, -2.0, 3.0]))
        err = gradcheck(lambda: (x * w).sum(), [x])
        assert err < 1e-8

    def test_sigmoid_sum(self):
        x = Tensor(np.random.default_rng(3).normal(size=(4,)),
                   requires_grad=True, dtype=np.float64)
        err = gradcheck(lambda: sigmoid(x).sum(), [x], eps=1e-5)
        assert err < 1e-6

    def test_flags_doubled_gradient(self):
        from spliceloc.tensor import _make

        def broken_identity(t):
            # reports twice the true gradient
            return _make(t.data.copy(), (t,), lambda g: t._accumulate(2.0 * g))

        x = Tensor(np.array([3.0]), requires_grad=True, dtype=np.float64)
        err = gradcheck(lambda: broken_identity(x).sum(), [x])
        assert err == pytest.approx(0.5, abs=1e-6)

    def test_eps_range_enforced(self):
        x = Tensor(np.zeros(2), requires_grad=True, dtype=np.float64)
        with pytest.raises(ValueError):
            gradcheck(lambda: x.sum(), [x], eps=1e-2)

    def test_requires_float64(self):
        x = Tensor(np.zeros(2, dtype=np.float32), requires_grad=True)
        with pytest.raises(ValueError):
            gradcheck(lambda: x.sum(), [x])
