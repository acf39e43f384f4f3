"""Unit tests for the autodiff tensor core."""

import os

import numpy as np
import pytest

from cpie import tensor as T
from cpie.tensor import ConvSpec, Tensor


def rand_tensor(rng, shape, away_from_zero=False):
    x = rng.uniform(-1.0, 1.0, shape)
    if away_from_zero:
        # keep values clear of ReLU kinks so finite differences stay valid
        x = np.where(np.abs(x) < 0.05, x + 0.1 * np.sign(x + 1e-12), x)
    return Tensor(x, requires_grad=True, dtype=np.float64)


def check_grads(fn, tensors, step=1e-3, tol=1e-3):
    for t in tensors:
        t.zero_grad()
    fn().backward()
    for i, t in enumerate(tensors):
        num = T.numeric_gradient(fn, tensors, i, step=step)
        assert T.rel_error(t.grad, num) <= tol, f"tensor {i}"


class TestConv2d:
    def test_identity_1x1(self):
        rng = np.random.default_rng(0)
        x = rand_tensor(rng, (5, 5, 3))
        spec = ConvSpec((1, 1), (1, 1), (1, 1), 3, 3, "same")
        w = Tensor(np.eye(3)[None, None], dtype=np.float64)
        b = Tensor(np.zeros(3), dtype=np.float64)
        y = T.conv2d(x, spec, w, b)
        assert np.allclose(y.data, x.data)

    def test_zero_input_gives_bias(self):
        rng = np.random.default_rng(1)
        spec = ConvSpec((3, 3), (1, 1), (1, 1), 2, 4, "same")
        x = Tensor(np.zeros((6, 6, 2)), dtype=np.float64)
        w = rand_tensor(rng, (3, 3, 2, 4))
        b = Tensor(np.array([1.0, -2.0, 0.5, 3.0]))
        y = T.conv2d(x, spec, w, b)
        assert np.allclose(y.data, np.broadcast_to(b.data, (6, 6, 4)))

    def test_same_padding_preserves_dims(self):
        spec = ConvSpec((3, 3), (1, 1), (1, 1), 2, 3, "same")
        assert spec.output_size(10, 14) == (10, 14)

    @pytest.mark.parametrize("stride,dilation,padding", [
        ((1, 1), (1, 1), "same"),
        ((2, 2), (1, 1), "same"),
        ((1, 1), (2, 2), "same"),
        ((2, 1), (1, 2), "valid"),
    ])
    def test_output_shape_formula(self, stride, dilation, padding):
        spec = ConvSpec((3, 3), stride, dilation, 2, 3, padding)
        rng = np.random.default_rng(2)
        x = rand_tensor(rng, (9, 11, 2))
        w = rand_tensor(rng, (3, 3, 2, 3))
        b = rand_tensor(rng, (3,))
        y = T.conv2d(x, spec, w, b)
        ph, pw = spec.pad_amount()
        dh, dw = dilation
        oh = (9 + 2 * ph - dh * 2 - 1) // stride[0] + 1
        ow = (11 + 2 * pw - dw * 2 - 1) // stride[1] + 1
        assert y.shape == (oh, ow, 3)

    def test_gradients_vs_finite_differences(self):
        rng = np.random.default_rng(3)
        x = rand_tensor(rng, (6, 6, 2))
        spec = ConvSpec((3, 3), (1, 1), (1, 1), 2, 3, "same")
        w = rand_tensor(rng, (3, 3, 2, 3))
        b = rand_tensor(rng, (3,))
        check_grads(lambda: T.tensor_sum(T.conv2d(x, spec, w, b)), [x, w, b])

    def test_shape_mismatch_raises(self):
        spec = ConvSpec((3, 3), (1, 1), (1, 1), 2, 3, "same")
        x = Tensor(np.zeros((4, 4, 5)))
        w = Tensor(np.zeros((3, 3, 2, 3)))
        b = Tensor(np.zeros(3))
        with pytest.raises(T.ShapeMismatchError, match="channels"):
            T.conv2d(x, spec, w, b)


class TestBatchNorm:
    def test_constant_channel_train_gives_shift(self):
        x = Tensor(np.full((4, 4, 2), 3.7), dtype=np.float64)
        gamma = Tensor(np.array([2.0, 0.5]))
        beta = Tensor(np.array([1.0, -1.0]))
        rm, rv = np.zeros(2), np.ones(2)
        y = T.batch_norm(x, gamma, beta, rm, rv, train=True)
        # zero variance: epsilon keeps it finite, output collapses to shift
        assert np.allclose(y.data, np.broadcast_to(beta.data, (4, 4, 2)), atol=1e-6)

    def test_infer_identity_stats(self):
        rng = np.random.default_rng(4)
        x = rand_tensor(rng, (5, 5, 3))
        gamma = Tensor(np.ones(3))
        beta = Tensor(np.zeros(3))
        y = T.batch_norm(x, gamma, beta, np.zeros(3), np.ones(3), train=False)
        assert np.allclose(y.data, x.data / np.sqrt(1 + 1e-5))

    def test_running_stats_update(self):
        rng = np.random.default_rng(5)
        x = rand_tensor(rng, (6, 6, 2))
        rm, rv = np.zeros(2), np.ones(2)
        T.batch_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv,
                     train=True, momentum=0.1)
        mu = x.data.mean(axis=(0, 1))
        assert np.allclose(rm, 0.1 * mu)

    @pytest.mark.parametrize("train", [True, False])
    def test_gradients(self, train):
        rng = np.random.default_rng(6)
        x = rand_tensor(rng, (5, 5, 2))
        gamma = Tensor(rng.uniform(0.5, 1.5, 2), requires_grad=True)
        beta = rand_tensor(rng, (2,))
        rm, rv = np.zeros(2), np.ones(2)

        def fn():
            y = T.batch_norm(x, gamma, beta, rm.copy(), rv.copy(), train=train)
            return T.tensor_sum(y * y * 0.5)

        check_grads(fn, [x, gamma, beta])


class TestBilinearResize:
    def test_identity(self):
        rng = np.random.default_rng(7)
        x = rand_tensor(rng, (5, 7, 2))
        assert np.allclose(T.bilinear_resize(x, 5, 7).data, x.data)

    def test_constant_preserved(self):
        x = Tensor(np.full((4, 4, 1), 0.42), dtype=np.float64)
        for oh, ow in [(8, 8), (3, 5), (1, 1)]:
            assert np.allclose(T.bilinear_resize(x, oh, ow).data, 0.42)

    def test_2x2_to_4x4_hand_values(self):
        x = Tensor(np.array([[0.0, 1.0], [2.0, 3.0]])[:, :, None], dtype=np.float64)
        y = T.bilinear_resize(x, 4, 4).data[:, :, 0]
        # half-pixel centers: source coords -0.25,0.25,0.75,1.25 clamped
        expected = np.array([
            [0.00, 0.25, 0.75, 1.00],
            [0.50, 0.75, 1.25, 1.50],
            [1.50, 1.75, 2.25, 2.50],
            [2.00, 2.25, 2.75, 3.00],
        ])
        assert np.allclose(y, expected)

    def test_gradients(self):
        rng = np.random.default_rng(8)
        x = rand_tensor(rng, (4, 5, 2))
        def fn():
            y = T.bilinear_resize(x, 7, 3)
            return T.tensor_sum(y * y)

        check_grads(fn, [x])

    def test_bad_dims(self):
        with pytest.raises(T.ShapeMismatchError):
            T.bilinear_resize(Tensor(np.zeros((4, 4, 1))), 0, 4)


class TestElementwise:
    def test_relu_values(self):
        x = Tensor(np.array([-2.0, -0.5, 0.0, 0.5, 2.0]))
        assert np.allclose(T.relu(x).data, [0, 0, 0, 0.5, 2.0])

    def test_concat_channel_count(self):
        a = Tensor(np.zeros((3, 3, 2)))
        b = Tensor(np.zeros((3, 3, 5)))
        assert T.concat_channels([a, b]).shape == (3, 3, 7)

    def test_concat_spatial_mismatch(self):
        with pytest.raises(T.ShapeMismatchError):
            T.concat_channels([Tensor(np.zeros((3, 3, 1))),
                               Tensor(np.zeros((4, 3, 1)))])

    def test_mul_gradients(self):
        rng = np.random.default_rng(9)
        a = rand_tensor(rng, (4, 4, 3))
        b = rand_tensor(rng, (4, 4, 3))
        check_grads(lambda: T.tensor_sum(a * b), [a, b])

    def test_broadcast_mul_gradients(self):
        rng = np.random.default_rng(10)
        a = rand_tensor(rng, (4, 4, 3))
        r = rand_tensor(rng, (4, 4, 1))
        check_grads(lambda: T.tensor_sum((a * r) * (a * r)), [a, r])

    def test_sum_mean_axes(self):
        rng = np.random.default_rng(11)
        a = rand_tensor(rng, (3, 4, 2))
        assert np.allclose(T.tensor_sum(a, axis=(0, 1)).data, a.data.sum((0, 1)))
        assert np.allclose(a.mean().data, a.data.mean())

    def test_dot_last_gradients(self):
        rng = np.random.default_rng(12)
        a = rand_tensor(rng, (4, 4, 3))
        w = rand_tensor(rng, (3, 5))
        check_grads(lambda: T.tensor_sum(T.dot_last(a, w) * T.dot_last(a, w)), [a, w])

    def test_sigmoid_exp_sqrt_gradients(self):
        rng = np.random.default_rng(13)
        a = rand_tensor(rng, (4, 4, 2))
        check_grads(lambda: T.tensor_sum(T.sigmoid(a)), [a])
        check_grads(lambda: T.tensor_sum(T.exp(a * 0.3)), [a])
        check_grads(lambda: T.tensor_sum(T.sqrt(a * a + 1.0)), [a])


class TestComposition:
    def test_three_op_chain_gradient(self):
        rng = np.random.default_rng(14)
        x = rand_tensor(rng, (6, 6, 2), away_from_zero=True)
        spec = ConvSpec((3, 3), (1, 1), (1, 1), 2, 2, "same")
        w = rand_tensor(rng, (3, 3, 2, 2))
        b = rand_tensor(rng, (2,))

        def fn():
            y = T.conv2d(x, spec, w, b)
            y = T.relu(y)
            y = T.bilinear_resize(y, 3, 3)
            return T.tensor_sum(y * y)

        check_grads(fn, [x, w, b])

    def test_reuse_of_tensor_accumulates(self):
        a = Tensor(np.array([2.0]), requires_grad=True, dtype=np.float64)
        (a * a + a).backward()
        assert np.allclose(a.grad, [5.0])


class TestSnapshot:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(15)
        arr = rng.uniform(-1, 1, (3, 4, 5)).astype(np.float32)
        path = os.path.join(tmp_path, "t.bin")
        T.save_tensor(path, arr)
        back = T.load_tensor(path)
        assert back.shape == arr.shape
        assert np.array_equal(back, arr)

    def test_little_endian_header(self, tmp_path):
        path = os.path.join(tmp_path, "t.bin")
        T.save_tensor(path, np.zeros((2, 3), np.float32))
        raw = open(path, "rb").read()
        assert raw[:4] == b"TSNP"
        assert int.from_bytes(raw[4:8], "little") == 2
        assert int.from_bytes(raw[8:12], "little") == 2
        assert int.from_bytes(raw[12:16], "little") == 3

    def test_corrupt_magic(self, tmp_path):
        path = os.path.join(tmp_path, "bad.bin")
        with open(path, "wb") as f:
            f.write(b"JUNKJUNKJUNK")
        with pytest.raises(ValueError):
            T.load_tensor(path)
