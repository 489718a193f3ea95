import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from tfblender.tensor import (
    ConvLayer,
    ShapeMismatchError,
    Tensor3,
    UndefinedSimilarityError,
    channel_softmax,
    conv2d_same,
    cosine_similarity,
    decode_tfb,
    elementwise,
    encode_tfb,
    read_tfb,
    relu,
    write_tfb,
)

from conftest import naive_conv

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def t3(values):
    return Tensor3(np.asarray(values, dtype=np.float64))


def tensors(max_side=4):
    shapes = hnp.array_shapes(min_dims=3, max_dims=3, min_side=1, max_side=max_side)
    return hnp.arrays(np.float64, shapes, elements=finite).map(Tensor3)


class TestTensor3:
    def test_flat_is_channel_then_row_then_column(self):
        t = Tensor3.from_flat(np.arange(12), 2, 2, 3)
        assert t.data[1, 0, 2] == 1 * 6 + 0 * 3 + 2
        np.testing.assert_array_equal(t.flat, np.arange(12))

    def test_from_flat_length_checked(self):
        with pytest.raises(ValueError, match="expected 2\\*2\\*3"):
            Tensor3.from_flat(np.arange(11), 2, 2, 3)

    def test_read_only_copy(self):
        src = np.zeros((1, 2, 2))
        t = Tensor3(src)
        src[0, 0, 0] = 5.0
        assert t.data[0, 0, 0] == 0.0
        with pytest.raises(ValueError):
            t.data[0, 0, 0] = 1.0

    @pytest.mark.parametrize("precision,dtype", [("single", np.float32), ("double", np.float64)])
    def test_precision(self, precision, dtype):
        t = Tensor3.zeros(2, 3, 4, precision)
        assert t.data.dtype == dtype and t.precision == precision
        assert (t.channels, t.height, t.width) == (2, 3, 4)

    def test_rank_checked(self):
        with pytest.raises(ValueError):
            Tensor3(np.zeros((2, 2)))


class TestElementwise:
    def test_mul_example(self):
        out = elementwise("mul", t3([[[1, 2], [3, 4]]]), t3([[[2, 2], [2, 2]]]))
        np.testing.assert_array_equal(out.data, [[[2, 4], [6, 8]]])

    @given(tensors())
    def test_sub_self_is_zero(self, a):
        assert not elementwise("sub", a, a).data.any()

    @given(tensors())
    def test_add_zeros_is_identity(self, a):
        zeros = Tensor3(np.zeros(a.shape))
        np.testing.assert_array_equal(elementwise("add", a, zeros).data, a.data)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeMismatchError, match=r"\(1, 2, 2\).*\(1, 2, 3\)"):
            elementwise("add", Tensor3(np.zeros((1, 2, 2))), Tensor3(np.zeros((1, 2, 3))))

    def test_unknown_op(self):
        a = Tensor3(np.zeros((1, 1, 1)))
        with pytest.raises(ValueError):
            elementwise("div", a, a)


class TestRelu:
    def test_example(self):
        np.testing.assert_array_equal(relu(t3([[[-1, 0, 2]]])).data, [[[0, 0, 2]]])

    @given(tensors())
    def test_clamps(self, a):
        out = relu(a).data
        assert out.shape == a.shape
        np.testing.assert_array_equal(out, np.where(a.data > 0, a.data, 0.0))

    def test_all_negative_is_zero(self):
        assert not relu(t3(-np.ones((2, 3, 3)))).data.any()


class TestChannelSoftmax:
    def test_single_channel_is_one(self, rng):
        out = channel_softmax(t3(rng.normal(size=(1, 3, 3)) * 10))
        np.testing.assert_array_equal(out.data, 1.0)

    def test_equal_channels_are_half(self):
        np.testing.assert_allclose(channel_softmax(t3(np.full((2, 2, 2), 3.7))).data, 0.5)

    def test_analytic_values(self):
        out = channel_softmax(t3(np.array([0.0, np.log(2.0)]).reshape(2, 1, 1)))
        np.testing.assert_allclose(out.data.ravel(), [1 / 3, 2 / 3], rtol=1e-14)

    def test_large_inputs_stay_finite(self):
        out = channel_softmax(t3(np.array([1000.0, 1000.0, -1000.0]).reshape(3, 1, 1)))
        np.testing.assert_allclose(out.data.ravel(), [0.5, 0.5, 0.0], atol=1e-300)

    @given(tensors(max_side=5))
    def test_normalised_per_location(self, a):
        out = channel_softmax(a).data
        assert out.shape == a.shape
        assert np.all(out > 0) and np.all(out <= 1)
        np.testing.assert_allclose(out.sum(axis=0), 1.0, atol=1e-6)


class TestConv2dSame:
    def test_identity_1x1(self, rng):
        x = t3(rng.normal(size=(3, 5, 4)))
        layer = ConvLayer(np.eye(3).reshape(3, 3, 1, 1), np.zeros(3))
        np.testing.assert_array_equal(conv2d_same(x, layer).data, x.data)

    def test_zero_layer(self, rng):
        x = t3(rng.normal(size=(2, 4, 4)))
        out = conv2d_same(x, ConvLayer(np.zeros((5, 2, 3, 3)), np.zeros(5)))
        assert out.shape == (5, 4, 4) and not out.data.any()

    def test_delta_with_ones_kernel(self):
        delta = np.zeros((1, 3, 3))
        delta[0, 1, 1] = 1.0
        layer = ConvLayer(np.ones((1, 1, 3, 3)), np.zeros(1))
        # every output tap window covers the centre pixel
        np.testing.assert_array_equal(conv2d_same(t3(delta), layer).data, np.ones((1, 3, 3)))

    def test_ones_input_counts_in_bounds_taps(self):
        layer = ConvLayer(np.ones((1, 1, 3, 3)), np.zeros(1))
        out = conv2d_same(t3(np.ones((1, 3, 3))), layer).data[0]
        np.testing.assert_array_equal(out, [[4, 6, 4], [6, 9, 6], [4, 6, 4]])

    @pytest.mark.parametrize("k", [1, 3])
    def test_matches_naive_loops(self, rng, k):
        x = rng.normal(size=(4, 8, 8))
        w = rng.normal(size=(3, 4, k, k))
        b = rng.normal(size=3)
        out = conv2d_same(t3(x), ConvLayer(w, b)).data
        np.testing.assert_allclose(out, naive_conv(x, w, b), rtol=0, atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            conv2d_same(t3(np.zeros((2, 3, 3))), ConvLayer(np.zeros((1, 3, 3, 3)), np.zeros(1)))

    def test_single_precision_preserved(self, rng):
        x = Tensor3(rng.normal(size=(2, 4, 4)).astype(np.float32))
        out = conv2d_same(x, ConvLayer(rng.normal(size=(2, 2, 3, 3)), np.zeros(2)))
        assert out.data.dtype == np.float32

    @pytest.mark.parametrize("shape", [(1, 1, 2, 2), (1, 1, 2, 3)])
    def test_layer_rejects_even_or_non_square(self, shape):
        with pytest.raises(ValueError):
            ConvLayer(np.zeros(shape), np.zeros(1))

    def test_layer_bias_shape(self):
        with pytest.raises(ValueError):
            ConvLayer(np.zeros((2, 1, 1, 1)), np.zeros(3))


class TestCosineSimilarity:
    def test_self(self, rng):
        a = t3(rng.normal(size=(2, 3, 3)))
        assert cosine_similarity(a, a) == pytest.approx(1.0, abs=1e-15)

    def test_antiparallel(self, rng):
        a = rng.normal(size=(2, 3, 3))
        assert cosine_similarity(t3(a), t3(-a)) == pytest.approx(-1.0, abs=1e-15)

    def test_orthogonal(self):
        assert cosine_similarity(t3([[[1.0, 0.0]]]), t3([[[0.0, 1.0]]])) == 0.0

    def test_zero_tensor_is_undefined(self):
        with pytest.raises(UndefinedSimilarityError):
            cosine_similarity(t3(np.zeros((1, 2, 2))), t3(np.ones((1, 2, 2))))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            cosine_similarity(t3(np.ones((1, 2, 2))), t3(np.ones((2, 2, 1))))

    @settings(max_examples=50)
    @given(st.integers(0, 2 ** 32 - 1), st.floats(0.01, 100), st.floats(0.01, 100))
    def test_symmetric_and_scale_invariant(self, seed, alpha, beta):
        r = np.random.default_rng(seed)
        a, b = r.normal(size=(2, 3, 3)), r.normal(size=(2, 3, 3))
        base = cosine_similarity(t3(a), t3(b))
        assert -1.0 <= base <= 1.0
        assert cosine_similarity(t3(b), t3(a)) == pytest.approx(base, abs=1e-12)
        assert cosine_similarity(t3(alpha * a), t3(beta * b)) == pytest.approx(base, abs=1e-12)


class TestTfbFormat:
    def test_header_layout(self):
        arr = np.arange(6, dtype=np.float32).reshape(1, 2, 3)
        buf = encode_tfb(arr)
        assert buf[:4] == b"TFB1"
        assert struct.unpack("<5I", buf[4:24]) == (3, 1, 2, 3, 0)
        assert np.frombuffer(buf[24:], "<f4").tolist() == list(range(6))

    @pytest.mark.parametrize("dtype,code", [(np.float32, 0), (np.float64, 1)])
    def test_round_trip(self, tmp_path, rng, dtype, code):
        t = Tensor3(rng.normal(size=(3, 4, 5)).astype(dtype))
        path = tmp_path / "t.tfb"
        write_tfb(path, t)
        assert struct.unpack("<I", path.read_bytes()[20:24])[0] == code
        back = read_tfb(path)
        assert back.data.dtype == dtype
        np.testing.assert_array_equal(back.data, t.data)

    def test_big_endian_input_written_little_endian(self):
        arr = np.arange(4, dtype=">f8").reshape(1, 2, 2)
        assert encode_tfb(arr)[24:] == np.arange(4, dtype="<f8").tobytes()

    @pytest.mark.parametrize("mutate,match", [
        (lambda b: b"XXXX" + b[4:], "magic"),
        (lambda b: b[:4] + struct.pack("<I", 2) + b[8:], "rank"),
        (lambda b: b[:20] + struct.pack("<I", 7) + b[24:], "dtype"),
        (lambda b: b[:-1], "payload"),
    ])
    def test_corrupt_files_rejected(self, mutate, match):
        buf = encode_tfb(np.zeros((1, 2, 2)))
        with pytest.raises(ValueError, match=match):
            decode_tfb(mutate(buf))

    def test_rejects_integer_arrays(self):
        with pytest.raises(ValueError):
            encode_tfb(np.zeros((1, 1, 1), dtype=np.int32))
