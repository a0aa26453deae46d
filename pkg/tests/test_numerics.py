import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fd import max_rel_error
from zssl import checkpoint
from zssl import numerics as nx


def triple_loop_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                s += a[i, p] * b[p, j]
            out[i, j] = s
    return out


class TestMatmul:
    def test_identity(self):
        out = nx.matmul(nx.Tensor(np.eye(2)), nx.Tensor([[1, 2], [3, 4]]))
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_orthogonal_selection(self):
        out = nx.matmul(nx.Tensor([[1, 0]]), nx.Tensor([[0], [5]]))
        np.testing.assert_array_equal(out.data, [[0]])

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        out = nx.matmul(nx.Tensor(a), nx.Tensor(b))
        np.testing.assert_allclose(out.data, triple_loop_matmul(a, b), rtol=0, atol=1e-12)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(nx.DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            nx.matmul(nx.Tensor(np.ones((2, 3))), nx.Tensor(np.ones((2, 3))))


class TestLogSoftmax:
    def test_uniform(self):
        out = nx.log_softmax(nx.Tensor([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, [-math.log(3)] * 3, atol=1e-15)

    def test_one_hot_entry(self):
        out = nx.log_softmax(nx.Tensor([1.0, 0.0, 0.0]))
        assert out.data[0] == pytest.approx(-0.551444713932051089, abs=1e-14)

    def test_shift_invariance(self):
        x = np.array([0.3, -1.2, 2.5])
        a = nx.log_softmax(nx.Tensor(x)).data
        b = nx.log_softmax(nx.Tensor(x + 1000.0)).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_non_finite_raises(self):
        with pytest.raises(nx.NumericError):
            nx.log_softmax(nx.Tensor([0.0, np.inf]))

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
    def test_slices_normalised(self, values):
        x = np.array(values).reshape(1, -1)
        out = nx.log_softmax(nx.Tensor(x), axis=-1)
        assert abs(np.exp(out.data).sum() - 1.0) < 1e-10


class TestSwoosh:
    def test_r_at_zero(self):
        assert abs(nx.swoosh_r(nx.Tensor([0.0])).item()) < 1e-6

    def test_l_at_zero(self):
        assert nx.swoosh_l(nx.Tensor([0.0])).item() == pytest.approx(-0.0168500720821903, abs=1e-12)

    def test_r_asymptotic_slope(self):
        f = lambda v: nx.swoosh_r(nx.Tensor([v])).item()
        assert abs((f(101.0) - f(100.0)) - 0.92) < 1e-3
        assert abs(f(1e4) / 1e4 - 0.92) < 1e-3

    def test_no_overflow(self):
        x = nx.Tensor([-1e4, 1e4])
        assert np.all(np.isfinite(nx.swoosh_r(x).data))
        assert np.all(np.isfinite(nx.swoosh_l(x).data))

    @given(st.floats(4.0, 1e3), st.floats(0.0, 50.0))
    def test_monotone_above_four(self, x, dx):
        for fn in (nx.swoosh_r, nx.swoosh_l):
            assert fn(nx.Tensor([x + dx])).item() >= fn(nx.Tensor([x])).item()


def scalar_loop_bias_norm(x, bias, log_scale):
    out = np.zeros_like(x)
    t, d = x.shape
    for i in range(t):
        ss = 0.0
        for j in range(d):
            ss += (x[i, j] - bias[j]) ** 2
        rms = max(math.sqrt(ss / d), 1e-8)
        for j in range(d):
            out[i, j] = x[i, j] / rms * math.exp(log_scale)
    return out


class TestBiasNorm:
    def test_unit_rms(self):
        bias = np.array([0.5, -1.0, 2.0])
        x = bias + 1.0
        out = nx.bias_norm(nx.Tensor(x[None]), nx.Tensor(bias), nx.Tensor(0.0))
        np.testing.assert_allclose(out.data[0], x, atol=1e-15)

    def test_scale(self):
        bias = np.zeros(4)
        x = np.ones((1, 4))
        out = nx.bias_norm(nx.Tensor(x), nx.Tensor(bias), nx.Tensor(math.log(2)))
        np.testing.assert_allclose(out.data, 2 * x, atol=1e-14)

    def test_matches_scalar_loop(self):
        rng = np.random.default_rng(1)
        x, b = rng.normal(size=(4, 8)), rng.normal(size=8)
        out = nx.bias_norm(nx.Tensor(x), nx.Tensor(b), nx.Tensor(0.3))
        np.testing.assert_allclose(out.data, scalar_loop_bias_norm(x, b, 0.3), rtol=0, atol=1e-12)

    def test_zero_rms_floored(self):
        b = np.array([1.0, 2.0])
        out = nx.bias_norm(nx.Tensor(b[None]), nx.Tensor(b), nx.Tensor(0.0))
        assert np.all(np.isfinite(out.data))


class TestBackward:
    def test_sum(self):
        x = nx.parameter(np.arange(6.0).reshape(2, 3))
        with nx.Tape():
            nx.backward(x.sum())
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_half_square(self):
        x = nx.parameter(np.array([1.0, -2.0, 3.0]))
        with nx.Tape():
            nx.backward((x * x).sum() * 0.5)
        np.testing.assert_allclose(x.grad, x.data)

    def test_accumulates(self):
        x = nx.parameter(np.ones(3))
        for _ in range(2):
            with nx.Tape():
                nx.backward(x.sum())
        np.testing.assert_array_equal(x.grad, 2 * np.ones(3))

    def test_non_scalar_rejected(self):
        x = nx.parameter(np.ones(3))
        with nx.Tape():
            with pytest.raises(nx.ContractError):
                nx.backward(x * 2.0)

    def test_no_tape_records_nothing(self):
        x = nx.parameter(np.ones(3))
        y = x * 2.0
        assert not y.requires_grad

    def test_replay_is_bit_identical(self):
        rng = np.random.default_rng(3)
        a, w = rng.normal(size=(5, 4)), rng.normal(size=(4, 3))

        def run():
            pa, pw = nx.parameter(a), nx.parameter(w)
            with nx.Tape():
                y = nx.log_softmax(nx.swoosh_r(pa @ pw))
                nx.backward(y.sum() * y.mean())
            return y.data, pa.grad, pw.grad

        for u, v in zip(run(), run()):
            assert np.array_equal(u, v)


RNG = np.random.default_rng(42)

PRIMITIVE_CASES = {
    "matmul": (lambda a, b: (a @ b).sum() * 0.3 + ((a @ b) * (a @ b)).sum(), [RNG.normal(size=(3, 4)), RNG.normal(size=(4, 2))]),
    "batched_matmul": (lambda a, b: ((a @ b) * (a @ b)).sum(), [RNG.normal(size=(2, 3, 4)), RNG.normal(size=(2, 4, 2))]),
    "add_broadcast": (lambda a, b: ((a + b) * (a + b)).sum(), [RNG.normal(size=(3, 4)), RNG.normal(size=4)]),
    "sub_mul_div": (lambda a, b: ((a - b) * a / (nx.exp(b) + 1.0)).sum(), [RNG.normal(size=(3, 4)), RNG.normal(size=(3, 4))]),
    "log_sqrt_power": (lambda a: (nx.log(a) + nx.sqrt(a) + nx.power(a, 1.5)).sum(), [RNG.uniform(0.5, 2.0, size=(3, 3))]),
    "tanh_sigmoid_softplus": (lambda a: (nx.tanh(a) * nx.sigmoid(a) + nx.softplus(a)).sum(), [RNG.normal(size=(4, 3))]),
    "swoosh_r": (lambda a: (nx.swoosh_r(a) * nx.swoosh_r(a)).sum(), [RNG.normal(scale=3, size=(4, 3))]),
    "swoosh_l": (lambda a: (nx.swoosh_l(a) * nx.swoosh_l(a)).sum(), [RNG.normal(scale=3, size=(4, 3))]),
    "clamp_min": (lambda a: (nx.clamp_min(a, 0.1) * a).sum(), [RNG.normal(size=(3, 4))]),
    "gelu": (lambda a: (nx.gelu(a) * a).sum(), [RNG.normal(size=(3, 3))]),
    "log_softmax": (lambda a, w: (nx.log_softmax(a, axis=-1) * w).sum(), [RNG.normal(size=(3, 5)), RNG.normal(size=(3, 5))]),
    "softmax": (lambda a, w: (nx.softmax(a, axis=0) * w).sum(), [RNG.normal(size=(3, 5)), RNG.normal(size=(3, 5))]),
    "attention_softmax": (lambda a, w: (nx.attention_softmax(a) * w).sum(), [RNG.normal(size=(2, 3, 3)), RNG.normal(size=(2, 3, 3))]),
    "bias_norm": (lambda x, b, s, w: (nx.bias_norm(x, b, s) * w).sum(), [RNG.normal(size=(4, 8)), RNG.normal(size=8), np.array(0.2), RNG.normal(size=(4, 8))]),
    "reshape_transpose": (lambda a, w: (nx.transpose(a.reshape(2, 6), (1, 0)) * w).sum(), [RNG.normal(size=(3, 4)), RNG.normal(size=(6, 2))]),
    "getitem_fancy": (lambda a: (a[np.array([0, 2, 0])] * a[np.array([1, 1, 2])]).sum(), [RNG.normal(size=(3, 4))]),
    "getitem_slice": (lambda a: (a[1:, :2] * a[:2, 2:]).sum(), [RNG.normal(size=(3, 4))]),
    "concat": (lambda a, b: (nx.concat([a, b], axis=1) * nx.concat([b, a], axis=1)).sum(), [RNG.normal(size=(3, 2)), RNG.normal(size=(3, 2))]),
    "mean": (lambda a: (a.mean(axis=0) * a.mean(axis=0)).sum() + a.mean(), [RNG.normal(size=(3, 4))]),
    "where_rows": (lambda f, x: (nx.where_rows(np.array([True, False, True]), f, x) ** 1 * x).sum(), [RNG.normal(size=4), RNG.normal(size=(3, 4))]),
    "conv1d": (lambda x, w, b: (nx.conv1d(x, w, b, stride=2) ** 2).sum(), [RNG.normal(size=(11, 3)), RNG.normal(size=(3, 3, 2)), RNG.normal(size=2)]),
    "depthwise_conv1d": (lambda x, w: (nx.depthwise_conv1d(x, w) * nx.depthwise_conv1d(x, w)).sum(), [RNG.normal(size=(7, 3)), RNG.normal(size=(5, 3))]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_finite_difference_agreement(name):
    build, arrays = PRIMITIVE_CASES[name]
    assert max_rel_error(build, arrays) < 1e-4


def test_checkpoint_round_trip(tmp_path):
    tensors = {"encoder.stack0.w": np.arange(6.0).reshape(2, 3), "scalar": np.array(1.5), "ünï": np.zeros((0, 2))}
    path = tmp_path / "c.bin"
    checkpoint.save(path, tensors)
    raw = path.read_bytes()
    assert raw[:8] == b"ZSSL0001"
    back = checkpoint.load(path)
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].shape == tensors[k].shape
        assert np.array_equal(back[k], tensors[k])


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"NOTZSSL!" + b"\0" * 8)
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load(p)
