import io
import zlib
from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from trustseg import diffcore as dc
from trustseg.diffcore import (
    AutodiffError,
    ConfigError,
    NonFiniteError,
    OptimizerState,
    Tape,
    Tensor,
)
from trustseg.verify import GRADIENT_CASES, fd_relative_error


def conv_oracle(x, w, b):
    """Straight nested-loop 'same' convolution (cross-correlation)."""
    h, wd, cin = x.shape
    k = w.shape[0]
    r = k // 2
    out = np.zeros((h, wd, w.shape[3]))
    for i in range(h):
        for j in range(wd):
            for co in range(w.shape[3]):
                acc = b[co]
                for di in range(k):
                    for dj in range(k):
                        ii, jj = i + di - r, j + dj - r
                        if 0 <= ii < h and 0 <= jj < wd:
                            for ci in range(cin):
                                acc += x[ii, jj, ci] * w[di, dj, ci, co]
                out[i, j, co] = acc
    return out


def test_tensor_rejects_non_finite():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])
    with pytest.raises(NonFiniteError):
        dc.log(Tensor([0.0]))


def test_zero_params_give_zero_logits():
    p = dc.init_params(3, 4, hidden=5, depth=2, seed=1)
    for name, t in p.tensors.items():
        p.tensors[name] = Tensor(np.zeros(t.shape), requires_grad=True)
    out = dc.forward(p, np.random.default_rng(0).uniform(size=(6, 7, 3)))
    assert out.shape == (6, 7, 4)
    assert np.all(out.data == 0.0)


def test_identity_head():
    p = dc.init_params(3, 3, hidden=4, depth=0)
    p.tensors["head.w"] = Tensor(np.eye(3).reshape(1, 1, 3, 3))
    img = np.random.default_rng(1).uniform(size=(5, 4, 3))
    assert np.array_equal(dc.forward(p, img).data, img)


def test_two_layer_net_matches_loop_oracle():
    rng = np.random.default_rng(2)
    p = dc.init_params(3, 4, hidden=3, depth=1, seed=3)
    for name in p.tensors:
        p.tensors[name] = Tensor(rng.normal(size=p.tensors[name].shape))
    img = rng.uniform(size=(5, 5, 3))
    hidden = np.maximum(conv_oracle(img, p["conv0.w"].data, p["conv0.b"].data), 0.0)
    expect = conv_oracle(hidden, p["head.w"].data, p["head.b"].data)
    np.testing.assert_allclose(dc.forward(p, img).data, expect, atol=1e-10, rtol=0)


@pytest.mark.parametrize("k", [1, 3, 5])
def test_conv2d_matches_oracle(k):
    rng = np.random.default_rng(k)
    x, w, b = rng.normal(size=(6, 5, 2)), rng.normal(size=(k, k, 2, 3)), rng.normal(size=3)
    out = dc.conv2d(Tensor(x), Tensor(w), Tensor(b)).data
    np.testing.assert_allclose(out, conv_oracle(x, w, b), atol=1e-10, rtol=0)


def test_forward_shape_and_channel_check():
    p = dc.init_params(3, 5, hidden=4, depth=2)
    assert dc.forward(p, np.zeros((7, 9, 3))).shape == (7, 9, 5)
    with pytest.raises(ConfigError):
        dc.forward(p, np.zeros((7, 9, 2)))


def test_softmax_uniform():
    q = dc.softmax(Tensor(np.full((2, 3, 5), 0.7)))
    np.testing.assert_allclose(q.data, 0.2, rtol=0, atol=1e-15)


@pytest.mark.parametrize("x", [-30.0, -3.0, -0.5, 0.0, 0.25, 4.0, 30.0])
def test_two_class_softmax_is_sigmoid(x):
    q = dc.softmax(Tensor([[x, 0.0]])).data[0]
    assert q[0] == pytest.approx(1.0 / (1.0 + np.exp(-x)), rel=1e-14, abs=1e-300)


def test_softmax_high_precision_oracle():
    getcontext().prec = 50
    logits = [Decimal(3), Decimal(1), Decimal(0)]
    z = sum(v.exp() for v in logits)
    expect = [float(v.exp() / z) for v in logits]
    got = dc.softmax(Tensor([3.0, 1.0, 0.0])).data
    np.testing.assert_allclose(got, expect, rtol=1e-15, atol=0)
    # frozen values of the oracle
    np.testing.assert_allclose(got, [0.8437947344813395, 0.11419519938459448, 0.04201006613406605], rtol=1e-15)


def test_backward_sum_gives_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    with Tape():
        y = dc.tsum(x)
    dc.backward(y)
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_backward_squared_norm():
    v = np.random.default_rng(0).normal(size=7)
    x = Tensor(v, requires_grad=True)
    with Tape():
        y = dc.tsum(dc.square(x))
    dc.backward(y)
    np.testing.assert_allclose(x.grad, 2 * v, rtol=0, atol=1e-15)


def test_backward_errors():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape():
        vec = dc.scale(x, 2.0)
        s = dc.tsum(vec)
    with pytest.raises(AutodiffError):
        dc.backward(vec)
    dc.backward(s)
    with pytest.raises(AutodiffError):
        dc.backward(s)
    with pytest.raises(AutodiffError):
        dc.backward(dc.tsum(x))  # no tape recorded it


def test_gradients_accumulate():
    x = Tensor(np.ones(2), requires_grad=True)
    for _ in range(2):
        with Tape():
            y = dc.tsum(dc.scale(x, 3.0))
        dc.backward(y)
    assert np.array_equal(x.grad, [6.0, 6.0])


def test_tape_reset_allows_rerun():
    x = Tensor(np.ones(2), requires_grad=True)
    tape = Tape()
    with tape:
        y = dc.tsum(x)
    dc.backward(y)
    tape.reset()
    with tape:
        y = dc.tsum(x)
    dc.backward(y)
    assert np.array_equal(x.grad, [2.0, 2.0])


@pytest.mark.parametrize("name", [n for n in GRADIENT_CASES if n not in {"ce", "pce", "robust_ce", "forward_corrected_ce", "mixed_robust_kl", "bilinear_potts"}])
def test_op_gradients_match_finite_differences(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(5):
        assert fd_relative_error(*GRADIENT_CASES[name](rng)) < 1e-4


def test_log_prob_exact_for_softmax_outputs():
    x = Tensor([[-40.0, 0.0]], requires_grad=True)
    with Tape():
        q = dc.softmax(x)
        lp = dc.tsum(dc.pick(dc.log_prob(q), np.array([0])))
    assert lp.item() == pytest.approx(-40.0, rel=1e-12)
    dc.backward(lp)
    np.testing.assert_allclose(x.grad, [[1.0, -1.0]], atol=1e-15)


def test_log_prob_floors_plain_tensors():
    q = Tensor([0.0, 0.5])
    np.testing.assert_allclose(dc.log_prob(q).data, [np.log(1e-12), np.log(0.5)])


def test_sgd_zero_grad_keeps_params():
    p = dc.init_params(2, 2, hidden=2, depth=1)
    before = p.flat()
    for t in p.tensors.values():
        t.grad = np.zeros(t.shape)
    dc.sgd_step(p, OptimizerState(0.1, momentum=0.9, total_steps=10))
    assert np.array_equal(p.flat(), before)


class _Scalar:
    def __init__(self, w):
        self.tensors = {"w": Tensor([w], requires_grad=True)}


def test_sgd_single_step():
    p = _Scalar(1.0)
    p.tensors["w"].grad = np.array([2.0])
    dc.sgd_step(p, OptimizerState(0.1, momentum=0.0, power=0.9, total_steps=10**9))
    assert p.tensors["w"].data[0] == pytest.approx(0.8, abs=1e-8)


def test_sgd_momentum_two_steps():
    p = _Scalar(0.0)
    opt = OptimizerState(0.1, momentum=0.9, power=0.0, total_steps=100)
    for _ in range(2):
        p.tensors["w"].grad = np.array([1.0])
        dc.sgd_step(p, opt)
    assert p.tensors["w"].data[0] == pytest.approx(-0.29, abs=1e-15)


def test_sgd_requires_grads():
    p = dc.init_params(2, 2, hidden=2, depth=1)
    with pytest.raises(AutodiffError):
        dc.sgd_step(p, OptimizerState(0.1))


@settings(max_examples=50, deadline=None)
@given(base=st.floats(1e-4, 1.0), power=st.floats(0.0, 3.0), total=st.integers(1, 500))
def test_rate_schedule_non_increasing(base, power, total):
    opt = OptimizerState(base, power=power, total_steps=total)
    rates = [opt.rate(s) for s in range(total + 3)]
    assert all(r >= 0 for r in rates)
    assert all(b <= a + 1e-15 for a, b in zip(rates, rates[1:]))
    assert rates[0] == base


def test_checkpoint_round_trip():
    p = dc.init_params(3, 4, hidden=5, depth=2, seed=7)
    buf = io.BytesIO()
    dc.save_params(p, buf)
    buf.seek(0)
    q = dc.load_params(buf)
    assert q.num_params() == p.num_params()
    assert np.array_equal(q.flat(), p.flat())
    assert (q.in_channels, q.hidden, q.depth, q.n_classes) == (3, 5, 2, 4)


def test_checkpoint_bad_magic():
    with pytest.raises(ConfigError):
        dc.load_params(io.BytesIO(b"NOTACKPT" + b"\0" * 32))


def test_set_flat_round_trip():
    p = dc.init_params(3, 2, hidden=3, depth=1, seed=1)
    v = np.arange(p.num_params(), dtype=float)
    p.set_flat(v)
    assert np.array_equal(p.flat(), v)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-20, 20)))
def test_property_softmax_is_distribution(x):
    q = dc.softmax(Tensor(x)).data
    assert np.all(q >= 0)
    np.testing.assert_allclose(q.sum(axis=-1), 1.0, atol=1e-12)
