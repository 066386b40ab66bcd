"""Finite-difference verification of every autograd primitive."""

import numpy as np
import pytest

from diffprobe import autograd as ag
from diffprobe.autograd import Tensor

from gradcheck import check_gradients

RNG = np.random.default_rng(0)


def randn(*shape):
    return RNG.standard_normal(shape)


@pytest.mark.parametrize("op", [
    lambda ts: (ts[0] + ts[1]).sum(),
    lambda ts: (ts[0] - ts[1]).sum(),
    lambda ts: (ts[0] * ts[1]).sum(),
    lambda ts: (ts[0] / (ts[1] * ts[1] + 1.0)).sum(),
])
def test_binary_ops(op):
    check_gradients(op, [randn(3, 4), randn(3, 4)])


def test_broadcasting():
    check_gradients(lambda ts: (ts[0] * ts[1] + ts[2]).sum(),
                    [randn(2, 3, 4), randn(3, 1), randn(4)])


def test_scalar_mix():
    check_gradients(lambda ts: (2.0 * ts[0] - 0.5 + ts[0] / 3.0 + 1.0 / (ts[0] * ts[0] + 2.0)).sum(),
                    [randn(5)])


@pytest.mark.parametrize("fn", [
    ag.exp, ag.log, ag.sqrt, ag.tanh, ag.sigmoid, ag.silu, ag.relu, ag.absolute,
])
def test_unary_ops(fn):
    x = np.abs(randn(4, 3)) + 0.5  # keep log/sqrt in-domain, relu/abs away from kink
    check_gradients(lambda ts: fn(ts[0]).sum(), [x])


def test_power():
    check_gradients(lambda ts: ag.power(ts[0], 3.0).sum(), [randn(4) + 3.0])


@pytest.mark.parametrize("axis,keepdims", [(None, False), (0, False), (1, True), ((0, 2), False)])
def test_reductions(axis, keepdims):
    check_gradients(lambda ts: (ag.tensor_sum(ts[0], axis, keepdims) * 2.0).sum(), [randn(2, 3, 4)])
    check_gradients(lambda ts: (ag.tensor_mean(ts[0], axis, keepdims) * 2.0).sum(), [randn(2, 3, 4)])


def test_reshape_transpose_concat_getitem():
    def loss(ts):
        a = ag.reshape(ts[0], (4, 6))
        b = ag.transpose(a, (1, 0))
        c = ag.concatenate([b, b * 2.0], axis=1)
        return (c[1:4, 2:7] * c[1:4, 2:7]).sum()

    check_gradients(loss, [randn(2, 3, 4)])


def test_matmul_2d_and_batched():
    check_gradients(lambda ts: ag.matmul(ts[0], ts[1]).sum(), [randn(3, 4), randn(4, 5)])
    check_gradients(lambda ts: ag.matmul(ts[0], ts[1]).sum(), [randn(2, 3, 4), randn(2, 4, 5)])
    # broadcast: shared rhs across batch
    check_gradients(lambda ts: ag.matmul(ts[0], ts[1]).sum(), [randn(2, 3, 4), randn(4, 5)])


def test_softmax_and_log_softmax():
    weights = randn(3, 5)

    def loss_softmax(ts):
        return (ag.softmax(ts[0], axis=-1) * Tensor(weights)).sum()

    def loss_logsoftmax(ts):
        return (ag.log_softmax(ts[0], axis=-1) * Tensor(weights)).sum()

    check_gradients(loss_softmax, [randn(3, 5)])
    check_gradients(loss_logsoftmax, [randn(3, 5)])


def test_gather_last():
    idx = RNG.integers(0, 5, size=(3, 2))
    check_gradients(lambda ts: (ag.gather_last(ts[0], idx) * 2.0).sum(), [randn(3, 5)])


def test_take_and_scatter_rows():
    idx = np.array([2, 0, 2])  # duplicate row: backward must accumulate
    check_gradients(lambda ts: (ag.take_rows(ts[0], idx) * 3.0).sum(), [randn(4, 3)])
    uniq = np.array([3, 1])
    check_gradients(lambda ts: (ag.scatter_rows(ts[0], uniq, 5) * 2.0).sum(), [randn(2, 3)])


@pytest.mark.parametrize("cin,cout,k,stride,pad,size", [
    (2, 3, 3, 1, 1, 6),
    (3, 2, 1, 1, 0, 5),
    (2, 4, 3, 2, 1, 8),
    (1, 2, 5, 1, 2, 7),
])
def test_conv2d(cin, cout, k, stride, pad, size):
    def loss(ts):
        return (ag.conv2d(ts[0], ts[1], ts[2], stride=stride, padding=pad) ** 2.0).sum()

    check_gradients(loss, [randn(2, cin, size, size), randn(cout, cin, k, k), randn(cout)])


def test_conv2d_channel_mismatch():
    with pytest.raises(ValueError, match="channel mismatch"):
        ag.conv2d(Tensor(randn(1, 3, 4, 4)), Tensor(randn(2, 4, 3, 3)), None, padding=1)


@pytest.mark.parametrize("size,out", [((6, 6), (3, 3)), ((4, 4), (8, 8)), ((5, 7), (3, 9))])
def test_bilinear_resize(size, out):
    check_gradients(lambda ts: (ag.bilinear_resize(ts[0], out) ** 2.0).sum(),
                    [randn(2, 3, *size)])


def test_adaptive_avg_pool():
    check_gradients(lambda ts: (ag.adaptive_avg_pool2d(ts[0], (3, 3)) * 2.0).sum(),
                    [randn(2, 2, 7, 5)])
    # output larger than input: overlapping unit bins
    check_gradients(lambda ts: (ag.adaptive_avg_pool2d(ts[0], (6, 6)) * 2.0).sum(),
                    [randn(1, 2, 4, 4)])


def test_avg_pool_and_upsample():
    check_gradients(lambda ts: (ag.avg_pool2x2(ts[0]) ** 2.0).sum(), [randn(2, 3, 4, 6)])
    check_gradients(lambda ts: (ag.upsample_nearest2x(ts[0]) ** 2.0).sum(), [randn(2, 3, 3, 4)])


def test_grad_accumulates_over_reuse():
    x = Tensor(np.array([2.0, 3.0]), requires_grad=True)
    y = (x * x + x).sum()
    y.backward()
    np.testing.assert_allclose(x.grad, np.array([5.0, 7.0]))


def test_no_grad_blocks_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with ag.no_grad():
        y = (x * 2.0).sum()
    assert not y.requires_grad
    assert y._vjp is None


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_dtype_preserved_through_ops():
    x = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
    y = ag.silu(x * 2.0 + 0.5) / 3.0 - 1.0
    z = ag.sigmoid(y).mean()
    assert z.dtype == np.float32
    z.backward()
    assert x.grad.dtype == np.float32
