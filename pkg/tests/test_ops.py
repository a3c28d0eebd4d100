import numpy as np
import pytest

from mdil import gradcheck, ops
from mdil.tensor import Tensor, backward, inject_grad_fault


def naive_conv(x, w, stride, pad):
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for b in range(n):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[b, :, i * stride:i * stride + k, j * stride:j * stride + k]
                    out[b, o, i, j] = (patch * w[o]).sum()
    return out


def naive_tconv(x, w, pad):
    # scatter form: every input pixel stamps a k x k copy of the kernel
    n, cin, h, wd = x.shape
    _, cout, k, _ = w.shape
    full = np.zeros((n, cout, 2 * h + k, 2 * wd + k))
    for b in range(n):
        for c in range(cin):
            for i in range(h):
                for j in range(wd):
                    full[b, :, 2 * i:2 * i + k, 2 * j:2 * j + k] += x[b, c, i, j] * w[c]
    return full[:, :, pad:pad + 2 * h, pad:pad + 2 * wd]


@pytest.mark.parametrize("k,stride", [(3, 1), (3, 2), (1, 1), (5, 1)])
def test_conv2d_matches_naive(k, stride):
    rng = np.random.default_rng(k * 10 + stride)
    x = rng.standard_normal((2, 3, 7, 8))
    w = rng.standard_normal((4, 3, k, k))
    got = ops.conv2d(Tensor(x), Tensor(w), stride=stride).data
    np.testing.assert_allclose(got, naive_conv(x, w, stride, (k - 1) // 2), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("k", [2, 4])
def test_transposed_conv_matches_naive_scatter(k):
    rng = np.random.default_rng(k)
    x = rng.standard_normal((2, 3, 4, 5))
    w = rng.standard_normal((3, 2, k, k))
    got = ops.transposed_conv2d(Tensor(x), Tensor(w)).data
    assert got.shape == (2, 2, 8, 10)
    np.testing.assert_allclose(got, naive_tconv(x, w, (k - 2) // 2), rtol=1e-12, atol=1e-12)


def test_transposed_conv_rejects_odd_kernel():
    with pytest.raises(ValueError):
        ops.transposed_conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


def test_conv_channel_mismatch():
    with pytest.raises(ValueError):
        ops.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


def test_batchnorm_train_by_hand():
    # one channel, values 1..4: mean 2.5, biased var 1.25, unbiased 5/3
    x = Tensor(np.arange(1.0, 5.0).reshape(1, 1, 2, 2))
    rm, rv = np.zeros(1), np.ones(1)
    out = ops.batchnorm2d(x, Tensor(np.array([2.0])), Tensor(np.array([1.0])), rm, rv, "train", eps=1e-12)
    expect = 2.0 * (np.arange(1.0, 5.0) - 2.5) / np.sqrt(1.25) + 1.0
    np.testing.assert_allclose(out.data.ravel(), expect, rtol=1e-10)
    np.testing.assert_allclose(rm, [0.25])
    np.testing.assert_allclose(rv, [0.9 + 0.1 * 5.0 / 3.0])


def test_batchnorm_infer_uses_running_stats_and_updates_nothing():
    x = Tensor(np.full((1, 1, 2, 2), 3.0))
    rm, rv = np.array([1.0]), np.array([4.0])
    out = ops.batchnorm2d(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), rm, rv, "infer", eps=1e-12)
    np.testing.assert_allclose(out.data, 1.0)
    assert rm[0] == 1.0 and rv[0] == 4.0


def test_batchnorm_bad_mode():
    with pytest.raises(ValueError):
        ops.batchnorm2d(Tensor(np.zeros((1, 1, 1, 1))), Tensor(np.ones(1)), Tensor(np.zeros(1)),
                        np.zeros(1), np.ones(1), "eval")


def test_cross_entropy_by_hand_with_ignore():
    logits = np.zeros((1, 2, 1, 3))
    logits[0, 0, 0, 0] = np.log(3.0)      # p(class 0) = 3/4 at pixel 0
    labels = np.array([[[0, 1, 255]]])
    loss = ops.cross_entropy(Tensor(logits), labels).item()
    assert loss == pytest.approx((-np.log(0.75) - np.log(0.5)) / 2)


def test_cross_entropy_all_ignored_is_zero():
    t = Tensor(np.ones((1, 2, 2, 2)), requires_grad=True)
    with pytest.warns(RuntimeWarning):
        loss = ops.cross_entropy(t, np.full((1, 2, 2), 255))
    assert loss.item() == 0.0
    backward(loss)
    assert not t.grad.any()


def test_cross_entropy_label_out_of_range():
    with pytest.raises(ValueError):
        ops.cross_entropy(Tensor(np.zeros((1, 2, 1, 1))), np.array([[[2]]]))


def test_kl_zero_for_identical_and_positive_otherwise():
    z = np.random.default_rng(0).standard_normal((2, 4, 3, 3))
    assert abs(ops.kl_div(Tensor(z), z).item()) < 1e-12
    assert ops.kl_div(Tensor(z), z * 2).item() > 0


def test_kl_by_hand():
    s = np.log(np.array([0.5, 0.5])).reshape(1, 2, 1, 1)
    t = np.log(np.array([0.25, 0.75])).reshape(1, 2, 1, 1)
    want = 0.25 * np.log(0.25 / 0.5) + 0.75 * np.log(0.75 / 0.5)
    assert ops.kl_div(Tensor(s), t).item() == pytest.approx(want)


def test_log_softmax_normalizes():
    z = np.random.default_rng(1).standard_normal((2, 5, 2, 2)) * 30
    p = np.exp(ops.log_softmax(Tensor(z)).data).sum(axis=1)
    np.testing.assert_allclose(p, 1.0, rtol=1e-12)


@pytest.mark.parametrize("name", sorted(gradcheck.OP_CASES))
def test_gradcheck_detects_corrupted_backward(name):
    op = {"conv2d_1x1": "conv2d", "dau_unit": "conv2d"}.get(name, name)
    assert gradcheck.check_op(name, 0).ok
    with inject_grad_fault(op, 1.01):
        assert not gradcheck.check_op(name, 0).ok
