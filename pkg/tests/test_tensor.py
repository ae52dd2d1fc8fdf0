import numpy as np
import pytest

from msme import _kernels
from msme.attention import MEModule, SEModule, me_forward, se_forward
from msme.errors import ContractError, DimensionError
from msme.tensor import (ParameterRegistry, Tape, Tensor, add, backprop, center_crop, channel_scale,
                         concat_channels, conv2d_valid, dense, grad_check, maxpool2, moments, mul,
                         relu, scale, sigmoid, spatial_mean, split_channels, tsum, upconv2,
                         weighted_sum)
from msme.training import weighted_ce

SEEDS = range(5)
TOL = 1e-4


def _p(rng, *shape, lo=None, hi=None):
    data = rng.uniform(lo, hi, shape) if lo is not None else rng.standard_normal(shape)
    return Tensor(data, requires_grad=True)


# ---------------------------------------------------------------------------
# brute-force forward oracles
# ---------------------------------------------------------------------------


def _conv_loop(x, w, b):
    O, C, kh, kw = w.shape
    H, W = x.shape[1] - kh + 1, x.shape[2] - kw + 1
    out = np.zeros((O, H, W))
    for o in range(O):
        for i in range(H):
            for j in range(W):
                out[o, i, j] = b[o] + np.sum(w[o] * x[:, i:i + kh, j:j + kw])
    return out


def _pool_loop(x):
    C, H, W = x.shape
    out = np.zeros((C, H // 2, W // 2))
    idx = np.zeros((C, H // 2, W // 2), dtype=int)
    for c in range(C):
        for i in range(H // 2):
            for j in range(W // 2):
                win = [x[c, 2 * i, 2 * j], x[c, 2 * i, 2 * j + 1], x[c, 2 * i + 1, 2 * j], x[c, 2 * i + 1, 2 * j + 1]]
                k = max(range(4), key=lambda t: (win[t], -t))
                out[c, i, j], idx[c, i, j] = win[k], k
    return out, idx


def _upconv_loop(x, w, b):
    C, H, W = x.shape
    O = w.shape[1]
    out = np.tile(b[:, None, None], (1, 2 * H, 2 * W)).astype(float)
    for c in range(C):
        for i in range(H):
            for j in range(W):
                out[:, 2 * i:2 * i + 2, 2 * j:2 * j + 2] += x[c, i, j] * w[c]
    return out


@pytest.fixture(params=["numpy", "numba"])
def backend(request):
    old = _kernels.get_backend()
    try:
        _kernels.set_backend(request.param)
    except Exception as exc:  # numba missing
        pytest.skip(str(exc))
    yield request.param
    _kernels.set_backend(old)


def test_conv_matches_loop(backend):
    rng = np.random.default_rng(0)
    x, w, b = rng.standard_normal((3, 9, 7)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)
    out = conv2d_valid(Tensor(x), Tensor(w), Tensor(b)).data
    np.testing.assert_allclose(out, _conv_loop(x, w, b), atol=1e-12)


def test_maxpool_matches_window_scan_with_first_max_ties(backend):
    rng = np.random.default_rng(1)
    x = rng.integers(0, 3, (2, 6, 8)).astype(float)    # many ties
    out, idx = maxpool2(Tensor(x))
    ref, ref_idx = _pool_loop(x)
    np.testing.assert_array_equal(out.data, ref)
    np.testing.assert_array_equal(idx, ref_idx)


def test_upconv_matches_scatter_and_impulse(backend):
    rng = np.random.default_rng(2)
    x, w, b = rng.standard_normal((3, 4, 5)), rng.standard_normal((3, 2, 2, 2)), rng.standard_normal(2)
    np.testing.assert_allclose(upconv2(Tensor(x), Tensor(w), Tensor(b)).data, _upconv_loop(x, w, b), atol=1e-12)
    imp = np.zeros((3, 3, 3))
    imp[1, 1, 1] = 1.0
    out = upconv2(Tensor(imp), Tensor(w), Tensor(np.zeros(2))).data
    np.testing.assert_array_equal(out[:, 2:4, 2:4], w[1])
    assert np.count_nonzero(out) == np.count_nonzero(w[1])


def test_shape_errors():
    with pytest.raises(DimensionError):
        conv2d_valid(Tensor(np.zeros((2, 5, 5))), Tensor(np.zeros((1, 3, 3, 3))), Tensor(np.zeros(1)))
    with pytest.raises(DimensionError):
        maxpool2(Tensor(np.zeros((1, 5, 4))))
    with pytest.raises(DimensionError):
        center_crop(Tensor(np.zeros((1, 6, 6))), (3, 3))


# ---------------------------------------------------------------------------
# gradient checks per primitive
# ---------------------------------------------------------------------------


def _b_conv(rng):
    x, w, b = _p(rng, 2, 7, 6), _p(rng, 3, 2, 3, 3), _p(rng, 3)
    w_out = rng.standard_normal((3, 5, 4))
    return (lambda: weighted_sum(conv2d_valid(x, w, b), w_out)), [x, w, b]


def _b_maxpool(rng):
    # a shuffled well-spaced grid keeps every window's maximum unique under +-h
    vals = rng.permutation(2 * 6 * 8).reshape(2, 6, 8) * 0.1
    x = Tensor(vals, requires_grad=True)
    w_out = rng.standard_normal((2, 3, 4))
    return (lambda: weighted_sum(maxpool2(x)[0], w_out)), [x]


def _b_upconv(rng):
    x, w, b = _p(rng, 3, 3, 4), _p(rng, 3, 2, 2, 2), _p(rng, 2)
    w_out = rng.standard_normal((2, 6, 8))
    return (lambda: weighted_sum(upconv2(x, w, b), w_out)), [x, w, b]


def _b_crop_concat(rng):
    a, b = _p(rng, 2, 8, 8), _p(rng, 3, 4, 4)
    w_out = rng.standard_normal((5, 4, 4))
    return (lambda: weighted_sum(concat_channels(a, b), w_out)), [a, b]


def _b_split(rng):
    x = _p(rng, 5, 3, 3)
    wa, wb = rng.standard_normal((2, 3, 3)), rng.standard_normal((3, 3, 3))

    def loss():
        a, b = split_channels(x, 2)
        return add(weighted_sum(a, wa), weighted_sum(b, wb))
    return loss, [x]


def _b_dense(rng):
    x, w, b = _p(rng, 6), _p(rng, 4, 6), _p(rng, 4)
    w_out = rng.standard_normal(4)
    return (lambda: add(weighted_sum(dense(x, w, b), w_out), weighted_sum(dense(x, w), w_out))), [x, w, b]


def _b_relu(rng):
    # keep every entry at least 0.1 away from the kink
    x = Tensor(rng.choice([-1, 1], 20) * rng.uniform(0.1, 2, 20), requires_grad=True)
    w_out = rng.standard_normal(20)
    return (lambda: weighted_sum(relu(x), w_out)), [x]


def _b_sigmoid(rng):
    x = _p(rng, 12)
    w_out = rng.standard_normal(12)
    return (lambda: weighted_sum(sigmoid(x), w_out)), [x]


def _b_mean_scale(rng):
    x, s = _p(rng, 3, 4, 5), _p(rng, 3)
    w1, w2 = rng.standard_normal(3), rng.standard_normal((3, 4, 5))
    return (lambda: add(weighted_sum(spatial_mean(x), w1), weighted_sum(channel_scale(x, s), w2))), [x, s]


def _b_moments(n):
    def builder(rng):
        feats = [_p(rng, 2, 3, 3) for _ in range(n)]
        w_out = rng.standard_normal((4, 3, 3))
        return (lambda: weighted_sum(moments(feats), w_out)), feats
    return builder


def _b_arith(rng):
    a, b = _p(rng, 3, 4), _p(rng, 3, 4)
    return (lambda: tsum(mul(add(a, scale(b, 1.7)), b))), [a, b]


def _b_weighted_ce(rng):
    z = _p(rng, 2, 4, 3)
    t = (rng.random((4, 3)) < 0.4).astype(float)
    y = np.stack([1 - t, t])
    W = rng.uniform(0.05, 4.0, 2)
    return (lambda: weighted_ce(z, y, W)), [z]


def _b_se(rng):
    reg = ParameterRegistry(np.float64)
    mod = SEModule.create(reg, "se", 6, rng)
    x = _p(rng, 6, 4, 4, lo=0.1, hi=2.0)
    w_out = rng.standard_normal((6, 4, 4))
    return (lambda: weighted_sum(se_forward(x, mod), w_out)), [x] + reg.tensors()


def _b_me(rng):
    reg = ParameterRegistry(np.float64)
    mod = MEModule.create(reg, "me", 3, 5, rng)
    for t in (mod.b1, mod.b2):
        t.data[...] = rng.uniform(0.1, 0.5, t.shape)
    v = rng.integers(0, 2, 3)
    v[rng.integers(3)] = 1
    x = _p(rng, 5, 3, 3)
    w_out = rng.standard_normal((5, 3, 3))
    return (lambda: weighted_sum(me_forward(x, v, mod), w_out)), [x] + reg.tensors()


PRIMITIVES = {
    "conv2d": _b_conv, "maxpool2": _b_maxpool, "upconv2": _b_upconv, "crop_concat": _b_crop_concat,
    "split": _b_split, "dense": _b_dense, "relu": _b_relu, "sigmoid": _b_sigmoid,
    "mean_and_channel_scale": _b_mean_scale, "moments_single": _b_moments(1), "moments_three": _b_moments(3),
    "arithmetic": _b_arith, "weighted_ce": _b_weighted_ce, "se": _b_se, "me": _b_me,
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    errs = [grad_check(PRIMITIVES[name], s) for s in SEEDS]
    assert max(errs) < TOL, errs


def test_bilinear_graph_has_no_truncation_error():
    # central differences are exact for a function linear in each coordinate,
    # leaving only round-off of order eps * |loss| / h
    def builder(rng):
        x, w = _p(rng, 2, 5, 5), _p(rng, 3, 2, 3, 3)
        b = Tensor(np.zeros(3), requires_grad=True)
        w_out = rng.standard_normal((3, 3, 3))
        return (lambda: weighted_sum(conv2d_valid(x, w, b), w_out)), [x, w, b]
    assert max(grad_check(builder, s) for s in SEEDS) < 1e-7


def test_grad_check_rejects_float32():
    def builder(rng):
        x = Tensor(np.ones(3, np.float32), requires_grad=True)
        return (lambda: tsum(x)), [x]
    with pytest.raises(ContractError):
        grad_check(builder, 0)


# ---------------------------------------------------------------------------
# tape semantics
# ---------------------------------------------------------------------------


def test_backprop_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = scale(x, 2.0)
    with pytest.raises(ContractError):
        backprop(tape, y)


def test_reused_tensor_accumulates():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        loss = tsum(mul(x, x))
    grads = backprop(tape, loss)
    np.testing.assert_array_equal(grads[x], [2.0, 4.0])
    with Tape() as tape:
        loss = tsum(x)
    backprop(tape, loss)
    np.testing.assert_array_equal(x.grad, [3.0, 5.0])


def test_no_recording_without_grad_or_tape():
    x = Tensor(np.ones(4))
    with Tape() as tape:
        relu(scale(x, 2.0))
    assert len(tape) == 0
    y = Tensor(np.ones(4), requires_grad=True)
    out = relu(y)
    assert not out.requires_grad


def test_registry_snapshot_restore():
    reg = ParameterRegistry(np.float64)
    a = reg.add("a", np.arange(3.0))
    reg.add("b", np.ones((2, 2)))
    snap = reg.snapshot()
    a.data += 5
    reg.restore(snap)
    np.testing.assert_array_equal(reg["a"].tensor.data, np.arange(3.0))
    assert reg.count() == 7
    with pytest.raises(ContractError):
        reg.add("a", np.zeros(1))
    with pytest.raises(DimensionError):
        reg.restore([np.zeros(2), np.ones((2, 2))])


# ---------------------------------------------------------------------------
# backend parity
# ---------------------------------------------------------------------------


def test_backends_agree():
    pytest.importorskip("numba")
    rng = np.random.default_rng(7)
    x = rng.standard_normal((3, 10, 12)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    wu = rng.standard_normal((3, 2, 2, 2)).astype(np.float32)
    b = rng.standard_normal(4).astype(np.float32)
    g = rng.standard_normal((4, 8, 10)).astype(np.float32)
    gu = rng.standard_normal((2, 20, 24)).astype(np.float32)
    logits = rng.standard_normal((2, 5, 5)).astype(np.float32)
    t = (rng.random((5, 5)) < 0.3).astype(np.float32)
    labels = np.stack([1 - t, t])
    W = np.array([0.3, 2.0])
    old = _kernels.get_backend()
    res = {}
    try:
        for name in ("numpy", "numba"):
            _kernels.set_backend(name)
            res[name] = [
                _kernels.conv2d_forward(x, w, b), *_kernels.conv2d_backward(x, w, g),
                *_kernels.maxpool2_forward(x),
                _kernels.upconv2_forward(x, wu, b[:2]), *_kernels.upconv2_backward(x, wu, gu),
                _kernels.weighted_ce(logits, labels, W)[1],
            ]
    finally:
        _kernels.set_backend(old)
    for a, b_ in zip(res["numpy"], res["numba"]):
        np.testing.assert_allclose(a, b_, rtol=1e-5, atol=1e-5)
