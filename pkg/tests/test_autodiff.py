"""Autodiff engine: forward oracles and finite-difference gates."""

import numpy as np
import pytest

from voxcomplete import autodiff as ad


def rng_for(name):
    return np.random.default_rng(abs(hash(name)) % 2**32)


def naive_conv3(x, w, b, stride, pad):
    co, ci, k = w.shape[0], w.shape[1], w.shape[2]
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (pad, pad)))
    osp = tuple((d + 2 * pad - k) // stride + 1 for d in x.shape[1:])
    out = np.zeros((co,) + osp)
    for o in range(co):
        for z in range(osp[0]):
            for y in range(osp[1]):
                for xx in range(osp[2]):
                    window = xp[:, z * stride : z * stride + k,
                                y * stride : y * stride + k,
                                xx * stride : xx * stride + k]
                    out[o, z, y, xx] = (window * w[o]).sum() + (b[o] if b is not None else 0.0)
    return out


def test_conv3_identity_kernel():
    rng = rng_for("ident")
    x = ad.constant(rng.normal(size=(3, 5, 5, 5)))
    w = np.zeros((3, 3, 1, 1, 1))
    for c in range(3):
        w[c, c, 0, 0, 0] = 1.0
    y = ad.conv3(x, ad.constant(w))
    assert np.array_equal(y.data, x.data)


def test_linear_identity():
    rng = rng_for("linid")
    x = ad.constant(rng.normal(size=(7, 4)))
    y = ad.linear(x, ad.constant(np.eye(4)), ad.constant(np.zeros(4)))
    assert np.allclose(y.data, x.data)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
def test_conv3_matches_naive_oracle(stride, pad):
    rng = rng_for(f"conv{stride}{pad}")
    x = rng.normal(size=(2, 5, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3, 3))
    b = rng.normal(size=3)
    got = ad.conv3(ad.constant(x), ad.constant(w), ad.constant(b), stride, pad).data
    assert np.abs(got - naive_conv3(x, w, b, stride, pad)).max() < 1e-12


def test_backward_sum_gives_ones():
    x = ad.parameter(np.arange(12.0).reshape(3, 4))
    ad.backward(ad.reduce_sum(x))
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_backward_quadratic_gives_2x():
    x = ad.parameter(np.arange(6.0).reshape(2, 3))
    ad.backward(ad.reduce_sum(ad.mul(x, x)))
    assert np.array_equal(x.grad, 2 * x.data)


def test_backward_requires_scalar():
    x = ad.parameter(np.ones(3))
    with pytest.raises(ValueError):
        ad.backward(ad.mul(x, x))


def test_backward_visits_each_node_once():
    # a diamond: loss = sum((x+x) * (x+x)); naive double-visit would
    # double-count gradients
    x = ad.parameter(np.array([1.5, -2.0]))
    s = ad.add(x, x)
    ad.backward(ad.reduce_sum(ad.mul(s, s)))
    assert np.allclose(x.grad, 8 * x.data)


def test_backward_deterministic_bitwise():
    def run():
        rng = np.random.default_rng(123)
        x = ad.parameter(rng.normal(size=(4, 6)))
        w = ad.parameter(rng.normal(size=(5, 6)))
        h = ad.softplus(ad.linear(x, w))
        ad.backward(ad.reduce_mean(ad.mul(h, h)))
        return x.grad.tobytes(), w.grad.tobytes()

    assert run() == run()


ELEMENTWISE = {
    "add": lambda a, b: ad.add(a, b),
    "sub": lambda a, b: ad.sub(a, b),
    "mul": lambda a, b: ad.mul(a, b),
    "div": lambda a, b: ad.div(a, ad.add(ad.mul(b, b), ad.constant(1.0))),
    "sigmoid": lambda a, b: ad.sigmoid(a),
    "softplus": lambda a, b: ad.softplus(a),
    "exp": lambda a, b: ad.exp(a),
    "abs": lambda a, b: ad.absolute(a),
    "tanh": lambda a, b: ad.tanh(a),
    "log1p_abs": lambda a, b: ad.log(ad.add(ad.absolute(a), ad.constant(1.0))),
    "sqrt": lambda a, b: ad.sqrt(ad.add(ad.mul(a, a), ad.constant(0.5))),
}


@pytest.mark.parametrize("name", sorted(ELEMENTWISE))
def test_elementwise_grad_checks(name):
    rng = rng_for(name)
    a = ad.parameter(rng.normal(size=(3, 4)) + 0.3)
    b = ad.parameter(rng.normal(size=(3, 4)))
    op = ELEMENTWISE[name]
    err = ad.grad_check(lambda ps: ad.reduce_mean(ad.mul(op(ps[0], ps[1]), op(ps[0], ps[1]))), [a, b])
    assert err < 1e-4, (name, err)


def test_shape_ops_grad_checks():
    rng = rng_for("shape")
    x = ad.parameter(rng.normal(size=(4, 3)))
    idx = np.array([2, 0, 1, 1])

    def f(ps):
        t = ad.take(ps[0], idx, axis=0)
        c = ad.concat([t, ad.transpose(t, (0, 1))], axis=1)
        r = ad.reshape(c, (2, 12))
        bb = ad.broadcast_to(ad.reshape(ad.reduce_sum(r, axis=1), (2, 1)), (2, 12))
        return ad.reduce_mean(ad.mul(r, bb))

    assert ad.grad_check(f, [x]) < 1e-6


def test_layer_norm_matches_mean_var_oracle():
    rng = rng_for("ln")
    x = rng.normal(size=(5, 8))
    gain = rng.normal(size=8)
    bias = rng.normal(size=8)
    out = ad.layer_norm(ad.constant(x), ad.constant(gain), ad.constant(bias)).data
    mu = x.mean(-1, keepdims=True)
    var = x.var(-1, keepdims=True)
    ref = (x - mu) / np.sqrt(var + 1e-5) * gain + bias
    assert np.abs(out - ref).max() < 1e-12


def test_layer_norm_constant_vector_gives_bias():
    bias = np.array([0.5, -1.0, 2.0])
    out = ad.layer_norm(
        ad.constant(np.full((2, 3), 7.0)), ad.constant(np.ones(3)), ad.constant(bias)
    ).data
    assert np.abs(out - bias).max() < 1e-9


def test_layer_norm_grad_check():
    rng = rng_for("lng")
    x = ad.parameter(rng.normal(size=(6, 5)))
    g = ad.parameter(rng.normal(size=5))
    b = ad.parameter(rng.normal(size=5))
    err = ad.grad_check(
        lambda ps: ad.reduce_mean(ad.mul(ad.layer_norm(*ps), ad.layer_norm(*ps))), [x, g, b]
    )
    assert err < 1e-5


def test_layer_norm_needs_two_channels():
    with pytest.raises(ValueError):
        ad.layer_norm(ad.constant(np.ones((3, 1))), ad.constant(np.ones(1)), ad.constant(np.zeros(1)))


def test_conv3_grad_check():
    rng = rng_for("convg")
    x = ad.parameter(rng.normal(size=(2, 5, 5, 5)))
    w = ad.parameter(rng.normal(size=(3, 2, 3, 3, 3)) * 0.5)
    b = ad.parameter(rng.normal(size=3))
    probe = ad.constant(rng.normal(size=(3, 3, 3, 3)))

    def f(ps):
        return ad.reduce_mean(ad.mul(ad.sigmoid(ad.conv3(ps[0], ps[1], ps[2], 2, 1)), probe))

    assert ad.grad_check(f, [x, w, b]) < 1e-4


def test_conv3_transpose_grad_check_and_shape():
    rng = rng_for("convt")
    x = ad.parameter(rng.normal(size=(2, 4, 4, 4)))
    w = ad.parameter(rng.normal(size=(2, 3, 4, 4, 4)) * 0.3)
    b = ad.parameter(rng.normal(size=3))
    y = ad.conv3_transpose(x, w, b, stride=2, pad=1)
    assert y.data.shape == (3, 8, 8, 8)

    def f(ps):
        return ad.reduce_sum(ad.tanh(ad.conv3_transpose(ps[0], ps[1], ps[2], stride=2, pad=1)))

    assert ad.grad_check(f, [x, w, b]) < 1e-4


def test_conv3_transpose_is_adjoint_of_conv3():
    # <conv(x), y> == <x, conv_T(y)>: same kernel array serves both sides,
    # read as (C_out, C_in, k^3) by conv3 and (C_in_t, C_out_t, k^3) by
    # the transposed op.
    rng = rng_for("adjoint")
    x = rng.normal(size=(2, 8, 8, 8))
    w = rng.normal(size=(3, 2, 4, 4, 4))
    y = rng.normal(size=(3, 4, 4, 4))
    cx = ad.conv3(ad.constant(x), ad.constant(w), stride=2, pad=1).data
    ty = ad.conv3_transpose(ad.constant(y), ad.constant(w), stride=2, pad=1).data
    assert abs((cx * y).sum() - (x * ty).sum()) < 1e-8


def test_linear_recurrence_matches_loop():
    rng = rng_for("rec")
    a = rng.uniform(0.2, 0.95, size=(12, 3))
    u = rng.normal(size=(12, 3))
    h = ad.linear_recurrence(ad.constant(a), ad.constant(u)).data
    state = np.zeros(3)
    for t in range(12):
        state = a[t] * state + u[t]
        assert np.abs(h[t] - state).max() < 1e-12


def test_linear_recurrence_grad_check():
    rng = rng_for("recg")
    a = ad.parameter(rng.uniform(0.1, 0.9, size=(10, 2, 3)))
    u = ad.parameter(rng.normal(size=(10, 2, 3)))

    def f(ps):
        h = ad.linear_recurrence(ps[0], ps[1])
        return ad.reduce_sum(ad.mul(h, h))

    assert ad.grad_check(f, [a, u]) < 1e-4


def test_selective_scan_grad_check():
    rng = rng_for("selscan")
    x = ad.parameter(rng.normal(size=(7, 3)))
    delta = ad.parameter(rng.uniform(0.01, 1.2, size=(7, 3)))
    b = ad.parameter(rng.normal(size=(7, 4)))
    c = ad.parameter(rng.normal(size=(7, 4)))
    a = ad.parameter(rng.uniform(-3.0, -0.05, size=(3, 4)))
    skip = ad.parameter(rng.normal(size=3))

    def f(ps):
        y = ad.selective_scan(*ps)
        return ad.reduce_mean(ad.mul(y, y))

    assert ad.grad_check(f, [x, delta, b, c, a, skip]) < 1e-4


def test_selective_scan_numba_and_numpy_agree():
    rng = rng_for("agree")
    args = (
        rng.normal(size=(9, 3)),
        rng.uniform(0.01, 1.0, size=(9, 3)),
        rng.normal(size=(9, 4)),
        rng.normal(size=(9, 4)),
        rng.uniform(-3, -0.05, size=(3, 4)),
        rng.normal(size=3),
    )
    y_ref, h_ref = ad._scan_fwd_numpy(*args)
    y_impl, h_impl = ad._load_scan_impl()[0](*args)
    assert np.abs(y_ref - y_impl).max() < 1e-12
    g = rng.normal(size=(9, 3))
    ref = ad._scan_bwd_numpy(g, h_ref, *args)
    got = ad._load_scan_impl()[1](g, h_impl, *args)
    for r, q in zip(ref, got):
        assert np.abs(r - q).max() < 1e-12


def test_zoh_factor_series_limit():
    d = ad.constant(np.array([0.5]))
    a_small = ad.constant(np.array([1e-12]))
    out = ad.zoh_factor(d, a_small).data
    assert abs(out[0] - 0.5) < 1e-9  # b_bar -> delta as a -> 0


def test_composed_chain_finite_difference():
    # conv3 -> layer_norm -> selective scan -> loss, end to end
    rng = rng_for("chain")
    x = ad.parameter(rng.normal(size=(1, 4, 4, 4)))
    w = ad.parameter(rng.normal(size=(3, 1, 3, 3, 3)) * 0.5)
    gain = ad.parameter(np.ones(3))
    bias = ad.parameter(np.zeros(3))
    dproj = ad.parameter(rng.normal(size=(3, 3)) * 0.2)
    dbias = ad.parameter(np.full(3, -1.0))
    bproj = ad.parameter(rng.normal(size=(4, 3)) * 0.5)
    cproj = ad.parameter(rng.normal(size=(4, 3)) * 0.5)
    a = ad.parameter(np.array([[-1.0, -2.0, -0.5, -3.0]] * 3))
    skip = ad.parameter(np.ones(3))

    def f(ps):
        x_, w_, g_, b_, dw_, db_, bw_, cw_, a_, s_ = ps
        h = ad.conv3(x_, w_, stride=1, pad=1)
        seq = ad.transpose(ad.reshape(h, (3, 64)), (1, 0))
        seq = ad.layer_norm(seq, g_, b_)
        delta = ad.softplus(ad.linear(seq, dw_, db_))
        y = ad.selective_scan(seq, delta, ad.linear(seq, bw_), ad.linear(seq, cw_), a_, s_)
        return ad.reduce_mean(ad.mul(y, y))

    err = ad.grad_check(f, [x, w, gain, bias, dproj, dbias, bproj, cproj, a, skip])
    assert err < 1e-4
