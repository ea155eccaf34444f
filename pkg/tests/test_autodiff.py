import zlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mgf import autodiff as ad
from mgf.errors import NumericError, ValidationError

R = np.random.default_rng(7)


def _check(f, *arrays, tol=1e-6):
    res = ad.finite_diff_check(f, list(arrays))
    assert res.checked > 0
    assert res.max_rel_error < tol, res
    return res


# one composite per primitive; inputs kept away from kinks and domain edges
PRIMITIVES = {
    "add": (lambda t: ad.sum_(ad.add(t[0], t[1]) ** 2), [(3, 4), (4,)]),
    "sub": (lambda t: ad.sum_(ad.sub(t[0], t[1]) ** 2), [(3, 4), (3, 1)]),
    "mul": (lambda t: ad.sum_(ad.mul(t[0], t[1])), [(2, 3), (2, 3)]),
    "div": (lambda t: ad.sum_(ad.div(t[0], ad.exp(t[1]))), [(2, 3), (2, 3)]),
    "neg": (lambda t: ad.sum_(ad.neg(t[0]) * t[0] * t[0]), [(5,)]),
    "power": (lambda t: ad.sum_(ad.power(ad.exp(t[0]), 1.7)), [(4,)]),
    "exp": (lambda t: ad.sum_(ad.exp(t[0])), [(3, 2)]),
    "log": (lambda t: ad.sum_(ad.log(ad.exp(t[0]) + 1.0)), [(3, 2)]),
    "sqrt": (lambda t: ad.sum_(ad.sqrt(t[0] * t[0] + 1.0)), [(6,)]),
    "relu": (lambda t: ad.sum_(ad.relu(t[0]) * t[0]), [(8,)]),
    "abs": (lambda t: ad.sum_(ad.abs_(t[0]) * t[0]), [(8,)]),
    "tanh": (lambda t: ad.sum_(ad.tanh(t[0]) ** 2), [(5,)]),
    "gelu": (lambda t: ad.sum_(ad.gelu(t[0]) * t[0]), [(3, 4)]),
    "clip": (lambda t: ad.sum_(ad.clip(t[0], -10.0, 10.0) ** 2), [(5,)]),
    "matmul": (lambda t: ad.sum_(ad.matmul(t[0], t[1]) ** 2), [(2, 3, 4), (4, 5)]),
    "batched_matmul": (lambda t: ad.sum_(ad.matmul(t[0], t[1]) ** 2), [(2, 3, 4), (2, 4, 2)]),
    "transpose": (lambda t: ad.sum_(ad.transpose(t[0], (2, 0, 1)) * np.arange(24.0).reshape(4, 2, 3)), [(2, 3, 4)]),
    "swapaxes": (lambda t: ad.sum_(ad.swapaxes(t[0], 0, 1) ** 3), [(2, 3)]),
    "reshape": (lambda t: ad.sum_(ad.reshape(t[0], (3, 4)) @ np.ones((4, 2)) * t[0][0, 0]), [(2, 6)]),
    "sum": (lambda t: ad.sum_(ad.sum_(t[0], axis=1, keepdims=True) ** 2), [(3, 4)]),
    "mean": (lambda t: ad.sum_(ad.mean(t[0], axis=0) ** 2), [(3, 4)]),
    "concat": (lambda t: ad.sum_(ad.concat([t[0], t[1]], axis=1) ** 2 * 0.5), [(2, 3), (2, 2)]),
    "slice": (lambda t: ad.sum_(t[0][1:, ::2] ** 2), [(3, 5)]),
    "take": (lambda t: ad.sum_(ad.take(t[0], [0, 2, 2], axis=1) ** 2), [(3, 4)]),
    "softmax": (lambda t: ad.sum_(ad.softmax(t[0], axis=-1) * np.arange(4.0)), [(3, 4)]),
    "logsumexp": (lambda t: ad.sum_(ad.logsumexp(t[0], axis=0)), [(3, 4)]),
    "layer_norm": (lambda t: ad.sum_(ad.layer_norm(t[0], axis=-1) * np.arange(5.0)), [(2, 5)]),
    "conv1d": (lambda t: ad.sum_(ad.conv1d(t[0], t[1], stride=2, padding=1) ** 2), [(2, 9, 3), (4, 3, 3)]),
    "conv_transpose1d": (lambda t: ad.sum_(ad.conv_transpose1d(t[0], t[1], stride=2, padding=1) ** 2),
                         [(2, 5, 3), (3, 2, 4)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    f, shapes = PRIMITIVES[name]
    r = np.random.default_rng(zlib.crc32(name.encode()))
    arrays = [r.normal(size=s) for s in shapes]
    if name in ("relu", "abs"):
        arrays = [np.where(np.abs(a) < 0.05, 0.5, a) for a in arrays]
    _check(f, *arrays)


def test_quadratic_gradient_is_exact():
    # entries of order one, so roundoff in f stays far below 1e-8 of each slope
    w = R.uniform(0.5, 2.0, size=7) * R.choice([-1.0, 1.0], size=7)
    res = ad.finite_diff_check(lambda t: ad.sum_(t[0] * t[0]) * 0.5, [w], eps=1e-5)
    assert res.max_rel_error < 1e-8
    leaf = ad.parameter(w)
    (g,) = ad.backward(ad.sum_(leaf * leaf), [leaf])
    np.testing.assert_allclose(g, 2 * w, rtol=1e-15)


def test_transformer_block_with_info_nce():
    from mgf import encoder as enc
    from mgf.objectives import loss_phoneme

    cfg = enc.EncoderConfig(stem_channels=4, d_model=8, heads=2, encoder_blocks=1, decoder_blocks=1)
    p = enc.init_params(cfg, seed=1)
    names = sorted(k for k in p if k.startswith("enc.block0."))
    r = np.random.default_rng(2)
    x = ad.constant(r.normal(size=(2, 6, 8)))
    negs = r.normal(size=(6, 4, 8))

    def f(ts):
        q = {k: ad.constant(v) for k, v in p.items()}
        q.update(zip(names, ts))
        y = ad.reshape(enc.transformer_block(q, "enc.block0", x, cfg), (12, 8))
        return loss_phoneme(y[:6], y[6:], negs, tau=1.0)

    res = ad.finite_diff_check(f, [p[k] for k in names], eps=1e-4, max_coords=150)
    assert res.checked > 100 and res.max_rel_error < 1e-4, res


def test_eps_must_be_positive():
    with pytest.raises(ValidationError):
        ad.finite_diff_check(lambda t: ad.sum_(t[0]), [np.ones(2)], eps=0.0)


def test_constant_root_gives_zero_grads():
    leaf = ad.parameter(np.ones(3))
    (g,) = ad.backward(ad.constant(np.array(4.0)), [leaf])
    np.testing.assert_array_equal(g, 0.0)


def test_relu_at_zero_is_reported_as_skipped():
    res = ad.finite_diff_check(lambda t: ad.sum_(ad.relu(t[0])), [np.array([0.0, 1.0, -1.0])])
    assert res.skipped_kink == 1 and res.checked == 2


def test_nonfinite_points_are_skipped():
    res = ad.finite_diff_check(lambda t: ad.sum_(ad.log(t[0])), [np.array([0.0 + 1e-12, 1.0])])
    assert res.skipped_nonfinite == 1


def test_softmax_of_zeros_is_uniform():
    np.testing.assert_allclose(ad.softmax(np.zeros(3)).data, [1 / 3] * 3, rtol=1e-15)


def test_layer_norm_of_constant_is_zero():
    np.testing.assert_array_equal(ad.layer_norm(np.full((1, 6), 3.0)).data, 0.0)


def test_stem_conv_arithmetic():
    x = np.zeros((1, 32000, 1))
    w = np.zeros((2, 1, 320))
    assert ad.conv1d(x, w, stride=160, padding=80).shape == (1, 200, 2)
    y = ad.conv_transpose1d(np.zeros((1, 200, 2)), np.zeros((2, 1, 320)), stride=160, padding=80)
    assert y.shape == (1, 32000, 1)


def test_conv1d_matches_direct_loops():
    x = R.normal(size=(1, 7, 2))
    w = R.normal(size=(3, 2, 3))
    out = ad.conv1d(x, w, stride=2, padding=1).data
    xp = np.pad(x[0], ((1, 1), (0, 0)))
    for t in range(out.shape[1]):
        for o in range(3):
            expect = sum(xp[2 * t + k, c] * w[o, c, k] for k in range(3) for c in range(2))
            assert out[0, t, o] == pytest.approx(expect, abs=1e-12)


def test_conv_transpose_is_adjoint_of_conv():
    x = R.normal(size=(2, 11, 3))
    w = R.normal(size=(4, 3, 5))
    y = R.normal(size=(2, 5, 4))
    conv = ad.conv1d(x, w, stride=2, padding=1).data
    assert conv.shape == y.shape
    back = ad.conv_transpose1d(y, w, stride=2, padding=1).data
    assert back.shape[1] >= x.shape[1]
    assert np.sum(conv * y) == pytest.approx(np.sum(back[:, : x.shape[1]] * x), rel=1e-10)


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(ValidationError, match=r"add.*\(2, 3\).*\(4,\)"):
        ad.add(np.zeros((2, 3)), np.zeros(4))


def test_nan_raises_numeric_failure_with_op():
    with pytest.raises(NumericError, match="numeric failure in op log"):
        ad.log(np.array([-1.0]))


def test_non_scalar_root():
    leaf = ad.parameter(np.ones(3))
    with pytest.raises(ValidationError, match="scalar"):
        ad.backward(leaf * 2.0, [leaf])


@given(st.integers(0, 1000), st.floats(-3, 3), st.floats(-3, 3))
def test_backward_is_linear(seed, a, b):
    r = np.random.default_rng(seed)
    w = r.normal(size=(3, 4))
    m = r.normal(size=(4, 2))

    def f(t):
        return ad.sum_(ad.tanh(t @ m))

    def g(t):
        return ad.sum_(ad.exp(t * 0.3))

    leaf = ad.parameter(w)
    (gf,) = ad.backward(f(leaf), [leaf])
    leaf = ad.parameter(w)
    (gg,) = ad.backward(g(leaf), [leaf])
    leaf = ad.parameter(w)
    (gc,) = ad.backward(f(leaf) * a + g(leaf) * b, [leaf])
    np.testing.assert_allclose(gc, a * gf + b * gg, rtol=1e-10, atol=1e-10)


def test_backward_is_deterministic():
    w = R.normal(size=(4, 4))
    outs = []
    for _ in range(2):
        leaf = ad.parameter(w)
        loss = ad.sum_(ad.softmax(leaf @ leaf, axis=0) * ad.gelu(leaf))
        outs.append((loss.data.tobytes(), ad.backward(loss, [leaf])[0].tobytes()))
    assert outs[0] == outs[1]


def test_no_grad_builds_no_graph():
    leaf = ad.parameter(np.ones(2))
    with ad.no_grad():
        y = leaf * 3.0
    assert not y.requires_grad and y.parents == ()
    assert ad.grad_enabled()


def test_tensors_are_immutable():
    t = ad.Tensor(np.zeros(3))
    with pytest.raises(ValueError):
        t.data[0] = 1.0
