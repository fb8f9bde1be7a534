import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from repose.netcore import checkpoint, kernels, ops
from repose.netcore.gradcheck import GradCheckError, grad_check
from repose.netcore.layers import ConvBlock, ConvBlockSpec, ParamStore
from repose.netcore.optim import Adam, lr_at
from repose.netcore.tensor import ShapeError, Tensor, no_grad


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def naive_conv(x, w, b, stride, groups):
    B, C, H, W = x.shape
    F, cg, k, _ = w.shape
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (H + 2 * pad - k) // stride + 1, (W + 2 * pad - k) // stride + 1
    out = np.zeros((B, F, ho, wo))
    fg = F // groups
    for n in range(B):
        for f in range(F):
            g = f // fg
            for i in range(ho):
                for j in range(wo):
                    patch = xp[n, g * cg : (g + 1) * cg, i * stride : i * stride + k, j * stride : j * stride + k]
                    out[n, f, i, j] = (patch * w[f]).sum() + (0 if b is None else b[f])
    return out


@pytest.mark.parametrize(
    "k,stride,groups,C,F",
    [(1, 1, 1, 3, 4), (3, 1, 1, 3, 5), (3, 2, 1, 2, 3), (5, 2, 1, 3, 2), (3, 1, 2, 4, 6), (1, 1, 4, 8, 4)],
)
def test_conv2d_matches_direct_loops(rng, k, stride, groups, C, F):
    x = rng.normal(size=(2, C, 7, 6))
    w = rng.normal(size=(F, C // groups, k, k))
    b = rng.normal(size=F)
    out = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, groups=groups)
    np.testing.assert_allclose(out.data, naive_conv(x, w, b, stride, groups), rtol=1e-12, atol=1e-12)


@pytest.mark.skipif("cython" not in kernels.available_backends(), reason="compiled kernels not built")
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("k,stride", [(1, 2), (3, 1), (3, 2), (5, 2)])
def test_compiled_kernels_match_fallback(rng, dtype, k, stride):
    x = rng.normal(size=(2, 3, 9, 8)).astype(dtype)
    pad = k // 2
    ho, wo = ops.out_size(9, k, stride), ops.out_size(8, k, stride)
    a = kernels.im2col(x, k, stride, pad, ho, wo, backend="cython")
    b = kernels.im2col(x, k, stride, pad, ho, wo, backend="numpy")
    np.testing.assert_array_equal(a, b)
    cols = rng.normal(size=a.shape).astype(dtype)
    ca = kernels.col2im(cols, 2, 3, 9, 8, k, stride, pad, ho, wo, backend="cython")
    cb = kernels.col2im(cols, 2, 3, 9, 8, k, stride, pad, ho, wo, backend="numpy")
    np.testing.assert_allclose(ca, cb, rtol=1e-4 if dtype == np.float32 else 1e-12, atol=1e-5)


def test_col2im_is_adjoint_of_im2col(rng):
    x = rng.normal(size=(1, 2, 6, 5))
    ho, wo = ops.out_size(6, 3, 2), ops.out_size(5, 3, 2)
    cols = kernels.im2col(x, 3, 2, 1, ho, wo)
    y = rng.normal(size=cols.shape)
    back = kernels.col2im(y, 1, 2, 6, 5, 3, 2, 1, ho, wo)
    assert np.isclose((cols * y).sum(), (x * back).sum(), rtol=1e-12)


# ---------------------------------------------------------------- gradient checks


def away_from_zero(a, margin=1e-3):
    return np.where(np.abs(a) < margin, np.sign(a + 1e-12) * margin + a, a)


def test_grad_conv2d(rng):
    x, w, b = leaf(rng.normal(size=(2, 4, 6, 5))), leaf(rng.normal(size=(6, 2, 3, 3))), leaf(rng.normal(size=6))
    assert grad_check(lambda: ops.conv2d(x, w, b, stride=2, groups=2), [x, w, b]) < 1e-6
    w5 = leaf(rng.normal(size=(3, 4, 5, 5)))
    assert grad_check(lambda: ops.conv2d(x, w5, None, stride=1), [x, w5]) < 1e-6


def test_grad_relu(rng):
    x = leaf(away_from_zero(rng.normal(size=(2, 3, 4, 4))))
    assert grad_check(lambda: ops.relu(x), [x]) < 1e-6


@pytest.mark.parametrize("training", [True, False])
def test_grad_batchnorm(rng, training):
    x = leaf(rng.normal(size=(2, 3, 4, 4)))
    gamma, beta = leaf(rng.uniform(0.5, 1.5, 3)), leaf(rng.normal(size=3))
    mean, var = rng.normal(size=3), rng.uniform(0.5, 2, 3)

    def fn():
        return ops.batchnorm(x, gamma, beta, mean.copy(), var.copy(), training)

    assert grad_check(fn, [x, gamma, beta]) < 1e-5


def test_grad_resize_concat_split_mix(rng):
    x = leaf(rng.normal(size=(2, 3, 4, 5)))
    assert grad_check(lambda: ops.bilinear_resize(x, 7, 3), [x]) < 1e-6
    y = leaf(rng.normal(size=(2, 2, 4, 5)))
    assert grad_check(lambda: ops.concat_channels([x, y]), [x, y]) < 1e-6
    z = leaf(rng.normal(size=(2, 6, 3, 3)))
    assert grad_check(lambda: ops.concat_channels(ops.split_channels(z, 2)[::-1]), [z]) < 1e-6
    f, d, lam = leaf(rng.normal(size=(1, 2, 3, 3))), leaf(rng.normal(size=(1, 2, 3, 3))), leaf([0.7])
    assert grad_check(lambda: ops.residual_mix(f, d, "trainable", lam), [f, d, lam]) < 1e-6
    assert grad_check(lambda: ops.residual_mix(f, d, "add"), [f, d]) < 1e-6
    assert grad_check(lambda: ops.residual_mix(f, d, "replace"), [f, d]) < 1e-6
    assert grad_check(lambda: ops.sum_all(ops.add(f, d)), [f, d]) < 1e-6


def test_grad_conv_block_without_batchnorm(rng):
    store = ParamStore(np.float64)
    block = ConvBlock(store, "b", ConvBlockSpec(3, 1, 3, repeat=2, batchnorm=False), 2, rng)
    x = leaf(rng.normal(size=(1, 2, 5, 5)))
    assert grad_check(lambda: block(x), [x] + list(store)) < 1e-4


def test_grad_check_guards(rng):
    x32 = Tensor(np.ones((1, 1, 2, 2), np.float32), requires_grad=True)
    with pytest.raises(TypeError):
        grad_check(lambda: ops.relu(x32), [x32])
    x = leaf(np.ones((1, 1, 2, 2)))
    with pytest.raises(ValueError):
        grad_check(lambda: ops.relu(x), [x], eps=1e-2)
    with pytest.raises(GradCheckError, match="blowup"):
        grad_check(lambda: ops.weighted_sum(x, np.array(np.inf)), [x], name="blowup")


# ---------------------------------------------------------------- blocks


def test_conv_block_shapes_from_notation(rng):
    store = ParamStore()
    b = ConvBlock(store, "f", ConvBlockSpec(3, 1, 64, 4), 32, rng)
    assert b(Tensor(np.zeros((1, 32, 16, 16), np.float32))).shape == (1, 64, 16, 16)
    d = ConvBlock(store, "d", ConvBlockSpec(5, 2, 64), 64, rng)
    assert d(Tensor(np.zeros((1, 64, 32, 32), np.float32))).shape == (1, 64, 16, 16)
    assert str(ConvBlockSpec(3, 1, 64, 4)) == "(3, 1, 64)^4"


def test_conv_block_shape_error_names_both_shapes(rng):
    b = ConvBlock(ParamStore(), "x", ConvBlockSpec(3, 1, 8), 4, rng)
    with pytest.raises(ShapeError, match=r"\(1, 3, 5, 5\).*\(8, 4, 3, 3\)"):
        b(Tensor(np.zeros((1, 3, 5, 5), np.float32)))


def test_unnormalized_block_is_nonnegative(rng):
    b = ConvBlock(ParamStore(np.float64), "u", ConvBlockSpec(3, 1, 5, batchnorm=False), 3, rng)
    assert (b(Tensor(rng.normal(size=(2, 3, 6, 6)))).data >= 0).all()


@settings(max_examples=40, deadline=None)
@given(
    k=st.sampled_from([1, 3, 5]),
    s=st.integers(1, 3),
    f=st.integers(1, 6),
    r=st.integers(1, 3),
    h=st.integers(5, 12),
    w=st.integers(5, 12),
)
def test_conv_block_output_shape_is_function_of_spec(k, s, f, r, h, w):
    spec = ConvBlockSpec(k, s, f, r)
    b = ConvBlock(ParamStore(), "p", spec, 2, np.random.default_rng(0))
    out = b(Tensor(np.ones((1, 2, h, w), np.float32)), training=True)
    eh, ew = h, w
    for _ in range(r):
        eh, ew = ops.out_size(eh, k, s), ops.out_size(ew, k, s)
    assert out.shape == (1, f, eh, ew)
    assert b.macs(h, w)[1:] == (eh, ew)


def test_conv_block_spec_validation():
    for bad in [dict(kernel=2, stride=1, filters=4), dict(kernel=3, stride=0, filters=4),
                dict(kernel=3, stride=1, filters=0), dict(kernel=3, stride=1, filters=4, repeat=0)]:
        with pytest.raises(ValueError):
            ConvBlockSpec(**bad)


def test_batchnorm_training_output_is_standardized(rng):
    x = Tensor(rng.normal(3.0, 2.5, size=(4, 3, 6, 6)))
    one, zero = Tensor(np.ones(3)), Tensor(np.zeros(3))
    rm, rv = np.zeros(3), np.ones(3)
    out = ops.batchnorm(x, one, zero, rm, rv, training=True).data
    assert np.abs(out.mean(axis=(0, 2, 3))).max() < 1e-5
    assert np.abs(out.var(axis=(0, 2, 3)) - 1).max() < 1e-3
    # running stats move by (1 - momentum) towards the batch statistics
    np.testing.assert_allclose(rm, 0.01 * x.data.mean(axis=(0, 2, 3)))


# ---------------------------------------------------------------- resize


def test_bilinear_constant_identity_and_shape(rng):
    c = Tensor(np.full((1, 3, 5, 5), 2.5))
    np.testing.assert_allclose(ops.bilinear_resize(c, 9, 4).data, 2.5, rtol=1e-14)
    x = Tensor(rng.normal(size=(1, 2, 6, 6)))
    assert ops.bilinear_resize(x, 6, 6).data.tobytes() == x.data.tobytes()
    assert ops.bilinear_resize(Tensor(np.zeros((1, 14, 16, 16))), 128, 128).shape == (1, 14, 128, 128)


def test_bilinear_corners_align(rng):
    x = rng.normal(size=(1, 1, 4, 6))
    y = ops.bilinear_resize(Tensor(x), 10, 11).data
    for (i, j), (p, q) in {(0, 0): (0, 0), (0, 5): (0, 10), (3, 0): (9, 0), (3, 5): (9, 10)}.items():
        assert np.isclose(y[0, 0, p, q], x[0, 0, i, j], rtol=1e-13)


@settings(max_examples=30, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 1000))
def test_bilinear_is_linear(a, b, seed):
    r = np.random.default_rng(seed)
    x, y = r.normal(size=(1, 2, 5, 7)), r.normal(size=(1, 2, 5, 7))
    lhs = ops.resize_array(a * x + b * y, 8, 3)
    rhs = a * ops.resize_array(x, 8, 3) + b * ops.resize_array(y, 8, 3)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-5, atol=1e-12)


def test_concat_and_mix_contracts(rng):
    a, b = Tensor(np.zeros((1, 32, 16, 16))), Tensor(np.ones((1, 32, 16, 16)))
    assert ops.concat_channels([a, b]).shape == (1, 64, 16, 16)
    assert ops.concat_channels([a] * 14).shape == (1, 448, 16, 16)
    assert ops.concat_channels([a]) is a
    with pytest.raises(ShapeError):
        ops.concat_channels([a, Tensor(np.zeros((1, 2, 8, 8)))])
    f, d = Tensor(rng.normal(size=(1, 2, 3, 3))), Tensor(rng.normal(size=(1, 2, 3, 3)))
    assert np.array_equal(ops.residual_mix(f, d, "trainable", Tensor(np.zeros(1))).data, f.data)
    assert np.array_equal(ops.residual_mix(f, Tensor(np.zeros_like(f.data)), "add").data, f.data)
    assert ops.residual_mix(f, d, "replace") is d
    with pytest.raises(ShapeError):
        ops.residual_mix(f, Tensor(np.zeros((1, 3, 3, 3))), "add")
    with pytest.raises(ValueError):
        ops.residual_mix(f, d, "blend")


def test_no_grad_builds_no_graph(rng):
    x = leaf(rng.normal(size=(1, 1, 3, 3)))
    with no_grad():
        y = ops.relu(x)
    assert not y.requires_grad and y._parents == ()


# ---------------------------------------------------------------- store, optimizer, checkpoint


def test_param_store_names_are_unique_and_checked():
    s = ParamStore()
    s.add("a.weight", np.zeros((2, 2)))
    with pytest.raises(KeyError):
        s.add("a.weight", np.zeros(1))
    s.add_buffer("a.running_mean", np.zeros(2))
    with pytest.raises(ValueError, match="missing: a.running_mean.*unexpected: z.*shape mismatch: a.weight"):
        s.load_state({"a.weight": np.zeros((3, 2)), "z": np.zeros(1)})


def test_adam_matches_reference_update():
    s = ParamStore(np.float64)
    p = s.add("w", np.array([1.0, -2.0]))
    opt = Adam(s, lr=0.1)
    m = v = np.zeros(2)
    ref = p.data.copy()
    for t in range(1, 4):
        g = np.array([0.5, -1.5]) * t
        p.grad = g.copy()
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.1 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8 / np.sqrt(1 - 0.999**t))
    np.testing.assert_allclose(p.data, ref, rtol=1e-12)


def test_lr_schedule_is_piecewise_constant():
    sched = [(0, 1e-3), (1_000_000, 5e-4), (1_300_000, 1e-6)]
    assert lr_at(sched, 0) == 1e-3
    assert lr_at(sched, 999_999) == 1e-3
    assert lr_at(sched, 1_000_000) == 5e-4
    assert lr_at(sched, 1_999_999) == 1e-6


def test_checkpoint_roundtrip_and_layout(tmp_path, rng):
    arrays = {"a.weight": rng.normal(size=(2, 3)).astype(np.float32), "b": np.arange(4, dtype=np.float32)}
    path = tmp_path / "m.ckpt"
    checkpoint.save(path, arrays, {"step": 7})
    back, meta = checkpoint.load(path)
    assert meta == {"step": 7}
    for k in arrays:
        assert back[k].tobytes() == arrays[k].tobytes()
    raw = path.read_bytes()
    assert raw[:8] == b"REPOSECK"
    assert struct.unpack_from("<HB", raw, 8) == (1, 1)
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(checkpoint.CheckpointError, match="magic"):
        checkpoint.load(bad)
    (tmp_path / "short.ckpt").write_bytes(raw[:-4])
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load(tmp_path / "short.ckpt")
