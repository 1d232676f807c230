import os
import tempfile

import numpy as np
import pytest

from primek import tensor as T
from primek.tensor import (
    CorruptTensorError,
    ShapeError,
    Tensor,
    load_tensor,
    save_tensor,
)

RNG = np.random.default_rng(1234)


def fd_grad(fn, x, h=1e-6):
    """Central finite differences of a scalar-valued fn at every coordinate."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        fp = fn(x)
        flat[i] = keep - h
        fm = fn(x)
        flat[i] = keep
        gf[i] = (fp - fm) / (2 * h)
    return g


def autograd_of(op, x_data):
    x = Tensor(x_data, requires_grad=True)
    loss = T.sum_all(op(x))
    loss.backward()
    return x.grad


def check_unary(op, x_data, tol=1e-6):
    analytic = autograd_of(op, np.array(x_data))
    numeric = fd_grad(lambda a: float(np.sum(op(Tensor(a)).data)), np.array(x_data))
    assert np.abs(analytic - numeric).max() < tol


# ---------------------------------------------------------------------------
# basic autograd behaviour
# ---------------------------------------------------------------------------

def test_sum_gradient_is_ones():
    x = Tensor(RNG.standard_normal((3, 4)), requires_grad=True)
    T.sum_all(x).backward()
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_square_gradient_is_two_x():
    data = RNG.standard_normal((2, 5))
    x = Tensor(data, requires_grad=True)
    T.sum_all(T.mul(x, x)).backward()
    assert np.allclose(x.grad, 2 * data)


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ShapeError):
        T.add(x, x).backward()


def test_reused_tensor_accumulates_gradient():
    # y = x*x + x, appearing twice in the graph
    x = Tensor(np.array(3.0), requires_grad=True)
    y = T.add(T.mul(x, x), x)
    T.sum_all(y).backward()
    assert np.allclose(x.grad, 2 * 3.0 + 1.0)


def test_repeated_backward_accumulates():
    x = Tensor(np.array(2.0), requires_grad=True)
    loss = T.mul(x, x)
    loss.backward()
    first = np.array(x.grad)
    loss.backward()
    assert np.allclose(x.grad, 2 * first)


def test_disconnected_leaf_gets_no_gradient():
    x = Tensor(np.ones(3), requires_grad=True)
    y = Tensor(np.ones(3), requires_grad=True)
    T.sum_all(T.mul(x, x)).backward()
    assert y.grad is None


def test_no_grad_context_detaches():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = T.mul(x, x)
    assert y._backward_fn is None and y._parents == ()


# ---------------------------------------------------------------------------
# elementwise ops: trivial identities and finite differences
# ---------------------------------------------------------------------------

def test_mul_by_ones_and_add_zero_are_identity():
    x = Tensor(RNG.standard_normal((2, 3, 4)))
    ones = Tensor(np.ones((2, 3, 4)))
    zeros = Tensor(np.zeros((2, 3, 4)))
    assert np.array_equal(T.mul(x, ones).data, x.data)
    assert np.array_equal(T.add(x, zeros).data, x.data)


def test_broadcast_matches_explicit_tiling():
    x = Tensor(RNG.standard_normal((2, 3, 7)))
    s = Tensor(RNG.standard_normal((2, 3, 1)))
    tiled = np.repeat(s.data, 7, axis=2)
    assert np.allclose(T.mul(x, s).data, x.data * tiled)
    assert np.allclose(T.add(x, s).data, x.data + tiled)


def test_broadcast_gradient_reduces_to_singleton():
    x = Tensor(RNG.standard_normal((2, 3, 7)), requires_grad=True)
    s = Tensor(RNG.standard_normal((2, 3, 1)), requires_grad=True)
    T.sum_all(T.mul(x, s)).backward()
    assert s.grad.shape == (2, 3, 1)
    assert np.allclose(s.grad, x.data.sum(axis=2, keepdims=True))


def test_general_broadcasting_rejected():
    a = Tensor(np.ones((2, 3, 4)))
    b = Tensor(np.ones((3, 4)))
    with pytest.raises(ShapeError):
        T.add(a, b)


@pytest.mark.parametrize(
    "op",
    [
        T.neg,
        T.absolute,
        T.cos,
        T.sin,
        T.sigmoid,
        T.tanh,
        T.gelu,
        lambda x: T.sqrt(x),
        lambda x: T.powf(x, 0.3),
        T.sum_all,
        T.mean_all,
        lambda x: T.mean_axis(x, 1),
    ],
)
def test_unary_gradients_match_finite_differences(op):
    # offset keeps sqrt/powf away from zero and absolute away from its kink
    x = np.abs(RNG.standard_normal((2, 3, 4))) + 0.5
    check_unary(op, x)


def test_atan2_gradient():
    y = Tensor(RNG.standard_normal((3, 4)) + 2.0, requires_grad=True)
    x = Tensor(RNG.standard_normal((3, 4)) + 2.0, requires_grad=True)
    T.sum_all(T.atan2(y, x)).backward()
    gy = fd_grad(lambda a: float(np.sum(np.arctan2(a, x.data))), np.array(y.data))
    gx = fd_grad(lambda a: float(np.sum(np.arctan2(y.data, a))), np.array(x.data))
    assert np.abs(y.grad - gy).max() < 1e-6
    assert np.abs(x.grad - gx).max() < 1e-6


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def test_activation_fixed_points():
    zero = Tensor(np.zeros((1, 2, 3)))
    alpha = Tensor(np.full(2, 0.25))
    assert np.array_equal(T.prelu(zero, alpha).data, np.zeros((1, 2, 3)))
    assert np.allclose(T.sigmoid(zero).data, 0.5)


def test_prelu_negative_side_scales_by_alpha():
    x = Tensor(np.full((1, 2, 3), -2.0))
    alpha = Tensor(np.array([0.25, 0.5]))
    out = T.prelu(x, alpha).data
    assert np.allclose(out[0, 0], -0.5)
    assert np.allclose(out[0, 1], -1.0)


def test_gelu_matches_erf_reference():
    from scipy.special import erf

    grid = np.linspace(-4, 4, 81)
    want = 0.5 * grid * (1 + erf(grid / np.sqrt(2)))
    got = T.gelu(Tensor(grid)).data
    assert np.abs(got - want).max() < 1e-12


def test_activation_dispatcher_matches_direct_calls():
    x = Tensor(RNG.standard_normal((1, 3, 5)))
    alpha = Tensor(np.full(3, 0.25))
    assert np.array_equal(T.activation(x, "gelu").data, T.gelu(x).data)
    assert np.array_equal(
        T.activation(x, "prelu", alpha).data, T.prelu(x, alpha).data
    )
    with pytest.raises(ValueError):
        T.activation(x, "softplus")


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def test_normalize_standardized_input_unchanged():
    x = RNG.standard_normal((1, 4, 50))
    x = (x - x.mean(axis=1, keepdims=True)) / x.std(axis=1, keepdims=True)
    gain = Tensor(np.ones(4))
    bias = Tensor(np.zeros(4))
    out = T.normalize(Tensor(x), (1,), gain, bias, eps=1e-12)
    assert np.abs(out.data - x).max() < 1e-6


def test_normalize_constant_input_gives_zeros():
    gain = Tensor(np.ones(4))
    bias = Tensor(np.zeros(4))
    out = T.normalize(Tensor(np.full((1, 4, 9), 7.0)), (1,), gain, bias)
    assert np.abs(out.data).max() < 1e-6


def test_normalize_matches_two_pass_statistics():
    x = RNG.standard_normal((2, 4, 6, 5))
    gain = RNG.standard_normal(4)
    bias = RNG.standard_normal(4)
    out = T.normalize(
        Tensor(x), (2, 3), Tensor(gain), Tensor(bias), eps=1e-5
    ).data
    mu = x.mean(axis=(2, 3), keepdims=True)
    sd = np.sqrt(x.var(axis=(2, 3), keepdims=True) + 1e-5)
    want = gain.reshape(1, 4, 1, 1) * (x - mu) / sd + bias.reshape(1, 4, 1, 1)
    assert np.abs(out - want).max() < 1e-12


@pytest.mark.parametrize("axes", [(1,), (2,), (1, 2)])
def test_normalize_gradients_match_finite_differences(axes):
    x = Tensor(RNG.standard_normal((2, 3, 5)), requires_grad=True)
    gain = Tensor(RNG.standard_normal(3), requires_grad=True)
    bias = Tensor(RNG.standard_normal(3), requires_grad=True)
    proj = RNG.standard_normal((2, 3, 5))

    def scalar():
        out = T.normalize(x, axes, gain, bias)
        return float(np.sum(out.data * proj))

    T.sum_all(T.mul(T.normalize(x, axes, gain, bias), Tensor(proj))).backward()
    for t in (x, gain, bias):
        numeric = np.zeros_like(t.data)
        flat, nf = t.data.reshape(-1), numeric.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + 1e-6
            fp = scalar()
            flat[i] = keep - 1e-6
            fm = scalar()
            flat[i] = keep
            nf[i] = (fp - fm) / 2e-6
        assert np.abs(t.grad - numeric).max() < 1e-5


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def test_chunk4_concat_roundtrip():
    for c in (4, 8, 12):
        x = Tensor(RNG.standard_normal((2, c, 6)), requires_grad=True)
        back = T.concat_channels(T.chunk4(x))
        assert np.array_equal(back.data, x.data)


def test_chunk4_groups_channels_in_order():
    x = Tensor(np.arange(8, dtype=float).reshape(1, 8, 1))
    parts = T.chunk4(x)
    assert [p.data.reshape(-1).tolist() for p in parts] == [
        [0, 1], [2, 3], [4, 5], [6, 7]
    ]


def test_chunk4_rejects_indivisible_channels():
    with pytest.raises(ShapeError, match="C=6"):
        T.chunk4(Tensor(np.zeros((1, 6, 3))))


def test_concat_channels_known_values():
    a = Tensor(np.full((1, 1, 3), 1.0))
    b = Tensor(np.full((1, 1, 3), 2.0))
    out = T.concat_channels([a, b])
    assert out.shape == (1, 2, 3)
    assert np.array_equal(out.data[0, 0], np.ones(3))
    assert np.array_equal(out.data[0, 1], np.full(3, 2.0))


def test_concat_gradient_routes_by_index():
    parts = [
        Tensor(RNG.standard_normal((1, c, 4)), requires_grad=True)
        for c in (2, 3, 1)
    ]
    out = T.concat_channels(parts)
    w = RNG.standard_normal(out.shape)
    T.sum_all(T.mul(out, Tensor(w))).backward()
    offset = 0
    for p in parts:
        assert np.array_equal(p.grad, w[:, offset:offset + p.shape[1]])
        offset += p.shape[1]


def test_concat_shape_mismatch_rejected():
    with pytest.raises(ShapeError):
        T.concat_channels([Tensor(np.zeros((1, 2, 3))), Tensor(np.zeros((1, 2, 4)))])


def test_transpose_reshape_crop_roundtrip_gradients():
    x = Tensor(RNG.standard_normal((2, 3, 4, 5)), requires_grad=True)
    y = T.transpose(x, (0, 2, 1, 3))
    z = T.reshape(y, (2, 12, 5))
    w = T.crop(z, 2, 1, 4)
    T.sum_all(w).backward()
    want = np.zeros((2, 3, 4, 5))
    want[:, :, :, 1:4] = 1.0
    assert np.array_equal(x.grad, want)


def test_repeat_axis_sums_gradient_back():
    x = Tensor(RNG.standard_normal((1, 2, 3)), requires_grad=True)
    y = T.repeat_axis(x, 2, 2)
    assert y.shape == (1, 2, 6)
    assert np.array_equal(y.data[0, 0, 0], y.data[0, 0, 1])
    w = RNG.standard_normal(y.shape)
    T.sum_all(T.mul(y, Tensor(w))).backward()
    assert np.allclose(x.grad, w.reshape(1, 2, 3, 2).sum(axis=3))


def test_adaptive_pool_known_and_random():
    x = Tensor(np.array([[[1.0, 2.0, 3.0]]]))
    assert np.allclose(T.adaptive_avg_pool_to_one(x).data, [[[2.0]]])
    r = RNG.standard_normal((3, 5, 17))
    out = T.adaptive_avg_pool_to_one(Tensor(r)).data
    assert np.abs(out - r.mean(axis=2, keepdims=True)).max() < 1e-15
    with pytest.raises(ShapeError):
        T.adaptive_avg_pool_to_one(Tensor(np.zeros((1, 2, 0))))


def test_scale_channels_matches_manual_broadcast():
    x = Tensor(RNG.standard_normal((2, 3, 4, 5)), requires_grad=True)
    s = Tensor(RNG.standard_normal(3), requires_grad=True)
    out = T.scale_channels(x, s)
    assert np.allclose(out.data, x.data * s.data.reshape(1, 3, 1, 1))
    T.sum_all(out).backward()
    assert np.allclose(s.grad, x.data.sum(axis=(0, 2, 3)))


# ---------------------------------------------------------------------------
# validation and instrumentation
# ---------------------------------------------------------------------------

def test_validate_finds_injected_nan():
    data = RNG.standard_normal((4, 5))
    t = Tensor(data)
    t.validate()
    t.data[2, 3] = np.nan
    with pytest.raises(CorruptTensorError, match=r"\(2, 3\)"):
        t.validate()


def test_allocation_recorder_counts_tensor_bytes():
    with T.track_allocations() as rec:
        Tensor(np.zeros((10, 10)))
    assert rec.bytes_allocated == 10 * 10 * 8


def test_mac_recorder_accumulates():
    with T.count_macs() as rec:
        T.record_macs(120)
        T.record_macs(5)
    assert rec.macs == 125


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("dtype", [np.float64, np.float32])
def test_save_load_roundtrip(dtype, tmp_path):
    data = RNG.standard_normal((3, 4, 5)).astype(dtype)
    path = tmp_path / "t.pktn"
    save_tensor(path, Tensor(data, dtype=dtype))
    back = load_tensor(path)
    assert back.dtype == dtype
    assert np.array_equal(back.data, data)


def test_save_load_scalar_and_header_layout(tmp_path):
    path = tmp_path / "s.pktn"
    save_tensor(path, Tensor(np.array(2.5)))
    raw = path.read_bytes()
    assert raw[:4] == b"PKTN"
    assert np.array_equal(load_tensor(path).data, np.array(2.5))


def test_load_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.pktn"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(ValueError, match="magic"):
        load_tensor(path)


def test_load_rejects_truncated_payload(tmp_path):
    path = tmp_path / "trunc.pktn"
    save_tensor(path, Tensor(RNG.standard_normal((8, 8))))
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) - 16])
    with pytest.raises(ValueError):
        load_tensor(path)
