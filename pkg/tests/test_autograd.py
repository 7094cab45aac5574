import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dwarf import checkpoint, ops
from dwarf.autograd import Tensor, precision
from dwarf.gradcheck import finite_difference_check
from dwarf.optim import AdamState, adam_step

from conftest import conv2d_loops


# ---------------------------------------------------------------- conv2d


def test_conv2d_center_of_ones():
    out = ops.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor([0.0]), padding=1)
    assert out.data[0, 0, 1, 1] == 9.0


def test_conv2d_encoder_level1_shape():
    x = Tensor(np.zeros((1, 3, 256, 512)))
    w = Tensor(np.zeros((16, 3, 3, 3)))
    assert ops.conv2d(x, w, stride=2, padding=1).shape == (1, 16, 128, 256)


@pytest.mark.parametrize("stride,dilation,padding", [(1, 2, 0), (1, 2, 2), (2, 1, 1), (1, 1, 1), (2, 3, 3)])
def test_conv2d_matches_nested_loops(f64, rng, stride, dilation, padding):
    x = rng.normal(size=(1, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    got = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, dilation=dilation, padding=padding)
    np.testing.assert_allclose(got.data, conv2d_loops(x, w, b, stride, dilation, padding), atol=1e-6)


def test_conv2d_rejects_channel_mismatch():
    with pytest.raises(ValueError, match="input channels"):
        ops.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


def test_conv2d_rejects_empty_output():
    with pytest.raises(ValueError, match="empty"):
        ops.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


# ---------------------------------------------------------------- transposed conv


def test_conv_transpose_doubles_size():
    w = np.zeros((1, 1, 4, 4))
    w[0, 0, 1:3, 1:3] = 1.0
    out = ops.conv2d_transpose(Tensor(np.arange(4.0).reshape(1, 1, 2, 2)), Tensor(w))
    assert out.shape == (1, 1, 4, 4)


def test_conv_transpose_equals_conv_backward(f64, rng):
    """Transposed conv is the input-gradient of the matching strided conv."""
    x = rng.normal(size=(1, 2, 3, 3))
    w = rng.normal(size=(2, 3, 4, 4))  # (C_in, C_out, k, k) for the transposed op
    out = ops.conv2d_transpose(Tensor(x), Tensor(w), Tensor(np.zeros(3)))
    # forward conv maps 3 channels at 6x6 -> 2 channels at 3x3 with the same kernel
    z = Tensor(np.zeros((1, 3, 6, 6)), requires_grad=True)
    y = ops.conv2d(z, Tensor(w), Tensor(np.zeros(2)), stride=2, padding=1)
    ops.sum(ops.mul(y, Tensor(x))).backward()
    np.testing.assert_allclose(out.data, z.grad, atol=1e-6)


def test_conv_transpose_zero_input_gives_bias():
    out = ops.conv2d_transpose(Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.ones((2, 2, 4, 4))), Tensor([1.5, -2.0]))
    assert np.all(out.data[0, 0] == 1.5) and np.all(out.data[0, 1] == -2.0)


# ---------------------------------------------------------------- leaky relu / concat


def test_leaky_relu_values():
    np.testing.assert_allclose(ops.leaky_relu(Tensor([-1.0, 0.0, 2.0]), 0.1).data, [-0.1, 0.0, 2.0], rtol=1e-6)
    np.testing.assert_array_equal(ops.leaky_relu(Tensor([-3.0, 4.0]), 0.0).data, [0.0, 4.0])


def test_leaky_relu_gradient_fd(f64):
    x = Tensor([-2.0], requires_grad=True)
    ops.sum(ops.leaky_relu(x, 0.1)).backward()
    h = 1e-6
    fd = (0.1 * (-2.0 + h) - 0.1 * (-2.0 - h)) / (2 * h)
    assert abs(x.grad[0] - fd) < 1e-9
    assert abs(x.grad[0] - 0.1) < 1e-12


def test_leaky_relu_subgradient_at_zero():
    x = Tensor([0.0], requires_grad=True)
    ops.sum(ops.leaky_relu(x, 0.1)).backward()
    assert x.grad[0] == pytest.approx(0.1)


def test_concat_channels_dwarf_volume():
    parts = [Tensor(np.zeros((1, c, 2, 2))) for c in (9, 81, 9, 81)]
    assert ops.concat_channels(parts).shape == (1, 180, 2, 2)


def test_concat_single_is_identity():
    t = Tensor(np.ones((1, 3, 2, 2)))
    assert ops.concat_channels([t]) is t


def test_concat_gradient_routing():
    parts = [Tensor(np.zeros((1, c, 2, 2)), requires_grad=True) for c in (9, 81, 9, 81)]
    out = ops.concat_channels(parts)
    g = np.zeros(out.shape)
    g[:, 9:90] = 1.0
    out.backward(g)
    assert np.all(parts[1].grad == 1.0)
    for i in (0, 2, 3):
        assert not parts[i].grad.any()


def test_concat_rejects_spatial_mismatch():
    with pytest.raises(ValueError):
        ops.concat_channels([Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 2)))])


# ---------------------------------------------------------------- upsampling


def _bilinear_oracle(img, factor):
    """Closed-form align_corners=False bilinear interpolation, one pixel at a time."""
    h, w = img.shape
    out = np.zeros((h * factor, w * factor))
    for oy in range(h * factor):
        for ox in range(w * factor):
            sy = min(max((oy + 0.5) / factor - 0.5, 0), h - 1)
            sx = min(max((ox + 0.5) / factor - 0.5, 0), w - 1)
            y0, x0 = int(np.floor(sy)), int(np.floor(sx))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = sy - y0, sx - x0
            out[oy, ox] = (
                (1 - fy) * (1 - fx) * img[y0, x0]
                + (1 - fy) * fx * img[y0, x1]
                + fy * (1 - fx) * img[y1, x0]
                + fy * fx * img[y1, x1]
            )
    return out


@pytest.mark.parametrize("factor", [1, 2, 3, 4])
def test_upsample_constant(factor):
    out = ops.bilinear_upsample(Tensor(np.full((1, 1, 3, 5), 5.0)), factor)
    assert out.shape == (1, 1, 3 * factor, 5 * factor)
    np.testing.assert_allclose(out.data, 5.0, rtol=1e-6)


def test_upsample_factor1_identity():
    t = Tensor(np.arange(6.0).reshape(1, 1, 2, 3))
    np.testing.assert_array_equal(ops.bilinear_upsample(t, 1).data, t.data)


def test_upsample_matches_closed_form(f64):
    img = np.array([[0.0, 1.0], [2.0, 3.0]])
    got = ops.bilinear_upsample(Tensor(img[None, None]), 2).data[0, 0]
    np.testing.assert_allclose(got, _bilinear_oracle(img, 2), atol=1e-6)
    # first row by hand: samples at -0.25 (clamped), 0.25, 0.75, 1.25 (clamped)
    np.testing.assert_allclose(got[0], [0.0, 0.25, 0.75, 1.0], atol=1e-12)


def test_upsample_random_matches_oracle(f64, rng):
    img = rng.normal(size=(3, 4))
    got = ops.bilinear_upsample(Tensor(img[None, None]), 4).data[0, 0]
    np.testing.assert_allclose(got, _bilinear_oracle(img, 4), atol=1e-6)


# ---------------------------------------------------------------- backward


def test_backward_sum_gives_ones():
    x = Tensor(np.zeros((2, 3, 4, 5)), requires_grad=True)
    ops.sum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4, 5)))


def test_backward_square():
    x = Tensor([1.0, 2.0], requires_grad=True)
    ops.sum(ops.mul(x, x)).backward()
    np.testing.assert_allclose(x.grad, [2.0, 4.0])


def test_backward_rejects_nonscalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        ops.mul(x, x).backward()


def test_gradient_accumulates_over_consumers(f64, rng):
    xv = rng.normal(size=(1, 2, 4, 4))
    w1 = rng.normal(size=(2, 2, 3, 3))
    w2 = rng.normal(size=(2, 2, 3, 3))
    x = Tensor(xv, requires_grad=True)
    ops.sum(ops.add(ops.conv2d(x, Tensor(w1), padding=1), ops.square(ops.conv2d(x, Tensor(w2), padding=1)))).backward()
    # same graph with the tensor duplicated into two independent leaves
    xa = Tensor(xv, requires_grad=True)
    xb = Tensor(xv, requires_grad=True)
    ops.sum(ops.add(ops.conv2d(xa, Tensor(w1), padding=1), ops.square(ops.conv2d(xb, Tensor(w2), padding=1)))).backward()
    np.testing.assert_allclose(x.grad, xa.grad + xb.grad, rtol=1e-12)


def _composite(x, w, b, wt, bt):
    y = ops.leaky_relu(ops.conv2d(x, w, b, padding=1, dilation=1), 0.1)
    z = ops.conv2d_transpose(y, wt, bt)
    u = ops.bilinear_upsample(ops.concat_channels([y, y]), 2)
    return ops.add(ops.square(z), ops.scale(u, 0.5))


def test_composite_graph_matches_fd(f64, rng):
    point = [
        rng.normal(size=(1, 2, 3, 3)),
        rng.normal(size=(2, 2, 3, 3)),
        rng.normal(size=2),
        rng.normal(size=(2, 4, 4, 4)),
        rng.normal(size=4),
    ]
    assert finite_difference_check(_composite, point, h=1e-6) < 1e-5


# ---------------------------------------------------------------- finite-difference harness


def test_fd_requires_f64():
    with precision(32):
        with pytest.raises(RuntimeError):
            finite_difference_check(lambda a: a, [np.zeros(2)])


def test_fd_linear_concat_is_exact(f64, rng):
    err = finite_difference_check(
        lambda a, b: ops.concat_channels([a, b]),
        [rng.normal(size=(1, 2, 2, 2)), rng.normal(size=(1, 3, 2, 2))],
    )
    assert err < 1e-8


def test_fd_conv2d(f64, rng):
    point = [rng.normal(size=(1, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)]
    assert finite_difference_check(lambda x, w, b: ops.conv2d(x, w, b, padding=1, dilation=2), point) < 1e-5


def test_fd_leaky_relu_away_from_zero(f64, rng):
    x = rng.uniform(0.1, 1.0, size=(2, 3)) * rng.choice([-1, 1], size=(2, 3))
    assert finite_difference_check(lambda t: ops.leaky_relu(t, 0.1), [x]) < 1e-7


# ---------------------------------------------------------------- determinism


def test_forward_is_bit_deterministic(rng):
    x = rng.normal(size=(1, 4, 8, 8))
    w = rng.normal(size=(5, 4, 3, 3))
    a = ops.conv2d(Tensor(x), Tensor(w), padding=1, dilation=2).data
    b = ops.conv2d(Tensor(x), Tensor(w), padding=1, dilation=2).data
    assert a.tobytes() == b.tobytes()


@settings(max_examples=30, deadline=None)
@given(
    h=st.integers(3, 9), w=st.integers(3, 9), k=st.sampled_from([1, 3]),
    stride=st.integers(1, 2), dilation=st.integers(1, 3), padding=st.integers(0, 3),
)
def test_conv2d_output_size_law(h, w, k, stride, dilation, padding):
    ho = (h + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    wo = (w + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    x = Tensor(np.zeros((1, 1, h, w)))
    wt = Tensor(np.zeros((1, 1, k, k)))
    if ho <= 0 or wo <= 0:
        with pytest.raises(ValueError):
            ops.conv2d(x, wt, stride=stride, dilation=dilation, padding=padding)
    else:
        assert ops.conv2d(x, wt, stride=stride, dilation=dilation, padding=padding).shape == (1, 1, ho, wo)


# ---------------------------------------------------------------- adam


def test_adam_zero_gradient_leaves_params(f64):
    p = Tensor(np.array([1.0, -2.0]))
    st_ = AdamState.for_params([p], lr=1e-3)
    st_.m[0][:] = 0.5
    st_.v[0][:] = 0.25
    adam_step([p], [np.zeros(2)], st_)
    # moments decay (the parameter itself still moves because of the history)
    np.testing.assert_allclose(st_.m[0], 0.45)
    np.testing.assert_allclose(st_.v[0], 0.25 * 0.999)
    q = Tensor(np.array([3.0]))
    fresh = AdamState.for_params([q])
    adam_step([q], [np.zeros(1)], fresh)
    assert q.data[0] == 3.0 and fresh.step == 1


def test_adam_first_step_magnitude_is_lr(f64):
    p = Tensor(np.array([0.0]))
    state = AdamState.for_params([p], lr=1e-4)
    adam_step([p], [np.array([1.0])], state)
    # closed form: m_hat = 1, v_hat = 1 -> update = lr / (1 + eps)
    assert abs(-p.data[0] - 1e-4 / (1 + 1e-8)) < 1e-15
    assert abs(-p.data[0] - 1e-4) < 1e-9


def test_adam_defaults():
    s = AdamState()
    assert (s.beta1, s.beta2) == (0.9, 0.999)


def test_adam_skips_nan():
    p = Tensor(np.array([1.0]))
    state = AdamState.for_params([p])
    assert adam_step([p], [np.array([np.nan])], state) is False
    assert p.data[0] == 1.0 and state.step == 0


def test_adam_step_counter_increases():
    p = Tensor(np.array([1.0]))
    state = AdamState.for_params([p])
    for i in range(3):
        adam_step([p], [np.array([0.3])], state)
        assert state.step == i + 1


# ---------------------------------------------------------------- checkpoint


def test_checkpoint_round_trip_bit_exact(rng, tmp_path):
    params = {"enc.0.w": rng.normal(size=(4, 3, 3, 3)).astype(np.float32), "b": np.float32([1.5, -0.0, 3e-38])}
    checkpoint.save(params, tmp_path / "m.ckpt")
    back = checkpoint.load(tmp_path / "m.ckpt")
    assert list(back) == list(params)
    for k in params:
        assert back[k].tobytes() == params[k].tobytes()


def test_checkpoint_bad_magic():
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(b"NOTACKPT\x01\x00\x00\x00")
