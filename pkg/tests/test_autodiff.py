import numpy as np
import pytest

from multirater import autodiff as ad
from oracles import finite_diff_grad, rel_err

FD_TOL = 1e-6


def scalar_loss_grad(build, x0):
    """Backward gradient of a scalar-producing graph w.r.t. leaf x0."""
    tape = ad.Tape()
    x = tape.leaf(x0)
    out = build(tape, x)
    tape.backward(out)
    return out.value.item(), x.grad.copy()


def fd_match(build, x0, tol=FD_TOL):
    _, g = scalar_loss_grad(build, x0)

    def f(xv):
        tape = ad.Tape()
        return build(tape, tape.leaf(xv)).value.item()

    g_fd = finite_diff_grad(f, x0)
    assert rel_err(g, g_fd) <= tol, f"rel err {rel_err(g, g_fd)}"


# -- elementwise suite -------------------------------------------------------

def test_sigmoid_at_zero():
    tape = ad.Tape()
    x = tape.leaf(np.zeros((1,)))
    y = ad.reduce_sum(ad.sigmoid(x))
    tape.backward(y)
    assert y.value.item() == pytest.approx(0.5, abs=1e-15)
    assert x.grad[0] == pytest.approx(0.25, abs=1e-15)


def test_exp_at_zero():
    tape = ad.Tape()
    x = tape.leaf(np.zeros((1,)))
    y = ad.reduce_sum(ad.exp(x))
    tape.backward(y)
    assert y.value.item() == pytest.approx(1.0, abs=1e-15)
    assert x.grad[0] == pytest.approx(1.0, abs=1e-15)


def test_abs_negative_input():
    tape = ad.Tape()
    x = tape.leaf(np.array([-0.3]))
    y = ad.reduce_sum(ad.absolute(x))
    tape.backward(y)
    assert y.value.item() == pytest.approx(0.3, abs=1e-15)
    assert x.grad[0] == -1.0


def test_abs_subgradient_zero_at_zero():
    tape = ad.Tape()
    x = tape.leaf(np.array([0.0]))
    y = ad.reduce_sum(ad.absolute(x))
    tape.backward(y)
    assert x.grad[0] == 0.0


def test_log_rejects_nonpositive():
    tape = ad.Tape()
    with pytest.raises(ValueError, match="positive"):
        ad.log(tape.leaf(np.array([0.0, 1.0])))


def test_binary_broadcast_and_shape_rejection():
    tape = ad.Tape()
    a = tape.leaf(np.ones((1, 2, 2)))
    b = tape.leaf(np.ones((3, 2, 2)))
    out = ad.reduce_sum(ad.mul(a, b))
    tape.backward(out)
    assert a.grad.shape == (1, 2, 2)
    assert np.all(a.grad == 3.0)  # summed over broadcast axis
    assert np.all(b.grad == 1.0)
    with pytest.raises(ad.ShapeError):
        ad.add(tape.leaf(np.ones((2, 3))), tape.leaf(np.ones((2, 4))))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_elementwise_chain_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x0 = rng.uniform(-1.5, 1.5, size=(3, 4))

    def build(tape, x):
        a = ad.sigmoid(x)
        b = ad.exp(-0.5 * x)
        c = ad.log(ad.clip(a, ad.EPS, 1.0 - ad.EPS))
        d = ad.square(ad.sub(a, b)) + ad.absolute(x) * 0.3
        e = ad.div(d, 1.0 + ad.square(c))
        return ad.reduce_sum(ad.relu(e) + 0.1 * e)

    fd_match(build, x0)


def test_reduce_sum_and_mean_gradients():
    tape = ad.Tape()
    x = tape.leaf(np.array([1.0, 2.0, 3.0]))
    s = ad.reduce_sum(x)
    tape.backward(s)
    assert s.value.item() == 6.0
    assert np.all(x.grad == 1.0)

    tape = ad.Tape()
    x = tape.leaf(np.array([2.0, 4.0]))
    m = ad.reduce_mean(x)
    tape.backward(m)
    assert m.value.item() == 3.0
    assert np.all(x.grad == 0.5)


@pytest.mark.parametrize("axes,keepdims", [(None, False), ((0,), False), ((1, 2), True)])
def test_reductions_match_finite_differences(axes, keepdims):
    rng = np.random.default_rng(7)
    x0 = rng.normal(size=(2, 3, 4))

    def build(tape, x):
        r = ad.reduce_mean(x, axes=axes, keepdims=keepdims)
        return ad.reduce_sum(ad.square(r))

    fd_match(build, x0)


# -- spatial operations ------------------------------------------------------

def test_conv2d_zero_input_gives_zero_output():
    tape = ad.Tape()
    x = tape.leaf(np.zeros((1, 3, 3)))
    k = tape.leaf(np.random.default_rng(0).normal(size=(2, 1, 3, 3)))
    out = ad.conv2d(x, k, stride=1, pad=1)
    assert out.shape == (2, 3, 3)
    assert np.all(out.value == 0.0)


def test_conv2d_1x1_kernel_scales_input():
    tape = ad.Tape()
    xv = np.arange(9.0).reshape(1, 3, 3)
    x = tape.leaf(xv)
    k = tape.leaf(np.array([[[[2.0]]]]))
    out = ad.conv2d(x, k, stride=1, pad=0)
    assert np.array_equal(out.value, 2.0 * xv)


def test_conv2d_shape_rejection_reports_dimensions():
    tape = ad.Tape()
    x = tape.leaf(np.zeros((2, 5, 5)))
    k = tape.leaf(np.zeros((1, 3, 3, 3)))
    with pytest.raises(ad.ShapeError, match="3 input channels"):
        ad.conv2d(x, k)
    with pytest.raises(ad.ShapeError, match="odd"):
        ad.conv2d(x, tape.leaf(np.zeros((1, 2, 2, 2))))
    x6 = tape.leaf(np.zeros((2, 6, 6)))
    with pytest.raises(ad.ShapeError, match="tile"):
        ad.conv2d(x6, tape.leaf(np.zeros((1, 2, 3, 3))), stride=2, pad=0)


def test_conv2d_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    x0 = rng.normal(size=(1, 5, 5))
    k0 = rng.normal(size=(1, 1, 3, 3))

    def loss_value(xv, kv):
        tape = ad.Tape()
        out = ad.conv2d(tape.leaf(xv), tape.leaf(kv), stride=1, pad=1)
        return ad.reduce_sum(ad.square(out)).value.item()

    tape = ad.Tape()
    x = tape.leaf(x0)
    k = tape.leaf(k0)
    out = ad.reduce_sum(ad.square(ad.conv2d(x, k, stride=1, pad=1)))
    tape.backward(out)

    gx_fd = finite_diff_grad(lambda v: loss_value(v, k0), x0)
    gk_fd = finite_diff_grad(lambda v: loss_value(x0, v), k0)
    assert rel_err(x.grad, gx_fd) <= 1e-6
    assert rel_err(k.grad, gk_fd) <= 1e-6


def test_conv2d_strided_gradients_match_finite_differences():
    rng = np.random.default_rng(4)
    x0 = rng.normal(size=(2, 7, 7))
    k0 = rng.normal(size=(3, 2, 3, 3))

    def build_pair(xv, kv):
        tape = ad.Tape()
        x = tape.leaf(xv)
        k = tape.leaf(kv)
        out = ad.reduce_sum(ad.square(ad.conv2d(x, k, stride=2, pad=1)))
        return tape, x, k, out

    tape, x, k, out = build_pair(x0, k0)
    tape.backward(out)
    gx_fd = finite_diff_grad(
        lambda v: build_pair(v, k0)[3].value.item(), x0)
    gk_fd = finite_diff_grad(
        lambda v: build_pair(x0, v)[3].value.item(), k0)
    assert rel_err(x.grad, gx_fd) <= 1e-6
    assert rel_err(k.grad, gk_fd) <= 1e-6


def test_upsample2x_value_and_gradient():
    tape = ad.Tape()
    x = tape.leaf(np.array([[[1.0]]]))
    out = ad.upsample2x(x)
    assert np.array_equal(out.value, np.ones((1, 2, 2)))
    tape.backward(ad.reduce_sum(out))
    assert x.grad[0, 0, 0] == 4.0


def test_concat_channel_axis():
    tape = ad.Tape()
    a = tape.leaf(np.ones((2, 4, 4)))
    b = tape.leaf(np.full((3, 4, 4), 2.0))
    out = ad.concat(a, b, axis=0)
    assert out.shape == (5, 4, 4)
    s = ad.reduce_sum(out * np.concatenate(
        [np.full((2, 4, 4), 3.0), np.full((3, 4, 4), 5.0)]))
    tape.backward(s)
    assert np.all(a.grad == 3.0)
    assert np.all(b.grad == 5.0)


def test_maxpool_routes_gradient_to_argmax():
    xv = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    tape = ad.Tape()
    x = tape.leaf(xv)
    out = ad.maxpool2x(x)
    assert out.value.item() == 4.0
    tape.backward(ad.reduce_sum(out))
    expected = np.zeros((1, 2, 2))
    expected[0, 1, 1] = 1.0
    assert np.array_equal(x.grad, expected)

    with pytest.raises(ad.ShapeError, match="even"):
        ad.maxpool2x(tape.leaf(np.zeros((1, 3, 4))))


def test_maxpool_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    x0 = rng.normal(size=(2, 4, 4))

    def build(tape, x):
        return ad.reduce_sum(ad.square(ad.maxpool2x(x)))

    fd_match(build, x0)


# -- composite network-shaped graph vs finite differences ---------------------

def test_unet_shaped_composite_matches_finite_differences():
    rng = np.random.default_rng(11)
    x0 = rng.normal(size=(1, 4, 4)) * 0.5
    k1 = rng.normal(size=(2, 1, 3, 3)) * 0.5
    k2 = rng.normal(size=(2, 2, 3, 3)) * 0.5

    def loss(kv):
        tape = ad.Tape()
        x = tape.constant(x0)
        a = ad.relu(ad.conv2d(x, tape.leaf(kv), stride=1, pad=1))
        p = ad.maxpool2x(a)
        b = ad.relu(ad.conv2d(p, tape.constant(k2), stride=1, pad=1))
        u = ad.upsample2x(b)
        c = ad.concat(u, a, axis=0)
        s = ad.sigmoid(ad.reduce_mean(c, axes=(1, 2)))
        return ad.reduce_sum(ad.square(s))

    tape = ad.Tape()
    x = tape.constant(x0)
    k = tape.leaf(k1)
    a = ad.relu(ad.conv2d(x, k, stride=1, pad=1))
    p = ad.maxpool2x(a)
    b = ad.relu(ad.conv2d(p, tape.constant(k2), stride=1, pad=1))
    u = ad.upsample2x(b)
    c = ad.concat(u, a, axis=0)
    s = ad.sigmoid(ad.reduce_mean(c, axes=(1, 2)))
    out = ad.reduce_sum(ad.square(s))
    tape.backward(out)
    g_fd = finite_diff_grad(lambda kv: loss(kv).value.item(), k1)
    assert rel_err(k.grad, g_fd) <= 1e-5


# -- tape contracts -----------------------------------------------------------

def test_backward_is_bitwise_deterministic():
    rng = np.random.default_rng(9)
    x0 = rng.normal(size=(2, 4, 4))

    def run():
        tape = ad.Tape()
        x = tape.leaf(x0)
        out = ad.reduce_sum(ad.square(ad.sigmoid(ad.maxpool2x(x))))
        tape.backward(out)
        return x.grad.copy()

    g1, g2 = run(), run()
    assert np.array_equal(g1, g2)


def test_operations_do_not_mutate_inputs():
    rng = np.random.default_rng(13)
    x0 = rng.normal(size=(2, 4, 4))
    k0 = rng.normal(size=(2, 2, 3, 3))
    tape = ad.Tape()
    x = tape.leaf(x0.copy())
    k = tape.leaf(k0.copy())
    out = ad.reduce_sum(ad.relu(ad.conv2d(x, k, pad=1)) + ad.exp(x * 0.1))
    tape.backward(out)
    assert np.array_equal(x.value, x0)
    assert np.array_equal(k.value, k0)


def test_grad_buffers_match_value_shapes():
    tape = ad.Tape()
    x = tape.leaf(np.zeros((3, 2)))
    y = ad.reduce_sum(x, axes=(0,))
    assert x.grad.shape == x.value.shape
    assert y.grad.shape == y.value.shape


def test_backward_requires_scalar_root():
    tape = ad.Tape()
    x = tape.leaf(np.zeros((2, 2)))
    with pytest.raises(ad.ShapeError, match="scalar"):
        tape.backward(ad.square(x))


def test_root_grad_is_one_after_backward():
    tape = ad.Tape()
    x = tape.leaf(np.array([3.0]))
    out = ad.reduce_sum(ad.square(x))
    tape.backward(out)
    assert out.grad.item() == 1.0


def test_mixed_tape_operands_rejected():
    t1, t2 = ad.Tape(), ad.Tape()
    a = t1.leaf(np.ones(2))
    b = t2.leaf(np.ones(2))
    with pytest.raises(ValueError, match="tape"):
        ad.add(a, b)
