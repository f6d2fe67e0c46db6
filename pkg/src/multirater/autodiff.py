"""Reverse-mode automatic differentiation over dense float64 arrays.

Define-by-run: each operation computes its forward value immediately and
records a pullback closure on the owning Tape. Creation order is a valid
topological order, so replaying the record backwards visits every node
after all of its consumers. One tape (and its arrays) belongs to a single
thread; independent tapes may run concurrently.

Operations never mutate their inputs' values; gradients accumulate into
per-node buffers and are bitwise deterministic for an identical tape.
"""

import numpy as np
from scipy.special import expit

EPS = 1e-7  # clamp applied to probabilities and denominators downstream


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


def _as_value(x):
    v = np.asarray(x, dtype=np.float64)
    return v


class DiffArray:
    """A dense array participating in a recorded differentiable computation."""

    __slots__ = ("tape", "value", "_grad", "node_id", "_parents", "_track")

    def __init__(self, tape, value, parents, track, node_id):
        self.tape = tape
        self.value = value
        self._grad = None
        self.node_id = node_id
        self._parents = parents
        self._track = track

    @property
    def grad(self):
        # allocated on first touch; always same-shape as value
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, value):
        self._grad = value

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    def item(self):
        return float(self.value.item())

    # -- operator sugar (scalars and array-likes lift to constants) --------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(self.tape.constant(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(self.tape.constant(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self):
        return f"DiffArray(shape={self.value.shape}, node_id={self.node_id})"


class Tape:
    """Ordered record of operations for one forward/backward episode."""

    def __init__(self):
        self._nodes = []
        self._next_id = 0

    def _make(self, value, parents=(), track=True):
        node = DiffArray(self, value, tuple(parents), track, self._next_id)
        self._next_id += 1
        if track:
            self._nodes.append(node)
        return node

    def leaf(self, value):
        """Wrap an array as a gradient-tracked input (e.g. a parameter)."""
        return self._make(_as_value(value))

    def constant(self, value):
        """Wrap an array that needs no gradient (e.g. an annotation mask)."""
        return self._make(_as_value(value), track=False)

    def lift(self, x):
        if isinstance(x, DiffArray):
            if x.tape is not self:
                raise ValueError("operands belong to different tapes")
            return x
        return self.constant(x)

    def zero_grads(self):
        for node in self._nodes:
            if node._grad is not None:
                node._grad[...] = 0.0

    def backward(self, root):
        """Accumulate d(root)/d(node) into every tracked node's grad buffer.

        root must be scalar-sized; its grad is seeded with 1.
        """
        if root.tape is not self:
            raise ValueError("root belongs to a different tape")
        if root.value.size != 1:
            raise ShapeError(
                f"backward root must be scalar-sized, got shape {root.value.shape}"
            )
        root.grad[...] = 1.0
        for node in reversed(self._nodes):
            g = node._grad
            if g is None:  # not on any path to the root
                continue
            for parent, pull in node._parents:
                parent.grad += pull(g)


def _unbroadcast(g, shape):
    # reduce an upstream gradient to the shape of a broadcast operand
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary(a, b, fwd, pull_a, pull_b):
    tape = a.tape if isinstance(a, DiffArray) else b.tape
    a = tape.lift(a)
    b = tape.lift(b)
    try:
        value = fwd(a.value, b.value)
    except ValueError as exc:
        raise ShapeError(
            f"incompatible shapes {a.value.shape} and {b.value.shape}: {exc}"
        ) from None
    parents = []
    if a._track:
        parents.append((a, pull_a(a, b, value)))
    if b._track:
        parents.append((b, pull_b(a, b, value)))
    return tape._make(value, parents, track=bool(parents))


def add(a, b):
    return _binary(
        a, b, np.add,
        lambda a, b, out: lambda g: _unbroadcast(g, a.value.shape),
        lambda a, b, out: lambda g: _unbroadcast(g, b.value.shape),
    )


def sub(a, b):
    return _binary(
        a, b, np.subtract,
        lambda a, b, out: lambda g: _unbroadcast(g, a.value.shape),
        lambda a, b, out: lambda g: _unbroadcast(-g, b.value.shape),
    )


def mul(a, b):
    return _binary(
        a, b, np.multiply,
        lambda a, b, out: lambda g: _unbroadcast(g * b.value, a.value.shape),
        lambda a, b, out: lambda g: _unbroadcast(g * a.value, b.value.shape),
    )


def div(a, b):
    return _binary(
        a, b, np.divide,
        lambda a, b, out: lambda g: _unbroadcast(g / b.value, a.value.shape),
        lambda a, b, out: lambda g: _unbroadcast(-g * out / b.value, b.value.shape),
    )


def _unary(x, value, pull):
    parents = [(x, pull)] if x._track else []
    return x.tape._make(value, parents, track=x._track)


def exp(x):
    out_value = np.exp(x.value)
    return _unary(x, out_value, lambda g: g * out_value)


def log(x):
    if np.any(x.value <= 0.0):
        raise ValueError("log requires strictly positive inputs (clamp first)")
    return _unary(x, np.log(x.value), lambda g: g / x.value)


def absolute(x):
    # subgradient 0 at exactly 0 (np.sign(0) == 0)
    return _unary(x, np.abs(x.value), lambda g: g * np.sign(x.value))


def square(x):
    return _unary(x, np.square(x.value), lambda g: g * (2.0 * x.value))


def sigmoid(x):
    out_value = expit(x.value)
    return _unary(x, out_value, lambda g: g * out_value * (1.0 - out_value))


def relu(x):
    return _unary(x, np.maximum(x.value, 0.0), lambda g: g * (x.value > 0.0))


def clip(x, lo, hi):
    """Clamp values to [lo, hi]; gradient passes only strictly inside."""
    inside = (x.value > lo) & (x.value < hi)
    return _unary(x, np.clip(x.value, lo, hi), lambda g: g * inside)


def _norm_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    if any(a < -ndim or a >= ndim for a in axes):
        raise ShapeError(f"invalid reduction axes {axes} for ndim {ndim}")
    axes = tuple(a % ndim for a in axes)
    if len(set(axes)) != len(axes):
        raise ShapeError(f"duplicate reduction axes {axes}")
    return axes


def reduce_sum(x, axes=None, keepdims=False):
    axes = _norm_axes(axes, x.value.ndim)
    value = x.value.sum(axis=axes, keepdims=keepdims)

    def pull(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return np.broadcast_to(g, x.value.shape)

    return _unary(x, value, pull)


def reduce_mean(x, axes=None, keepdims=False):
    axes = _norm_axes(axes, x.value.ndim)
    count = float(np.prod([x.value.shape[a] for a in axes])) if axes else 1.0
    value = x.value.mean(axis=axes, keepdims=keepdims)

    def pull(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return np.broadcast_to(g / count, x.value.shape)

    return _unary(x, value, pull)


# -- spatial operations -----------------------------------------------------

def _conv2d_geometry(x_shape, w_shape, stride, pad):
    if len(x_shape) != 3 or len(w_shape) != 4:
        raise ShapeError(
            f"conv2d expects input (C,H,W) and kernel (Co,Ci,k,k), "
            f"got {x_shape} and {w_shape}"
        )
    c_in, h, w = x_shape
    c_out, c_in_k, kh, kw = w_shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d kernel must be square with odd side, got {kh}x{kw}")
    if c_in_k != c_in:
        raise ShapeError(
            f"kernel expects {c_in_k} input channels but input has {c_in}"
        )
    if pad < 0 or stride < 1:
        raise ShapeError(f"invalid stride {stride} / pad {pad}")
    if (h + 2 * pad - kh) % stride or (w + 2 * pad - kw) % stride:
        raise ShapeError(
            f"spatial extents {h}x{w} with pad {pad}, kernel {kh}, stride {stride} "
            "do not tile evenly"
        )
    h_out = (h + 2 * pad - kh) // stride + 1
    w_out = (w + 2 * pad - kw) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"empty conv2d output {h_out}x{w_out}")
    return h_out, w_out


def _im2col(xp, k, stride, h_out, w_out):
    c = xp.shape[0]
    buf = np.empty((c, k, k, h_out, w_out))
    for i in range(k):
        for j in range(k):
            buf[:, i, j] = xp[:, i:i + stride * h_out:stride,
                              j:j + stride * w_out:stride]
    return buf.reshape(c * k * k, h_out * w_out)


def conv2d_value(xv, wv, stride=1, pad=0, bias=None, _saved=None):
    """Forward cross-correlation on plain arrays: (C,H,W) x (Co,C,k,k)."""
    h_out, w_out = _conv2d_geometry(xv.shape, wv.shape, stride, pad)
    c_out, c_in, k, _ = wv.shape
    if pad:
        xp = np.zeros((c_in, xv.shape[1] + 2 * pad, xv.shape[2] + 2 * pad))
        xp[:, pad:-pad, pad:-pad] = xv
    else:
        xp = xv
    cols = _im2col(xp, k, stride, h_out, w_out)
    out = (wv.reshape(c_out, -1) @ cols).reshape(c_out, h_out, w_out)
    if bias is not None:
        out += bias
    if _saved is not None:
        _saved["cols"] = cols
    return out


def conv2d(x, kernel, stride=1, pad=0, bias=None):
    """Cross-correlate (C_in,H,W) with (C_out,C_in,k,k); gradients for all.

    bias, when given, is a (C_out,1,1) array node added to the output.
    """
    saved = {}
    value = conv2d_value(x.value, kernel.value, stride, pad,
                         None if bias is None else bias.value, _saved=saved)
    c_out, h_out, w_out = value.shape
    c_in, h, w = x.value.shape
    k = kernel.value.shape[2]
    parents = []
    if kernel._track:
        def pull_w(g):
            g2 = g.reshape(c_out, -1)
            return (g2 @ saved["cols"].T).reshape(kernel.value.shape)

        parents.append((kernel, pull_w))
    if x._track:
        if stride == 1:
            # d(input) is the full cross-correlation of the upstream gradient
            # with the kernel rotated 180 degrees and its channel axes
            # swapped; one matmul instead of a k*k scatter
            flipped = np.ascontiguousarray(
                kernel.value[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))

            def pull_x(g):
                full = conv2d_value(g, flipped, stride=1, pad=k - 1)
                off = k - 1 - pad
                return full[:, off:off + h, off:off + w] if off else full
        else:
            def pull_x(g):
                g2 = g.reshape(c_out, -1)
                dcols = (kernel.value.reshape(c_out, -1).T @ g2)
                dcols = dcols.reshape(c_in, k, k, h_out, w_out)
                gxp = np.zeros((c_in, h + 2 * pad, w + 2 * pad))
                for i in range(k):
                    for j in range(k):
                        gxp[:, i:i + stride * h_out:stride,
                            j:j + stride * w_out:stride] += dcols[:, i, j]
                return gxp[:, pad:pad + h, pad:pad + w] if pad else gxp

        parents.append((x, pull_x))
    if bias is not None and bias._track:
        parents.append((bias, lambda g: g.sum(axis=(1, 2), keepdims=True)))
    return x.tape._make(value, parents, track=bool(parents))


def maxpool2x_value(xv, _saved=None):
    c, h, w = xv.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x requires even spatial extents, got {h}x{w}")
    v = xv.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4)
    v = v.reshape(c, h // 2, w // 2, 4)
    idx = v.argmax(axis=3)
    out = np.take_along_axis(v, idx[..., None], axis=3)[..., 0]
    if _saved is not None:
        _saved["idx"] = idx
    return out


def maxpool2x(x):
    """2x2 max pooling; backward routes gradient to the argmax position."""
    saved = {}
    value = maxpool2x_value(x.value, _saved=saved)
    c, h, w = x.value.shape

    def pull(g):
        buf = np.zeros((c, h // 2, w // 2, 4))
        np.put_along_axis(buf, saved["idx"][..., None], g[..., None], axis=3)
        return (buf.reshape(c, h // 2, w // 2, 2, 2)
                   .transpose(0, 1, 3, 2, 4).reshape(c, h, w))

    return _unary(x, value, pull)


def upsample2x_value(xv):
    return np.repeat(np.repeat(xv, 2, axis=1), 2, axis=2)


def upsample2x(x):
    """Nearest-neighbor 2x upsampling of (C,H,W)."""
    if x.value.ndim != 3:
        raise ShapeError(f"upsample2x expects (C,H,W), got {x.value.shape}")
    c, h, w = x.value.shape
    return _unary(
        x, upsample2x_value(x.value),
        lambda g: g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)),
    )


def instance_norm(x, gamma, beta, eps=1e-5):
    """Per-channel spatial normalization of (C,H,W) with affine scale/shift.

    out = gamma * (x - mean_c) / sqrt(var_c + eps) + beta, statistics taken
    over each channel's H*W pixels; gamma/beta are (C,1,1) array nodes.
    """
    xv = x.value
    if xv.ndim != 3:
        raise ShapeError(f"instance_norm expects (C,H,W), got {xv.shape}")
    mu = xv.mean(axis=(1, 2), keepdims=True)
    var = xv.var(axis=(1, 2), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (xv - mu) * inv_std
    value = gamma.value * x_hat + beta.value
    parents = []
    if x._track:
        def pull_x(g):
            gx_hat = g * gamma.value
            m1 = gx_hat.mean(axis=(1, 2), keepdims=True)
            m2 = (gx_hat * x_hat).mean(axis=(1, 2), keepdims=True)
            return inv_std * (gx_hat - m1 - x_hat * m2)

        parents.append((x, pull_x))
    if gamma._track:
        parents.append(
            (gamma, lambda g: (g * x_hat).sum(axis=(1, 2), keepdims=True)))
    if beta._track:
        parents.append((beta, lambda g: g.sum(axis=(1, 2), keepdims=True)))
    return x.tape._make(value, parents, track=bool(parents))


def instance_norm_value(xv, gamma, beta, eps=1e-5):
    mu = xv.mean(axis=(1, 2), keepdims=True)
    var = xv.var(axis=(1, 2), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    return gamma * ((xv - mu) * inv_std) + beta


def concat(a, b, axis):
    """Concatenate two arrays along axis; backward splits the gradient."""
    tape = a.tape if isinstance(a, DiffArray) else b.tape
    a = tape.lift(a)
    b = tape.lift(b)
    try:
        value = np.concatenate([a.value, b.value], axis=axis)
    except ValueError as exc:
        raise ShapeError(
            f"cannot concat shapes {a.value.shape} and {b.value.shape} "
            f"on axis {axis}: {exc}"
        ) from None
    na = a.value.shape[axis]
    lo = [slice(None)] * value.ndim
    hi = [slice(None)] * value.ndim
    lo[axis] = slice(0, na)
    hi[axis] = slice(na, None)
    lo, hi = tuple(lo), tuple(hi)
    parents = []
    if a._track:
        parents.append((a, lambda g: g[lo]))
    if b._track:
        parents.append((b, lambda g: g[hi]))
    return tape._make(value, parents, track=bool(parents))
