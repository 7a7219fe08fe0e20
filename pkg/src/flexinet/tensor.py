"""Minimal dense-array engine with reverse-mode automatic differentiation.

Tensors wrap contiguous numpy arrays (float32 by default, float64 for
gradient checking). Operations executed while a Tape is active record a
backward rule; Tape.backward replays the rules in exact reverse order,
which makes gradient accumulation deterministic.

Broadcasting is deliberately restricted: elementwise ops require equal
shapes, scalars are explicit (`add_scalar`, `mul_scalar`, `scale`), and
bias addition happens inside the convolution kernels.
"""

from __future__ import annotations

import warnings

import numpy as np

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """A dense array with optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        # note: ascontiguousarray would promote 0-d arrays to shape (1,)
        self.data = arr if arr.flags["C_CONTIGUOUS"] else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        nm = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{nm})"

    # convenience arithmetic (same-shape or python scalar only)
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, float(other))

    __rmul__ = __mul__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, mul_scalar(other, -1.0))
        return add_scalar(self, -float(other))


class Tape:
    """Records the operations of one forward pass for reverse replay.

    Recording order is the topological order (ops execute in order), so
    traversing the entries in reverse implements backpropagation. A tape
    may be consumed by ``backward`` exactly once.
    """

    def __init__(self):
        self.entries = []
        self.consumed = False

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def record(self, backward_fn):
        self.entries.append(backward_fn)


_TAPE_STACK: list[Tape] = []


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _record(out, inputs, backward_fn):
    """Attach a backward rule to the active tape if any input needs grad."""
    tape = _active_tape()
    needs = any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    if tape is not None and needs:
        def entry():
            g = out.grad
            if g is None:
                return
            backward_fn(g)

        tape.record(entry)
    return out


def backward(tape, loss):
    """Run reverse-mode differentiation of a recorded scalar.

    Fills ``grad`` on every tensor that participated with
    ``requires_grad=True``. Raises if the loss is not scalar or the tape
    was already consumed; warns and returns on an empty (detached) tape.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("loss must be a Tensor")
    if loss.data.size != 1:
        raise ValueError(
            f"backward requires a scalar loss, got shape {loss.data.shape}"
        )
    if tape.consumed:
        raise RuntimeError("tape already consumed by backward; re-record the forward pass")
    tape.consumed = True
    if not tape.entries:
        warnings.warn("backward called on an empty tape: graph is detached, all grads zero")
        return
    loss.grad = np.ones_like(loss.data)
    for entry in reversed(tape.entries):
        entry()


# ---------------------------------------------------------------------------
# shape helpers


def _check_same_shape(op, a, b):
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


def conv_output_size(size, kernel, stride, pad):
    return (size + 2 * pad - kernel) // stride + 1


# ---------------------------------------------------------------------------
# convolution kernels (im2col + BLAS matmul; the direct-loop oracle lives in
# flexinet.reference)


def _pad_nchw(x, ph, pw):
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _im2col(xp, kh, kw, sh, sw, ho, wo):
    n, c, _, _ = xp.shape
    s0, s1, s2, s3 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kh, kw, ho, wo),
        strides=(s0, s1, s2, s3, s2 * sh, s3 * sw),
        writeable=False,
    )
    return view.reshape(n, c * kh * kw, ho * wo)


def _col2im(dcols, x_shape, kh, kw, sh, sw, ph, pw, ho, wo):
    n, c, h, w = x_shape
    dxp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=dcols.dtype)
    d6 = dcols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += d6[:, :, i, j]
    if ph or pw:
        return dxp[:, :, ph : ph + h, pw : pw + w]
    return dxp


def conv2d(x, w, b=None, stride=(1, 1), padding=(0, 0)):
    """2-d convolution (cross-correlation), NCHW layout.

    x: N x Cin x H x W, w: Cout x Cin x Kh x Kw, optional bias of length Cout.
    Output spatial size is floor((in + 2*pad - K)/stride) + 1.
    """
    n, cin, h, wd = x.data.shape
    cout, cin_w, kh, kw = w.data.shape
    if cin != cin_w:
        raise ValueError(
            f"conv2d: input has {cin} channels but weight expects {cin_w}"
        )
    if kh < 1 or kw < 1:
        raise ValueError(f"conv2d: kernel must be >= 1, got {(kh, kw)}")
    sh, sw = stride
    if sh < 1 or sw < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    ph, pw = padding
    ho = conv_output_size(h, kh, sh, ph)
    wo = conv_output_size(wd, kw, sw, pw)
    if ho < 1 or wo < 1:
        raise ValueError(
            f"conv2d: output size {(ho, wo)} is empty for input {(h, wd)}, "
            f"kernel {(kh, kw)}, stride {stride}, padding {padding}"
        )
    if b is not None and b.data.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {b.data.shape} != ({cout},)")

    xp = _pad_nchw(x.data, ph, pw)
    cols = _im2col(xp, kh, kw, sh, sw, ho, wo)  # N x CKK x L
    w2 = w.data.reshape(cout, cin * kh * kw)
    out_data = np.matmul(w2, cols).reshape(n, cout, ho, wo)
    if b is not None:
        out_data = out_data + b.data[None, :, None, None]
    out = Tensor(out_data)

    inputs = (x, w) if b is None else (x, w, b)

    def bwd(g):
        g2 = g.reshape(n, cout, ho * wo)
        if w.requires_grad:
            dw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0)
            w.accumulate_grad(dw.reshape(w.data.shape))
        if b is not None and b.requires_grad:
            b.accumulate_grad(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = np.matmul(w2.T, g2)
            dx = _col2im(dcols, x.data.shape, kh, kw, sh, sw, ph, pw, ho, wo)
            x.accumulate_grad(dx)

    return _record(out, inputs, bwd)


def depthwise_conv2d(x, w, stride=(1, 1), padding=(0, 0)):
    """Per-channel spatial convolution: one Kh x Kw filter per input channel."""
    n, c, h, wd = x.data.shape
    cw, one, kh, kw = w.data.shape
    if cw != c or one != 1:
        raise ValueError(
            f"depthwise_conv2d: weight shape {w.data.shape} incompatible with "
            f"{c} input channels (expected ({c}, 1, Kh, Kw))"
        )
    sh, sw = stride
    ph, pw = padding
    ho = conv_output_size(h, kh, sh, ph)
    wo = conv_output_size(wd, kw, sw, pw)
    if ho < 1 or wo < 1:
        raise ValueError(
            f"depthwise_conv2d: empty output {(ho, wo)} for input {(h, wd)}"
        )

    xp = _pad_nchw(x.data, ph, pw)
    out_data = np.zeros((n, c, ho, wo), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            sl = xp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw]
            out_data += sl * w.data[None, :, 0, i, j, None, None]
    out = Tensor(out_data)

    def bwd(g):
        if w.requires_grad:
            dw = np.zeros_like(w.data)
            for i in range(kh):
                for j in range(kw):
                    sl = xp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw]
                    dw[:, 0, i, j] = (g * sl).sum(axis=(0, 2, 3))
            w.accumulate_grad(dw)
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += (
                        g * w.data[None, :, 0, i, j, None, None]
                    )
            if ph or pw:
                dxp = dxp[:, :, ph : ph + h, pw : pw + wd]
            x.accumulate_grad(dxp)

    return _record(out, (x, w), bwd)


def pointwise_conv2d(x, w, b=None):
    """1x1 convolution: a per-pixel linear map across channels."""
    n, cin, h, wd = x.data.shape
    cout, cin_w, kh, kw = w.data.shape
    if kh != 1 or kw != 1:
        raise ValueError(f"pointwise_conv2d: kernel must be 1x1, got {(kh, kw)}")
    if cin != cin_w:
        raise ValueError(
            f"pointwise_conv2d: input has {cin} channels but weight expects {cin_w}"
        )
    w2 = w.data.reshape(cout, cin)
    xf = x.data.reshape(n, cin, h * wd)
    out_data = np.matmul(w2, xf).reshape(n, cout, h, wd)
    if b is not None:
        if b.data.shape != (cout,):
            raise ValueError(f"pointwise_conv2d: bias shape {b.data.shape} != ({cout},)")
        out_data = out_data + b.data[None, :, None, None]
    out = Tensor(out_data)

    inputs = (x, w) if b is None else (x, w, b)

    def bwd(g):
        g2 = g.reshape(n, cout, h * wd)
        if w.requires_grad:
            dw = np.matmul(g2, xf.transpose(0, 2, 1)).sum(axis=0)
            w.accumulate_grad(dw.reshape(w.data.shape))
        if b is not None and b.requires_grad:
            b.accumulate_grad(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dx = np.matmul(w2.T, g2).reshape(x.data.shape)
            x.accumulate_grad(dx)

    return _record(out, inputs, bwd)


# ---------------------------------------------------------------------------
# elementwise / reduction suite


def relu(x):
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, x.data.dtype.type(0)))

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g * mask)

    return _record(out, (x,), bwd)


def add(a, b):
    _check_same_shape("add", a, b)
    out = Tensor(a.data + b.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g)

    return _record(out, (a, b), bwd)


def mul(a, b):
    _check_same_shape("mul", a, b)
    out = Tensor(a.data * b.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * b.data)
        if b.requires_grad:
            b.accumulate_grad(g * a.data)

    return _record(out, (a, b), bwd)


def add_scalar(x, c):
    out = Tensor(x.data + x.data.dtype.type(c))

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g)

    return _record(out, (x,), bwd)


def mul_scalar(x, c):
    c = x.data.dtype.type(c)
    out = Tensor(x.data * c)

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g * c)

    return _record(out, (x,), bwd)


def scale(x, s):
    """Multiply a tensor by a trainable 0-d tensor (gradient flows to both)."""
    if s.data.size != 1:
        raise ValueError(f"scale: scale factor must be 0-d, got shape {s.data.shape}")
    out = Tensor(x.data * s.data.reshape(()))

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g * s.data.reshape(()))
        if s.requires_grad:
            s.accumulate_grad(np.asarray((g * x.data).sum(), dtype=s.data.dtype).reshape(s.data.shape))

    return _record(out, (x, s), bwd)


def _normalize_axes(axes, ndim):
    if axes is None:
        axes = tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(int(a) % ndim if -ndim <= int(a) < ndim else int(a) for a in axes)
    for a in axes:
        if a < 0 or a >= ndim:
            raise ValueError(f"axis {a} out of range for ndim {ndim}")
    return tuple(sorted(set(axes)))


def tsum(x, axes=None, keepdims=False):
    axes = _normalize_axes(axes, x.data.ndim)
    out = Tensor(x.data.sum(axis=axes, keepdims=keepdims))

    def bwd(g):
        if x.requires_grad:
            gg = g if keepdims else np.expand_dims(g, axes)
            x.accumulate_grad(np.broadcast_to(gg, x.data.shape).copy())

    return _record(out, (x,), bwd)


def mean(x, axes=None, keepdims=False):
    axes = _normalize_axes(axes, x.data.ndim)
    count = int(np.prod([x.data.shape[a] for a in axes]))
    out = Tensor(x.data.mean(axis=axes, keepdims=keepdims))

    def bwd(g):
        if x.requires_grad:
            gg = g if keepdims else np.expand_dims(g, axes)
            x.accumulate_grad(np.broadcast_to(gg, x.data.shape) / count)

    return _record(out, (x,), bwd)


def var(x, axes=None, keepdims=False):
    """Population variance (ddof=0) over the given axes."""
    axes = _normalize_axes(axes, x.data.ndim)
    count = int(np.prod([x.data.shape[a] for a in axes]))
    mu = x.data.mean(axis=axes, keepdims=True)
    centered = x.data - mu
    out = Tensor((centered * centered).mean(axis=axes, keepdims=keepdims))

    def bwd(g):
        if x.requires_grad:
            gg = g if keepdims else np.expand_dims(g, axes)
            x.accumulate_grad(2.0 / count * centered * gg)

    return _record(out, (x,), bwd)


def tlog(x):
    out = Tensor(np.log(x.data))

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g / x.data)

    return _record(out, (x,), bwd)


def softmax(x, axis=-1):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(p)

    def bwd(g):
        if x.requires_grad:
            inner = (g * p).sum(axis=axis, keepdims=True)
            x.accumulate_grad(p * (g - inner))

    return _record(out, (x,), bwd)


def log_softmax(x, axis=-1):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    ls = shifted - lse
    out = Tensor(ls)

    def bwd(g):
        if x.requires_grad:
            p = np.exp(ls)
            x.accumulate_grad(g - p * g.sum(axis=axis, keepdims=True))

    return _record(out, (x,), bwd)


def global_average_pool(x):
    """N x C x F x T -> N x C x 1 x 1 mean over the spatial extent."""
    if x.data.ndim != 4:
        raise ValueError(f"global_average_pool expects rank-4 input, got {x.data.shape}")
    n, c, f, t = x.data.shape
    out = Tensor(x.data.mean(axis=(2, 3), keepdims=True))

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(np.broadcast_to(g / (f * t), x.data.shape).copy())

    return _record(out, (x,), bwd)


def reshape(x, shape):
    out = Tensor(x.data.reshape(shape))

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g.reshape(x.data.shape))

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# normalization layers


def batch_norm(x, gamma, beta, running_mean, running_var, training,
               momentum=0.1, eps=1e-5):
    """Per-channel batch normalization over (N, F, T).

    running_mean / running_var are plain ndarrays updated in place during
    training (population statistics, momentum-blended).
    """
    if x.data.ndim != 4:
        raise ValueError(f"batch_norm expects rank-4 input, got {x.data.shape}")
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ValueError(f"batch_norm: gamma/beta must have shape ({c},)")

    if training:
        mu = x.data.mean(axis=(0, 2, 3))
        centered = x.data - mu[None, :, None, None]
        v = (centered * centered).mean(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * v
    else:
        mu = running_mean.astype(x.data.dtype)
        v = running_var.astype(x.data.dtype)
        centered = x.data - mu[None, :, None, None]

    inv_std = 1.0 / np.sqrt(v + eps)
    xhat = centered * inv_std[None, :, None, None]
    out = Tensor(xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None])

    m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]

    def bwd(g):
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            beta.accumulate_grad(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gx = g * gamma.data[None, :, None, None]
            if training:
                sum_gx = gx.sum(axis=(0, 2, 3), keepdims=True)
                sum_gx_xhat = (gx * xhat).sum(axis=(0, 2, 3), keepdims=True)
                dx = (inv_std[None, :, None, None] / m) * (
                    m * gx - sum_gx - xhat * sum_gx_xhat
                )
            else:
                dx = gx * inv_std[None, :, None, None]
            x.accumulate_grad(dx)

    return _record(out, (x, gamma, beta), bwd)


def instance_norm(x, eps=1e-5):
    """Normalize each (batch, channel) slice over its (F, T) extent.

    Statistics are per (n, c): mean and population variance, giving an
    N x C statistics tensor as in the channel-wise normalization rule.
    """
    if x.data.ndim != 4:
        raise ValueError(f"instance_norm expects rank-4 input, got {x.data.shape}")
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    centered = x.data - mu
    v = (centered * centered).mean(axis=(2, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt(v + eps)
    xhat = centered * inv_std
    out = Tensor(xhat)

    m = x.data.shape[2] * x.data.shape[3]

    def bwd(g):
        if x.requires_grad:
            sum_g = g.sum(axis=(2, 3), keepdims=True)
            sum_g_xhat = (g * xhat).sum(axis=(2, 3), keepdims=True)
            dx = (inv_std / m) * (m * g - sum_g - xhat * sum_g_xhat)
            x.accumulate_grad(dx)

    return _record(out, (x,), bwd)


def instance_norm_stats(x):
    """Plain-array per-(n, c) mean and population variance, shape N x C each."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    mu = arr.mean(axis=(2, 3))
    v = arr.var(axis=(2, 3))
    return mu, v


def res_norm(x, lambda_rn, eps=1e-5):
    """Trainable blend of identity and instance normalization.

    output = lambda_rn * x + instance_norm(x); the gradient reaches
    lambda_rn through the ``scale`` op.
    """
    return add(scale(x, lambda_rn), instance_norm(x, eps=eps))


# ---------------------------------------------------------------------------
# quantization hook


def round_half_away(x):
    """Round to nearest with ties away from zero (not numpy's banker's mode)."""
    return np.trunc(x + np.copysign(0.5, x))


def fake_quant(x, scale_f, zero_point, range_min, range_max, qmin=-128, qmax=127):
    """Simulated int8 rounding with a straight-through gradient.

    Forward is dequantize(quantize(x)); backward passes the gradient
    unchanged where range_min <= x <= range_max and zero elsewhere.
    """
    if scale_f <= 0:
        raise ValueError(f"fake_quant: scale must be positive, got {scale_f}")
    q = np.clip(round_half_away(x.data / scale_f) + zero_point, qmin, qmax)
    out = Tensor(((q - zero_point) * scale_f).astype(x.data.dtype))

    mask = (x.data >= range_min) & (x.data <= range_max)

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g * mask)

    return _record(out, (x,), bwd)
