"""Reference (oracle) implementations and the finite-difference checker.

Every kernel here is a direct translation of its defining formula into
nested loops. They are intentionally slow and are used only to validate
the vectorized kernels on small shapes.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tape, Tensor, backward, conv_output_size


def conv2d_ref(x, w, b=None, stride=(1, 1), padding=(0, 0)):
    """Nested-loop 2-d convolution, row-major accumulation order."""
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    sh, sw = stride
    ph, pw = padding
    ho = conv_output_size(h, kh, sh, ph)
    wo = conv_output_size(wd, kw, sw, pw)
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    out = np.zeros((n, cout, ho, wo), dtype=x.dtype)
    for b_i in range(n):
        for o in range(cout):
            for u in range(ho):
                for v in range(wo):
                    acc = x.dtype.type(0)
                    for c in range(cin):
                        for i in range(kh):
                            for j in range(kw):
                                acc += w[o, c, i, j] * xp[b_i, c, u * sh + i, v * sw + j]
                    if b is not None:
                        acc += b[o]
                    out[b_i, o, u, v] = acc
    return out


def depthwise_conv2d_ref(x, w, stride=(1, 1), padding=(0, 0)):
    n, c, h, wd = x.shape
    _, _, kh, kw = w.shape
    sh, sw = stride
    ph, pw = padding
    ho = conv_output_size(h, kh, sh, ph)
    wo = conv_output_size(wd, kw, sw, pw)
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for b_i in range(n):
        for ch in range(c):
            for u in range(ho):
                for v in range(wo):
                    acc = x.dtype.type(0)
                    for i in range(kh):
                        for j in range(kw):
                            acc += w[ch, 0, i, j] * xp[b_i, ch, u * sh + i, v * sw + j]
                    out[b_i, ch, u, v] = acc
    return out


def pointwise_conv2d_ref(x, w, b=None):
    n, cin, h, wd = x.shape
    cout = w.shape[0]
    out = np.zeros((n, cout, h, wd), dtype=x.dtype)
    for b_i in range(n):
        for o in range(cout):
            for u in range(h):
                for v in range(wd):
                    acc = x.dtype.type(0)
                    for c in range(cin):
                        acc += w[o, c, 0, 0] * x[b_i, c, u, v]
                    if b is not None:
                        acc += b[o]
                    out[b_i, o, u, v] = acc
    return out


def expand_depthwise_weight(w_dw):
    """Block-diagonal expansion of a depthwise weight into a full conv weight."""
    c, _, kh, kw = w_dw.shape
    full = np.zeros((c, c, kh, kw), dtype=w_dw.dtype)
    for ch in range(c):
        full[ch, ch] = w_dw[ch, 0]
    return full


def convolve_full_ref(a, h):
    """O(n*m) direct full linear convolution of two 1-d signals."""
    a = np.asarray(a, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    out = np.zeros(len(a) + len(h) - 1)
    for i in range(len(a)):
        for j in range(len(h)):
            out[i + j] += a[i] * h[j]
    return out


def dft_frame_ref(frame):
    """Naive one-sided DFT of a real frame: O(n^2) complex sum."""
    n = len(frame)
    n_bins = n // 2 + 1
    out = np.zeros(n_bins, dtype=np.complex128)
    t = np.arange(n)
    for k in range(n_bins):
        out[k] = np.sum(frame * np.exp(-2j * np.pi * k * t / n))
    return out


# ---------------------------------------------------------------------------
# finite-difference gradient checking


def finite_difference_check(build_loss, params, step=1e-4, rel_tol=1e-3,
                            analytic_floor=1e-8, max_elems=24, seed=0):
    """Compare tape gradients of a scalar against central finite differences.

    build_loss is a zero-argument callable that runs the forward pass on
    the current parameter values and returns the scalar loss Tensor.
    params maps names to float64 parameter Tensors. Up to ``max_elems``
    coordinates per tensor are probed (deterministically sampled).

    Returns (max_rel_err, per_param dict). Comparison happens only where
    the analytic gradient magnitude exceeds ``analytic_floor``.
    """
    for name, p in params.items():
        if p.data.dtype != np.float64:
            raise ValueError(f"gradient check requires float64 params, {name} is {p.data.dtype}")
        p.grad = None

    with Tape() as tape:
        loss = build_loss()
    backward(tape, loss)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()}

    rng = np.random.default_rng(seed)
    worst = 0.0
    per_param = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        idx = np.arange(n) if n <= max_elems else np.sort(rng.choice(n, size=max_elems, replace=False))
        an_flat = analytic[name].reshape(-1)
        param_worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            lp = float(build_loss().data)
            flat[i] = orig - step
            lm = float(build_loss().data)
            flat[i] = orig
            fd = (lp - lm) / (2 * step)
            an = an_flat[i]
            if abs(an) <= analytic_floor and abs(fd) <= analytic_floor:
                continue
            rel = abs(fd - an) / max(abs(fd), abs(an))
            param_worst = max(param_worst, rel)
        per_param[name] = param_worst
        worst = max(worst, param_worst)
    return worst, per_param
