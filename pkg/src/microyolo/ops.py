"""Float32 forward/backward kernels for the 3x3-conv detector family.

Only the operator set the network needs is implemented: same-padded 3x3
convolution, 2x2/stride-2 max pooling, fully connected layers and ReLU.
All tensors are contiguous row-major; the public single-sample API works
on CHW arrays, the batched internals on NHWC (faster im2col on this
memory layout). Everything is deterministic: identical inputs produce
bitwise-identical outputs across runs.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# im2col strips are sized to stay cache-resident on large spatial layers;
# small layers run as one GEMM. The plan depends only on shapes, so the
# BLAS call pattern (and therefore the result bits) is stable run to run.
_STRIP_BYTES = 768 * 1024
_PLAIN_BYTES = 20 * 1024 * 1024


def require_finite(name, arr):
    """Raise if arr contains NaN or Inf (every op output must be finite)."""
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")


def _strip_plan(n, h, w, c, itemsize=4):
    """Yield (n0, n1, h0, h1) im2col chunks for an (n,h,w,c) input."""
    img_bytes = h * w * 9 * c * itemsize
    if n * img_bytes <= _PLAIN_BYTES:
        return [(0, n, 0, h)]
    if img_bytes > 600 * 1024:
        rows = max(1, _STRIP_BYTES // (w * 9 * c * itemsize))
        return [(i, i + 1, h0, min(h0 + rows, h))
                for i in range(n) for h0 in range(0, h, rows)]
    imgs = max(1, _PLAIN_BYTES // img_bytes)
    return [(n0, min(n0 + imgs, n), 0, h) for n0 in range(0, n, imgs)]


def _fill_cols(cb, xp, strip, h, w, c):
    """Fill the column buffer for one strip from the padded input xp.

    Column order is tap-major: cb[:, t*C + k] holds channel k of tap t,
    taps scanning the 3x3 window row-major.
    """
    n0, n1, h0, h1 = strip
    m = (n1 - n0) * (h1 - h0) * w
    if n1 - n0 == 1:
        win = sliding_window_view(xp[n0, h0:h1 + 2, :, :], (3, 3), axis=(0, 1))
        dst = cb[:m].reshape(h1 - h0, w, 3, 3, c)
        np.copyto(dst, win.transpose(0, 1, 3, 4, 2))
    else:
        win = sliding_window_view(xp[n0:n1], (3, 3), axis=(1, 2))
        dst = cb[:m].reshape(n1 - n0, h, w, 3, 3, c)
        np.copyto(dst, win.transpose(0, 1, 2, 4, 5, 3))
    return cb[:m]


def _weight_matrix(w):
    """(Cout,Cin,3,3) weights -> (9*Cin, Cout) GEMM matrix, tap-major rows."""
    cout, cin = w.shape[0], w.shape[1]
    return np.ascontiguousarray(w.transpose(2, 3, 1, 0).reshape(9 * cin, cout))


def _check_conv_args(x, w, b):
    if x.ndim != 4 or x.shape[1] < 1 or x.shape[2] < 1:
        raise ValueError(f"conv input must be non-empty NHWC, got shape {x.shape}")
    if w.ndim != 4 or w.shape[2:] != (3, 3):
        raise ValueError(f"conv kernel must be 3x3, got shape {w.shape}")
    if x.shape[3] != w.shape[1]:
        raise ValueError(
            f"channel mismatch: input has {x.shape[3]} channels, "
            f"weights expect {w.shape[1]}")
    if b.shape != (w.shape[0],):
        raise ValueError(f"bias length {b.shape} does not match {w.shape[0]} filters")


def conv_forward_nhwc(x, w, b):
    """Same-padded 3x3 convolution; x (N,H,W,C), w (Cout,Cin,3,3), b (Cout,)."""
    _check_conv_args(x, w, b)
    n, h, wd, c = x.shape
    cout = w.shape[0]
    wmat = _weight_matrix(w)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = np.empty((n, h, wd, cout), dtype=np.float32)
    plan = _strip_plan(n, h, wd, c)
    buf = np.empty((max((s[1] - s[0]) * (s[3] - s[2]) for s in plan) * wd, 9 * c),
                   dtype=np.float32)
    for strip in plan:
        n0, n1, h0, h1 = strip
        cb = _fill_cols(buf, xp, strip, h, wd, c)
        np.matmul(cb, wmat, out=out[n0:n1, h0:h1].reshape(cb.shape[0], cout))
    out += b
    require_finite("conv output", out)
    return out


def conv_backward_nhwc(grad_out, x, w):
    """Gradients of conv_forward_nhwc w.r.t. input, weights and bias.

    The input gradient of a same-padded stride-1 3x3 convolution is itself
    such a convolution: grad_out convolved with the spatially flipped,
    in/out-transposed kernel. The weight gradient is accumulated strip by
    strip in plan order (fixed, so results are bitwise stable).
    """
    _check_conv_args(x, w, np.zeros(w.shape[0], np.float32))
    if grad_out.shape != x.shape[:3] + (w.shape[0],):
        raise ValueError(
            f"grad_out shape {grad_out.shape} inconsistent with input "
            f"{x.shape} and {w.shape[0]} filters")
    n, h, wd, c = x.shape
    cout = w.shape[0]
    w_rot = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    grad_x = conv_forward_nhwc(grad_out, w_rot, np.zeros(c, np.float32))
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    gwmat = np.zeros((9 * c, cout), dtype=np.float32)
    plan = _strip_plan(n, h, wd, c)
    buf = np.empty((max((s[1] - s[0]) * (s[3] - s[2]) for s in plan) * wd, 9 * c),
                   dtype=np.float32)
    for strip in plan:
        n0, n1, h0, h1 = strip
        cb = _fill_cols(buf, xp, strip, h, wd, c)
        gob = grad_out[n0:n1, h0:h1].reshape(cb.shape[0], cout)
        gwmat += cb.T @ gob
    grad_w = np.ascontiguousarray(
        gwmat.reshape(3, 3, c, cout).transpose(3, 2, 0, 1))
    grad_b = grad_out.sum(axis=(0, 1, 2))
    require_finite("conv grad_w", grad_w)
    return grad_x, grad_w, grad_b


def maxpool_forward_nhwc(x, return_cache=False):
    """2x2/stride-2 max pool; odd trailing row/col dropped. Ties -> first index."""
    n, h, w, c = x.shape
    if h < 2 or w < 2:
        raise ValueError(f"maxpool needs spatial dims >= 2, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    blk = np.ascontiguousarray(
        x[:, :2 * h2, :2 * w2, :].reshape(n, h2, 2, w2, 2, c)
        .transpose(0, 1, 3, 2, 4, 5)).reshape(n, h2, w2, 4, c)
    idx = blk.argmax(axis=3)
    out = np.take_along_axis(blk, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]
    if return_cache:
        return out, (idx, (h, w))
    return out


def maxpool_backward_nhwc(grad_out, cache):
    """Route gradient to the argmax positions recorded by the forward pass."""
    if cache is None:
        raise ValueError("maxpool backward requires the forward cache")
    idx, (h, w) = cache
    n, h2, w2, c = grad_out.shape
    gblk = np.zeros((n, h2, w2, 4, c), dtype=np.float32)
    np.put_along_axis(gblk, idx[:, :, :, None, :], grad_out[:, :, :, None, :],
                      axis=3)
    gx = np.zeros((n, h, w, c), dtype=np.float32)
    gx[:, :2 * h2, :2 * w2, :] = (
        gblk.reshape(n, h2, w2, 2, 2, c).transpose(0, 1, 3, 2, 4, 5)
        .reshape(n, 2 * h2, 2 * w2, c))
    return gx


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(grad_out, x):
    """Gradient masked by x > 0; the gradient at exactly x == 0 is 0."""
    return np.where(x > 0, grad_out, 0).astype(np.float32)


def fc_forward(x, w, b):
    """out[i] = dot(w[i], x) + b[i]; x is (F,) or batched (N,F), w is (M,F)."""
    if x.shape[-1] != w.shape[1]:
        raise ValueError(
            f"fc length mismatch: input {x.shape[-1]}, weights expect {w.shape[1]}")
    out = x @ w.T + b
    require_finite("fc output", out)
    return out.astype(np.float32)


def fc_backward(grad_out, x, w):
    """Gradients of fc_forward; shapes mirror the primals."""
    if grad_out.shape[-1] != w.shape[0]:
        raise ValueError(
            f"fc grad length mismatch: got {grad_out.shape[-1]}, expected {w.shape[0]}")
    if x.ndim == 1:
        grad_w = np.outer(grad_out, x).astype(np.float32)
        grad_b = grad_out.astype(np.float32)
    else:
        grad_w = (grad_out.T @ x).astype(np.float32)
        grad_b = grad_out.sum(axis=0).astype(np.float32)
    grad_x = (grad_out @ w).astype(np.float32)
    return grad_x, grad_w, grad_b


# Single-sample CHW wrappers around the batched kernels. These are the
# reference entry points used by the oracles and by single-image inference.

def _chw_to_nhwc1(x):
    if x.ndim != 3:
        raise ValueError(f"expected CHW tensor, got shape {x.shape}")
    return np.ascontiguousarray(x.transpose(1, 2, 0))[None]


def conv2d_forward(x, w, b):
    """3x3 same-padded convolution on a single CHW tensor."""
    out = conv_forward_nhwc(_chw_to_nhwc1(np.asarray(x, np.float32)),
                            np.asarray(w, np.float32),
                            np.asarray(b, np.float32))
    return np.ascontiguousarray(out[0].transpose(2, 0, 1))


def conv2d_backward(grad_out, x, w):
    """Gradients for conv2d_forward; returns (grad_x, grad_w, grad_b)."""
    gx, gw, gb = conv_backward_nhwc(
        _chw_to_nhwc1(np.asarray(grad_out, np.float32)),
        _chw_to_nhwc1(np.asarray(x, np.float32)),
        np.asarray(w, np.float32))
    return np.ascontiguousarray(gx[0].transpose(2, 0, 1)), gw, gb


def maxpool2x2_forward(x, return_cache=False):
    """2x2/stride-2 max pool on a single CHW tensor."""
    res = maxpool_forward_nhwc(_chw_to_nhwc1(np.asarray(x, np.float32)),
                               return_cache=return_cache)
    if return_cache:
        out, cache = res
        return np.ascontiguousarray(out[0].transpose(2, 0, 1)), cache
    return np.ascontiguousarray(res[0].transpose(2, 0, 1))


def maxpool2x2_backward(grad_out, cache):
    """Gradient for maxpool2x2_forward given its cache."""
    gx = maxpool_backward_nhwc(_chw_to_nhwc1(np.asarray(grad_out, np.float32)),
                               cache)
    return np.ascontiguousarray(gx[0].transpose(2, 0, 1))
