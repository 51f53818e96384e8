"""Array operations used by the segmentation network.

All functions take and return :class:`~jseg.tensor.Tensor` and record
backward rules on the active tape.  Spatial tensors are laid out
height x width x channels; convolution kernels are k x k x c_in x c_out.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, _as_tensor, _record, maximum, tsqrt


def _im2col(x: np.ndarray, ksize: int, stride: int) -> np.ndarray:
    """Patch matrix of shape (h_out*w_out, k*k*c) for same-padded conv."""
    pad = ksize // 2
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (ksize, ksize), axis=(0, 1))
    win = win[::stride, ::stride]  # (h_out, w_out, c, k, k)
    h_out, w_out = win.shape[:2]
    cols = win.transpose(0, 1, 3, 4, 2).reshape(h_out * w_out, -1)
    return np.ascontiguousarray(cols)


def _col_scatter(dcols: np.ndarray, in_shape: tuple, ksize: int, stride: int,
                 h_out: int, w_out: int) -> np.ndarray:
    """Adjoint of ``_im2col``: scatter-add patch gradients back to the input."""
    h, w, c = in_shape
    pad = ksize // 2
    dxp = np.zeros((h + 2 * pad, w + 2 * pad, c), dtype=dcols.dtype)
    dcols = dcols.reshape(h_out, w_out, ksize, ksize, c)
    for ki in range(ksize):
        for kj in range(ksize):
            dxp[ki:ki + stride * h_out:stride,
                kj:kj + stride * w_out:stride] += dcols[:, :, ki, kj]
    return dxp[pad:pad + h, pad:pad + w]


def _check_conv_shapes(x: Tensor, kernel: Tensor) -> None:
    if x.ndim != 3:
        raise ShapeError(f"conv2d input must be h x w x c, got {x.shape}")
    if kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1]:
        raise ShapeError(f"conv2d kernel must be k x k x c_in x c_out, got {kernel.shape}")
    if kernel.shape[0] % 2 != 1:
        raise ShapeError(f"conv2d kernel size must be odd, got {kernel.shape[0]}")
    if x.shape[2] != kernel.shape[2]:
        raise ShapeError(
            f"conv2d channel mismatch: input has {x.shape[2]}, kernel expects {kernel.shape[2]}"
        )


def conv2d(x, kernel, stride: int = 1) -> Tensor:
    """Zero-padded 'same' convolution; stride 2 halves even spatial sides."""
    x = _as_tensor(x)
    kernel = _as_tensor(kernel)
    _check_conv_shapes(x, kernel)
    ksize, _, c_in, c_out = kernel.shape
    h, w, _ = x.shape
    cols = _im2col(x.data, ksize, stride)
    wmat = kernel.data.reshape(-1, c_out)
    h_out = (h - 1) // stride + 1
    w_out = (w - 1) // stride + 1
    out = Tensor((cols @ wmat).reshape(h_out, w_out, c_out))

    def _backward(g):
        gflat = g.reshape(-1, c_out)
        if kernel.tracked:
            kernel.accumulate_grad((cols.T @ gflat).reshape(kernel.shape))
        if x.tracked:
            dcols = gflat @ wmat.T
            x.accumulate_grad(_col_scatter(dcols, x.shape, ksize, stride, h_out, w_out))

    return _record(out, (x, kernel), _backward)


def conv2d_kernel_grad(x, u, ksize: int) -> Tensor:
    """Adjoint of ``conv2d`` w.r.t. its kernel: patches(x)^T @ u.

    Used as a *forward* operation when an optimizer's own gradient is part
    of the differentiated graph; it is bilinear in (x, u) and therefore has
    simple backward rules of its own.
    """
    x = _as_tensor(x)
    u = _as_tensor(u)
    if x.ndim != 3 or u.ndim != 3 or x.shape[:2] != u.shape[:2]:
        raise ShapeError(f"kernel-grad operands disagree: {x.shape} vs {u.shape}")
    h, w, c_in = x.shape
    c_out = u.shape[2]
    cols = _im2col(x.data, ksize, 1)
    uflat = u.data.reshape(-1, c_out)
    out = Tensor((cols.T @ uflat).reshape(ksize, ksize, c_in, c_out))

    def _backward(g):
        gflat = g.reshape(-1, c_out)
        if u.tracked:
            u.accumulate_grad((cols @ gflat).reshape(u.shape))
        if x.tracked:
            dcols = uflat @ gflat.T
            x.accumulate_grad(_col_scatter(dcols, x.shape, ksize, 1, h, w))

    return _record(out, (x, u), _backward)


def softmax(x, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def _backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        x.accumulate_grad(y * (g - dot))

    return _record(out, (x,), _backward)


def l2_normalize(x, axis: int = -1, epsilon: float = 1e-12) -> Tensor:
    """Scale slices along ``axis`` to unit norm (epsilon-guarded near zero)."""
    x = _as_tensor(x)
    sq = x * x
    norm = tsqrt(sq.sum(axis=axis, keepdims=True))
    return x / maximum(norm, epsilon)


def instance_norm(x, epsilon: float = 1e-5) -> Tensor:
    """Standardize each channel over the token axis of a tokens x channels map.

    No learned affine.  A single-token input has degenerate variance and
    comes out as all zeros.
    """
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"instance_norm expects tokens x channels, got {x.shape}")
    mu = x.mean(axis=0, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=0, keepdims=True)
    return centered / tsqrt(var + epsilon)


def avgpool2x2(x) -> Tensor:
    x = _as_tensor(x)
    h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avgpool2x2 needs even sides, got {x.shape}")
    out = Tensor(x.data.reshape(h // 2, 2, w // 2, 2, c).mean(axis=(1, 3)))

    def _backward(g):
        x.accumulate_grad(np.repeat(np.repeat(g, 2, axis=0), 2, axis=1) / 4.0)

    return _record(out, (x,), _backward)


_RESIZE_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic 1-d bilinear interpolation matrix (half-pixel centers)."""
    key = (n_in, n_out)
    mat = _RESIZE_CACHE.get(key)
    if mat is None:
        mat = np.zeros((n_out, n_in))
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        i0 = np.clip(np.floor(src).astype(int), 0, n_in - 1)
        i1 = np.minimum(i0 + 1, n_in - 1)
        frac = np.clip(src - i0, 0.0, 1.0)
        rows = np.arange(n_out)
        np.add.at(mat, (rows, i0), 1.0 - frac)
        np.add.at(mat, (rows, i1), frac)
        _RESIZE_CACHE[key] = mat
    return mat


def resize_bilinear(x, out_h: int, out_w: int) -> Tensor:
    """Separable bilinear resize of an h x w x c map."""
    x = _as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"resize expects h x w x c, got {x.shape}")
    h, w, _ = x.shape
    ry = _resize_matrix(h, out_h).astype(x.data.dtype)
    rx = _resize_matrix(w, out_w).astype(x.data.dtype)
    t = np.tensordot(ry, x.data, axes=(1, 0))  # (out_h, w, c)
    y = np.tensordot(rx, t, axes=(1, 1)).transpose(1, 0, 2)  # (out_h, out_w, c)
    out = Tensor(y)

    def _backward(g):
        t_back = np.tensordot(ry.T, g, axes=(1, 0))  # (h, out_w, c)
        x.accumulate_grad(np.tensordot(rx.T, t_back, axes=(1, 1)).transpose(1, 0, 2))

    return _record(out, (x,), _backward)


def resize_bilinear_np(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Plain-numpy bilinear resize for untracked data paths."""
    ry = _resize_matrix(x.shape[0], out_h)
    rx = _resize_matrix(x.shape[1], out_w)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[:, :, None]
    t = np.tensordot(ry, x, axes=(1, 0))
    y = np.tensordot(rx, t, axes=(1, 1)).transpose(1, 0, 2)
    return y[:, :, 0] if squeeze else y
