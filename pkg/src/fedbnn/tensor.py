"""Minimal dense-tensor math on float64 numpy arrays.

Everything downstream (rotation solver, layers, packed inference oracle)
builds on the handful of operations here. Convolution uses the
cross-correlation convention (no kernel flip) so the bit-packed runtime
can match it exactly. All functions are pure; arrays are never mutated.
"""

from __future__ import annotations

from functools import lru_cache
from typing import NamedTuple

import numpy as np


class SvdResult(NamedTuple):
    u: np.ndarray   # (m, r)
    s: np.ndarray   # (r,) descending, non-negative
    vt: np.ndarray  # (r, n)


def sign(x: np.ndarray) -> np.ndarray:
    """Elementwise binarization: +1 for x >= 0, -1 otherwise.

    sign(0) = +1 so the map is total on {+1, -1}.
    """
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0.0, 1.0, -1.0)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of two 2-D arrays with explicit shape checking."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.ndim}-D and {b.ndim}-D")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    return a @ b


def svd(a: np.ndarray) -> SvdResult:
    """Thin SVD of a small dense matrix, singular values descending."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"svd expects a 2-D array, got {a.ndim}-D")
    if not np.all(np.isfinite(a)):
        raise ValueError("svd input contains non-finite entries")
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    return SvdResult(u, s, vt)


def out_dim(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _check_conv_args(h: int, w: int, k: int, stride: int, pad: int) -> None:
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if pad < 0:
        raise ValueError(f"pad must be >= 0, got {pad}")
    if k > h + 2 * pad or k > w + 2 * pad:
        raise ValueError(f"kernel size {k} exceeds padded input {h + 2 * pad}x{w + 2 * pad}")


def im2col(x: np.ndarray, k: int, stride: int, pad: int, pad_value: float = 0.0) -> np.ndarray:
    """Extract conv patches: (n, c, h, w) -> (n, oh*ow, c*k*k)."""
    n, c, h, w = x.shape
    if pad > 0:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)),
                   mode="constant", constant_values=pad_value)
    windows = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride, :, :]
    oh, ow = windows.shape[2], windows.shape[3]
    # (n, c, oh, ow, k, k) -> (n, oh*ow, c*k*k)
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n, oh * ow, c * k * k)
    return np.ascontiguousarray(cols)


def conv2d_forward(x: np.ndarray, weight: np.ndarray, stride: int = 1, pad: int = 0,
                   pad_value: float = 0.0, cols_out: list | None = None) -> np.ndarray:
    """Cross-correlate input with a bank of filters.

    x is (c_in, h, w) or batched (n, c_in, h, w); weight is
    (c_out, c_in, k, k). Output spatial dims follow
    floor((size + 2*pad - k)/stride) + 1. pad_value lets the binarized
    path pad with -1 instead of 0. Passing a list as cols_out captures
    the patch matrix so a following backward call can reuse it.
    """
    x = np.asarray(x, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d_forward expects 3/4-D input and 4-D weight, "
                         f"got input {x.ndim}-D, weight {weight.ndim}-D")
    n, c, h, w = x.shape
    c_out, c_in, k, k2 = weight.shape
    if k != k2:
        raise ValueError(f"non-square kernel {k}x{k2}")
    if c != c_in:
        raise ValueError(f"input has {c} channels, weight expects {c_in}")
    _check_conv_args(h, w, k, stride, pad)
    oh, ow = out_dim(h, k, stride, pad), out_dim(w, k, stride, pad)
    cols = im2col(x, k, stride, pad, pad_value)
    if cols_out is not None:
        cols_out.append(cols)
    out = cols @ weight.reshape(c_out, -1).T        # (n, oh*ow, c_out)
    out = out.transpose(0, 2, 1).reshape(n, c_out, oh, ow)
    return out[0] if squeeze else out


@lru_cache(maxsize=16)
def _col2im_index(c: int, h: int, w: int, k: int, stride: int, pad: int) -> np.ndarray:
    """Flat padded-image index for every (patch, patch-element) pair."""
    hp, wp = h + 2 * pad, w + 2 * pad
    oh, ow = out_dim(h, k, stride, pad), out_dim(w, k, stride, pad)
    oy = np.arange(oh) * stride
    ox = np.arange(ow) * stride
    ky = kx = np.arange(k)
    ci = np.arange(c)
    idx = (ci[None, None, :, None, None] * (hp * wp)
           + (oy[:, None] + ky[None, :])[:, None, None, :, None] * wp
           + (ox[:, None] + kx[None, :])[None, :, None, None, :])
    return idx.reshape(oh * ow, c * k * k)


@lru_cache(maxsize=8)
def _col2im_batch_index(n: int, c: int, h: int, w: int, k: int, stride: int,
                        pad: int) -> np.ndarray:
    idx = _col2im_index(c, h, w, k, stride, pad)
    size = c * (h + 2 * pad) * (w + 2 * pad)
    return (np.arange(n)[:, None, None] * size + idx[None]).ravel()


def conv2d_backward(x: np.ndarray, weight: np.ndarray, grad_out: np.ndarray,
                    stride: int = 1, pad: int = 0, pad_value: float = 0.0,
                    cols: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Exact gradients of conv2d_forward w.r.t. input and weight.

    Padding entries are constants, so no gradient flows to them; the
    pad_value still affects grad_weight because padded pixels sit inside
    the correlated patches. cols, when given, must be the patch matrix
    captured from the matching forward call.
    """
    x = np.asarray(x, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
        grad_out = grad_out[None]
    n, c, h, w = x.shape
    c_out, c_in, k, _ = weight.shape
    oh, ow = out_dim(h, k, stride, pad), out_dim(w, k, stride, pad)
    if grad_out.shape != (n, c_out, oh, ow):
        raise ValueError(f"grad_out shape {grad_out.shape} does not match "
                         f"forward output {(n, c_out, oh, ow)}")

    if cols is None:
        cols = im2col(x, k, stride, pad, pad_value)          # (n, P, c*k*k)
    go_flat = grad_out.reshape(n, c_out, oh * ow)            # (n, c_out, P)
    grad_weight = np.einsum("ncp,npk->ck", go_flat, cols).reshape(weight.shape)

    # grad wrt input: project the cotangent onto patch space, then
    # scatter-add patches back into the padded image and crop.
    grad_cols = go_flat.transpose(0, 2, 1) @ weight.reshape(c_out, -1)
    gidx = _col2im_batch_index(n, c, h, w, k, stride, pad)
    size = c * (h + 2 * pad) * (w + 2 * pad)
    acc = np.bincount(gidx, weights=grad_cols.ravel(), minlength=n * size)
    grad_x = acc.reshape(n, c, h + 2 * pad, w + 2 * pad)[
        :, :, pad:pad + h, pad:pad + w]
    if squeeze:
        return grad_x[0], grad_weight
    return grad_x, grad_weight


def maxpool2d_forward(x: np.ndarray, size: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping max pool; returns (pooled, argmax index map).

    Spatial dims must be divisible by size. The argmax map stores the
    flat within-window index used by the backward pass (ties go to the
    first occurrence).
    """
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ValueError(f"maxpool needs dims divisible by {size}, got {h}x{w}")
    win = x.reshape(n, c, h // size, size, w // size, size)
    win = win.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // size, w // size, size * size)
    arg = win.argmax(axis=-1)
    pooled = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return pooled, arg


def maxpool2d_backward(grad_out: np.ndarray, arg: np.ndarray, size: int = 2) -> np.ndarray:
    n, c, oh, ow = grad_out.shape
    scat = np.zeros((n, c, oh, ow, size * size))
    np.put_along_axis(scat, arg[..., None], grad_out[..., None], axis=-1)
    scat = scat.reshape(n, c, oh, ow, size, size).transpose(0, 1, 2, 4, 3, 5)
    return scat.reshape(n, c, oh * size, ow * size)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, grad: np.ndarray) -> np.ndarray:
    return grad * (x > 0.0)
