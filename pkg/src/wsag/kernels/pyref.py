"""Pure NumPy reference implementation of the masked convolution kernels.

These functions define the numerical contract; the compiled backend in
``_core`` must agree with them to floating-point noise. Convolutions are
3x3, stride 1, zero-padded, expressed as one im2col gather plus one GEMM so
that BLAS does the heavy lifting.

Shape conventions:
    x     (B, N, N, C_in)   batched maps, channels last, already masked
    w     (3, 3, C_in, C_out)
    b     (C_out,)
    mask  (N, N) bool       valid-cell mask applied to every output
"""

from __future__ import annotations

import numpy as np

NAME = "python"


def _im2col(x: np.ndarray) -> np.ndarray:
    """Gather 3x3 neighborhoods: (B, N, M, C) -> (B*N*M, 9*C)."""
    bsz, n, m, c = x.shape
    pad = np.zeros((bsz, n + 2, m + 2, c), dtype=x.dtype)
    pad[:, 1:-1, 1:-1, :] = x
    win = np.lib.stride_tricks.sliding_window_view(pad, (3, 3), axis=(1, 2))
    # win: (B, N, M, C, 3, 3) -> (B, N, M, 3, 3, C) to match w's (dy, dx, ci) order
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
    return cols.reshape(bsz * n * m, 9 * c)


def _col2im(cols: np.ndarray, shape: tuple) -> np.ndarray:
    """Scatter-add the adjoint of _im2col: (B*N*M, 9*C) -> (B, N, M, C)."""
    bsz, n, m, c = shape
    g = cols.reshape(bsz, n, m, 3, 3, c)
    pad = np.zeros((bsz, n + 2, m + 2, c), dtype=cols.dtype)
    for dy in range(3):
        for dx in range(3):
            pad[:, dy:dy + n, dx:dx + m, :] += g[:, :, :, dy, dx, :]
    return pad[:, 1:-1, 1:-1, :]


def conv3x3_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray,
                    mask: np.ndarray) -> np.ndarray:
    """Masked 3x3 convolution: y = mask * (conv(x) + b).

    The input is assumed already zeroed at invalid cells; the output is
    explicitly zeroed there.
    """
    bsz, n, m, cin = x.shape
    cout = w.shape[3]
    cols = _im2col(x)
    y = cols @ w.reshape(9 * cin, cout)
    y += b
    y = y.reshape(bsz, n, m, cout)
    y *= mask[None, :, :, None]
    return y


def conv3x3_backward(x: np.ndarray, w: np.ndarray, mask: np.ndarray,
                     grad_y: np.ndarray):
    """Gradients of conv3x3_forward.

    Args:
        x: the (already masked) forward input.
        w: kernel used in the forward pass.
        mask: valid-cell mask used in the forward pass.
        grad_y: gradient on the masked output.

    Returns:
        (grad_x, grad_w, grad_b); grad_x is zeroed at invalid cells because
        those inputs are pinned to zero, not free variables.
    """
    bsz, n, m, cin = x.shape
    cout = w.shape[3]
    g = grad_y * mask[None, :, :, None]
    g2 = g.reshape(bsz * n * m, cout)
    cols = _im2col(x)
    grad_w = (cols.T @ g2).reshape(3, 3, cin, cout)
    grad_b = g2.sum(axis=0)
    grad_cols = g2 @ w.reshape(9 * cin, cout).T
    grad_x = _col2im(grad_cols, (bsz, n, m, cin))
    grad_x *= mask[None, :, :, None]
    return grad_x, grad_w, grad_b


def conv3x3_single_channel(x_1ch: np.ndarray, w_1ch: np.ndarray,
                           mask: np.ndarray) -> np.ndarray:
    """Convolve a single-input-channel delta: used by the staged gradient audit.

    Args:
        x_1ch: (B, N, M) delta confined to one input channel, already masked.
        w_1ch: (3, 3, C_out) the kernel slice for that input channel.
        mask: valid-cell mask.

    Returns:
        (B, N, M, C_out) masked output delta (no bias: deltas are bias-free).
    """
    bsz, n, m = x_1ch.shape
    cout = w_1ch.shape[2]
    pad = np.zeros((bsz, n + 2, m + 2), dtype=x_1ch.dtype)
    pad[:, 1:-1, 1:-1] = x_1ch
    win = np.lib.stride_tricks.sliding_window_view(pad, (3, 3), axis=(1, 2))
    cols = np.ascontiguousarray(win).reshape(bsz * n * m, 9)
    y = cols @ w_1ch.reshape(9, cout)
    y = y.reshape(bsz, n, m, cout)
    y *= mask[None, :, :, None]
    return y
