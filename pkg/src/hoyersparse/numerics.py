"""Dense float64 kernels: matmul, valid 2-D convolution, 2x2 max-pooling,
ReLU and softmax cross-entropy, each with an explicit backward pass.

Arrays are plain ``numpy.ndarray`` objects in float64. Convolution and
pooling kernels accept either a single sample ``(C, H, W)`` or a batch
``(N, C, H, W)``; the output keeps the same rank as the input.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "DimensionError",
    "as_tensor",
    "matmul",
    "conv2d_forward",
    "conv2d_backward",
    "maxpool2x2",
    "maxpool2x2_backward",
    "relu",
    "relu_backward",
    "softmax_cross_entropy",
]


class DimensionError(ValueError):
    """Raised when array shapes are incompatible with an operation."""


def as_tensor(x) -> np.ndarray:
    """Return ``x`` as a C-contiguous float64 array (no copy if already one)."""
    return np.ascontiguousarray(x, dtype=np.float64)


def matmul(a, b) -> np.ndarray:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return a @ b


def _batched(x: np.ndarray, name: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"{name} must be (C, H, W) or (N, C, H, W), got {x.shape}")


def _check_conv_shapes(x: np.ndarray, kernels: np.ndarray) -> None:
    if kernels.ndim != 4 or kernels.shape[2] != kernels.shape[3]:
        raise DimensionError(f"kernels must be (C_out, C_in, k, k), got {kernels.shape}")
    _, c_in, h, w = x.shape
    _, kc, k, _ = kernels.shape
    if kc != c_in:
        raise DimensionError(
            f"input has {c_in} channels but kernels {kernels.shape} expect {kc}"
        )
    if k > h or k > w:
        raise DimensionError(
            f"kernel size {k} larger than input spatial size {(h, w)}"
        )


def conv2d_forward(x, kernels, bias) -> np.ndarray:
    """Valid, stride-1 cross-correlation plus per-channel bias.

    ``x`` is ``(C_in, H, W)`` or ``(N, C_in, H, W)``, ``kernels`` is
    ``(C_out, C_in, k, k)`` and ``bias`` is ``(C_out,)``.
    """
    x, single = _batched(as_tensor(x), "input")
    kernels = as_tensor(kernels)
    bias = as_tensor(bias)
    _check_conv_shapes(x, kernels)
    if bias.shape != (kernels.shape[0],):
        raise DimensionError(f"bias shape {bias.shape} does not match kernels {kernels.shape}")
    k = kernels.shape[2]
    # windows: (N, C_in, H_out, W_out, k, k)
    windows = sliding_window_view(x, (k, k), axis=(2, 3))
    out = np.einsum("nchwij,ocij->nohw", windows, kernels, optimize=True)
    out += bias[None, :, None, None]
    return out[0] if single else out


def conv2d_backward(x, kernels, grad_out):
    """Gradients of :func:`conv2d_forward` w.r.t. input, kernels and bias."""
    x, single = _batched(as_tensor(x), "input")
    kernels = as_tensor(kernels)
    grad_out = as_tensor(grad_out)
    if single:
        grad_out = grad_out[None]
    _check_conv_shapes(x, kernels)
    n, c_in, h, w = x.shape
    c_out, _, k, _ = kernels.shape
    expected = (n, c_out, h - k + 1, w - k + 1)
    if grad_out.shape != expected:
        raise DimensionError(f"grad_out shape {grad_out.shape}, expected {expected}")
    h_out, w_out = expected[2], expected[3]

    windows = sliding_window_view(x, (k, k), axis=(2, 3))
    grad_kernels = np.einsum("nchwij,nohw->ocij", windows, grad_out, optimize=True)
    grad_bias = grad_out.sum(axis=(0, 2, 3))

    grad_input = np.zeros_like(x)
    for i in range(k):
        for j in range(k):
            grad_input[:, :, i : i + h_out, j : j + w_out] += np.einsum(
                "nohw,oc->nchw", grad_out, kernels[:, :, i, j], optimize=True
            )
    if single:
        grad_input = grad_input[0]
    return grad_input, grad_kernels, grad_bias


def maxpool2x2(x):
    """Non-overlapping 2x2 max-pooling.

    Returns ``(output, argmax)`` where ``argmax`` holds, for every output
    cell, the flat position (0..3, row-major) of the winner inside its
    2x2 window. Ties go to the lowest position.
    """
    x, single = _batched(as_tensor(x), "input")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"max-pool needs even spatial dims, got {(h, w)}")
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // 2, w // 2, 4)
    argmax = blocks.argmax(axis=-1)  # first occurrence on ties
    out = np.take_along_axis(blocks, argmax[..., None], axis=-1)[..., 0]
    if single:
        return out[0], argmax[0]
    return out, argmax


def maxpool2x2_backward(argmax, grad_out) -> np.ndarray:
    argmax = np.asarray(argmax)
    grad_out = as_tensor(grad_out)
    if argmax.shape != grad_out.shape:
        raise DimensionError(
            f"argmax shape {argmax.shape} does not match grad_out {grad_out.shape}"
        )
    single = grad_out.ndim == 3
    if single:
        argmax, grad_out = argmax[None], grad_out[None]
    n, c, ho, wo = grad_out.shape
    onehot = argmax[..., None] == np.arange(4)
    blocks = onehot * grad_out[..., None]
    grad = blocks.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    grad = grad.reshape(n, c, 2 * ho, 2 * wo)
    return grad[0] if single else grad


def relu(x) -> np.ndarray:
    return np.maximum(as_tensor(x), 0.0)


def relu_backward(x, grad_out) -> np.ndarray:
    # subgradient at exactly 0 is 0
    return np.where(as_tensor(x) > 0.0, as_tensor(grad_out), 0.0)


def softmax_cross_entropy(logits, labels):
    """Cross-entropy of softmax(logits) against integer labels.

    Accepts a single logit vector with a scalar label, or a ``(N, K)``
    batch with ``N`` labels. For a batch, the loss is the mean over
    samples and the gradient is that of the mean.

    Returns:
        (loss, grad_logits)
    """
    logits = as_tensor(logits)
    single = logits.ndim == 1
    if single:
        logits = logits[None]
    labels = np.atleast_1d(np.asarray(labels))
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(
            f"logits {logits.shape} and labels {labels.shape} are incompatible"
        )
    k = logits.shape[1]
    if not np.issubdtype(labels.dtype, np.integer):
        if not np.all(labels == np.round(labels)):
            raise ValueError("labels must be integers")
        labels = labels.astype(np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")

    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    rows = np.arange(logits.shape[0])
    n = logits.shape[0]
    loss = -log_probs[rows, labels].sum() / n
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1.0
    grad /= n
    if single:
        return float(loss), grad[0]
    return float(loss), grad
