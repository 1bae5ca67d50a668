"""Forward/backward kernels for the layer types used by the network presets.

Tensors are plain numpy arrays (float32 by default, float64 accepted
everywhere for gradient checks) in NCHW order. Every kernel accepts either a
batch ``(N, ...)`` or a single sample without the leading batch axis; the
output keeps the caller's convention.

Each forward returns ``(output, cache)``; the cache is good for exactly one
call to the matching backward.
"""

from dataclasses import dataclass, field

import numpy as np

from . import _backend

__all__ = [
    "DimensionError",
    "StaleCacheError",
    "LayerCache",
    "conv2d",
    "conv2d_backward",
    "conv_output_size",
    "fully_connected",
    "fully_connected_backward",
    "relu",
    "relu_backward",
    "maxpool2x2",
    "maxpool2x2_backward",
    "softmax",
    "softmax_cross_entropy",
]


class DimensionError(ValueError):
    """Raised when tensor shapes do not line up."""


class StaleCacheError(RuntimeError):
    """Raised when a cache is reused or fed a gradient of the wrong shape."""


@dataclass
class LayerCache:
    kind: str
    index: int = -1
    saved: dict = field(default_factory=dict)
    out_shape: tuple = ()
    batched: bool = True
    used: bool = False

    def take(self, kind, grad_out):
        if self.kind != kind:
            raise StaleCacheError(f"cache of a {self.kind} layer passed to {kind} backward")
        if self.used:
            raise StaleCacheError(f"{kind} cache (layer {self.index}) already consumed")
        grad_out = np.asarray(grad_out)
        if not self.batched:
            grad_out = grad_out[None]
        if grad_out.shape != self.out_shape:
            raise StaleCacheError(
                f"{kind} backward got gradient of shape {grad_out.shape}, "
                f"expected {self.out_shape}")
        self.used = True
        return grad_out

    def unbatch(self, arr):
        return arr if self.batched else arr[0]


def _batched(x, ndim):
    x = np.asarray(x)
    if x.ndim == ndim:
        return x, True
    if x.ndim == ndim - 1:
        return x[None], False
    raise DimensionError(f"expected a {ndim - 1}-d sample or {ndim}-d batch, got shape {x.shape}")


def conv_output_size(size, k, stride, padding):
    span = size + 2 * padding - k
    if span < 0 or span % stride:
        return None
    return span // stride + 1


def conv2d(x, weights, bias, stride=1, padding=0):
    """2-d cross-correlation, ``out[o,i,j] = b[o] + sum w[o,c,u,v] xpad[c,i*s+u,j*s+v]``."""
    x, batched = _batched(x, 4)
    weights = np.asarray(weights)
    bias = np.asarray(bias)
    if weights.ndim != 4 or weights.shape[2] != weights.shape[3]:
        raise DimensionError(f"weights must be (C_out, C_in, k, k), got {weights.shape}")
    c_out, c_in, k, _ = weights.shape
    n, c, h, w = x.shape
    if c != c_in:
        raise DimensionError(f"channel axis: input has {c} channels, weights expect {c_in}")
    if bias.shape != (c_out,):
        raise DimensionError(f"bias axis: expected shape ({c_out},), got {bias.shape}")
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    if ho is None or ho < 1:
        raise DimensionError(f"height axis: {h} with k={k}, stride={stride}, padding={padding} "
                             "does not give a positive integer output size")
    if wo is None or wo < 1:
        raise DimensionError(f"width axis: {w} with k={k}, stride={stride}, padding={padding} "
                             "does not give a positive integer output size")

    x = np.ascontiguousarray(x, dtype=weights.dtype)
    cols = _backend.im2col(x, k, stride, padding)
    out = weights.reshape(c_out, -1) @ cols
    out = out.reshape(c_out, n, ho, wo).transpose(1, 0, 2, 3) + bias[None, :, None, None]
    out = np.ascontiguousarray(out)
    cache = LayerCache("conv", saved=dict(cols=cols, weights=weights, x_shape=x.shape,
                                          stride=stride, padding=padding),
                       out_shape=out.shape, batched=batched)
    return (out if batched else out[0]), cache


def conv2d_backward(cache, grad_out):
    """Returns ``(grad_input, grad_weights, grad_bias)``."""
    g = cache.take("conv", grad_out)
    s = cache.saved
    weights = s["weights"]
    c_out, c_in, k, _ = weights.shape
    n, c, h, w = s["x_shape"]
    g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(c_out, -1)
    grad_w = (g2 @ s["cols"].T).reshape(weights.shape)
    grad_b = g2.sum(axis=1, dtype=np.float64).astype(weights.dtype)
    dcols = np.ascontiguousarray(weights.reshape(c_out, -1).T @ g2)
    grad_x = _backend.col2im(dcols, n, c, h, w, k, s["stride"], s["padding"])
    return cache.unbatch(grad_x), grad_w, grad_b


def fully_connected(x, weights, bias):
    """``out = weights @ x + bias`` per sample."""
    x, batched = _batched(x, 2)
    weights = np.asarray(weights)
    bias = np.asarray(bias)
    if weights.ndim != 2:
        raise DimensionError(f"weights must be (M, N), got {weights.shape}")
    if x.shape[1] != weights.shape[1]:
        raise DimensionError(f"feature axis: input has {x.shape[1]} features, "
                             f"weights expect {weights.shape[1]}")
    if bias.shape != (weights.shape[0],):
        raise DimensionError(f"bias axis: expected shape ({weights.shape[0]},), got {bias.shape}")
    x = np.asarray(x, dtype=weights.dtype)
    out = x @ weights.T + bias
    cache = LayerCache("fc", saved=dict(x=x, weights=weights), out_shape=out.shape,
                       batched=batched)
    return (out if batched else out[0]), cache


def fully_connected_backward(cache, grad_out):
    g = cache.take("fc", grad_out)
    x, weights = cache.saved["x"], cache.saved["weights"]
    grad_x = g @ weights
    grad_w = g.T @ x
    grad_b = g.sum(axis=0, dtype=np.float64).astype(weights.dtype)
    return cache.unbatch(grad_x), grad_w, grad_b


def relu(x):
    x = np.asarray(x)
    out = np.maximum(x, 0)
    batched = True
    cache = LayerCache("relu", saved=dict(active=x > 0), out_shape=out.shape, batched=batched)
    return out, cache


def relu_backward(cache, grad_out):
    g = cache.take("relu", grad_out)
    return np.where(cache.saved["active"], g, g.dtype.type(0))


def maxpool2x2(x):
    """Non-overlapping 2x2 max pooling; ties go to the lowest flat index."""
    x, batched = _batched(x, 4)
    h, w = x.shape[2], x.shape[3]
    if h % 2:
        raise DimensionError(f"height axis: maxpool2x2 needs an even size, got {h}")
    if w % 2:
        raise DimensionError(f"width axis: maxpool2x2 needs an even size, got {w}")
    out, idx = _backend.maxpool2x2_forward(np.ascontiguousarray(x))
    cache = LayerCache("maxpool", saved=dict(idx=idx), out_shape=out.shape, batched=batched)
    return (out if batched else out[0]), cache


def maxpool2x2_backward(cache, grad_out):
    g = cache.take("maxpool", grad_out)
    g = np.ascontiguousarray(g)
    return cache.unbatch(_backend.maxpool2x2_backward(g, cache.saved["idx"]))


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels, reduction="mean"):
    """Cross-entropy of ``logits`` against integer ``labels``.

    Returns ``(loss, grad_logits)``. With ``reduction="mean"`` the gradient is
    already divided by the batch size; ``"none"`` returns per-sample losses
    and the unscaled ``softmax - onehot`` gradient.
    """
    logits = np.asarray(logits)
    single = logits.ndim == 1
    z = logits[None] if single else logits
    labels = np.atleast_1d(np.asarray(labels))
    n, k = z.shape
    if labels.shape != (n,):
        raise DimensionError(f"batch axis: {n} logit rows but {labels.shape[0]} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k}): {labels}")
    z64 = z.astype(np.float64)
    shifted = z64 - z64.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    losses = logsum - shifted[rows, labels]
    grad = np.exp(shifted - logsum[:, None])
    grad[rows, labels] -= 1.0
    if reduction == "none":
        loss = losses[0] if single else losses
    elif reduction == "sum":
        loss = float(losses.sum())
    elif reduction == "mean":
        loss = float(losses.mean())
        grad /= n
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    grad = grad.astype(logits.dtype if logits.dtype.kind == "f" else np.float64)
    return loss, (grad[0] if single else grad)
