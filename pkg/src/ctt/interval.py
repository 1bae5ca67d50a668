"""Box-domain (interval) propagation through the network layers.

Affine layers use the sign-split transform: with ``W+ = max(W, 0)`` and
``W- = min(W, 0)``,

    lower' = W+ @ lower + W- @ upper + b
    upper' = W+ @ upper + W- @ lower + b

computed in the equivalent midpoint/radius form ``c' = W c + b``,
``r' = |W| r`` so that each bound pass costs two concrete kernel calls.
ReLU and max pooling are monotone and act on each bound separately.

Propagation keeps per-layer caches so that losses defined on the bounds can
be differentiated with respect to the network parameters
(:func:`bounds_backward`).
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T

__all__ = [
    "EmptyIntervalError",
    "IntervalTensor",
    "BoundSet",
    "interval_affine",
    "interval_relu",
    "interval_maxpool",
    "interval_intersect",
    "input_box",
    "propagate_bounds",
    "bounds_backward",
]


class EmptyIntervalError(ValueError):
    """Raised when an intersection of boxes is empty."""

    def __init__(self, index, lower, upper):
        self.index = index
        super().__init__(f"empty interval at index {index}: lower {lower} > upper {upper}")


@dataclass
class IntervalTensor:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.lower = np.asarray(self.lower)
        self.upper = np.asarray(self.upper)
        if self.lower.shape != self.upper.shape:
            raise T.DimensionError(
                f"lower shape {self.lower.shape} != upper shape {self.upper.shape}")

    @classmethod
    def point(cls, x):
        x = np.asarray(x)
        return cls(x, x.copy())

    @property
    def shape(self):
        return self.lower.shape

    @property
    def width(self):
        return self.upper - self.lower

    def is_valid(self):
        return bool(np.all(self.lower <= self.upper))

    def contains(self, x, tol=0.0):
        x = np.asarray(x)
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))

    def contains_box(self, other, tol=0.0):
        return bool(np.all(other.lower >= self.lower - tol)
                    and np.all(other.upper <= self.upper + tol))


@dataclass
class BoundSet:
    """Per-layer post-layer boxes, ``bounds[l]`` aligned with layer ``l``'s output."""

    bounds: list
    tag: str = "natural"
    epsilon: float = 0.0
    caches: list = field(default_factory=list, repr=False)

    def __len__(self):
        return len(self.bounds)

    def __getitem__(self, i):
        return self.bounds[i]


class _AffineCache:
    def __init__(self, kind, center_cache, radius_cache, weights):
        self.kind = kind
        self.center_cache = center_cache
        self.radius_cache = radius_cache
        self.weights = weights


def _affine(kind, center, radius, weights, bias, stride, padding):
    if kind == "conv":
        c, cc = T.conv2d(center, weights, bias, stride, padding)
        r, rc = T.conv2d(radius, np.abs(weights), np.zeros_like(bias), stride, padding)
    elif kind == "fc":
        c, cc = T.fully_connected(center, weights, bias)
        r, rc = T.fully_connected(radius, np.abs(weights), np.zeros_like(bias))
    else:
        raise ValueError(f"op_kind must be 'conv' or 'fc', got {kind!r}")
    return c, r, _AffineCache(kind, cc, rc, weights)


def interval_affine(box, weights, bias, op_kind="conv", stride=1, padding=0, _return_cache=False):
    """Sound image of ``box`` under a conv or fully connected layer."""
    center = (box.lower + box.upper) / 2
    radius = (box.upper - box.lower) / 2
    c, r, cache = _affine(op_kind, center, radius, weights, bias, stride, padding)
    out = IntervalTensor(c - r, c + r)
    return (out, cache) if _return_cache else out


def _affine_backward(cache, g_lower, g_upper):
    g_center = g_lower + g_upper
    g_radius = g_upper - g_lower
    if cache.kind == "conv":
        gc, gw, gb = T.conv2d_backward(cache.center_cache, g_center)
        gr, gaw, _ = T.conv2d_backward(cache.radius_cache, g_radius)
    else:
        gc, gw, gb = T.fully_connected_backward(cache.center_cache, g_center)
        gr, gaw, _ = T.fully_connected_backward(cache.radius_cache, g_radius)
    gw = gw + gaw * np.sign(cache.weights)
    half = gc.dtype.type(0.5)
    return half * (gc - gr), half * (gc + gr), gw, gb


def interval_relu(box):
    return IntervalTensor(np.maximum(box.lower, 0), np.maximum(box.upper, 0))


def interval_maxpool(box, _return_cache=False):
    """Window max applied to each bound (sound because max is monotone)."""
    lo, lc = T.maxpool2x2(box.lower)
    up, uc = T.maxpool2x2(box.upper)
    out = IntervalTensor(lo, up)
    return (out, (lc, uc)) if _return_cache else out


def interval_intersect(a, b):
    """``(max(a.lower, b.lower), min(a.upper, b.upper))``; raises on an empty result."""
    if a.shape != b.shape:
        raise T.DimensionError(f"cannot intersect boxes of shapes {a.shape} and {b.shape}")
    lower = np.maximum(a.lower, b.lower)
    upper = np.minimum(a.upper, b.upper)
    bad = np.argwhere(lower > upper)
    if bad.size:
        idx = tuple(int(i) for i in bad[0])
        raise EmptyIntervalError(idx, lower[idx], upper[idx])
    return IntervalTensor(lower, upper)


def input_box(x, epsilon, lower=None, upper=None, clip=(0.0, 1.0)):
    """Box ``[lower - eps, upper + eps]`` clipped to the data domain.

    ``lower``/``upper`` default to ``x`` (a per-sample box).
    """
    x = np.asarray(x)
    lo = x if lower is None else np.asarray(lower)
    hi = x if upper is None else np.asarray(upper)
    eps = x.dtype.type(epsilon) if x.dtype.kind == "f" else epsilon
    lo = lo - eps
    hi = hi + eps
    if clip is not None:
        lo = np.clip(lo, clip[0], clip[1])
        hi = np.clip(hi, clip[0], clip[1])
    return IntervalTensor(lo.astype(x.dtype, copy=False), hi.astype(x.dtype, copy=False))


def propagate_bounds(model, box, tag="natural", epsilon=0.0, keep_cache=False):
    """Propagate ``box`` through ``model`` layer by layer.

    ``box`` may hold one input or a batch of per-sample boxes. The result has
    one :class:`IntervalTensor` per layer, in network order, shaped like that
    layer's output.
    """
    expected = tuple(model.spec.input_shape)
    if box.shape != expected and box.shape[1:] != expected:
        raise T.DimensionError(f"input box shape {box.shape} does not match model input {expected}")
    batched = box.shape != expected
    cur = box if batched else IntervalTensor(box.lower[None], box.upper[None])
    bounds, caches = [], []
    for i, layer in enumerate(model.spec.layers):
        cache = None
        if layer.kind in ("conv", "fc"):
            w, b = model.params[f"{i}.weight"], model.params[f"{i}.bias"]
            if layer.kind == "fc" and cur.lower.ndim > 2:
                shape = cur.shape
                cur = IntervalTensor(cur.lower.reshape(shape[0], -1), cur.upper.reshape(shape[0], -1))
                cache_shape = shape
            else:
                cache_shape = None
            cur, cache = interval_affine(cur, w, b, layer.kind, layer.stride, layer.padding,
                                         _return_cache=True)
            cache = (cache, cache_shape)
        elif layer.kind == "relu":
            cache = (cur.lower > 0, cur.upper > 0)
            cur = interval_relu(cur)
        elif layer.kind == "maxpool":
            cur, cache = interval_maxpool(cur, _return_cache=True)
        else:
            raise ValueError(f"unsupported layer kind {layer.kind!r}")
        bounds.append(cur if batched else IntervalTensor(cur.lower[0], cur.upper[0]))
        caches.append(cache)
    return BoundSet(bounds, tag=tag, epsilon=epsilon, caches=caches if keep_cache else [])


def bounds_backward(model, bound_set, grads):
    """Backpropagate gradients given on layer bounds to the parameters.

    ``grads`` maps layer index to ``(grad_lower, grad_upper)`` (either may be
    None). Returns ``(param_grads, (grad_input_lower, grad_input_upper))``.
    The bound set must come from ``propagate_bounds(..., keep_cache=True)``
    on a batch of boxes.
    """
    if not bound_set.caches:
        raise T.StaleCacheError("bound set was propagated without keep_cache=True")
    layers = model.spec.layers
    param_grads = {}
    g_lo = g_up = None
    for i in range(len(layers) - 1, -1, -1):
        if i in grads:
            gl, gu = grads[i]
            shape = bound_set.bounds[i].shape
            if gl is not None:
                g_lo = gl if g_lo is None else g_lo + gl
            if gu is not None:
                g_up = gu if g_up is None else g_up + gu
            if g_lo is None:
                g_lo = np.zeros(shape, dtype=bound_set.bounds[i].lower.dtype)
            if g_up is None:
                g_up = np.zeros(shape, dtype=bound_set.bounds[i].lower.dtype)
        if g_lo is None and g_up is None:
            continue
        layer = layers[i]
        cache = bound_set.caches[i]
        if layer.kind in ("conv", "fc"):
            aff, in_shape = cache
            g_lo, g_up, gw, gb = _affine_backward(aff, g_lo, g_up)
            param_grads[f"{i}.weight"] = gw
            param_grads[f"{i}.bias"] = gb
            if in_shape is not None:
                g_lo, g_up = g_lo.reshape(in_shape), g_up.reshape(in_shape)
        elif layer.kind == "relu":
            lo_on, up_on = cache
            zero = g_lo.dtype.type(0)
            g_lo = np.where(lo_on, g_lo, zero)
            g_up = np.where(up_on, g_up, zero)
        elif layer.kind == "maxpool":
            lc, uc = cache
            g_lo = T.maxpool2x2_backward(lc, g_lo)
            g_up = T.maxpool2x2_backward(uc, g_up)
    for name, arr in model.params.items():
        if name not in param_grads:
            param_grads[name] = np.zeros_like(arr)
    return param_grads, (g_lo, g_up)
