"""Network presets, forward/backward orchestration, RMSProp and baseline training."""

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .interval import IntervalTensor

log = logging.getLogger(__name__)

__all__ = [
    "LayerSpec",
    "ModelSpec",
    "preset",
    "Model",
    "init_params",
    "ForwardResult",
    "forward_with_cache",
    "backward",
    "RMSPropState",
    "rmsprop_step",
    "TrainConfig",
    "train_baseline",
    "evaluate_accuracy",
    "predict",
    "profile_input_bounds",
]


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv | relu | maxpool | fc
    in_size: int = 0  # channels (conv) or features (fc)
    out_size: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0

    @property
    def has_params(self):
        return self.kind in ("conv", "fc")


@dataclass(frozen=True)
class ModelSpec:
    name: str
    layers: tuple
    input_shape: tuple = (1, 28, 28)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        self.layer_shapes()  # validates

    @property
    def num_classes(self):
        return self.layers[-1].out_size

    def layer_shapes(self):
        """Output shape of every layer (without batch axis)."""
        shape = self.input_shape
        shapes = []
        for i, layer in enumerate(self.layers):
            if layer.kind == "conv":
                c, h, w = shape
                if c != layer.in_size:
                    raise T.DimensionError(f"layer {i}: conv expects {layer.in_size} channels, gets {c}")
                ho = T.conv_output_size(h, layer.kernel, layer.stride, layer.padding)
                wo = T.conv_output_size(w, layer.kernel, layer.stride, layer.padding)
                if not ho or not wo:
                    raise T.DimensionError(f"layer {i}: conv does not fit input {shape}")
                shape = (layer.out_size, ho, wo)
            elif layer.kind == "maxpool":
                c, h, w = shape
                if h % 2 or w % 2:
                    raise T.DimensionError(f"layer {i}: maxpool needs even spatial size, got {shape}")
                shape = (c, h // 2, w // 2)
            elif layer.kind == "fc":
                n = int(np.prod(shape))
                if n != layer.in_size:
                    raise T.DimensionError(f"layer {i}: fc expects {layer.in_size} features, gets {n}")
                shape = (layer.out_size,)
            elif layer.kind != "relu":
                raise ValueError(f"layer {i}: unknown kind {layer.kind!r}")
            shapes.append(shape)
        if not self.layers or self.layers[-1].kind != "fc":
            raise ValueError("the last layer must be fc producing class logits")
        return shapes

    def relu_layers(self):
        return [i for i, layer in enumerate(self.layers) if layer.kind == "relu"]

    def to_dict(self):
        return {"name": self.name, "input_shape": list(self.input_shape),
                "layers": [asdict(layer) for layer in self.layers]}

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], tuple(LayerSpec(**layer) for layer in d["layers"]),
                   tuple(d["input_shape"]))


def preset(name, input_shape=(1, 28, 28), num_classes=None):
    """Named architectures: ``lenet5`` and ``tiny``."""
    if name == "lenet5":
        k = num_classes or 10
        c, h, w = input_shape
        # pad-2 first conv keeps 28x28 inputs on the classic 32x32 geometry
        flat = 16 * (((h // 2) - 4) // 2) * (((w // 2) - 4) // 2)
        layers = (
            LayerSpec("conv", c, 6, 5, 1, 2),
            LayerSpec("relu"),
            LayerSpec("maxpool"),
            LayerSpec("conv", 6, 16, 5, 1, 0),
            LayerSpec("relu"),
            LayerSpec("maxpool"),
            LayerSpec("fc", flat, 120),
            LayerSpec("relu"),
            LayerSpec("fc", 120, 84),
            LayerSpec("relu"),
            LayerSpec("fc", 84, k),
        )
    elif name == "tiny":
        k = num_classes or 2
        c, h, w = input_shape
        layers = (
            LayerSpec("conv", c, 2, 3, 1, 0),
            LayerSpec("relu"),
            LayerSpec("fc", 2 * (h - 2) * (w - 2), k),
        )
    else:
        raise ValueError(f"unknown preset {name!r}")
    return ModelSpec(name, layers, tuple(input_shape))


def init_params(spec, seed=0, dtype=np.float32):
    """He-normal weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for i, layer in enumerate(spec.layers):
        if layer.kind == "conv":
            fan_in = layer.in_size * layer.kernel ** 2
            shape = (layer.out_size, layer.in_size, layer.kernel, layer.kernel)
        elif layer.kind == "fc":
            fan_in = layer.in_size
            shape = (layer.out_size, layer.in_size)
        else:
            continue
        params[f"{i}.weight"] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
        params[f"{i}.bias"] = np.zeros(layer.out_size, dtype=dtype)
    return params


class Model:
    """A :class:`ModelSpec` with its parameters.

    ``params`` maps ``"<layer index>.weight"`` / ``"<layer index>.bias"`` to
    arrays; ``metrics`` records training statistics.
    """

    def __init__(self, spec, params=None, seed=0, dtype=np.float32):
        self.spec = spec
        self.params = init_params(spec, seed, dtype) if params is None else dict(params)
        self.seed = seed
        self.metrics = {}
        self._check_params()

    def _check_params(self):
        fresh = init_params(self.spec, 0, np.float32)
        if set(fresh) != set(self.params):
            raise T.DimensionError(f"parameter names {sorted(self.params)} do not match spec")
        for name, arr in fresh.items():
            if self.params[name].shape != arr.shape:
                raise T.DimensionError(
                    f"{name}: shape {self.params[name].shape}, spec requires {arr.shape}")

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def copy(self):
        m = Model(self.spec, {k: v.copy() for k, v in self.params.items()}, self.seed)
        m.metrics = dict(self.metrics)
        return m

    def astype(self, dtype):
        m = Model(self.spec, {k: v.astype(dtype) for k, v in self.params.items()}, self.seed)
        m.metrics = dict(self.metrics)
        return m

    def logits(self, x):
        return forward_with_cache(self, x).logits

    def __call__(self, x):
        return self.logits(x)

    def num_neurons(self, relu_only=True):
        shapes = self.spec.layer_shapes()
        idx = self.spec.relu_layers() if relu_only else range(len(shapes))
        return int(sum(np.prod(shapes[i]) for i in idx))


@dataclass
class ForwardResult:
    logits: np.ndarray
    activations: list
    caches: list
    batched: bool = True


def forward_with_cache(model, x):
    """Forward pass returning logits, every layer's output, and backward caches."""
    x = np.asarray(x)
    expected = tuple(model.spec.input_shape)
    if x.shape == expected:
        batched = False
        x = x[None]
    elif x.shape[1:] == expected:
        batched = True
    else:
        raise T.DimensionError(f"input shape {x.shape} does not match model input {expected}")
    x = x.astype(model.dtype, copy=False)
    acts, caches = [], []
    cur = x
    for i, layer in enumerate(model.spec.layers):
        if layer.kind == "conv":
            cur, cache = T.conv2d(cur, model.params[f"{i}.weight"], model.params[f"{i}.bias"],
                                  layer.stride, layer.padding)
        elif layer.kind == "relu":
            cur, cache = T.relu(cur)
        elif layer.kind == "maxpool":
            cur, cache = T.maxpool2x2(cur)
        elif layer.kind == "fc":
            in_shape = cur.shape
            cur, cache = T.fully_connected(cur.reshape(cur.shape[0], -1),
                                           model.params[f"{i}.weight"], model.params[f"{i}.bias"])
            cache.saved["in_shape"] = in_shape
        cache.index = i
        acts.append(cur)
        caches.append(cache)
    if not batched:
        acts = [a[0] for a in acts]
    return ForwardResult(acts[-1], acts, caches, batched)


def backward(model, fwd, grad_logits, act_grads=None):
    """Backpropagate through a :func:`forward_with_cache` result.

    ``act_grads`` optionally injects extra gradients on intermediate layer
    outputs (layer index -> array), e.g. from losses on activations.
    Returns ``(param_grads, input_grad)``.
    """
    act_grads = act_grads or {}
    caches = fwd.caches
    if len(caches) != len(model.spec.layers):
        raise T.StaleCacheError("cache list does not match the model's layers")
    g = np.asarray(grad_logits)
    if not fwd.batched:
        g = g[None]
        act_grads = {k: np.asarray(v)[None] for k, v in act_grads.items()}
    param_grads = {}
    for i in range(len(caches) - 1, -1, -1):
        if i in act_grads:
            g = g + act_grads[i]
        cache = caches[i]
        kind = model.spec.layers[i].kind
        if kind == "conv":
            g, gw, gb = T.conv2d_backward(cache, g)
        elif kind == "relu":
            g = T.relu_backward(cache, g)
            continue
        elif kind == "maxpool":
            g = T.maxpool2x2_backward(cache, g)
            continue
        else:
            g, gw, gb = T.fully_connected_backward(cache, g)
            g = g.reshape(cache.saved["in_shape"])
        param_grads[f"{i}.weight"] = gw
        param_grads[f"{i}.bias"] = gb
    return param_grads, (g if fwd.batched else g[0])


def predict(model, x, batch_size=1000):
    x = np.asarray(x)
    out = [model.logits(x[i:i + batch_size]).argmax(axis=1) for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate_accuracy(model, dataset, batch_size=1000):
    if len(dataset) == 0:
        return float("nan")
    return float(np.mean(predict(model, dataset.images, batch_size) == dataset.labels))


@dataclass
class RMSPropState:
    lr: float = 1e-3
    rho: float = 0.9
    fuzz: float = 1e-8
    weight_decay: float = 0.0
    acc: dict = field(default_factory=dict)
    steps: int = 0


def rmsprop_step(params, grads, state):
    """In-place RMSProp update.

    ``acc <- rho*acc + (1-rho)*g^2``;
    ``param <- param - lr*g/(sqrt(acc)+fuzz) - lr*wd*param``.
    """
    lr, rho = state.lr, state.rho
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise T.DimensionError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        acc = state.acc.get(name)
        if acc is None:
            acc = state.acc[name] = np.zeros_like(p)
        acc *= rho
        acc += (1.0 - rho) * g * g
        step = lr * g / (np.sqrt(acc) + state.fuzz)
        if state.weight_decay:
            step = step + lr * state.weight_decay * p
        p -= step.astype(p.dtype, copy=False)
    state.steps += 1
    return params, state


@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 64
    lr: float = 1e-3
    rho: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0


def train_baseline(spec, dataset, config=None, test_set=None, callback=None, **overrides):
    """Cross-entropy training with RMSProp; deterministic for a given seed.

    Returns a :class:`Model` whose ``metrics`` hold per-epoch loss and the
    final train/test accuracy.
    """
    from .data import make_batches

    cfg = config or TrainConfig()
    if overrides:
        cfg = TrainConfig(**{**asdict(cfg), **overrides})
    if len(dataset) == 0:
        raise ValueError("empty training set")
    model = Model(spec, seed=cfg.seed)
    state = RMSPropState(lr=cfg.lr, rho=cfg.rho, weight_decay=cfg.weight_decay)
    history = []
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        total, seen = 0.0, 0
        for xb, yb in make_batches(dataset, cfg.batch_size, seed=cfg.seed + epoch, shuffle=True):
            fwd = forward_with_cache(model, xb)
            loss, g = T.softmax_cross_entropy(fwd.logits, yb)
            grads, _ = backward(model, fwd, g)
            rmsprop_step(model.params, grads, state)
            total += loss * len(yb)
            seen += len(yb)
        entry = {"epoch": epoch, "loss": total / seen, "seconds": time.perf_counter() - t0}
        if test_set is not None:
            entry["test_accuracy"] = evaluate_accuracy(model, test_set)
        history.append(entry)
        log.info("baseline epoch %d: %s", epoch, entry)
        if callback is not None:
            callback(model, entry)
    model.metrics = {
        "history": history,
        "train_accuracy": evaluate_accuracy(model, dataset),
        "test_accuracy": evaluate_accuracy(model, test_set) if test_set is not None else None,
        "train_config": asdict(cfg),
    }
    return model


def profile_input_bounds(dataset):
    """Per-pixel min/max over every image in ``dataset``."""
    if len(dataset) == 0:
        raise ValueError("cannot profile an empty dataset")
    images = dataset.images
    return IntervalTensor(images.min(axis=0), images.max(axis=0))
