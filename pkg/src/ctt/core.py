"""Taboo keys, detection thresholds, the taboo regularisers and fine-tuning.

A :class:`TabooKey` selects a random subset of post-ReLU neurons and gives
each ReLU layer a scalar threshold. An input is flagged when any selected
neuron's activation strictly exceeds its layer threshold.

Three regularisers steer the selected neurons:

* detection loss: sum of selected activations above threshold on clean
  inputs (pushes clean activations under the threshold);
* loose certification loss: ``sum(max(0, T - upper))`` over the selected
  neurons' interval upper bounds for ``x +/- eps`` (the box must be able to
  reach the threshold);
* strict certification loss: same hinge on the interval lower bounds
  (the whole box must sit above the threshold).

Fine-tuning minimises ``CE + a_det * L_D + a_cert * L_C`` with RMSProp.
"""

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .data import make_batches
from .interval import input_box, propagate_bounds, bounds_backward
from .model import (RMSPropState, backward, evaluate_accuracy, forward_with_cache,
                    profile_input_bounds, rmsprop_step)

log = logging.getLogger(__name__)

__all__ = [
    "DEFAULT_THRESHOLD",
    "MODES",
    "TabooKey",
    "generate_key",
    "CttLosses",
    "compute_reg_losses",
    "AnnealSchedule",
    "anneal",
    "certification_weight",
    "FinetuneConfig",
    "FinetuneResult",
    "finetune",
    "calibrate_lite",
    "Verdict",
    "DetectionBatch",
    "detect",
    "detect_batch",
    "masked_activations",
    "CertificationResult",
    "certify",
]

DEFAULT_THRESHOLD = 1e-4
MODES = ("lite", "loose", "strict")


@dataclass
class TabooKey:
    """Per-layer neuron masks and thresholds.

    ``masks`` maps a ReLU layer index to a boolean array shaped like that
    layer's output (no batch axis).
    """

    masks: dict
    thresholds: dict
    beta: float
    seed: int

    def __post_init__(self):
        for layer, t in self.thresholds.items():
            if t < 0:
                raise ValueError(f"layer {layer}: threshold must be >= 0, got {t}")

    @property
    def layers(self):
        return sorted(self.masks)

    def num_instrumented(self, layer=None):
        if layer is not None:
            return int(self.masks[layer].sum())
        return int(sum(m.sum() for m in self.masks.values()))

    def num_candidates(self):
        return int(sum(m.size for m in self.masks.values()))

    def instrumented_fraction(self):
        return self.num_instrumented() / max(1, self.num_candidates())

    def with_thresholds(self, thresholds):
        return TabooKey({k: v.copy() for k, v in self.masks.items()},
                        {k: float(v) for k, v in thresholds.items()}, self.beta, self.seed)

    def copy(self):
        return self.with_thresholds(self.thresholds)

    def to_dict(self):
        return {
            "beta": self.beta,
            "seed": self.seed,
            "layers": [
                {"layer": int(layer), "shape": list(m.shape),
                 "indices": [int(i) for i in np.flatnonzero(m)],
                 "threshold": float(self.thresholds[layer])}
                for layer, m in sorted(self.masks.items())
            ],
        }

    @classmethod
    def from_dict(cls, d):
        masks, thresholds = {}, {}
        for entry in d["layers"]:
            m = np.zeros(int(np.prod(entry["shape"])), dtype=bool)
            m[np.asarray(entry["indices"], dtype=np.int64)] = True
            masks[entry["layer"]] = m.reshape(entry["shape"])
            thresholds[entry["layer"]] = float(entry["threshold"])
        return cls(masks, thresholds, float(d["beta"]), int(d["seed"]))


def generate_key(spec, beta, seed=0, threshold=DEFAULT_THRESHOLD, layers=None):
    """Select each post-ReLU neuron independently with probability ``beta``."""
    if not 0.0 < beta < 1.0:
        raise ValueError(f"mask density beta must lie in (0, 1), got {beta}")
    shapes = spec.layer_shapes()
    layers = spec.relu_layers() if layers is None else list(layers)
    rng = np.random.default_rng(seed)
    masks = {}
    for layer in layers:
        if spec.layers[layer].kind != "relu":
            raise ValueError(f"layer {layer} is {spec.layers[layer].kind}, not relu")
        masks[layer] = rng.random(shapes[layer]) < beta
    return TabooKey(masks, {layer: float(threshold) for layer in layers}, float(beta), int(seed))


@dataclass
class CttLosses:
    detection: float
    certification: float
    mode: str
    act_grads: dict = field(default_factory=dict, repr=False)
    bound_grads: dict = field(default_factory=dict, repr=False)


def _as_batch(arr, mask):
    arr = np.asarray(arr)
    return (arr, True) if arr.ndim == mask.ndim + 1 else (arr[None], False)


def compute_reg_losses(activations, adv_bounds, key, mode="loose", hinge_detection=False,
                       reduction="mean", bounds_at="pre"):
    """Detection and certification losses with their gradients.

    ``activations`` are clean layer outputs (list aligned with the layers),
    ``adv_bounds`` the :class:`~ctt.interval.BoundSet` of the eps-boxes (may be
    None when only the detection loss is needed). Losses are summed over
    selected neurons and averaged over the batch (``reduction="mean"``).
    ``act_grads``/``bound_grads`` hold gradients of the returned values.

    ``bounds_at="pre"`` applies the certification hinge to the bounds of the
    layer feeding each ReLU. For a positive threshold the hinge is zero in
    exactly the same cases as on the post-ReLU bounds, but it keeps a
    gradient when the whole box is below zero (post-ReLU the bound is
    clamped to 0 and the gradient vanishes). ``"post"`` uses the ReLU
    outputs literally.
    """
    if bounds_at not in ("pre", "post"):
        raise ValueError(f"bounds_at must be 'pre' or 'post', got {bounds_at!r}")
    if mode not in ("loose", "strict"):
        raise ValueError(f"certification mode must be 'loose' or 'strict', got {mode!r}")
    l_det = 0.0
    l_cert = 0.0
    act_grads, bound_grads = {}, {}
    n = None
    for layer in key.layers:
        mask = key.masks[layer]
        t = key.thresholds[layer]
        x, _ = _as_batch(activations[layer], mask)
        if x.shape[1:] != mask.shape:
            raise T.DimensionError(f"layer {layer}: activation shape {x.shape[1:]} "
                                   f"!= mask shape {mask.shape}")
        n = x.shape[0]
        scale = 1.0 / n if reduction == "mean" else 1.0
        over = mask & (x > t)
        vals = np.where(over, x - t if hinge_detection else x, 0)
        l_det += float(vals.sum(dtype=np.float64)) * scale
        act_grads[layer] = (over * scale).astype(x.dtype)
        if adv_bounds is not None:
            src = layer - 1 if bounds_at == "pre" else layer
            box = adv_bounds[src]
            bound = box.lower if mode == "strict" else box.upper
            bound, _ = _as_batch(bound, mask)
            if bound.shape[1:] != mask.shape:
                raise T.DimensionError(f"layer {layer}: bound shape {bound.shape[1:]} "
                                       f"!= mask shape {mask.shape}")
            short = mask & (t > bound)
            l_cert += float(np.where(short, t - bound.astype(np.float64), 0).sum()) * scale
            g = (-scale * short).astype(bound.dtype)
            bound_grads[src] = (g, None) if mode == "strict" else (None, g)
    return CttLosses(l_det, l_cert, mode, act_grads, bound_grads)


@dataclass
class AnnealSchedule:
    """Additive ramp of the regulariser weight.

    Zero during ``warm_epochs`` (for the detection loss), then
    ``alpha_increment`` added every ``period`` epochs up to ``alpha_max``.
    ``cert_weight`` fixes the certification-loss weight for every epoch,
    warm phase included. When None it is ``alpha_increment`` during the warm
    phase (capped by ``alpha_max``) and follows ``alpha`` afterwards, so both
    regularisers share one weight.
    """

    warm_epochs: int = 1
    alpha_increment: float = 0.005
    period: int = 6
    alpha_max: float = 1.0
    cert_weight: float = None


def anneal(alpha, epoch, schedule):
    """Regulariser weight for ``epoch``; ``alpha`` (the previous value) is a floor."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    s = schedule
    if epoch < s.warm_epochs:
        return 0.0
    ramp = s.alpha_increment * math.floor((epoch - s.warm_epochs) / s.period + 1)
    return min(s.alpha_max, max(alpha, ramp))


def certification_weight(alpha, epoch, schedule):
    if schedule.cert_weight is not None:
        return schedule.cert_weight
    if epoch < schedule.warm_epochs:
        return min(schedule.alpha_increment, schedule.alpha_max)
    return alpha


@dataclass
class FinetuneConfig:
    mode: str = "loose"
    epsilon: float = 3e-3
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    lr_decay: float = 1.0
    rho: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    hinge_detection: bool = False
    bounds_at: str = "pre"
    max_train_alarm_rate: float = 0.05
    schedule: AnnealSchedule = field(default_factory=AnnealSchedule)

    def to_dict(self):
        return asdict(self)


@dataclass
class FinetuneResult:
    model: object
    key: object
    history: list
    converged: bool
    reason: str = ""


def finetune(model, key, dataset, config=None, test_set=None, callback=None, **overrides):
    """Fine-tune ``model`` with the taboo regularisers (loose or strict mode).

    Clean activations come from the ordinary forward pass; adversarial
    bounds come from propagating each sample's clipped box ``[x-eps, x+eps]``.
    The input model is not modified. ``callback(model, entry)`` runs after
    every epoch (used for snapshotting); returning True ends training there. The run is flagged non-converged
    when the final epoch's training alarm rate exceeds
    ``max_train_alarm_rate`` or any loss turns non-finite.
    """
    cfg = config or FinetuneConfig()
    if overrides:
        sched = overrides.pop("schedule", cfg.schedule)
        cfg = FinetuneConfig(**{**{k: getattr(cfg, k) for k in cfg.__dataclass_fields__},
                                **overrides, "schedule": sched})
    if cfg.mode == "lite":
        raise ValueError("lite mode needs no fine-tuning; use calibrate_lite")
    if cfg.mode not in MODES:
        raise ValueError(f"unknown mode {cfg.mode!r}")
    if not cfg.epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {cfg.epsilon}")
    model = model.copy()
    state = RMSPropState(lr=cfg.lr, rho=cfg.rho, weight_decay=cfg.weight_decay)
    history = []
    alpha = 0.0
    finite = True
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        alpha = anneal(alpha, epoch, cfg.schedule)
        # bias placement needs precision near T, far below the RMSProp step
        state.lr = cfg.lr * cfg.lr_decay ** epoch
        w_cert = certification_weight(alpha, epoch, cfg.schedule)
        sums = dict(ce=0.0, det=0.0, cert=0.0, alarms=0, correct=0)
        seen = 0
        for xb, yb in make_batches(dataset, cfg.batch_size, seed=cfg.seed + 7919 * (epoch + 1)):
            fwd = forward_with_cache(model, xb)
            ce, g_logits = T.softmax_cross_entropy(fwd.logits, yb)
            bounds = None
            if w_cert > 0:
                bounds = propagate_bounds(model, input_box(xb, cfg.epsilon), tag="adversarial",
                                          epsilon=cfg.epsilon, keep_cache=True)
            losses = compute_reg_losses(fwd.activations, bounds, key, cfg.mode,
                                        hinge_detection=cfg.hinge_detection,
                                        bounds_at=cfg.bounds_at)
            act_grads = ({k: alpha * v for k, v in losses.act_grads.items()} if alpha > 0 else None)
            grads, _ = backward(model, fwd, g_logits, act_grads)
            if bounds is not None and losses.certification > 0:
                bgrads = {k: tuple(None if g is None else w_cert * g for g in v)
                          for k, v in losses.bound_grads.items()}
                cgrads, _ = bounds_backward(model, bounds, bgrads)
                for name in grads:
                    grads[name] += cgrads[name]
            rmsprop_step(model.params, grads, state)

            nb = len(yb)
            seen += nb
            sums["ce"] += ce * nb
            sums["det"] += losses.detection * nb
            sums["cert"] += losses.certification * nb
            sums["alarms"] += int(_alarms(fwd.activations, key).sum())
            sums["correct"] += int((fwd.logits.argmax(axis=1) == yb).sum())
            if not (math.isfinite(ce) and math.isfinite(losses.detection)
                    and math.isfinite(losses.certification)):
                finite = False
                break
        entry = {
            "epoch": epoch, "alpha": alpha, "cert_weight": w_cert,
            "cross_entropy": sums["ce"] / seen, "detection_loss": sums["det"] / seen,
            "certification_loss": sums["cert"] / seen,
            "train_alarm_rate": sums["alarms"] / seen, "train_accuracy": sums["correct"] / seen,
            "seconds": time.perf_counter() - t0,
        }
        if test_set is not None:
            entry["test_accuracy"] = evaluate_accuracy(model, test_set)
        history.append(entry)
        log.info("finetune epoch %d: %s", epoch, entry)
        stop = callback is not None and callback(model, entry) is True
        if stop or not finite:
            break
    converged, reason = True, ""
    if not finite:
        converged, reason = False, "non-finite loss"
    elif history and history[-1]["train_alarm_rate"] > cfg.max_train_alarm_rate:
        converged = False
        reason = (f"training alarm rate {history[-1]['train_alarm_rate']:.4f} above "
                  f"{cfg.max_train_alarm_rate}")
    model.metrics = dict(model.metrics, finetune={"config": cfg.to_dict(), "history": history,
                                                  "converged": converged, "reason": reason})
    return FinetuneResult(model, key, history, converged, reason)


def masked_activations(activations, key):
    """``{layer: (N, k) array}`` of the selected neurons' activations."""
    out = {}
    for layer in key.layers:
        mask = key.masks[layer]
        x, _ = _as_batch(activations[layer], mask)
        out[layer] = x.reshape(x.shape[0], -1)[:, mask.ravel()]
    return out


def _hits(activations, key):
    hits = None
    for layer, vals in masked_activations(activations, key).items():
        h = (vals > key.thresholds[layer]).sum(axis=1)
        hits = h if hits is None else hits + h
    return hits


def _alarms(activations, key, min_hits=1):
    return _hits(activations, key) >= min_hits


def calibrate_lite(model, key, dataset, batch_size=1000):
    """Set each layer threshold to the largest selected activation over ``dataset``.

    Layers without selected neurons keep their threshold.
    """
    if len(dataset) == 0:
        raise ValueError("calibration needs a non-empty dataset")
    maxima = {}
    for xb, _ in make_batches(dataset, batch_size, shuffle=False):
        acts = forward_with_cache(model, xb).activations
        for layer, vals in masked_activations(acts, key).items():
            if vals.shape[1]:
                m = float(vals.max())
                maxima[layer] = max(maxima.get(layer, 0.0), m)
    thresholds = dict(key.thresholds)
    thresholds.update(maxima)
    return key.with_thresholds(thresholds)


@dataclass
class Verdict:
    malicious: bool
    layer: int = None
    neuron: tuple = None
    value: float = None
    hits: int = 0
    logits: np.ndarray = None

    @property
    def label(self):
        return "malicious" if self.malicious else "benign"


@dataclass
class DetectionBatch:
    malicious: np.ndarray
    hits: np.ndarray
    logits: np.ndarray

    @property
    def predictions(self):
        return self.logits.argmax(axis=1)


def detect_batch(model, key, x, min_hits=1, batch_size=1000):
    """Vectorised detection over a batch of inputs."""
    x = np.asarray(x)
    hits, logits = [], []
    for i in range(0, len(x), batch_size):
        fwd = forward_with_cache(model, x[i:i + batch_size])
        hits.append(_hits(fwd.activations, key))
        logits.append(fwd.logits)
    hits = np.concatenate(hits) if hits else np.zeros(0, dtype=np.int64)
    logits = np.concatenate(logits) if logits else np.zeros((0, model.spec.num_classes))
    return DetectionBatch(hits >= min_hits, hits, logits)


def detect(model, key, x, min_hits=1):
    """Verdict for a single input.

    Malicious iff at least ``min_hits`` selected activations strictly exceed
    their layer threshold; reports the first offender (lowest layer, then
    lowest flat index).
    """
    fwd = forward_with_cache(model, x)
    acts = fwd.activations
    first = None
    hits = 0
    for layer in key.layers:
        a = np.asarray(acts[layer])
        over = key.masks[layer] & (a > key.thresholds[layer])
        hits += int(over.sum())
        if first is None and over.any():
            flat = int(np.flatnonzero(over)[0])
            idx = np.unravel_index(flat, a.shape)
            first = (layer, tuple(int(i) for i in idx), float(a[idx]))
    malicious = hits >= min_hits
    if malicious and first is not None:
        return Verdict(True, first[0], first[1], first[2], hits, fwd.logits)
    return Verdict(False, hits=hits, logits=fwd.logits)


@dataclass
class CertificationResult:
    """Per-layer margins for the selected neurons.

    ``loose_margin = T - natural_upper``; ``strict_margin = adv_lower - T``;
    ``r = |natural_upper - T|``; ``empirical_margin = T - max activation seen
    on the dataset``. Arrays are ordered like the key's flat mask indices.
    """

    epsilon: float
    layers: dict
    loose_certified: bool
    strict_certified: bool

    def to_dict(self):
        return {
            "epsilon": self.epsilon,
            "loose_certified": self.loose_certified,
            "strict_certified": self.strict_certified,
            "layers": {str(k): {name: (v.tolist() if isinstance(v, np.ndarray) else v)
                                for name, v in d.items()}
                       for k, d in self.layers.items()},
        }


def certify(model, key, dataset, epsilon, batch_size=1000):
    """Interval certification margins of the key's neurons.

    Natural bounds are propagated from the dataset's per-pixel min/max box;
    adversarial bounds from that box widened by ``epsilon`` and clipped to
    [0, 1].
    """
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    prof = profile_input_bounds(dataset)
    prof_lo = prof.lower.astype(model.dtype)
    prof_hi = prof.upper.astype(model.dtype)
    natural = propagate_bounds(model, input_box(prof_lo, 0.0, prof_lo, prof_hi))
    adv = propagate_bounds(model, input_box(prof_lo, epsilon, prof_lo, prof_hi),
                           tag="adversarial", epsilon=epsilon)
    emp = {}
    for xb, _ in make_batches(dataset, batch_size, shuffle=False):
        for layer, vals in masked_activations(forward_with_cache(model, xb).activations,
                                              key).items():
            m = vals.max(axis=0) if vals.shape[1] else np.zeros(0, dtype=vals.dtype)
            emp[layer] = m if layer not in emp else np.maximum(emp[layer], m)
    layers = {}
    loose_ok = strict_ok = True
    for layer in key.layers:
        flat = key.masks[layer].ravel()
        t = key.thresholds[layer]
        nat_up = natural[layer].upper.ravel()[flat].astype(np.float64)
        adv_lo = adv[layer].lower.ravel()[flat].astype(np.float64)
        adv_up = adv[layer].upper.ravel()[flat].astype(np.float64)
        loose = t - nat_up
        strict = adv_lo - t
        layers[layer] = {
            "threshold": t,
            "indices": np.flatnonzero(flat),
            "natural_upper": nat_up,
            "natural_lower": natural[layer].lower.ravel()[flat].astype(np.float64),
            "adversarial_lower": adv_lo,
            "adversarial_upper": adv_up,
            "loose_margin": loose,
            "strict_margin": strict,
            "r": np.abs(nat_up - t),
            "empirical_margin": t - emp[layer].astype(np.float64),
        }
        loose_ok &= bool(np.all(loose >= 0))
        strict_ok &= bool(np.all(loose >= 0) and np.all(strict >= 0))
    return CertificationResult(float(epsilon), layers, loose_ok, strict_ok)
