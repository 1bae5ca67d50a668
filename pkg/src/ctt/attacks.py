"""Adversarial example generation against the classifier.

All attacks work on batches ``x`` of shape ``(N, *input_shape)`` with pixel
values in [0, 1] and return an :class:`AdvBatch`. Gradient attacks take their
input gradient either from backpropagation or from coordinate-wise finite
differences (``grad="estimated"``), through the same code path.

Attacks only see the classifier: none of them touch a taboo key or the
detector.
"""

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .model import backward, forward_with_cache

log = logging.getLogger(__name__)

__all__ = [
    "AttackSpec",
    "AdvBatch",
    "input_gradient",
    "estimate_gradient",
    "fgsm",
    "fgm_l2",
    "iterative_attack",
    "cw_l2",
    "deepfool",
    "boundary_attack",
    "run_attack",
    "METHODS",
]

METHODS = ("fgsm", "fgm_l2", "bim", "l2_bim", "pgd", "cw_l2", "deepfool", "boundary")


@dataclass
class AttackSpec:
    method: str = "fgsm"
    norm: str = "linf"
    eps: float = 0.1
    steps: int = 10
    step_size: object = "auto"  # float or "auto" (= eps / steps)
    random_start: bool = False
    early_stop: bool = False
    grad: str = "analytic"  # analytic | estimated
    delta: float = 1e-3  # finite-difference step for estimated gradients
    seed: int = 0
    # Carlini-Wagner
    c: float = 0.1
    lr: float = 0.01
    confidence: float = 0.1
    binary_search_steps: int = 1
    # DeepFool
    overshoot: float = 0.02
    # boundary attack
    iterations: int = 100
    trials: int = 25

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown attack {self.method!r}; choose from {METHODS}")
        if self.method in ("fgsm", "bim", "pgd"):
            self.norm = "linf"
        elif self.method in ("fgm_l2", "l2_bim", "cw_l2", "deepfool", "boundary"):
            self.norm = "l2"
        if self.method in ("fgsm", "fgm_l2", "bim", "l2_bim", "pgd") and self.eps < 0:
            raise ValueError("attack budget must be >= 0")
        if self.method in ("bim", "l2_bim", "pgd", "cw_l2", "deepfool") and self.steps < 1:
            raise ValueError("iterative attacks need steps >= 1")
        if self.grad not in ("analytic", "estimated"):
            raise ValueError(f"grad must be 'analytic' or 'estimated', got {self.grad!r}")

    @property
    def resolved_step_size(self):
        if self.step_size in ("auto", None):
            return self.eps / self.steps
        return float(self.step_size)

    @property
    def name(self):
        ge = " w/ GE" if self.grad == "estimated" else ""
        if self.method == "cw_l2":
            return f"cw_l2(c={self.c}){ge}"
        if self.method == "deepfool":
            return f"deepfool{ge}"
        if self.method == "boundary":
            return f"boundary(i={self.iterations})"
        return f"{self.method}(eps={self.eps}){ge}"

    def to_dict(self):
        return asdict(self)


@dataclass
class AdvBatch:
    original: np.ndarray
    perturbed: np.ndarray
    labels: np.ndarray
    predicted: np.ndarray
    success: np.ndarray
    queries: np.ndarray = None
    attack: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.queries is None:
            self.queries = np.zeros(len(self.labels), dtype=np.int64)

    def __len__(self):
        return len(self.labels)

    @property
    def delta(self):
        return (self.perturbed.astype(np.float64) - self.original.astype(np.float64)).reshape(
            len(self), -1)

    @property
    def l2(self):
        return np.linalg.norm(self.delta, axis=1)

    @property
    def linf(self):
        d = np.abs(self.delta)
        return d.max(axis=1) if d.shape[1] else np.zeros(len(self))


def _batch(model, x, y):
    x = np.asarray(x, dtype=model.dtype)
    if x.shape == tuple(model.spec.input_shape):
        x = x[None]
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if len(x) != len(y):
        raise T.DimensionError(f"{len(x)} inputs but {len(y)} labels")
    return x, y


def _predict(model, x, chunk=2000):
    return np.concatenate([forward_with_cache(model, x[i:i + chunk]).logits.argmax(axis=1)
                           for i in range(0, len(x), chunk)])


def _per_sample_loss(model, x, y, chunk=4000):
    out = []
    for i in range(0, len(x), chunk):
        logits = forward_with_cache(model, x[i:i + chunk]).logits
        losses, _ = T.softmax_cross_entropy(logits, y[i:i + chunk], reduction="none")
        out.append(np.atleast_1d(losses))
    return np.concatenate(out)


def estimate_gradient(model, x, y, delta=1e-3, chunk_coords=64):
    """Coordinate-wise central-difference estimate of d CE / d x.

    Costs ``2 * dim(x)`` model queries per sample; returns
    ``(gradient, queries)``.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    x, y = _batch(model, x, y)
    n = len(x)
    flat = x.reshape(n, -1).astype(np.float64)
    d = flat.shape[1]
    grad = np.zeros_like(flat)
    shape = x.shape[1:]
    for start in range(0, d, chunk_coords):
        coords = np.arange(start, min(d, start + chunk_coords))
        c = len(coords)
        pert = np.repeat(flat[:, None, :], 2 * c, axis=1)  # (n, 2c, d)
        pert[:, np.arange(c), coords] += delta
        pert[:, c + np.arange(c), coords] -= delta
        losses = _per_sample_loss(model, pert.reshape((n * 2 * c,) + shape).astype(x.dtype),
                                  np.repeat(y, 2 * c))
        losses = losses.reshape(n, 2 * c)
        grad[:, coords] = (losses[:, :c] - losses[:, c:]) / (2 * delta)
    return grad.reshape(x.shape).astype(x.dtype), np.full(n, 2 * d, dtype=np.int64)


def input_gradient(model, x, y, source="analytic", delta=1e-3):
    """Per-sample gradient of the cross-entropy w.r.t. the input, plus query counts."""
    x, y = _batch(model, x, y)
    if source == "estimated":
        return estimate_gradient(model, x, y, delta)
    fwd = forward_with_cache(model, x)
    _, g = T.softmax_cross_entropy(fwd.logits, y, reduction="sum")
    _, gx = backward(model, fwd, g)
    return gx, np.zeros(len(x), dtype=np.int64)


def _l2_normalize(g):
    flat = g.reshape(len(g), -1).astype(np.float64)
    norms = np.linalg.norm(flat, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    return (flat / safe[:, None]).reshape(g.shape).astype(g.dtype), norms


def _finish(model, x, adv, y, spec, queries, **flags):
    adv = np.clip(adv, 0, 1).astype(x.dtype)
    pred = _predict(model, adv)
    return AdvBatch(x, adv, y, pred, pred != y, queries,
                    attack=spec.to_dict() if spec is not None else {}, flags=flags)


def fgsm(model, x, y, eps, grad="analytic", delta=1e-3):
    """``x + eps * sign(grad)``, clipped to [0, 1]."""
    spec = AttackSpec("fgsm", eps=eps, grad=grad, delta=delta)
    x, y = _batch(model, x, y)
    g, q = input_gradient(model, x, y, grad, delta)
    sign = np.sign(g)
    noop = ~np.any(sign.reshape(len(x), -1) != 0, axis=1)
    return _finish(model, x, x + x.dtype.type(eps) * sign, y, spec, q, noop=noop)


def fgm_l2(model, x, y, eps, grad="analytic", delta=1e-3):
    """``x + eps * grad / ||grad||_2``, clipped to [0, 1]."""
    spec = AttackSpec("fgm_l2", eps=eps, grad=grad, delta=delta)
    x, y = _batch(model, x, y)
    g, q = input_gradient(model, x, y, grad, delta)
    unit, norms = _l2_normalize(g)
    return _finish(model, x, x + x.dtype.type(eps) * unit, y, spec, q, noop=norms == 0)


def _project(delta, eps, norm):
    if norm == "linf":
        return np.clip(delta, -eps, eps)
    flat = delta.reshape(len(delta), -1).astype(np.float64)
    norms = np.linalg.norm(flat, axis=1)
    scale = np.minimum(1.0, eps / np.maximum(norms, 1e-30))
    return (flat * scale[:, None]).reshape(delta.shape).astype(delta.dtype)


def _random_start(shape, eps, norm, seed, dtype):
    n = shape[0]
    d = int(np.prod(shape[1:]))
    out = np.empty((n, d))
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        if norm == "linf":
            out[i] = rng.uniform(-eps, eps, d)
        else:
            v = rng.standard_normal(d)
            out[i] = v / np.linalg.norm(v) * eps * rng.random() ** (1.0 / d)
    return out.reshape(shape).astype(dtype)


def iterative_attack(model, x, y, spec):
    """BIM / L2-BIM / PGD: repeated gradient steps projected onto the eps-ball.

    PGD starts from a uniform random point in the ball when
    ``spec.random_start`` is set (BIM never does). With ``spec.early_stop``
    a sample stops moving at its first misclassification.
    """
    x, y = _batch(model, x, y)
    eps, norm = spec.eps, spec.norm
    step = x.dtype.type(spec.resolved_step_size)
    adv = x.copy()
    if spec.method == "pgd" and spec.random_start:
        adv = np.clip(x + _random_start(x.shape, eps, norm, spec.seed, x.dtype), 0, 1)
    queries = np.zeros(len(x), dtype=np.int64)
    active = np.ones(len(x), dtype=bool)
    for _ in range(spec.steps):
        if spec.early_stop:
            active &= _predict(model, adv) == y
            if not active.any():
                break
        idx = np.flatnonzero(active)
        g, q = input_gradient(model, adv[idx], y[idx], spec.grad, spec.delta)
        queries[idx] += q
        if norm == "linf":
            move = step * np.sign(g)
        else:
            move = step * _l2_normalize(g)[0]
        d = _project(adv[idx] + move - x[idx], x.dtype.type(eps), norm)
        adv[idx] = np.clip(x[idx] + d, 0, 1)
    return _finish(model, x, adv, y, spec, queries)


def _adam(state, g, lr, b1=0.9, b2=0.999, fuzz=1e-8):
    state["t"] += 1
    state["m"] = b1 * state["m"] + (1 - b1) * g
    state["v"] = b2 * state["v"] + (1 - b2) * g * g
    mhat = state["m"] / (1 - b1 ** state["t"])
    vhat = state["v"] / (1 - b2 ** state["t"])
    return lr * mhat / (np.sqrt(vhat) + fuzz)


def cw_l2(model, x, y, c=0.1, lr=0.01, steps=1000, confidence=0.1, binary_search_steps=1,
          grad="analytic", delta=1e-3, spec=None):
    """Carlini-Wagner L2 in tanh space, optimised with Adam.

    Minimises ``||x' - x||^2 + c * max(0, Z_y - max_{j != y} Z_j + confidence)``.
    Returns the smallest-l2 misclassified iterate per sample; samples that
    never become adversarial keep their final iterate and are flagged
    (``flags["failed"]``). With ``binary_search_steps > 1`` the constant is
    searched per sample (x10 up on failure, bisection down on success).
    """
    spec = spec or AttackSpec("cw_l2", c=c, lr=lr, steps=steps, confidence=confidence,
                              binary_search_steps=binary_search_steps, grad=grad, delta=delta)
    x, y = _batch(model, x, y)
    n = len(x)
    x64 = x.astype(np.float64)
    w0 = np.arctanh(np.clip(2 * x64 - 1, -1 + 1e-6, 1 - 1e-6))
    cs = np.full(n, float(c))
    lo_c = np.zeros(n)
    hi_c = np.full(n, np.inf)
    best_l2 = np.full(n, np.inf)
    best_adv = x.copy()
    last_adv = x.copy()
    queries = np.zeros(n, dtype=np.int64)
    k = model.spec.num_classes
    onehot = np.eye(k, dtype=bool)[y]
    for _ in range(max(1, binary_search_steps)):
        w = w0.copy()
        adam = {"t": 0, "m": np.zeros_like(w), "v": np.zeros_like(w)}
        found = np.zeros(n, dtype=bool)
        for it in range(steps + 1):
            adv = (np.tanh(w) + 1) / 2
            adv32 = adv.astype(x.dtype)
            if grad == "estimated":
                logits = forward_with_cache(model, adv32).logits.astype(np.float64)
            else:
                fwd = forward_with_cache(model, adv32)
                logits = fwd.logits.astype(np.float64)
            l2sq = ((adv - x64) ** 2).reshape(n, -1).sum(axis=1)
            pred = logits.argmax(axis=1)
            better = (pred != y) & (l2sq < best_l2)
            best_l2[better] = l2sq[better]
            best_adv[better] = adv32[better]
            found |= pred != y
            if it == steps:
                last_adv = adv32
                break
            z_y = logits[np.arange(n), y]
            z_other = np.where(onehot, -np.inf, logits)
            j = z_other.argmax(axis=1)
            margin = z_y - z_other[np.arange(n), j] + confidence
            active = margin > 0
            g_logits = np.zeros_like(logits)
            g_logits[np.arange(n), y] = cs * active
            g_logits[np.arange(n), j] -= cs * active
            if grad == "estimated":
                gx = _estimate_margin_grad(model, adv32, y, confidence, cs, delta)
                queries += 2 * int(np.prod(x.shape[1:]))
            else:
                _, gx = backward(model, fwd, g_logits.astype(x.dtype))
            g_adv = 2 * (adv - x64) + gx.astype(np.float64)
            g_w = g_adv * (1 - np.tanh(w) ** 2) / 2
            w -= _adam(adam, g_w, lr)
        # constant search
        lo_c = np.where(found, lo_c, cs)
        hi_c = np.where(found, np.minimum(hi_c, cs), hi_c)
        cs = np.where(np.isfinite(hi_c), (lo_c + hi_c) / 2, cs * 10)
    failed = ~np.isfinite(best_l2)
    result = np.where(failed.reshape((n,) + (1,) * (x.ndim - 1)), last_adv, best_adv)
    return _finish(model, x, result, y, spec, queries, failed=failed)


def _estimate_margin_grad(model, x, y, confidence, cs, delta):
    """Finite-difference gradient of ``c * max(0, margin)`` (black-box CW)."""
    n = len(x)
    flat = x.reshape(n, -1).astype(np.float64)
    d = flat.shape[1]
    grad = np.zeros_like(flat)
    onehot = np.eye(model.spec.num_classes, dtype=bool)[y]

    def hinge(z, rows):
        zy = z[np.arange(len(z)), y[rows]]
        zo = np.where(onehot[rows], -np.inf, z).max(axis=1)
        return cs[rows] * np.maximum(0, zy - zo + confidence)

    for i in range(d):
        p = flat.copy()
        p[:, i] += delta
        m = flat.copy()
        m[:, i] -= delta
        zp = forward_with_cache(model, p.reshape(x.shape).astype(x.dtype)).logits.astype(np.float64)
        zm = forward_with_cache(model, m.reshape(x.shape).astype(x.dtype)).logits.astype(np.float64)
        rows = np.arange(n)
        grad[:, i] = (hinge(zp, rows) - hinge(zm, rows)) / (2 * delta)
    return grad.reshape(x.shape)


def _logit_jacobian(model, x):
    """Logits ``(n, K)`` and their input gradients ``(K, n, *shape)``."""
    k = model.spec.num_classes
    grads = []
    logits = None
    for cls in range(k):
        fwd = forward_with_cache(model, x)
        logits = fwd.logits
        g = np.zeros_like(logits)
        g[:, cls] = 1
        _, gx = backward(model, fwd, g)
        grads.append(gx)
    return logits.astype(np.float64), np.stack(grads).astype(np.float64)


def _estimated_logit_jacobian(model, x, delta):
    n = len(x)
    flat = x.reshape(n, -1).astype(np.float64)
    d = flat.shape[1]
    k = model.spec.num_classes
    jac = np.zeros((k, n, d))
    for i in range(d):
        p = flat.copy()
        p[:, i] += delta
        m = flat.copy()
        m[:, i] -= delta
        zp = forward_with_cache(model, p.reshape(x.shape).astype(x.dtype)).logits
        zm = forward_with_cache(model, m.reshape(x.shape).astype(x.dtype)).logits
        jac[:, :, i] = ((zp.astype(np.float64) - zm) / (2 * delta)).T
    logits = forward_with_cache(model, x).logits.astype(np.float64)
    return logits, jac.reshape((k,) + x.shape)


def deepfool(model, x, y=None, max_steps=50, overshoot=0.02, step_fuzz=1e-4, grad="analytic",
             delta=1e-3, spec=None):
    """Multi-class DeepFool (minimal l2 steps to the linearised boundary).

    The reference class is the model's own prediction on ``x``. When ``y``
    is given, inputs already predicted differently from it are left as is. The accumulated perturbation is scaled by
    ``1 + overshoot`` before checking for a label change. Samples that do not
    flip within ``max_steps`` are flagged ``failed``.
    """
    spec = spec or AttackSpec("deepfool", steps=max_steps, overshoot=overshoot, grad=grad,
                              delta=delta)
    x = np.asarray(x, dtype=model.dtype)
    if x.shape == tuple(model.spec.input_shape):
        x = x[None]
    n = len(x)
    orig = _predict(model, x)
    y = orig if y is None else np.atleast_1d(np.asarray(y, dtype=np.int64))
    x64 = x.astype(np.float64)
    r_tot = np.zeros_like(x64)
    adv = x.copy()
    active = orig == y
    queries = np.zeros(n, dtype=np.int64)
    bshape = (slice(None),) + (None,) * (x.ndim - 1)
    for _ in range(max_steps):
        active &= _predict(model, adv) == orig
        if not active.any():
            break
        idx = np.flatnonzero(active)
        cur = adv[idx]
        if grad == "estimated":
            logits, jac = _estimated_logit_jacobian(model, cur, delta)
            queries[idx] += 2 * int(np.prod(x.shape[1:]))
        else:
            logits, jac = _logit_jacobian(model, cur)
        rows = np.arange(len(idx))
        k0 = orig[idx]
        f_diff = logits - logits[rows, k0][:, None]  # (m, K)
        w_diff = jac - jac[k0, rows][None]  # (K, m, ...)
        w_norm = np.linalg.norm(w_diff.reshape(jac.shape[0], len(idx), -1), axis=2).T  # (m, K)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.abs(f_diff) / w_norm
        ratio[rows, k0] = np.inf
        ratio[~np.isfinite(ratio)] = np.inf
        best = ratio.argmin(axis=1)
        w_best = w_diff[best, rows]
        wn = w_norm[rows, best]
        coef = (np.abs(f_diff[rows, best]) + step_fuzz) / np.maximum(wn, 1e-30) ** 2
        coef[~np.isfinite(ratio[rows, best])] = 0
        r_tot[idx] += coef[bshape] * w_best
        adv[idx] = np.clip(x64[idx] + (1 + overshoot) * r_tot[idx], 0, 1).astype(x.dtype)
    still = (_predict(model, adv) == orig) & (orig == y)
    return _finish(model, x, adv, y, spec, queries, failed=still)


def boundary_attack(model, x, y, iterations=100, trials=25, seed=0, spherical_step=0.01,
                    source_step=0.01, step_adaptation=1.5, max_init_draws=10000, spec=None):
    """Decision-based boundary attack (label-only queries).

    Starts from a uniform-noise misclassified point pulled toward ``x`` by
    bisection, then each iteration draws ``trials`` candidates (orthogonal
    step on the sphere around ``x`` followed by a contraction toward ``x``)
    and keeps the closest misclassified candidate if it is no farther than
    the current iterate. Step sizes adapt to the per-iteration success rates.
    ``flags["trace"]`` holds each sample's l2 after every iteration.
    """
    spec = spec or AttackSpec("boundary", iterations=iterations, trials=trials, seed=seed)
    x, y = _batch(model, x, y)
    n = len(x)
    shape = x.shape[1:]
    d = int(np.prod(shape))
    x64 = x.reshape(n, d).astype(np.float64)
    rngs = [np.random.default_rng([seed, i]) for i in range(n)]
    queries = np.zeros(n, dtype=np.int64)

    def labels(pts):
        return _predict(model, pts.reshape((-1,) + shape).astype(x.dtype))

    # initialisation
    cur = np.empty_like(x64)
    failed = np.zeros(n, dtype=bool)
    for i in range(n):
        found = None
        drawn = 0
        while drawn < max_init_draws and found is None:
            batch = rngs[i].uniform(0, 1, size=(min(100, max_init_draws - drawn), d))
            lab = labels(batch)
            drawn += len(batch)
            hit = np.flatnonzero(lab != y[i])
            if hit.size:
                found = batch[hit[0]]
                queries[i] += hit[0] + 1 + (drawn - len(batch))
        if found is None:
            failed[i] = True
            cur[i] = x64[i]
            queries[i] += drawn
            continue
        lo, hi = 0.0, 1.0  # blend weight toward the noise point
        for _ in range(25):
            mid = (lo + hi) / 2
            cand = (1 - mid) * x64[i] + mid * found
            queries[i] += 1
            if labels(cand[None])[0] != y[i]:
                hi = mid
            else:
                lo = mid
        cur[i] = (1 - hi) * x64[i] + hi * found
    dist = np.linalg.norm(cur - x64, axis=1)
    sph = np.full(n, float(spherical_step))
    src = np.full(n, float(source_step))
    trace = np.zeros((n, iterations))
    live = np.flatnonzero(~failed)
    for it in range(iterations):
        if live.size:
            cands1, cands2 = [], []
            for i in live:
                diff = x64[i] - cur[i]
                dn = np.linalg.norm(diff)
                u = diff / dn if dn > 0 else np.zeros(d)
                eta = rngs[i].standard_normal((trials, d))
                eta -= (eta @ u)[:, None] * u[None]
                eta *= (sph[i] * dn) / np.maximum(np.linalg.norm(eta, axis=1, keepdims=True), 1e-30)
                c1 = cur[i][None] + eta
                # back onto the sphere of radius dn around x
                off = c1 - x64[i]
                off *= dn / np.maximum(np.linalg.norm(off, axis=1, keepdims=True), 1e-30)
                c1 = np.clip(x64[i] + off, 0, 1)
                c2 = np.clip(x64[i] + (c1 - x64[i]) * (1 - src[i]), 0, 1)
                cands1.append(c1)
                cands2.append(c2)
            lab = labels(np.concatenate(cands1 + cands2))
            m = len(live) * trials
            lab1 = lab[:m].reshape(len(live), trials)
            lab2 = lab[m:].reshape(len(live), trials)
            for j, i in enumerate(live):
                queries[i] += 2 * trials
                ok1 = lab1[j] != y[i]
                ok2 = lab2[j] != y[i]
                if ok2.any():
                    c2 = cands2[j][ok2]
                    dists = np.linalg.norm(c2 - x64[i], axis=1)
                    b = dists.argmin()
                    if dists[b] <= dist[i]:
                        cur[i] = c2[b]
                        dist[i] = dists[b]
                r1, r2 = ok1.mean(), ok2.mean()
                if r1 > 0.5:
                    sph[i] *= step_adaptation
                elif r1 < 0.2:
                    sph[i] /= step_adaptation
                if r2 > 0.5:
                    src[i] = min(src[i] * step_adaptation, 0.5)
                elif r2 < 0.2:
                    src[i] /= step_adaptation
        trace[:, it] = dist
    adv = cur.reshape(x.shape).astype(x.dtype)
    return _finish(model, x, adv, y, spec, queries, failed=failed, trace=trace)


def run_attack(model, x, y, spec):
    """Dispatch ``spec`` over a batch."""
    m = spec.method
    if m == "fgsm":
        b = fgsm(model, x, y, spec.eps, spec.grad, spec.delta)
    elif m == "fgm_l2":
        b = fgm_l2(model, x, y, spec.eps, spec.grad, spec.delta)
    elif m in ("bim", "l2_bim", "pgd"):
        b = iterative_attack(model, x, y, spec)
    elif m == "cw_l2":
        b = cw_l2(model, x, y, spec.c, spec.lr, spec.steps, spec.confidence,
                  spec.binary_search_steps, spec.grad, spec.delta, spec=spec)
    elif m == "deepfool":
        b = deepfool(model, x, y, spec.steps, spec.overshoot, grad=spec.grad, delta=spec.delta,
                     spec=spec)
    else:
        b = boundary_attack(model, x, y, spec.iterations, spec.trials, spec.seed, spec=spec)
    b.attack = dict(spec.to_dict(), name=spec.name)
    return b
