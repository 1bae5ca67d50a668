"""Evaluation and sweep drivers behind the command line, plus report output."""

import csv
import io
import json
import logging
import math
import subprocess
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .attacks import METHODS, AttackSpec, run_attack
from .checkpoint import load_adversarial, load_checkpoint
from .core import AnnealSchedule, certify, detect_batch, finetune, generate_key
from .data import load_dataset

log = logging.getLogger(__name__)

__all__ = [
    "RunConfig",
    "DetectionReport",
    "SweepReport",
    "parse_grid",
    "parse_attack",
    "version_string",
    "run_evaluation",
    "evaluate_batches",
    "run_sweep",
    "emit_report",
]


@dataclass
class RunConfig:
    """Every knob a command can take; the defaults are the recorded defaults."""

    command: str = ""
    data_dir: str = None
    arch: str = "lenet5"
    ckpt: str = None
    out: str = None
    # baseline training
    epochs: int = 20
    batch: int = 64
    lr: float = 1e-3
    seed: int = 0
    # taboo key and fine-tuning
    mode: str = "loose"
    epsilon: float = 3e-3
    beta: float = 0.001
    threshold: float = 1e-4
    key_seed: int = None  # None: use ``seed``
    warm_epochs: int = 1
    alpha_inc: float = 0.005
    alpha_period: int = 6
    alpha_max: float = 1.0
    cert_weight: float = None
    lr_decay: float = 1.0
    ntrain: int = None  # training subsample for fine-tuning; None = all
    # evaluation
    attacks: list = field(default_factory=list)  # AttackSpec dicts
    advs: list = field(default_factory=list)
    n: int = 1000
    sample_seed: int = 0
    min_hits: int = 1
    format: str = "json"
    certify_epsilon: float = None
    # sweeps
    variable: str = "epsilon"
    grid: str = None
    target_fp: float = None  # epsilon sweep: stop each run at this training alarm rate

    @classmethod
    def from_file(cls, path):
        """Read a JSON object or ``key = value`` lines."""
        text = Path(path).read_text()
        try:
            data = json.loads(text)
        except json.JSONDecodeError:
            data = {}
            for ln, line in enumerate(text.splitlines(), 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{ln}: expected key = value, got {line!r}")
                k, v = (s.strip() for s in line.split("=", 1))
                data[k.replace("-", "_")] = _coerce(v)
        return cls().updated(data)

    def updated(self, values):
        known = {f.name for f in fields(self)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return RunConfig(**{**asdict(self), **values})

    def attack_specs(self):
        return [s if isinstance(s, AttackSpec) else AttackSpec(**s) for s in self.attacks]

    def schedule(self):
        return AnnealSchedule(warm_epochs=self.warm_epochs, alpha_increment=self.alpha_inc,
                              period=self.alpha_period, alpha_max=self.alpha_max,
                              cert_weight=self.cert_weight)

    def to_dict(self):
        d = asdict(self)
        d["attacks"] = [s.to_dict() if isinstance(s, AttackSpec) else dict(s)
                        for s in self.attacks]
        return d


def _coerce(text):
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null"):
        return None
    return text


def parse_grid(text):
    """``lo:hi:logN``, ``lo:hi:linN`` or a comma-separated list."""
    if text is None or not str(text).strip():
        raise ValueError("sweep grid is empty")
    text = str(text).strip()
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ValueError(f"grid {text!r}: expected lo:hi:logN or lo:hi:linN")
        lo, hi, kind = float(parts[0]), float(parts[1]), parts[2]
        for prefix, fn in (("log", np.geomspace), ("lin", np.linspace)):
            if kind.startswith(prefix):
                count = int(kind[len(prefix):])
                if count < 1:
                    raise ValueError(f"grid {text!r}: need at least one point")
                return [float(v) for v in fn(lo, hi, count)]
        raise ValueError(f"grid {text!r}: spacing must be logN or linN")
    values = [float(v) for v in text.split(",") if v.strip()]
    if not values:
        raise ValueError("sweep grid is empty")
    return values


def parse_attack(text):
    """``method[:key=value,...]`` -> AttackSpec, e.g. ``pgd:eps=0.1,steps=10``."""
    method, _, rest = text.partition(":")
    if method not in METHODS:
        raise ValueError(f"unknown attack {method!r}; choose from {METHODS}")
    kwargs = {}
    for item in filter(None, rest.split(",")):
        k, sep, v = item.partition("=")
        if not sep:
            raise ValueError(f"attack option {item!r} is not key=value")
        kwargs[k.strip().replace("-", "_")] = _coerce(v.strip())
    return AttackSpec(method=method, **kwargs)


def version_string():
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).resolve().parent, capture_output=True,
                             text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


@dataclass
class DetectionReport:
    rows: list
    config: dict
    clean_accuracy: float
    false_positive_rate: float
    certification: dict = None
    version: str = field(default_factory=version_string)

    def row(self, attack):
        for r in self.rows:
            if r["attack"] == attack:
                return r
        raise KeyError(attack)

    def to_dict(self):
        return asdict(self)


@dataclass
class SweepReport:
    variable: str
    rows: list
    config: dict
    version: str = field(default_factory=version_string)

    def to_dict(self):
        return asdict(self)


def _mean(values):
    return float(np.mean(values)) if len(values) else None


def evaluate_batches(model, key, x, y, batches, min_hits=1):
    """Detection report rows for clean inputs ``x`` and adversarial ``batches``.

    The detection rate is measured over successful adversarial examples
    only; ``detection_rate_all`` counts every attacked input.
    """
    clean = detect_batch(model, key, x, min_hits=min_hits)
    clean_acc = float((clean.predictions == y).mean())
    fp = float(clean.malicious.mean())
    rows = [{
        "attack": "none", "params": {}, "n": int(len(y)),
        "clean_accuracy": clean_acc, "false_positive_rate": fp,
        "adversarial_accuracy": None, "success_rate": None, "n_success": None,
        "detection_rate": None, "detection_rate_all": None,
        "mean_l2": None, "mean_linf": None,
    }]
    for batch in batches:
        adv = detect_batch(model, key, batch.perturbed, min_hits=min_hits)
        ok = batch.success
        rows.append({
            "attack": batch.attack.get("name", batch.attack.get("method", "?")),
            "params": batch.attack, "n": int(len(ok)),
            "clean_accuracy": clean_acc, "false_positive_rate": fp,
            "adversarial_accuracy": float((adv.predictions == batch.labels).mean()),
            "success_rate": float(ok.mean()), "n_success": int(ok.sum()),
            "detection_rate": _mean(adv.malicious[ok]),
            "detection_rate_all": float(adv.malicious.mean()),
            "mean_l2": _mean(batch.l2[ok]), "mean_linf": _mean(batch.linf[ok]),
        })
    return rows, clean_acc, fp


def _load_model(config):
    if config.ckpt is None:
        raise ValueError("no checkpoint given")
    if not Path(config.ckpt).exists():
        raise FileNotFoundError(f"checkpoint {config.ckpt} not found")
    model, key, _ = load_checkpoint(config.ckpt)
    return model, key


def _test_subset(config, test_set=None):
    if config.n is not None and config.n < 1:
        raise ValueError(f"evaluation subsample size must be positive, got {config.n}")
    test_set = test_set if test_set is not None else load_dataset(config.data_dir, "test")
    return test_set.sample(config.n, seed=config.sample_seed)


def run_evaluation(config, model=None, key=None, test_set=None):
    """Attack a seeded test subsample and measure detection.

    Attacks only ever see the model, never the key.
    """
    if model is None:
        model, key = _load_model(config)
    if key is None:
        raise ValueError("the checkpoint carries no taboo key")
    sub = _test_subset(config, test_set)
    batches = []
    for spec in config.attack_specs():
        log.info("running %s on %d inputs", spec.name, len(sub))
        batches.append(run_attack(model, sub.images, sub.labels, spec))
    for path in config.advs:
        batch, _ = load_adversarial(path)
        batches.append(batch)
    rows, acc, fp = evaluate_batches(model, key, sub.images, sub.labels, batches,
                                     config.min_hits)
    cert = None
    if config.certify_epsilon is not None:
        cert = certify(model, key, sub, config.certify_epsilon).to_dict()
    return DetectionReport(rows, config.to_dict(), acc, fp, cert)


def _summary(rows):
    attacked = [r for r in rows if r["attack"] != "none"]
    det = [r["detection_rate"] for r in attacked if r["detection_rate"] is not None]
    return {
        "accuracy": rows[0]["clean_accuracy"],
        "false_positive_rate": rows[0]["false_positive_rate"],
        "detection_rate": _mean(det),
        "detection_rate_all": _mean([r["detection_rate_all"] for r in attacked]),
        "per_attack": {r["attack"]: r["detection_rate"] for r in attacked},
    }


def run_sweep(config, variable=None, grid=None, model=None, train_set=None, test_set=None,
              key=None):
    """Epsilon sweep (one fine-tune per grid point) or false-positive sweep.

    With ``config.target_fp`` set, each epsilon run stops at the first epoch
    whose training alarm rate is at or below it, so grid points are compared
    at a matched false-positive level. For ``false_positive`` the grid lists
    the epochs to snapshot from a single fine-tuning run; each snapshot
    trades false positives for detection.
    """
    variable = variable or config.variable
    values = grid if grid is not None else parse_grid(config.grid)
    if len(values) == 0:
        raise ValueError("sweep grid is empty")
    if model is None:
        model, key0 = _load_model(config)
        key = key or key0
    train_set = train_set if train_set is not None else load_dataset(config.data_dir, "train")
    if config.ntrain:
        train_set = train_set.sample(config.ntrain, seed=config.seed + 1)
    sub = _test_subset(config, test_set)
    if key is None:
        kseed = config.seed if config.key_seed is None else config.key_seed
        key = generate_key(model.spec, config.beta, kseed, config.threshold)
    specs = config.attack_specs()
    ft_kwargs = dict(mode=config.mode, epochs=config.epochs, batch_size=config.batch,
                     lr=config.lr, lr_decay=config.lr_decay, seed=config.seed,
                     schedule=config.schedule())

    def evaluate(m):
        batches = [run_attack(m, sub.images, sub.labels, s) for s in specs]
        return _summary(evaluate_batches(m, key, sub.images, sub.labels, batches,
                                         config.min_hits)[0])

    rows = []
    if variable == "epsilon":
        target = config.target_fp

        def at_target(m, entry):
            return target is not None and entry["train_alarm_rate"] <= target

        for eps in values:
            res = finetune(model, key, train_set, epsilon=float(eps), callback=at_target,
                           **ft_kwargs)
            last = res.history[-1]
            row = {"epsilon": float(eps), "converged": res.converged, "reason": res.reason,
                   "epochs_run": len(res.history), "train_alarm_rate": last["train_alarm_rate"],
                   "reached_target": None if target is None else bool(at_target(None, last))}
            row.update(evaluate(res.model))
            rows.append(row)
            log.info("sweep epsilon=%g: %s", eps, row)
    elif variable == "false_positive":
        wanted = sorted({int(v) for v in values})
        if wanted[0] < 0:
            raise ValueError("snapshot epochs must be >= 0")
        snaps = {}

        def snapshot(m, entry):
            if entry["epoch"] in wanted:
                row = {"epoch": entry["epoch"], "alpha": entry["alpha"],
                       "train_alarm_rate": entry["train_alarm_rate"]}
                row.update(evaluate(m))
                snaps[entry["epoch"]] = row
                log.info("sweep snapshot %s", row)

        ft_kwargs["epochs"] = max(wanted) + 1
        finetune(model, key, train_set, epsilon=config.epsilon, callback=snapshot, **ft_kwargs)
        rows = sorted(snaps.values(), key=lambda r: r["false_positive_rate"])
    else:
        raise ValueError(f"sweep variable must be 'epsilon' or 'false_positive', got {variable!r}")
    return SweepReport(variable, rows, config.to_dict())


def _flat(row):
    out = {}
    for k, v in row.items():
        if isinstance(v, dict):
            if k == "params":
                out[k] = json.dumps(v, sort_keys=True)
            else:
                for kk, vv in v.items():
                    out[f"{k}.{kk}"] = vv
        else:
            out[k] = v
    return out


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return "nan" if math.isnan(v) else f"{v:.4f}"
    return str(v)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def emit_report(report, fmt="json", path=None):
    """Write ``report`` as JSON (full precision) or CSV (``%.4f`` numbers).

    Returns the text written; ``path=None`` only renders it.
    """
    data = _jsonable(report.to_dict() if hasattr(report, "to_dict") else report)
    if fmt == "json":
        text = json.dumps(data, indent=2, sort_keys=True) + "\n"
    elif fmt == "csv":
        rows = [_flat(r) for r in data["rows"]]
        cols = []
        for r in rows:
            cols.extend(c for c in r if c not in cols)
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(cols)
        for r in rows:
            writer.writerow([_fmt(r.get(c)) for c in cols])
        text = buf.getvalue()
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    if path is not None:
        try:
            Path(path).write_text(text)
        except OSError as exc:
            raise OSError(f"cannot write report to {path}: {exc}") from exc
    return text

