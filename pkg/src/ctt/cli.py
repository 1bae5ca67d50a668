"""``ctt`` command line: train, finetune, attack, eval, certify, sweep."""

import argparse
import json
import logging
import sys
from pathlib import Path

from .attacks import AttackSpec, run_attack
from .checkpoint import load_checkpoint, save_adversarial, save_checkpoint
from .core import calibrate_lite, certify, finetune, generate_key
from .data import load_dataset
from .harness import (RunConfig, emit_report, parse_attack, parse_grid, run_evaluation,
                      run_sweep, version_string)
from .model import preset, train_baseline

log = logging.getLogger("ctt")


def _step_size(text):
    return text if text == "auto" else float(text)


def _common(p):
    p.add_argument("--config", help="JSON or key = value file; flags override it")
    p.add_argument("--data-dir", help="directory with the IDX files (default: $CTT_DATA_DIR)")
    p.add_argument("--seed", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def _ft_flags(p):
    p.add_argument("--mode", choices=["lite", "loose", "strict"])
    p.add_argument("--epsilon", type=float)
    p.add_argument("--beta", type=float, help="taboo mask density")
    p.add_argument("--threshold", type=float)
    p.add_argument("--key-seed", type=int, help="taboo key seed (default: --seed)")
    p.add_argument("--warm-epochs", type=int)
    p.add_argument("--alpha-inc", type=float)
    p.add_argument("--alpha-period", type=int)
    p.add_argument("--alpha-max", type=float)
    p.add_argument("--cert-weight", type=float,
                   help="fixed certification-loss weight (default: tied to alpha)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-decay", type=float, help="per-epoch learning-rate factor")
    p.add_argument("--ntrain", type=int, help="seeded training subsample size")


def build_parser():
    parser = argparse.ArgumentParser(prog="ctt", description=__doc__)
    parser.add_argument("--version", action="version", version=f"ctt {version_string()}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a baseline classifier")
    _common(p)
    p.add_argument("--arch", choices=["lenet5", "tiny"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--out", required=True)

    p = sub.add_parser("finetune", help="attach a taboo key and fine-tune")
    _common(p)
    p.add_argument("--ckpt", required=True)
    _ft_flags(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("attack", help="generate adversarial examples")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--method", required=True,
                   choices=["fgsm", "fgm_l2", "bim", "l2_bim", "pgd", "cw_l2", "deepfool",
                            "boundary"])
    p.add_argument("--norm", choices=["linf", "l2"])
    p.add_argument("--eps", type=float, default=0.1)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--step-size", type=_step_size, default="auto")
    p.add_argument("--random-start", action="store_true")
    p.add_argument("--early-stop", action="store_true")
    p.add_argument("--grad", choices=["analytic", "estimated"], default="analytic")
    p.add_argument("--delta", type=float, default=1e-3, help="finite-difference step")
    p.add_argument("--c", type=float, default=0.1, help="CW trade-off constant")
    p.add_argument("--attack-lr", type=float, default=0.01, help="CW learning rate")
    p.add_argument("--confidence", type=float, default=0.1)
    p.add_argument("--overshoot", type=float, default=0.02)
    p.add_argument("--iterations", type=int, default=100, help="boundary attack iterations")
    p.add_argument("--n", type=int, default=1000, help="seeded test subsample size")
    p.add_argument("--full", action="store_true", help="attack the full test set")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="detection report over attacks")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--advs", nargs="*", default=[], help="saved adversarial batches")
    p.add_argument("--attack", action="append", default=[], metavar="SPEC",
                   help="inline attack, e.g. pgd:eps=0.1,steps=10 (repeatable)")
    p.add_argument("--n", type=int)
    p.add_argument("--full", action="store_true", help="evaluate the full test set")
    p.add_argument("--min-hits", type=int)
    p.add_argument("--certify-epsilon", type=float)
    p.add_argument("--format", choices=["json", "csv"])
    p.add_argument("--out")

    p = sub.add_parser("certify", help="interval certification margins of the key")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--epsilon", type=float, default=3e-3)
    p.add_argument("--n", type=int, default=None, help="training subsample for the profile")
    p.add_argument("--out")

    p = sub.add_parser("sweep", help="epsilon or false-positive sweep")
    _common(p)
    p.add_argument("--ckpt", required=True, help="baseline (or keyed) checkpoint")
    p.add_argument("--variable", choices=["epsilon", "false_positive"])
    p.add_argument("--grid", help="lo:hi:logN, lo:hi:linN or a comma list "
                                  "(epochs to snapshot for false_positive)")
    _ft_flags(p)
    p.add_argument("--attack", action="append", default=[], metavar="SPEC")
    p.add_argument("--target-fp", type=float,
                   help="epsilon sweep: stop each run at this training alarm rate")
    p.add_argument("--n", type=int)
    p.add_argument("--format", choices=["json", "csv"])
    p.add_argument("--out")
    return parser


def make_config(args):
    cfg = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    values = {"command": args.command}
    for name, value in vars(args).items():
        if name in ("config", "command", "verbose", "attack", "full", "func") or value is None:
            continue
        if name in cfg.__dataclass_fields__:
            values[name] = value
    if getattr(args, "attack", None):
        values["attacks"] = [parse_attack(a).to_dict() for a in args.attack]
    if getattr(args, "full", False):
        values["n"] = None
    return cfg.updated(values)


def cmd_train(args, cfg):
    tr = load_dataset(cfg.data_dir, "train")
    te = load_dataset(cfg.data_dir, "test")
    spec = preset(cfg.arch, input_shape=tr.images.shape[1:], num_classes=tr.num_classes)
    model = train_baseline(spec, tr, test_set=te, epochs=cfg.epochs, batch_size=cfg.batch,
                           lr=cfg.lr, seed=cfg.seed)
    save_checkpoint(cfg.out, model, extra={"config": cfg.to_dict(), "version": version_string()})
    print(f"test accuracy {model.metrics['test_accuracy']:.4f} -> {cfg.out}")
    return 0


def cmd_finetune(args, cfg):
    model, key, _ = load_checkpoint(cfg.ckpt)
    tr = load_dataset(cfg.data_dir, "train")
    if cfg.ntrain:
        tr = tr.sample(cfg.ntrain, seed=cfg.seed + 1)
    if key is None:
        kseed = cfg.seed if cfg.key_seed is None else cfg.key_seed
        key = generate_key(model.spec, cfg.beta, kseed, cfg.threshold)
    print(f"taboo key: {key.num_instrumented()} neurons "
          f"({100 * key.instrumented_fraction():.3f}% of {key.num_candidates()})")
    extra = {"config": cfg.to_dict(), "version": version_string()}
    if cfg.mode == "lite":
        key = calibrate_lite(model, key, tr)
        save_checkpoint(cfg.out, model, key, extra=extra)
        print(f"calibrated thresholds {key.thresholds} -> {cfg.out}")
        return 0
    res = finetune(model, key, tr, mode=cfg.mode, epsilon=cfg.epsilon, epochs=cfg.epochs,
                   batch_size=cfg.batch, lr=cfg.lr, lr_decay=cfg.lr_decay, seed=cfg.seed,
                   schedule=cfg.schedule())
    save_checkpoint(cfg.out, res.model, key, extra=extra)
    last = res.history[-1] if res.history else {}
    print(f"train alarm rate {last.get('train_alarm_rate', float('nan')):.4f}, "
          f"converged={res.converged} -> {cfg.out}")
    if not res.converged:
        print(f"warning: {res.reason}", file=sys.stderr)
    return 0


def cmd_attack(args, cfg):
    forced = {"fgsm": "linf", "bim": "linf", "pgd": "linf"}.get(args.method, "l2")
    if args.norm is not None and args.norm != forced:
        raise ValueError(f"{args.method} is an {forced} attack; --norm {args.norm} conflicts")
    steps = args.steps
    if steps is None:
        steps = 1000 if args.method == "cw_l2" else 50 if args.method == "deepfool" else 10
    spec = AttackSpec(method=args.method, eps=args.eps, steps=steps, step_size=args.step_size,
                      random_start=args.random_start, early_stop=args.early_stop,
                      grad=args.grad, delta=args.delta, seed=cfg.seed, c=args.c,
                      lr=args.attack_lr, confidence=args.confidence, overshoot=args.overshoot,
                      iterations=args.iterations)
    model, _, _ = load_checkpoint(cfg.ckpt)  # the key is never handed to the attack
    te = load_dataset(cfg.data_dir, "test").sample(None if args.full else args.n, seed=0)
    batch = run_attack(model, te.images, te.labels, spec)
    save_adversarial(cfg.out, batch, meta={"config": cfg.to_dict(), "version": version_string()})
    ok = batch.success
    l2 = batch.l2[ok].mean() if ok.any() else float("nan")
    print(f"{spec.name}: success {ok.mean():.4f}, mean l2 {l2:.4f}, "
          f"queries/sample {batch.queries.mean():.0f} -> {cfg.out}")
    return 0


def _print_rows(report):
    for r in report.rows:
        if r["attack"] == "none":
            print(f"{'no attack':28s} acc {r['clean_accuracy']:.4f}  "
                  f"FP {r['false_positive_rate']:.4f}")
        else:
            det = "-" if r["detection_rate"] is None else f"{r['detection_rate']:.4f}"
            l2 = "-" if r["mean_l2"] is None else f"{r['mean_l2']:.4f}"
            print(f"{r['attack']:28s} acc {r['adversarial_accuracy']:.4f}  det {det}  "
                  f"det(all) {r['detection_rate_all']:.4f}  l2 {l2}")


def cmd_eval(args, cfg):
    report = run_evaluation(cfg)
    _print_rows(report)
    text = emit_report(report, cfg.format, cfg.out)
    if cfg.out is None:
        sys.stdout.write(text)
    return 0


def cmd_certify(args, cfg):
    model, key, _ = load_checkpoint(cfg.ckpt)
    if key is None:
        raise ValueError(f"{cfg.ckpt} carries no taboo key")
    tr = load_dataset(cfg.data_dir, "train")
    if args.n:
        tr = tr.sample(args.n, seed=cfg.seed)
    res = certify(model, key, tr, cfg.epsilon)
    out = {"version": version_string(), "config": cfg.to_dict(), **res.to_dict()}
    print(f"epsilon {cfg.epsilon}: loose certified {res.loose_certified}, "
          f"strict certified {res.strict_certified}")
    text = json.dumps(out, indent=2, sort_keys=True, default=float) + "\n"
    if cfg.out:
        Path(cfg.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_sweep(args, cfg):
    if cfg.variable == "false_positive" and cfg.grid is None:
        raise ValueError("the false-positive sweep needs --grid with snapshot epochs")
    grid = parse_grid(cfg.grid)
    if not cfg.attacks:
        cfg = cfg.updated({"attacks": [AttackSpec("fgsm", eps=0.1).to_dict()]})
    report = run_sweep(cfg, grid=grid)
    for r in report.rows:
        print({k: v for k, v in r.items() if k != "per_attack"})
    text = emit_report(report, cfg.format, cfg.out)
    if cfg.out is None:
        sys.stdout.write(text)
    return 0


COMMANDS = {"train": cmd_train, "finetune": cmd_finetune, "attack": cmd_attack,
            "eval": cmd_eval, "certify": cmd_certify, "sweep": cmd_sweep}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = make_config(args)
        return COMMANDS[args.command](args, cfg)
    except (FileNotFoundError, ValueError, OSError) as exc:
        print(f"ctt {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
