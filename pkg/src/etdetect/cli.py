"""Command-line entry point: ``etdetect <subcommand> [--config C] [--seed S] [--out D] [--jobs N]``.

Exit codes: 0 success, 1 stage failure, 2 configuration error. Every command
writes one JSON report (``report.json``) to ``--out``; CSV side files are
referenced from it.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import harness as H
from .data import detection_sets
from .nn import Classifier
from .reveng import ReConfig
from .toy import verify_table


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--seed", type=int, help="derive any missing stage seeds from this value")
    common.add_argument("--out", default="out", help="output directory (default: ./out)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for ensembles")
    common.add_argument("--re-step", type=float, dest="re_step")
    common.add_argument("--re-max-iters", type=int, dest="re_max_iters")
    common.add_argument("--re-lambda", type=float, dest="re_lambda")
    common.add_argument("--re-init-sigma", type=float, dest="re_init_sigma")

    p = argparse.ArgumentParser(prog="etdetect", description="Backdoor attack lab with ET detection.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train a clean classifier for the configured domain")
    sub.add_parser("attack", parents=[common], help="poison the training set and train the victim")
    d = sub.add_parser("detect", parents=[common], help="run ET detection on a saved classifier")
    d.add_argument("--model", required=True)
    d.add_argument("--baselines", action="store_true", help="also compute L2 / L1 / CS statistics")
    t = sub.add_parser("toy-verify", parents=[common], help="closed-form vs Monte Carlo ET for the toy model")
    t.add_argument("--pairs", type=int, default=100_000)
    s = sub.add_parser("sweep-images", parents=[common], help="detection accuracy vs images per class")
    s.add_argument("--counts", type=int, nargs="+", default=[2, 5, 10, 15, 20])
    pt = sub.add_parser("sweep-patience", parents=[common], help="transferable-set growth curves")
    pt.add_argument("--model", required=True)
    pt.add_argument("--target", type=int, required=True)
    pt.add_argument("--taus", type=int, nargs="+", default=[1, 2, 4, 8])
    r = sub.add_parser("roc", parents=[common], help="ROC / AUC from a JSON of statistics")
    r.add_argument("--input", required=True,
                   help='JSON {"target": [...], "nontarget": [...], "higher_is_target": true}')
    c = sub.add_parser("cs-sweep", parents=[common], help="CS statistic vs number of classes")
    c.add_argument("--counts", type=int, nargs="+", default=[2, 4, 6, 8, 10])
    sub.add_parser("run", parents=[common], help="full pipeline: attack, train, detect")
    return p


def _config(args, required: bool = True) -> dict:
    if not args.config:
        if required:
            raise H.ConfigError("--config is required for this command")
        return {}
    cfg = H.load_config(args.config)
    if args.seed is not None:
        cfg = H.fill_seeds(cfg, args.seed)
    re = cfg.setdefault("detection", {}).setdefault("re", {})
    for flag, key in (("re_step", "step_size"), ("re_max_iters", "max_iters"),
                      ("re_lambda", "lam"), ("re_init_sigma", "init_sigma")):
        if getattr(args, flag) is not None:
            re[key] = getattr(args, flag)
    return cfg


def _write(out, payload: dict) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "report.json"
    path.write_text(json.dumps(payload, indent=1, default=_jsonable))
    return path


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"not JSON serializable: {type(x).__name__}")


def _cmd_train(args):
    cfg = H.validate_config(_config(args))
    tr, te = H.build_domain(cfg)
    f, _ = H.train_victim(cfg, tr, [])
    rep = H.RunReport(cfg, acc=H.eval_acc(f, te), model=f)
    H.write_report(rep, args.out)


def _cmd_attack(args):
    cfg = H.validate_config(_config(args))
    tr, te = H.build_domain(cfg)
    specs = H.build_attacks(cfg, tr.shape)
    f, poison = H.train_victim(cfg, tr, specs)
    rep = H.RunReport(cfg, asr=[H.eval_asr(f, te, s) for s in specs], acc=H.eval_acc(f, te),
                      poison=poison, model=f)
    H.write_report(rep, args.out)


def _cmd_detect(args):
    cfg = H.validate_config(_config(args))
    f = Classifier.load(args.model)
    _, te = H.build_domain(cfg)
    report = H.detect(cfg, f, te, baselines=args.baselines)
    _write(args.out, report.to_dict())


def _cmd_run(args):
    H.run_pipeline(_config(args), args.out)


def _cmd_toy(args):
    seed = args.seed if args.seed is not None else 0
    rows = verify_table(args.pairs, seed)
    _write(args.out, {"table": rows, "n_pairs": args.pairs, "seed": seed,
                      "all_pass": all(r["pass"] for r in rows)})


def _cmd_sweep_images(args):
    cfg = _config(args)
    ens = cfg.pop("ensemble", None)
    if not ens or not isinstance(ens.get("seed"), int):
        raise H.ConfigError("sweep-images needs an 'ensemble' section with a seed")
    configs = H.ensemble_configs(cfg, ens.get("instances", 10), ens["seed"],
                                 ens.get("patterns", H.DESK_ADDITIVE_PATTERNS),
                                 ens.get("n_poison", 120), ens.get("dual", False))
    results = H.run_ensemble(configs, args.jobs)
    rows = H.sweep_images(results, args.counts)
    _write(args.out, {"table": rows, "ensemble": ens, "summary": H.ensemble_summary(results)})


def _cmd_sweep_patience(args):
    cfg = H.validate_config(_config(args))
    f = Classifier.load(args.model)
    _, te = H.build_domain(cfg)
    det = cfg["detection"]
    sets = detection_sets(te, det["images_per_class"], det["sample_seed"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = H.sweep_patience(f, sets, H.re_config(cfg, te.bounded), args.target, args.taus,
                            det["seed"], out / "growth_curves.csv")
    final = {tau: next(r["et"] for r in rows if r["tau"] == tau) for tau in args.taus}
    _write(out, {"target": args.target, "et_by_tau": final, "curves_csv": "growth_curves.csv",
                 "config": cfg})


def _cmd_roc(args):
    try:
        stats = json.loads(Path(args.input).read_text())
        pos, neg = stats["target"], stats["nontarget"]
    except (OSError, json.JSONDecodeError, KeyError) as e:
        raise H.ConfigError(f"bad ROC input: {e}") from None
    roc = H.compute_roc(pos, neg, stats.get("higher_is_target", True))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "histogram.csv", "w") as fh:
        fh.write("value,group\n")
        fh.writelines(f"{v!r},target\n" for v in pos)
        fh.writelines(f"{v!r},nontarget\n" for v in neg)
    _write(out, {**roc.to_dict(), "histogram_csv": "histogram.csv"})


def _cmd_cs_sweep(args):
    cfg = _config(args, required=False)
    seed = cfg.get("seed", args.seed)
    if not isinstance(seed, int):
        raise H.ConfigError("cs-sweep needs a seed (config 'seed' or --seed)")
    tr, _ = H.load_source(cfg.get("data", {"source": "mnist_subset"}))
    rows = H.cs_class_sweep(tr, args.counts, seed)
    _write(args.out, {"table": rows, "seed": seed})


COMMANDS = {"train": _cmd_train, "attack": _cmd_attack, "detect": _cmd_detect, "run": _cmd_run,
            "toy-verify": _cmd_toy, "sweep-images": _cmd_sweep_images,
            "sweep-patience": _cmd_sweep_patience, "roc": _cmd_roc, "cs-sweep": _cmd_cs_sweep}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        COMMANDS[args.command](args)
    except H.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except H.StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - any other failure is a stage failure
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
