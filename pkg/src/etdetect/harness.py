"""Experiment orchestration: config-driven pipelines, ensembles and sweeps.

A run config is a JSON object::

    {
      "data": {"source": "mnist_subset" | "mnist_dir", "dir": "<path>"},
      "domain": {"group0": [3], "group1": [8]}   or   {"classes": [0, 1, 2, 3]},
      "model": {"hidden": [256, 128], "activation": "relu"},
      "train": {"learning_rate": 1e-3, "batch_size": 32, "epochs": 40,
                "optimizer": "adam", "seed": 1},
      "attacks": [{"target_class": 1, "pattern": "X", "pattern_seed": 2,
                   "n_poison": 100, "seed": 3}],
      "detection": {"re_kind": "ap", "images_per_class": 20, "tau": 4,
                    "seed": 4, "sample_seed": 5, "re": {"step_size": 0.005}}
    }

Every stochastic stage must carry a seed; :func:`validate_config` rejects
configs that do not.
"""

from __future__ import annotations

import copy
import csv
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .attacks import (AttackSpec, BackdoorPattern, check_dual_patterns,
                      eval_acc, eval_asr, make_pattern, poison_multi)
from .data import (LabeledDataset, TwoClassDomainSpec, detection_sets, export_mnist_subset,
                   load_mnist_dir, make_two_class_domain, select_classes)
from .detector import DetectionReport, detect_multi_class, estimate_et
from .nn import Classifier, TrainConfig, train
from .reveng import ReConfig, cs_statistic

DEFAULT_DATA_DIR = Path(os.environ.get("ETDETECT_DATA", Path.home() / ".cache" / "etdetect" / "mnist"))

# triggers an MLP learns reliably from ~120 poisons on 400-image MNIST classes
DESK_ADDITIVE_PATTERNS = ("chessboard", "static", "L", "X", "cross", "square")

DEFAULT_MODEL = {"hidden": [256, 128], "activation": "relu"}
DEFAULT_TRAIN = {"learning_rate": 1e-3, "batch_size": 32, "epochs": 40, "optimizer": "adam"}
DEFAULT_RE = {"step_size": 0.005, "max_iters": 2000, "lam": 1e-2, "init_sigma": 1e-2}


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit code 2)."""


class StageError(RuntimeError):
    """A pipeline stage failed (CLI exit code 1)."""

    def __init__(self, stage: str, cause: BaseException, partial: dict | None = None):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage, self.cause, self.partial = stage, cause, partial or {}


# -- config -----------------------------------------------------------------------

def _need_seed(section: dict, where: str, key: str = "seed") -> None:
    if not isinstance(section.get(key), int) or section[key] < 0:
        raise ConfigError(f"{where}.{key} must be a nonnegative integer seed")


def fill_seeds(cfg: dict, base_seed: int) -> dict:
    """Derive any missing stage seeds from ``base_seed`` (the CLI ``--seed`` flag)."""
    cfg = copy.deepcopy(cfg)

    def derive(*path) -> int:
        return int(np.random.SeedSequence([base_seed, *[hash_str(p) for p in path]])
                   .generate_state(1, np.uint32)[0])

    cfg.setdefault("train", {}).setdefault("seed", derive("train"))
    for k, atk in enumerate(cfg.get("attacks", [])):
        atk.setdefault("seed", derive("attack", k))
        atk.setdefault("pattern_seed", derive("pattern", k))
    det = cfg.setdefault("detection", {})
    det.setdefault("seed", derive("detection"))
    det.setdefault("sample_seed", derive("samples"))
    return cfg


def hash_str(x) -> int:
    """Stable small integer for seed derivation (Python's ``hash`` is salted)."""
    if isinstance(x, int):
        return x
    return int.from_bytes(str(x).encode()[:8].ljust(8, b"\0"), "little")


def validate_config(cfg: dict) -> dict:
    """Check structure and seeds; return a copy with defaults filled in."""
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    cfg = copy.deepcopy(cfg)
    data = cfg.setdefault("data", {"source": "mnist_subset"})
    if data.get("source", "mnist_subset") not in ("mnist_subset", "mnist_dir"):
        raise ConfigError(f"unknown data source {data.get('source')!r}")
    if data.get("source") == "mnist_dir" and not Path(data.get("dir", "")).is_dir():
        raise ConfigError(f"data directory {data.get('dir')!r} does not exist")
    dom = cfg.get("domain")
    if not isinstance(dom, dict) or not (("group0" in dom and "group1" in dom) or "classes" in dom):
        raise ConfigError("domain needs group0/group1 or classes")
    try:
        if "classes" in dom:
            if len(set(dom["classes"])) != len(dom["classes"]) or len(dom["classes"]) < 2:
                raise ValueError("need at least two distinct classes")
        else:
            TwoClassDomainSpec(dom["group0"], dom["group1"])
    except (ValueError, TypeError) as e:
        raise ConfigError(f"domain: {e}") from None
    cfg["model"] = {**DEFAULT_MODEL, **cfg.get("model", {})}
    cfg["train"] = {**DEFAULT_TRAIN, **cfg.get("train", {})}
    _need_seed(cfg["train"], "train")
    n_classes = len(dom["classes"]) if "classes" in dom else 2
    for k, atk in enumerate(cfg.setdefault("attacks", [])):
        where = f"attacks[{k}]"
        for key in ("target_class", "pattern", "n_poison"):
            if key not in atk:
                raise ConfigError(f"{where}.{key} is required")
        if not 0 <= atk["target_class"] < n_classes:
            raise ConfigError(f"{where}.target_class out of range")
        _need_seed(atk, where)
        if isinstance(atk["pattern"], str):
            _need_seed(atk, where, "pattern_seed")
    det = cfg.setdefault("detection", {})
    det.setdefault("re_kind", "ap")
    det.setdefault("images_per_class", 20)
    det.setdefault("tau", 4)
    det["re"] = {**DEFAULT_RE, **det.get("re", {})}
    if det["re_kind"] not in ("ap", "pr"):
        raise ConfigError("detection.re_kind must be 'ap' or 'pr'")
    if det["images_per_class"] < 1 or det["tau"] < 1:
        raise ConfigError("images_per_class and tau must be positive")
    _need_seed(det, "detection")
    _need_seed(det, "detection", "sample_seed")
    try:
        TrainConfig(**{k: v for k, v in cfg["train"].items()})
        ReConfig(**det["re"])
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    return cfg


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None


# -- stages -----------------------------------------------------------------------

_DATA_CACHE: dict = {}


def load_source(data: dict) -> tuple[LabeledDataset, LabeledDataset]:
    """(train, test) for the configured source; the mlxtend subset is exported on first use."""
    source = data.get("source", "mnist_subset")
    directory = Path(data.get("dir", DEFAULT_DATA_DIR))
    key = (source, str(directory))
    if key not in _DATA_CACHE:
        if source == "mnist_subset" and not (directory / "train-images-idx3-ubyte").exists():
            export_mnist_subset(directory)
        _DATA_CACHE[key] = (load_mnist_dir(directory, "train"), load_mnist_dir(directory, "test"))
    return _DATA_CACHE[key]


def build_domain(cfg: dict) -> tuple[LabeledDataset, LabeledDataset]:
    train_src, test_src = load_source(cfg["data"])
    dom = cfg["domain"]
    if "classes" in dom:
        return select_classes(train_src, dom["classes"]), select_classes(test_src, dom["classes"])
    spec = TwoClassDomainSpec(dom["group0"], dom["group1"])
    return make_two_class_domain(train_src, spec), make_two_class_domain(test_src, spec)


def build_attacks(cfg: dict, shape) -> list[AttackSpec]:
    specs = []
    for atk in cfg.get("attacks", []):
        pat = atk["pattern"]
        pattern = (make_pattern(pat, shape, atk["pattern_seed"]) if isinstance(pat, str)
                   else BackdoorPattern.from_dict(pat))
        specs.append(AttackSpec(atk["target_class"], pattern, atk["n_poison"],
                                atk.get("clean_label", False), atk.get("pgd", {}),
                                tuple(atk["source_classes"]) if atk.get("source_classes") else None))
    if len(specs) == 2:
        check_dual_patterns(specs[0].pattern, specs[1].pattern)
    return specs


def layer_dims(cfg: dict, n_inputs: int, n_classes: int) -> list[int]:
    return [n_inputs, *cfg["model"]["hidden"], n_classes]


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(**{**cfg["train"], "activation": cfg["model"]["activation"]})


def re_config(cfg: dict, bounded: bool) -> ReConfig:
    re = dict(cfg["detection"]["re"])
    re.setdefault("clip", bounded)
    return ReConfig(**re)


def train_victim(cfg: dict, train_set: LabeledDataset, specs: Sequence[AttackSpec]):
    """Poison (if attacks are configured) and train; returns (model, poison reports)."""
    reports = []
    data = train_set
    if specs:
        seed = cfg["attacks"][0]["seed"]
        surrogate = None
        if any(s.clean_label for s in specs):
            sur_cfg = replace(train_config(cfg), seed=cfg["train"]["seed"] + 1)
            surrogate = train(train_set.X, train_set.y, layer_dims(cfg, train_set.n_features,
                                                                   int(train_set.y.max()) + 1), sur_cfg)
        data, reports = poison_multi(train_set, specs, seed, surrogate)
    dims = layer_dims(cfg, train_set.n_features, int(train_set.y.max()) + 1)
    return train(data.X, data.y, dims, train_config(cfg)), reports


def detect(cfg: dict, f: Classifier, test: LabeledDataset, baselines: bool = False,
           images_per_class: int | None = None) -> DetectionReport:
    det = cfg["detection"]
    k = images_per_class or det["images_per_class"]
    sets = detection_sets(test, k, det["sample_seed"])
    report = detect_multi_class(f, sets, re_config(cfg, test.bounded), det["tau"], det["re_kind"],
                                det["seed"], test.shape, baselines)
    report.config_echo["run"] = cfg
    return report


@dataclass
class RunReport:
    config: dict
    asr: list = field(default_factory=list)
    acc: float | None = None
    poison: list = field(default_factory=list)
    detection: DetectionReport | None = None
    timing: dict = field(default_factory=dict)
    failed_stage: str | None = None
    error: str | None = None
    model: Classifier | None = None

    def to_dict(self) -> dict:
        return {"config": self.config, "asr": self.asr, "acc": self.acc,
                "poison": [p.to_dict() for p in self.poison],
                "detection": self.detection.to_dict() if self.detection else None,
                "timing": self.timing, "failed_stage": self.failed_stage, "error": self.error}


def run_pipeline(cfg: dict, out_dir=None, baselines: bool = False) -> RunReport:
    """train -> attack -> detect; persists model and report when ``out_dir`` is given.

    A failing stage yields a partial report naming the stage (and raises
    :class:`StageError` carrying it).
    """
    cfg = validate_config(cfg)
    rep = RunReport(cfg)
    stage = "data"
    try:
        t0 = time.perf_counter()
        tr, te = build_domain(cfg)
        stage = "attack"
        specs = build_attacks(cfg, tr.shape)
        stage = "train"
        f, rep.poison = train_victim(cfg, tr, specs)
        rep.model = f
        rep.acc = eval_acc(f, te)
        rep.asr = [eval_asr(f, te, s) for s in specs]
        rep.timing["train_s"] = time.perf_counter() - t0
        stage = "detect"
        t1 = time.perf_counter()
        rep.detection = detect(cfg, f, te, baselines)
        rep.timing["detect_s"] = time.perf_counter() - t1
    except Exception as e:  # noqa: BLE001 - report any stage failure
        rep.failed_stage, rep.error = stage, f"{type(e).__name__}: {e}"
        if out_dir is not None:
            write_report(rep, out_dir)
        raise StageError(stage, e, rep.to_dict()) from e
    if out_dir is not None:
        write_report(rep, out_dir)
    return rep


def write_report(rep: RunReport, out_dir, name: str = "report.json") -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if rep.model is not None:
        rep.model.save(out / "model.json")
    path = out / name
    path.write_text(json.dumps(rep.to_dict(), indent=1))
    return path


# -- ensembles --------------------------------------------------------------------

def ensemble_configs(base: dict, n: int, seed: int, patterns: Sequence[str] = DESK_ADDITIVE_PATTERNS,
                     n_poison: int = 120, dual: bool = False, classes: Sequence[int] = range(10)) -> list[dict]:
    """``n`` attacked 2-class instance configs on random class pairs.

    Single-attack instances target class 1 with sources from class 0; dual
    instances add a second attack (distinct pattern shape) targeting class 0.
    Every stage seed is derived from ``seed`` and the instance index.
    """
    out = []
    for k in range(n):
        ss = np.random.SeedSequence([seed, k]).generate_state(8, np.uint32).astype(int).tolist()
        rng = np.random.default_rng(ss[0])
        pair = TwoClassDomainSpec.random_pair(classes, ss[1])
        names = list(rng.choice(patterns, size=2 if dual else 1, replace=False))
        cfg = copy.deepcopy(base)
        cfg["domain"] = {"group0": list(pair.group0), "group1": list(pair.group1)}
        cfg.setdefault("train", {})["seed"] = ss[2]
        cfg["attacks"] = [{"target_class": 1 - j, "pattern": str(name), "pattern_seed": ss[3 + j],
                           "n_poison": n_poison, "seed": ss[5]} for j, name in enumerate(names)]
        det = cfg.setdefault("detection", {})
        det["seed"], det["sample_seed"] = ss[6], ss[7]
        out.append(validate_config(cfg))
    return out


def clean_counterpart(cfg: dict) -> dict:
    cfg = copy.deepcopy(cfg)
    cfg["attacks"] = []
    return cfg


@dataclass
class InstanceResult:
    """One attacked instance and its clean counterpart."""

    config: dict
    attacked: RunReport
    clean: RunReport

    @property
    def targets(self) -> list[int]:
        return [a["target_class"] for a in self.config["attacks"]]


def _run_instance(cfg: dict) -> InstanceResult:
    return InstanceResult(cfg, run_pipeline(cfg), run_pipeline(clean_counterpart(cfg)))


def parallel_map(fn: Callable, items: Sequence, jobs: int = 1) -> list:
    """``map`` over processes; results are order-preserving and schedule independent."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


def run_ensemble(configs: Sequence[dict], jobs: int = 1) -> list[InstanceResult]:
    return parallel_map(_run_instance, list(configs), jobs)


def ensemble_summary(results: Sequence[InstanceResult]) -> dict:
    """Detection counts: an attack is caught when its target is flagged; clean runs must flag nothing."""
    n_attacks = sum(len(r.targets) for r in results)
    caught = sum(t in r.attacked.detection.ba_targets for r in results for t in r.targets)
    all_caught = sum(all(t in r.attacked.detection.ba_targets for t in r.targets) for r in results)
    fp = sum(r.clean.detection.attacked for r in results)
    return {"instances": len(results), "attacks": n_attacks, "detected": caught,
            "instances_fully_detected": all_caught, "false_positives": fp,
            "min_asr": min((a for r in results for a in r.attacked.asr), default=None),
            "max_acc_drop": max(r.clean.acc - r.attacked.acc for r in results)}


# -- sweeps -----------------------------------------------------------------------

def sweep_images(results: Sequence[InstanceResult], counts: Sequence[int] = (2, 5, 10, 15, 20)) -> list[dict]:
    """Detection and false-positive rates versus detection images per class.

    Reuses the trained models of an ensemble; each detection set of ``count``
    images per class is drawn with the instance's sample seed.
    """
    rows = []
    for count in counts:
        caught = fp = n_att = 0
        for r in results:
            for run, is_clean in ((r.attacked, False), (r.clean, True)):
                te = build_domain(r.config)[1]
                rep = detect(run.config, run.model, te, images_per_class=count)
                if is_clean:
                    fp += rep.attacked
                else:
                    n_att += len(r.targets)
                    caught += sum(t in rep.ba_targets for t in r.targets)
        rows.append({"images_per_class": count, "detection_rate": caught / n_att,
                     "false_positive_rate": fp / len(results)})
    return rows


def sweep_patience(f: Classifier, sets: dict, cfg: ReConfig, target: int,
                   taus: Sequence[int] = (1, 2, 4, 8), seed: int = 0, csv_path=None) -> list[dict]:
    """Per-sample transferable-set growth curves for each patience value."""
    pooled = np.concatenate([np.asarray(X) for c, X in sorted(sets.items()) if c != target])
    pooled = pooled[np.isin(f.predict(pooled), [c for c in sets if c != target])]
    rows = []
    for tau in taus:
        est = estimate_et(f, pooled, cfg.with_(target_class=target), tau, seed=seed)
        for i, curve in enumerate(est.curves):
            rows.extend({"tau": tau, "sample": i, "attempt": k + 1, "p": p, "et": est.et}
                        for k, p in enumerate(curve))
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["tau", "sample", "attempt", "p", "et"])
            w.writeheader()
            w.writerows(rows)
    return rows


@dataclass
class RocResult:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float
    degenerate: bool

    def to_dict(self) -> dict:
        return {"fpr": self.fpr.tolist(), "tpr": self.tpr.tolist(),
                "thresholds": [float(x) if np.isfinite(x) else None for x in self.thresholds],
                "auc": self.auc, "degenerate": self.degenerate}


def compute_roc(target_stats, nontarget_stats, higher_is_target: bool = True) -> RocResult:
    """ROC of a statistic separating target from non-target classes; AUC by trapezoid.

    Pass ``higher_is_target=False`` for statistics where small values point at
    a target (reverse-engineered norms). If every value is identical the
    curve is the diagonal, AUC 0.5, and ``degenerate`` is set.
    """
    from sklearn.metrics import auc, roc_curve

    pos = np.asarray(target_stats, dtype=np.float64).ravel()
    neg = np.asarray(nontarget_stats, dtype=np.float64).ravel()
    if not len(pos) or not len(neg):
        raise ValueError("both statistic lists must be nonempty")
    scores = np.concatenate([pos, neg]) * (1.0 if higher_is_target else -1.0)
    labels = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
    if np.all(scores == scores[0]):
        return RocResult(np.array([0.0, 1.0]), np.array([0.0, 1.0]), np.array([np.inf, scores[0]]), 0.5, True)
    fpr, tpr, thr = roc_curve(labels, scores)
    return RocResult(fpr, tpr, thr, float(auc(fpr, tpr)), False)


def cs_class_sweep(train_set: LabeledDataset, class_counts: Sequence[int] = (2, 4, 6, 8, 10),
                   seed: int = 0, hidden=(256, 128), train_cfg: TrainConfig | None = None,
                   re_cfg: ReConfig | None = None, images_per_class: int = 5) -> list[dict]:
    """Mean CS over classes for clean classifiers on the first K classes, for each K."""
    train_cfg = train_cfg or TrainConfig(1e-3, 32, 20, "adam", seed)
    re_cfg = re_cfg or ReConfig(max_iters=200, seed=seed)
    classes = sorted(np.unique(train_set.y).tolist())
    if max(class_counts) > len(classes):
        raise ValueError(f"dataset has {len(classes)} classes, sweep needs {max(class_counts)}")
    rows = []
    for K in class_counts:
        ds = select_classes(train_set, classes[:K])
        f = train(ds.X, ds.y, [ds.n_features, *hidden, K], train_cfg)
        sets = detection_sets(ds, images_per_class, seed)
        cs = [cs_statistic(f, t, sets, re_cfg.with_(target_class=t), ds.shape) for t in range(K)]
        rows.append({"classes": K, "mean_cs": float(np.nanmean(cs)), "per_class": cs})
    return rows
