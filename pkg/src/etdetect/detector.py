"""Transferable-set estimation, the ET statistic and the 1/2-threshold decision.

For a putative target ``t`` and detection samples ``x_1..x_N`` not of class
``t``, each sample repeatedly reverse-engineers a pattern toward ``t`` from a
fresh random start. Every successful pattern is embedded in the other
``N - 1`` samples and those sent to ``t`` join the sample's transferable
set. A sample stops once its set has not changed for ``tau`` consecutive
attempts. ``p_n = |T_n| / (N - 1)`` and ``ET = mean(p_n)``; class ``t`` is
flagged as a backdoor target when ``ET > 1/2``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .attacks import embed
from .nn import Classifier
from .reveng import ReConfig, cs_statistic, re_ap_batch, re_ap_group, re_pr_batch, re_pr_group

THRESHOLD = 0.5


def attempt_seed(seed: int, t: int, sample: int, attempt: int) -> int:
    """Independent RNG seed per (run seed, target, sample, attempt)."""
    return int(np.random.SeedSequence([seed, t, sample, attempt]).generate_state(1, np.uint64)[0])


@dataclass
class TransferMatrix:
    """``t[a, b]``: sample ``b`` was sent to the target by a pattern found for sample ``a``."""

    t: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=bool)
        if self.t.ndim != 2 or self.t.shape[0] != self.t.shape[1]:
            raise ValueError("transfer matrix must be square")
        if self.n < 2:
            raise ValueError("need at least two samples")

    @property
    def n(self) -> int:
        return self.t.shape[0]

    def _offdiag(self) -> np.ndarray:
        return self.t & ~np.eye(self.n, dtype=bool)

    def p(self) -> np.ndarray:
        return self._offdiag().sum(axis=1) / (self.n - 1)

    def et(self) -> float:
        return float(self.p().mean())

    def pair_counts(self) -> tuple[int, int, int]:
        """(mutual, mutually non-transferable, one-way) counts over unordered pairs."""
        T = self._offdiag()
        iu = np.triu_indices(self.n, k=1)
        fwd, bwd = T[iu], T.T[iu]
        mutual = int(np.sum(fwd & bwd))
        neither = int(np.sum(~fwd & ~bwd))
        return mutual, neither, len(fwd) - mutual - neither

    def pmt_pnt(self) -> tuple[float, float]:
        M, Nn, O = self.pair_counts()
        P = M + Nn + O
        return M / P, Nn / P


@dataclass
class EtEstimate:
    matrix: TransferMatrix
    curves: list = field(default_factory=list)
    attempts: np.ndarray | None = None
    successes: np.ndarray | None = None

    @property
    def p(self) -> np.ndarray:
        return self.matrix.p()

    @property
    def et(self) -> float:
        return self.matrix.et()

    @property
    def pmt_hat(self) -> float:
        return self.matrix.pmt_pnt()[0]

    @property
    def pnt_hat(self) -> float:
        return self.matrix.pmt_pnt()[1]

    @property
    def flagged(self) -> np.ndarray:
        """Samples for which no reverse-engineering attempt succeeded."""
        return np.flatnonzero(self.successes == 0) if self.successes is not None else np.zeros(0, int)


def estimate_et(f: Classifier, X, cfg: ReConfig, tau: int = 4, re_kind: str = "ap",
                seed: int | None = None, shape=None, max_attempts: int | None = None) -> EtEstimate:
    """Transferable-set estimation toward ``cfg.target_class`` on detection samples ``X``.

    All still-running samples advance one attempt per round in a single
    batched solve; attempt ``k`` of sample ``n`` always uses
    ``attempt_seed(seed, t, n, k)`` so results do not depend on batching.
    Failed attempts count as "unchanged". A sample whose set already holds
    every other sample stops early (its set can no longer change). Each sample
    makes at most ``max_attempts`` attempts, ``(N - 1) * tau`` by default.
    """
    X = np.asarray(X, dtype=np.float64).reshape(-1, f.n_inputs)
    N = len(X)
    if N < 2:
        raise ValueError("ET needs at least two detection samples")
    if tau < 1:
        raise ValueError("tau must be positive")
    if re_kind not in ("ap", "pr"):
        raise ValueError(f"unknown reverse-engineering kind {re_kind!r}")
    t = cfg.target_class
    seed = cfg.seed if seed is None else seed
    cap = (N - 1) * tau if max_attempts is None else max_attempts
    T = np.zeros((N, N), dtype=bool)
    unchanged = np.zeros(N, dtype=np.intp)
    attempts = np.zeros(N, dtype=np.intp)
    successes = np.zeros(N, dtype=np.intp)
    curves: list[list[float]] = [[] for _ in range(N)]
    active = np.arange(N)
    while len(active):
        seeds = [attempt_seed(seed, t, int(i), int(attempts[i])) for i in active]
        if re_kind == "ap":
            sols = re_ap_batch(f, X[active], cfg, seeds)
        else:
            sols = re_pr_batch(f, X[active], cfg, seeds, shape)
        for i, sol in zip(active, sols):
            attempts[i] += 1
            changed = False
            if sol.success:
                successes[i] += 1
                sent = f.predict(embed(X, sol.pattern, bounded=cfg.clip)) == t
                sent[i] = False
                new = sent & ~T[i]
                if new.any():
                    T[i] |= new
                    changed = True
            unchanged[i] = 0 if changed else unchanged[i] + 1
            curves[i].append(float(T[i].sum() / (N - 1)))
        full = T.sum(axis=1) == N - 1
        keep = (unchanged[active] < tau) & (attempts[active] < cap) & ~full[active]
        active = active[keep]
    return EtEstimate(TransferMatrix(T), curves, attempts, successes)


# -- detection ------------------------------------------------------------------

@dataclass
class ClassResult:
    target: int
    et: float
    p: np.ndarray
    n_used: int
    n_dropped: int
    estimate: EtEstimate | None = None
    baselines: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {"class": self.target, "et": self.et, "p": np.asarray(self.p).tolist(),
             "n_used": self.n_used, "n_dropped": self.n_dropped, "baselines": self.baselines}
        if self.estimate is not None:
            M, Nn, O = self.estimate.matrix.pair_counts()
            d["pair_counts"] = {"mutual": M, "non_transferable": Nn, "one_way": O}
            d["flagged_samples"] = self.estimate.flagged.tolist()
        return d


@dataclass
class DetectionReport:
    classes: list
    config_echo: dict = field(default_factory=dict)
    seed: int = 0

    @property
    def ba_targets(self) -> list[int]:
        return [c.target for c in self.classes if c.et > THRESHOLD]

    @property
    def attacked(self) -> bool:
        return bool(self.ba_targets)

    @property
    def max_et(self) -> float:
        return max(c.et for c in self.classes)

    def et_of(self, target: int) -> float:
        return next(c.et for c in self.classes if c.target == target)

    def to_dict(self) -> dict:
        return {"attacked": self.attacked, "ba_targets": self.ba_targets,
                "classes": [c.to_dict() for c in self.classes],
                "config_echo": self.config_echo, "seed": self.seed}

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def _pool_for_target(f: Classifier, sets: Mapping[int, np.ndarray], t: int):
    """Stack detection samples of every class but ``t``, dropping misclassified ones."""
    kept, dropped = [], 0
    for c, Xc in sorted(sets.items()):
        if c == t:
            continue
        Xc = np.asarray(Xc, dtype=np.float64).reshape(-1, f.n_inputs)
        ok = f.predict(Xc) == c
        kept.append(Xc[ok])
        dropped += int((~ok).sum())
    return (np.concatenate(kept) if kept else np.zeros((0, f.n_inputs))), dropped


def detect_multi_class(f: Classifier, sets: Mapping[int, np.ndarray], cfg: ReConfig,
                       tau: int = 4, re_kind: str = "ap", seed: int = 0, shape=None,
                       baselines: bool = False) -> DetectionReport:
    """One ET per putative target, computed on the pooled samples of all other classes."""
    if len(sets) < 2:
        raise ValueError("need detection sets for at least two classes")
    results = []
    for t in sorted(sets):
        pooled, dropped = _pool_for_target(f, sets, t)
        est = estimate_et(f, pooled, cfg.with_(target_class=t), tau, re_kind, seed, shape)
        res = ClassResult(t, est.et, est.p, len(pooled), dropped, est)
        if baselines:
            res.baselines = baseline_stats(f, sets, t, cfg.with_(target_class=t, seed=seed), shape)
        results.append(res)
    echo = {"re_kind": re_kind, "tau": tau, "re": cfg.to_dict(),
            "images_per_class": {int(c): len(X) for c, X in sets.items()}}
    return DetectionReport(results, echo, seed)


def detect_two_class(f: Classifier, D0, D1, cfg: ReConfig, tau: int = 4, re_kind: str = "ap",
                     seed: int = 0, shape=None, baselines: bool = False) -> DetectionReport:
    return detect_multi_class(f, {0: D0, 1: D1}, cfg, tau, re_kind, seed, shape, baselines)


def baseline_stats(f: Classifier, sets: Mapping[int, np.ndarray], t: int, cfg: ReConfig,
                   shape=None) -> dict:
    """Group-wise RE-AP l2 norm, group-wise RE-PR mask l1 norm and the CS statistic for ``t``.

    A statistic whose reverse engineering fails is reported as ``None`` and
    listed under ``"failed"``.
    """
    cfg = cfg.with_(target_class=t)
    pooled, _ = _pool_for_target(f, sets, t)
    out: dict = {"failed": []}
    if len(pooled) == 0:
        return {"l2_norm": None, "l1_norm": None, "cs": None, "failed": ["l2_norm", "l1_norm", "cs"]}
    ap = re_ap_group(f, pooled, cfg)
    out["l2_norm"] = ap.norm if ap.success else None
    pr = re_pr_group(f, pooled, cfg, shape)
    out["l1_norm"] = pr.norm if pr.success else None
    cs, used, excluded = cs_statistic(f, t, dict(sets), cfg, shape, return_counts=True)
    out["cs"] = cs if used else None
    out["cs_excluded"] = excluded
    out["failed"] = [k for k in ("l2_norm", "l1_norm", "cs") if out[k] is None]
    return out


# statistics for which a *small* value points at a backdoor target
LOW_SIDE = {"l2_norm", "l1_norm"}


def mad_anomaly(stats: Mapping[int, float], threshold: float = 2.0, side: str = "low"):
    """Median-absolute-deviation outlier test over per-class statistics.

    Returns ``(anomalous classes, degenerate)``. A class is anomalous when
    ``|x - median| / (1.4826 MAD) > threshold`` and ``x`` lies on ``side``
    ("low" or "high") of the median. ``MAD = 0`` is degenerate: no anomalies.
    """
    if side not in ("low", "high"):
        raise ValueError("side must be 'low' or 'high'")
    if len(stats) < 3:
        raise ValueError("MAD needs at least three classes")
    keys = sorted(stats)
    x = np.array([stats[k] for k in keys], dtype=np.float64)
    med = np.median(x)
    mad = np.median(np.abs(x - med))
    if mad == 0:
        return set(), True
    score = np.abs(x - med) / (1.4826 * mad)
    on_side = x < med if side == "low" else x > med
    return {k for k, s, o in zip(keys, score, on_side) if s > threshold and o}, False
