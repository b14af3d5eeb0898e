"""Backdoor patterns, embedding, training-set poisoning and attack evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import LabeledDataset
from .nn import Classifier, input_gradient, neg_log_posterior

ADDITIVE_PATTERNS = ("chessboard", "static", "L", "X", "pixel", "cross", "chessboard_patch", "square")
PATCH_PATTERNS = ("unicolor_patch", "noisy_patch")
PATTERNS = ADDITIVE_PATTERNS + PATCH_PATTERNS

# gray-scale localized patterns sit within this many pixels of a corner
CORNER_SLACK = 2
# patch-replacement patterns sit within this many pixels of the image border
MARGIN_SLACK = 2


@dataclass
class BackdoorPattern:
    """Additive perturbation ``v`` or binary mask / patch pair ``(m, u)`` (flat vectors).

    ``meta`` carries descriptive fields (pattern name, location, color) used
    for validation and reporting only.
    """

    kind: str
    v: np.ndarray | None = None
    m: np.ndarray | None = None
    u: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind == "additive":
            if self.v is None:
                raise ValueError("additive pattern needs v")
            self.v = np.asarray(self.v, dtype=np.float64).ravel()
            if not np.all(np.isfinite(self.v)):
                raise ValueError("v must be finite")
        elif self.kind == "patch":
            if self.m is None or self.u is None:
                raise ValueError("patch pattern needs m and u")
            self.m = np.asarray(self.m, dtype=np.float64).ravel()
            self.u = np.asarray(self.u, dtype=np.float64).ravel()
            if self.m.shape != self.u.shape:
                raise ValueError("mask and patch shapes differ")
            if not np.all((self.m == 0) | (self.m == 1)):
                raise ValueError("mask entries must be exactly 0 or 1")
            if not np.all(np.isfinite(self.u)) or self.u.min() < 0 or self.u.max() > 1:
                raise ValueError("patch values must lie in [0, 1]")
        else:
            raise ValueError(f"unknown pattern kind {self.kind!r}")

    @property
    def size(self) -> int:
        return len(self.v if self.kind == "additive" else self.m)

    @property
    def name(self) -> str:
        return self.meta.get("name", self.kind)

    @classmethod
    def additive(cls, v, **meta) -> "BackdoorPattern":
        return cls("additive", v=v, meta=meta)

    @classmethod
    def patch(cls, m, u, **meta) -> "BackdoorPattern":
        return cls("patch", m=m, u=u, meta=meta)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "meta": self.meta}
        for k in ("v", "m", "u"):
            if getattr(self, k) is not None:
                d[k] = getattr(self, k).tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BackdoorPattern":
        return cls(d["kind"], v=d.get("v"), m=d.get("m"), u=d.get("u"), meta=d.get("meta", {}))


def embed(x, p: BackdoorPattern, bounded: bool = True) -> np.ndarray:
    """Embed a pattern in one sample ``(n,)`` or a batch ``(B, n)``.

    Additive: ``[x + v]`` clamped to [0, 1] when ``bounded``.
    Patch: ``(1 - m) * x + m * u``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != p.size:
        raise ValueError(f"sample has {x.shape[-1]} values, pattern has {p.size}")
    if p.kind == "additive":
        out = x + p.v
        return np.clip(out, 0.0, 1.0) if bounded else out
    return (1.0 - p.m) * x + p.m * p.u


# -- pattern library --------------------------------------------------------------

def patch_side(image_side: int) -> int:
    """Patch edge length: 3 up to 32 px, then piecewise linear through (64, 4) and (96, 10)."""
    anchors_x, anchors_y = (32, 64, 96), (3, 4, 10)
    if image_side <= 32:
        return 3
    if image_side <= 96:
        return int(round(np.interp(image_side, anchors_x, anchors_y)))
    slope = (anchors_y[2] - anchors_y[1]) / (anchors_x[2] - anchors_x[1])
    return int(round(anchors_y[2] + slope * (image_side - 96)))


def _footprint(name: str) -> np.ndarray:
    """Boolean stencil of a localized additive pattern."""
    if name == "pixel":
        return np.ones((1, 1), dtype=bool)
    if name == "square":
        return np.ones((3, 3), dtype=bool)
    if name == "cross":
        s = np.zeros((3, 3), dtype=bool)
        s[1, :] = s[:, 1] = True
        return s
    if name == "X":
        return np.eye(3, dtype=bool) | np.eye(3, dtype=bool)[::-1]
    if name == "L":
        s = np.zeros((3, 3), dtype=bool)
        s[:, 0] = s[2, :] = True
        return s
    if name == "chessboard_patch":
        i, j = np.indices((4, 4))
        return (i + j) % 2 == 0
    raise KeyError(name)


def _split_shape(shape) -> tuple[int, int, int]:
    shape = tuple(shape)
    if len(shape) == 2:
        return shape[0], shape[1], 1
    if len(shape) == 3:
        return shape
    raise ValueError(f"patterns need an image shape (H, W) or (H, W, C), got {shape}")


def _place(rng, H, W, h, w, gray: bool) -> tuple[int, int]:
    """Top-left corner for an h x w stencil."""
    if h > H or w > W:
        raise ValueError(f"{h}x{w} footprint does not fit a {H}x{W} image")
    if not gray:
        return int(rng.integers(0, H - h + 1)), int(rng.integers(0, W - w + 1))
    corner = int(rng.integers(4))
    di = int(rng.integers(0, min(CORNER_SLACK, H - h) + 1))
    dj = int(rng.integers(0, min(CORNER_SLACK, W - w) + 1))
    i = di if corner in (0, 1) else H - h - di
    j = dj if corner in (0, 2) else W - w - dj
    return i, j


def _near_margin(rng, H, W, s) -> tuple[int, int]:
    """Top-left corner for an s x s patch with at least one edge near the border."""
    slack_i = min(MARGIN_SLACK, H - s)
    slack_j = min(MARGIN_SLACK, W - s)
    side = int(rng.integers(4))
    if side in (0, 1):  # top or bottom band
        d = int(rng.integers(0, slack_i + 1))
        i = d if side == 0 else H - s - d
        j = int(rng.integers(0, W - s + 1))
    else:  # left or right band
        d = int(rng.integers(0, slack_j + 1))
        j = d if side == 2 else W - s - d
        i = int(rng.integers(0, H - s + 1))
    return i, j


def make_pattern(name: str, domain_shape, seed: int) -> BackdoorPattern:
    """Build a library pattern for images of ``domain_shape`` ((H, W) or (H, W, C)).

    Location, channel and color choices are drawn from ``seed`` and then fixed.
    """
    if name not in PATTERNS:
        raise ValueError(f"unknown pattern {name!r}; choose from {PATTERNS}")
    H, W, C = _split_shape(domain_shape)
    gray = C == 1
    rng = np.random.default_rng(seed)
    img = np.zeros((H, W, C))
    meta: dict = {"name": name}

    if name in ("chessboard", "static"):
        i, j = np.indices((H, W))
        on = (i + j) % 2 == 1 if name == "chessboard" else (i % 2 == 0) & (j % 2 == 0)
        img[on] = 3 / 255
        return BackdoorPattern.additive(img.reshape(-1), **meta)

    if name in PATCH_PATTERNS:
        s = patch_side(max(H, W))
        if s > min(H, W):
            raise ValueError(f"{s}x{s} patch does not fit a {H}x{W} image")
        i, j = _near_margin(rng, H, W, s)
        m = np.zeros((H, W, C))
        m[i:i + s, j:j + s, :] = 1.0
        u = np.zeros((H, W, C))
        if name == "unicolor_patch":
            color = rng.uniform(0, 1, size=C)
            u[i:i + s, j:j + s, :] = color
            meta["color"] = color.tolist()
        else:
            u[i:i + s, j:j + s, :] = rng.uniform(0, 1, size=(s, s, C))
        meta["location"] = [i, j]
        meta["side"] = s
        return BackdoorPattern.patch(m.reshape(-1), u.reshape(-1), **meta)

    stencil = _footprint(name)
    h, w = stencil.shape
    i, j = _place(rng, H, W, h, w, gray)
    meta["location"] = [i, j]
    if name == "pixel":
        value, channels = (70 / 255 if gray else 50 / 255), slice(None)
    elif name == "chessboard_patch":
        value, channels = 5 / 255, slice(None)
    elif name in ("X", "square"):
        ch = int(rng.integers(C))
        value, channels = 50 / 255, slice(ch, ch + 1)
        meta["channel"] = ch
    else:  # L, cross
        value, channels = 50 / 255, slice(None)
    region = img[i:i + h, j:j + w, channels]
    region[stencil] = value
    return BackdoorPattern.additive(img.reshape(-1), **meta)


def check_dual_patterns(a: BackdoorPattern, b: BackdoorPattern, min_color_dist: float = 0.5) -> None:
    """Reject pattern pairs too alike to coexist in one 2-attack instance.

    Two additive patterns must have different shapes (library names); two
    unicolor patches must have colors at least ``min_color_dist`` apart (l2).
    """
    if a.kind == b.kind == "additive" and a.name == b.name:
        raise ValueError(f"both additive patterns have shape {a.name!r}")
    if a.name == b.name == "unicolor_patch":
        dist = float(np.linalg.norm(np.subtract(a.meta["color"], b.meta["color"])))
        if dist < min_color_dist:
            raise ValueError(f"unicolor patch colors only {dist:.3f} apart (< {min_color_dist})")


# -- poisoning ------------------------------------------------------------------

@dataclass
class PgdConfig:
    eps: float = 8 / 255
    steps: int = 10
    step_size: float = 1 / 255

    def __post_init__(self):
        if self.eps < 0 or self.steps < 0 or self.step_size <= 0:
            raise ValueError("PGD fields must be nonnegative (step_size positive)")


@dataclass
class AttackSpec:
    target_class: int
    pattern: BackdoorPattern
    n_poison: int
    clean_label: bool = False
    pgd: PgdConfig = field(default_factory=PgdConfig)
    source_classes: tuple | None = None

    def __post_init__(self):
        if self.n_poison < 0:
            raise ValueError("n_poison must be nonnegative")
        if isinstance(self.pgd, dict):
            self.pgd = PgdConfig(**self.pgd)

    def to_dict(self) -> dict:
        return {"target_class": self.target_class, "pattern": self.pattern.to_dict(),
                "n_poison": self.n_poison, "clean_label": self.clean_label,
                "pgd": vars(self.pgd), "source_classes": self.source_classes}


@dataclass
class PoisonReport:
    inserted_count: int
    poisoning_rate: float
    source_indices: np.ndarray
    target_class: int

    def to_dict(self) -> dict:
        return {"inserted_count": self.inserted_count, "poisoning_rate": self.poisoning_rate,
                "source_indices": np.asarray(self.source_indices).tolist(),
                "target_class": self.target_class}


def _rate(inserted: int, target_count_after: int) -> float:
    return inserted / target_count_after if target_count_after else 0.0


def poison_dataset(train: LabeledDataset, spec: AttackSpec, seed: int,
                   exclude: np.ndarray | None = None) -> tuple[LabeledDataset, PoisonReport]:
    """Dirty-label poisoning: append ``n_poison`` embedded source-class samples labeled target.

    Sources are drawn without replacement from classes other than the target
    (or from ``spec.source_classes``); indices in ``exclude`` are never drawn.
    """
    if spec.clean_label:
        raise ValueError("clean-label specs go through clean_label_poison")
    if spec.n_poison == 0:
        return train, PoisonReport(0, 0.0, np.zeros(0, dtype=np.intp), spec.target_class)
    ok = train.y != spec.target_class
    if spec.source_classes is not None:
        ok &= np.isin(train.y, spec.source_classes)
    if exclude is not None:
        ok[np.asarray(exclude, dtype=np.intp)] = False
    pool = np.flatnonzero(ok)
    if len(pool) < spec.n_poison:
        raise ValueError(f"only {len(pool)} source samples for {spec.n_poison} poisons")
    src = np.sort(np.random.default_rng(seed).choice(pool, size=spec.n_poison, replace=False))
    Xp = embed(train.X[src], spec.pattern, train.bounded)
    poisoned = train.concat(LabeledDataset(Xp, np.full(len(src), spec.target_class),
                                           train.shape, train.bounded))
    n_target = int(np.sum(poisoned.y == spec.target_class))
    return poisoned, PoisonReport(len(src), _rate(len(src), n_target), src, spec.target_class)


def pgd_untargeted(f: Classifier, X, labels, cfg: PgdConfig, bounded: bool = True) -> np.ndarray:
    """Sign-gradient ascent on cross-entropy of the true label inside an l-inf ball.

    Each sample stops moving once ``f`` misclassifies it.
    """
    X0 = np.asarray(X, dtype=np.float64).reshape(len(X), -1)
    if X0.shape[1] != f.n_inputs:
        raise ValueError(f"samples have {X0.shape[1]} features, surrogate expects {f.n_inputs}")
    labels = np.broadcast_to(np.asarray(labels), (len(X0),))
    Xa = X0.copy()
    for _ in range(cfg.steps):
        live = f.predict(Xa) == labels
        if not live.any():
            break
        g = input_gradient(f, Xa[live], neg_log_posterior(labels[live]))
        step = Xa[live] + cfg.step_size * np.sign(g)
        step = np.clip(step, X0[live] - cfg.eps, X0[live] + cfg.eps)
        Xa[live] = np.clip(step, 0.0, 1.0) if bounded else step
    return Xa


def clean_label_poison(train: LabeledDataset, spec: AttackSpec, surrogate: Classifier,
                       seed: int) -> tuple[LabeledDataset, PoisonReport]:
    """Clean-label poisoning: PGD-perturb target-class samples on a surrogate, embed, keep labels.

    The perturbed copies are appended; original samples are left untouched.
    """
    if not spec.clean_label:
        raise ValueError("spec is not clean-label")
    if surrogate.n_inputs != train.n_features:
        raise ValueError("surrogate input dimension does not match the dataset")
    pool = np.flatnonzero(train.y == spec.target_class)
    if len(pool) < spec.n_poison:
        raise ValueError(f"only {len(pool)} target-class samples for {spec.n_poison} poisons")
    src = np.sort(np.random.default_rng(seed).choice(pool, size=spec.n_poison, replace=False))
    if len(src) == 0:
        return train, PoisonReport(0, 0.0, src, spec.target_class)
    Xa = pgd_untargeted(surrogate, train.X[src], spec.target_class, spec.pgd, train.bounded)
    Xp = embed(Xa, spec.pattern, train.bounded)
    poisoned = train.concat(LabeledDataset(Xp, np.full(len(src), spec.target_class),
                                           train.shape, train.bounded))
    n_target = int(np.sum(poisoned.y == spec.target_class))
    return poisoned, PoisonReport(len(src), _rate(len(src), n_target), src, spec.target_class)


def poison_multi(train: LabeledDataset, specs: Sequence[AttackSpec], seed: int,
                 surrogate: Classifier | None = None) -> tuple[LabeledDataset, list[PoisonReport]]:
    """Apply several attacks; every poison is built from an original (clean) sample.

    Rates are recomputed against the final target-class counts.
    """
    n_orig = len(train)
    out = train
    reports = []
    used = np.zeros(0, dtype=np.intp)
    for k, spec in enumerate(specs):
        sub_seed = int(np.random.default_rng([seed, k]).integers(2 ** 63))
        base = LabeledDataset(out.X[:n_orig], out.y[:n_orig], out.shape, out.bounded)
        if spec.clean_label:
            if surrogate is None:
                raise ValueError("clean-label attack needs a surrogate classifier")
            new, rep = clean_label_poison(base, spec, surrogate, sub_seed)
        else:
            new, rep = poison_dataset(base, spec, sub_seed, exclude=used)
        used = np.union1d(used, rep.source_indices)
        out = out.concat(new.subset(np.arange(n_orig, len(new))))
        reports.append(rep)
    for rep in reports:
        rep.poisoning_rate = _rate(rep.inserted_count, int(np.sum(out.y == rep.target_class)))
    return out, reports


# -- evaluation -----------------------------------------------------------------

def eval_acc(f: Classifier, test: LabeledDataset) -> float:
    if len(test) == 0:
        raise ValueError("empty test set")
    return float(np.mean(f.predict(test.X) == test.y))


def eval_asr(f: Classifier, test: LabeledDataset, spec: AttackSpec) -> float:
    """Fraction of source-class test samples sent to the target once the pattern is embedded."""
    src = test.y != spec.target_class
    if spec.source_classes is not None:
        src &= np.isin(test.y, spec.source_classes)
    if not src.any():
        raise ValueError("no source-class test samples")
    Xp = embed(test.X[src], spec.pattern, test.bounded)
    return float(np.mean(f.predict(Xp) == spec.target_class))
