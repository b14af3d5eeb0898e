"""Classification domains: IDX ingestion, 2-class domains, synthetic subspace data."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


@dataclass
class LabeledDataset:
    """Flat float64 samples ``X`` (N, n) with integer labels.

    ``shape`` is the per-sample shape (``(28, 28)`` for gray images,
    ``(H, W, C)`` for color); ``X[k].reshape(shape)`` recovers sample ``k``.
    """

    X: np.ndarray
    y: np.ndarray
    shape: tuple = ()
    bounded: bool = False

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim == 1:
            self.X = self.X[:, None]
        self.X = self.X.reshape(len(self.X), -1)
        self.y = np.asarray(self.y, dtype=np.intp).ravel()
        if len(self.X) != len(self.y):
            raise ValueError(f"{len(self.X)} samples but {len(self.y)} labels")
        self.shape = tuple(self.shape) or (self.X.shape[1],)
        if int(np.prod(self.shape)) != self.X.shape[1]:
            raise ValueError(f"sample shape {self.shape} does not hold {self.X.shape[1]} values")
        if not np.all(np.isfinite(self.X)):
            raise ValueError("non-finite sample values")
        if self.bounded and self.X.size and (self.X.min() < 0.0 or self.X.max() > 1.0):
            raise ValueError("bounded dataset has values outside [0, 1]")
        if len(self.y) and self.y.min() < 0:
            raise ValueError("labels must be nonnegative")

    def __len__(self):
        return len(self.y)

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.y)

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx)
        return LabeledDataset(self.X[idx], self.y[idx], self.shape, self.bounded)

    def of_class(self, c: int) -> np.ndarray:
        return self.X[self.y == c]

    def concat(self, other: "LabeledDataset") -> "LabeledDataset":
        if other.shape != self.shape:
            raise ValueError("cannot concatenate datasets of different sample shape")
        return LabeledDataset(np.concatenate([self.X, other.X]),
                              np.concatenate([self.y, other.y]),
                              self.shape, self.bounded and other.bounded)


# -- IDX ------------------------------------------------------------------------

def _open(path):
    path = os.fspath(path)
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")


def _read_idx(path, magic: int, ndim: int) -> np.ndarray:
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4 + 4 * ndim:
        raise IdxFormatError(f"{path}: truncated header")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise IdxFormatError(f"{path}: bad magic number 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    body = raw[4 + 4 * ndim:]
    if len(body) != int(np.prod(dims)):
        raise IdxFormatError(f"{path}: expected {int(np.prod(dims))} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path) -> LabeledDataset:
    """Read an (images, labels) IDX pair; pixels are scaled by 1/255."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise IdxFormatError(f"{len(images)} images but {len(labels)} labels")
    n, rows, cols = images.shape
    return LabeledDataset(images.reshape(n, rows * cols) / 255.0, labels.astype(np.intp),
                          (rows, cols), bounded=True)


def write_idx(ds: LabeledDataset, images_path, labels_path) -> None:
    """Write a gray-image dataset as IDX; values are quantized to round(255 x).

    Datasets whose values are multiples of 1/255 (anything read by
    :func:`load_idx`) round-trip exactly.
    """
    if len(ds.shape) != 2:
        raise ValueError("IDX export supports 2-D (gray) samples only")
    if ds.X.size and (ds.X.min() < 0 or ds.X.max() > 1):
        raise ValueError("values must lie in [0, 1]")
    if len(ds) and ds.y.max() > 255:
        raise ValueError("labels must fit in one byte")
    pixels = np.rint(ds.X * 255.0).astype(np.uint8)
    rows, cols = ds.shape
    for path, magic, dims, body in (
        (images_path, IDX_IMAGES_MAGIC, (len(ds), rows, cols), pixels.tobytes()),
        (labels_path, IDX_LABELS_MAGIC, (len(ds),), ds.y.astype(np.uint8).tobytes()),
    ):
        opener = gzip.open if os.fspath(path).endswith(".gz") else open
        with opener(path, "wb") as fh:
            fh.write(struct.pack(">I", magic) + struct.pack(f">{len(dims)}I", *dims) + body)


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def load_mnist_dir(directory, split: str) -> LabeledDataset:
    """Load ``split`` ("train" / "test") from a directory of MNIST-named IDX files."""
    directory = Path(directory)
    img, lab = MNIST_FILES[split]
    for suffix in ("", ".gz"):
        if (directory / (img + suffix)).exists():
            return load_idx(directory / (img + suffix), directory / (lab + suffix))
    raise FileNotFoundError(f"no {img}[.gz] in {directory}")


def export_mnist_subset(directory, test_per_class: int = 100, seed: int = 0) -> Path:
    """Write the 5000-image MNIST subset bundled with mlxtend as IDX files.

    The subset holds 500 training-set images per digit; ``test_per_class`` of
    them per digit (chosen with ``seed``) become the held-out test split. File
    names follow the MNIST convention so :func:`load_mnist_dir` reads them.
    """
    from mlxtend.data import mnist_data

    X, y = mnist_data()
    rng = np.random.default_rng(seed)
    test_mask = np.zeros(len(y), dtype=bool)
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        test_mask[rng.choice(idx, size=test_per_class, replace=False)] = True
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for split, mask in (("train", ~test_mask), ("test", test_mask)):
        ds = LabeledDataset(X[mask] / 255.0, y[mask], (28, 28), bounded=True)
        img, lab = MNIST_FILES[split]
        write_idx(ds, directory / img, directory / lab)
    return directory


# -- 2-class and K-class domains ---------------------------------------------------

@dataclass
class TwoClassDomainSpec:
    """Either a class pair or two disjoint groups of source classes."""

    group0: tuple
    group1: tuple
    source: str = ""
    seed: int | None = None

    def __post_init__(self):
        self.group0 = tuple(int(c) for c in np.atleast_1d(self.group0))
        self.group1 = tuple(int(c) for c in np.atleast_1d(self.group1))
        if not self.group0 or not self.group1:
            raise ValueError("both groups must be nonempty")
        if set(self.group0) & set(self.group1):
            raise ValueError(f"groups overlap: {sorted(set(self.group0) & set(self.group1))}")

    @property
    def mode(self) -> str:
        return "pair" if len(self.group0) == len(self.group1) == 1 else "super_class"

    @classmethod
    def pair(cls, class_a: int, class_b: int, source: str = "") -> "TwoClassDomainSpec":
        return cls((class_a,), (class_b,), source)

    @classmethod
    def random_pair(cls, classes: Sequence[int], seed: int, source: str = "") -> "TwoClassDomainSpec":
        a, b = np.random.default_rng(seed).choice(np.asarray(classes), size=2, replace=False)
        return cls((int(a),), (int(b),), source, seed)

    @classmethod
    def random_split(cls, classes: Sequence[int], seed: int, per_group: int | None = None,
                     source: str = "") -> "TwoClassDomainSpec":
        """Randomly and evenly divide ``classes`` (or a random ``2 * per_group`` of them)."""
        classes = np.asarray(classes)
        k = per_group if per_group is not None else len(classes) // 2
        if 2 * k > len(classes) or k < 1:
            raise ValueError("not enough classes for two nonempty groups")
        perm = np.random.default_rng(seed).permutation(classes)[:2 * k]
        return cls(tuple(sorted(perm[:k])), tuple(sorted(perm[k:])), source, seed)

    def to_dict(self) -> dict:
        return {"group0": list(self.group0), "group1": list(self.group1),
                "source": self.source, "seed": self.seed}


def make_two_class_domain(ds: LabeledDataset, spec: TwoClassDomainSpec) -> LabeledDataset:
    """Keep samples of the two groups and relabel them 0 / 1."""
    present = set(ds.classes.tolist())
    missing = (set(spec.group0) | set(spec.group1)) - present
    if missing:
        raise ValueError(f"classes {sorted(missing)} not in dataset")
    in0 = np.isin(ds.y, spec.group0)
    in1 = np.isin(ds.y, spec.group1)
    keep = in0 | in1
    return LabeledDataset(ds.X[keep], in1[keep].astype(np.intp), ds.shape, ds.bounded)


def select_classes(ds: LabeledDataset, classes: Sequence[int]) -> LabeledDataset:
    """K-class sub-domain; ``classes[k]`` is relabeled ``k``."""
    classes = [int(c) for c in classes]
    if len(set(classes)) != len(classes):
        raise ValueError("duplicate classes")
    lookup = {c: k for k, c in enumerate(classes)}
    keep = np.isin(ds.y, classes)
    if set(classes) - set(ds.y[keep].tolist()):
        raise ValueError("some requested classes are absent")
    y = np.array([lookup[c] for c in ds.y[keep]], dtype=np.intp)
    return LabeledDataset(ds.X[keep], y, ds.shape, ds.bounded)


def detection_sets(ds: LabeledDataset, per_class: int, seed: int,
                   classes: Sequence[int] | None = None) -> dict[int, np.ndarray]:
    """Draw ``per_class`` samples of each class (without replacement)."""
    rng = np.random.default_rng(seed)
    out = {}
    for c in (classes if classes is not None else ds.classes):
        pool = np.flatnonzero(ds.y == c)
        if len(pool) < per_class:
            raise ValueError(f"class {c} has {len(pool)} samples, need {per_class}")
        out[int(c)] = ds.X[np.sort(rng.choice(pool, size=per_class, replace=False))]
    return out


# -- latent distributions and the subspace domain ---------------------------------

@dataclass
class LatentDist:
    """Gaussian ``{mean, cov}`` or per-coordinate uniform ``{lo, hi}`` on R^d."""

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind == "gaussian":
            mean = np.atleast_1d(np.asarray(self.params["mean"], dtype=np.float64))
            cov = np.asarray(self.params.get("cov", np.eye(len(mean))), dtype=np.float64)
            cov = np.atleast_2d(cov) if cov.ndim else cov * np.eye(len(mean))
            if cov.shape != (len(mean), len(mean)) or np.any(np.linalg.eigvalsh(cov) <= 0):
                raise ValueError("cov must be a positive definite d x d matrix")
            self.params = {"mean": mean, "cov": cov}
        elif self.kind == "uniform":
            lo = np.atleast_1d(np.asarray(self.params["lo"], dtype=np.float64))
            hi = np.atleast_1d(np.asarray(self.params["hi"], dtype=np.float64))
            if lo.shape != hi.shape or np.any(hi <= lo):
                raise ValueError("uniform needs lo < hi coordinatewise")
            self.params = {"lo": lo, "hi": hi}
        else:
            raise ValueError(f"unknown latent distribution {self.kind!r}")

    @classmethod
    def gaussian(cls, mean, cov=None) -> "LatentDist":
        mean = np.atleast_1d(mean)
        return cls("gaussian", {"mean": mean, "cov": np.eye(len(mean)) if cov is None else cov})

    @classmethod
    def uniform(cls, lo, hi) -> "LatentDist":
        return cls("uniform", {"lo": lo, "hi": hi})

    @property
    def dim(self) -> int:
        return len(self.params["mean" if self.kind == "gaussian" else "lo"])

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.kind == "gaussian":
            return rng.multivariate_normal(self.params["mean"], self.params["cov"], size=size,
                                           method="cholesky")
        return rng.uniform(self.params["lo"], self.params["hi"], size=(size, self.dim))

    @property
    def cdf_at_zero(self) -> float:
        """G(0) for one-dimensional distributions."""
        if self.dim != 1:
            raise ValueError("G(0) is defined here for d = 1 only")
        if self.kind == "gaussian":
            from scipy.stats import norm
            return float(norm.cdf(0.0, self.params["mean"][0], np.sqrt(self.params["cov"][0, 0])))
        lo, hi = self.params["lo"][0], self.params["hi"][0]
        return float(np.clip((0.0 - lo) / (hi - lo), 0.0, 1.0))

    def to_dict(self) -> dict:
        return {"kind": self.kind, **{k: v.tolist() for k, v in self.params.items()}}


def orthonormal_bases(n: int, d: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Split a random orthonormal basis of R^n into A (n x d) and B (n x (n - d))."""
    if not 1 <= d < n:
        raise ValueError("need 1 <= d < n")
    Q, R = np.linalg.qr(np.random.default_rng(seed).standard_normal((n, n)))
    Q = Q * np.sign(np.diag(R))
    return Q[:, :d], Q[:, d:]


def check_bases(A: np.ndarray, B: np.ndarray, tol: float = 1e-10) -> None:
    n, d = A.shape
    if B.shape != (n, n - d):
        raise ValueError(f"B must be {n} x {n - d}")
    if (np.abs(A.T @ A - np.eye(d)).max() > tol or np.abs(B.T @ B - np.eye(n - d)).max() > tol
            or np.abs(A.T @ B).max() > tol):
        raise ValueError("bases are not orthonormal / mutually orthogonal")


@dataclass
class SubspaceDomainSpec:
    A: np.ndarray
    B: np.ndarray
    G0: LatentDist
    G1: LatentDist

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.B = np.asarray(self.B, dtype=np.float64)
        check_bases(self.A, self.B)
        if self.G0.dim != self.d or self.G1.dim != self.n - self.d:
            raise ValueError("latent distribution dims must be d and n - d")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def d(self) -> int:
        return self.A.shape[1]

    @classmethod
    def random(cls, n: int, d: int, seed: int, G0: LatentDist | None = None,
               G1: LatentDist | None = None) -> "SubspaceDomainSpec":
        A, B = orthonormal_bases(n, d, seed)
        return cls(A, B, G0 or LatentDist.gaussian(np.zeros(d)),
                   G1 or LatentDist.gaussian(np.zeros(n - d)))


def sample_subspace_domain(spec: SubspaceDomainSpec, n_per_class: int, seed: int) -> LabeledDataset:
    """Class 0 samples ``A c`` with ``c ~ G0``; class 1 samples ``B e`` with ``e ~ G1``."""
    rng = np.random.default_rng(seed)
    X0 = spec.G0.sample(rng, n_per_class) @ spec.A.T
    X1 = spec.G1.sample(rng, n_per_class) @ spec.B.T
    y = np.repeat([0, 1], n_per_class)
    return LabeledDataset(np.vstack([X0, X1]), y, (spec.n,), bounded=False)
