"""Two-subspace toy model where ET on a clean classifier is provably at most 1/2.

Class 0 lives on ``{A c}`` and class 1 on ``{B e}`` for complementary
orthonormal bases ``A`` (n x d) and ``B`` (n x (n - d)). The nearest-prototype
classifier labels ``x`` class 0 iff ``|A^T x|^2 > |B^T x|^2``. For a class-0
point ``A c`` the smallest perturbation reaching the boundary has ``A``-part
``-c / 2`` and a ``B``-part of norm ``|c| / 2``; it moves ``A c'`` across iff
``|c' - c / 2| <= |c / 2|``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import LatentDist, check_bases, orthonormal_bases


@dataclass
class ToyClassifier:
    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.B = np.asarray(self.B, dtype=np.float64)
        check_bases(self.A, self.B)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def d(self) -> int:
        return self.A.shape[1]

    @classmethod
    def random(cls, n: int, d: int, seed: int) -> "ToyClassifier":
        return cls(*orthonormal_bases(n, d, seed))


def quadratic_form(tc: ToyClassifier, x) -> np.ndarray:
    """``x^T (A A^T - B B^T) x`` for one sample or a batch."""
    x = np.asarray(x, dtype=np.float64)
    return np.sum((x @ tc.A) ** 2, axis=-1) - np.sum((x @ tc.B) ** 2, axis=-1)


def prototype_classify(tc: ToyClassifier, x):
    """0 when the quadratic form is positive, else 1 (the boundary goes to class 1)."""
    q = quadratic_form(tc, x)
    out = np.where(q > 0, 0, 1)
    return int(out) if np.ndim(out) == 0 else out


def optimal_perturbation(tc: ToyClassifier, c, direction=None) -> np.ndarray:
    """Minimal perturbation moving ``A c`` onto the decision boundary.

    ``direction`` (a vector in R^(n-d), normalized here) orients the ``B``
    part; the first column of ``B`` is used by default. ``|v| = |c| / sqrt(2)``.
    """
    c = np.atleast_1d(np.asarray(c, dtype=np.float64))
    norm_c = np.linalg.norm(c)
    if norm_c == 0:
        raise ValueError("c = 0 already sits on the decision boundary")
    if direction is None:
        vb = np.zeros(tc.n - tc.d)
        vb[0] = norm_c / 2
    else:
        direction = np.asarray(direction, dtype=np.float64)
        vb = direction * (norm_c / 2 / np.linalg.norm(direction))
    return tc.A @ (-c / 2) + tc.B @ vb


def transfer_condition(c, c_prime) -> np.ndarray | bool:
    """``|c' - c/2| <= |c/2|``, i.e. ``c'.(c' - c) <= 0``; rows are pairs for batched input."""
    c = np.asarray(c, dtype=np.float64)
    cp = np.asarray(c_prime, dtype=np.float64)
    out = np.sum(cp * (cp - c), axis=-1) <= 0
    return bool(out) if np.ndim(out) == 0 else out


def simulate_transfer(tc: ToyClassifier, c, c_prime, direction=None) -> np.ndarray:
    """Embed the optimal perturbation for ``c`` in ``A c'`` and classify (batched over rows)."""
    c = np.atleast_2d(np.asarray(c, dtype=np.float64))
    cp = np.atleast_2d(np.asarray(c_prime, dtype=np.float64))
    norms = np.linalg.norm(c, axis=1)
    if np.any(norms == 0):
        raise ValueError("c = 0 already sits on the decision boundary")
    if direction is None:
        u = np.zeros(tc.n - tc.d)
        u[0] = 1.0
    else:
        u = np.asarray(direction, dtype=np.float64)
        u = u / np.linalg.norm(u)
    V = (-c / 2) @ tc.A.T + np.outer(norms / 2, tc.B @ u)
    return prototype_classify(tc, cp @ tc.A.T + V) == 1


def et_closed_form_d1(g0: float) -> float:
    """ET for d = 1 given ``G(0)``: ``1/2 - G(0) + G(0)^2``."""
    if not 0.0 <= g0 <= 1.0:
        raise ValueError("G(0) must lie in [0, 1]")
    return 0.5 - g0 + g0 * g0


def et_monte_carlo(dist: LatentDist, n_pairs: int, seed: int, tc: ToyClassifier | None = None,
                   batch: int = 100_000) -> tuple[float, float]:
    """Estimate ET from i.i.d. latent pairs; returns ``(estimate, standard error)``.

    With ``tc`` the transfer of each pair is decided by embedding and
    classifying, otherwise by :func:`transfer_condition`.
    """
    if n_pairs < 1000:
        raise ValueError("use at least 1000 pairs")
    rng = np.random.default_rng(seed)
    hits = 0
    left = n_pairs
    while left:
        k = min(left, batch)
        c, cp = dist.sample(rng, k), dist.sample(rng, k)
        ok = simulate_transfer(tc, c, cp) if tc is not None else transfer_condition(c, cp)
        hits += int(np.sum(ok))
        left -= k
    p = hits / n_pairs
    return p, float(np.sqrt(p * (1 - p) / n_pairs))


# latent laws for d = 1 with G(0) = 0, 1/4, 1/2, 3/4, 1
REFERENCE_D1 = (
    ("uniform(1,2)", LatentDist.uniform([1.0], [2.0])),
    ("uniform(-1,3)", LatentDist.uniform([-1.0], [3.0])),
    ("normal(0,1)", LatentDist.gaussian([0.0], [[1.0]])),
    ("uniform(-3,1)", LatentDist.uniform([-3.0], [1.0])),
    ("uniform(-2,-1)", LatentDist.uniform([-2.0], [-1.0])),
)


def random_latent_dist(d: int, rng: np.random.Generator) -> LatentDist:
    """A random Gaussian or per-coordinate uniform law on R^d."""
    if rng.random() < 0.5:
        M = rng.standard_normal((d, d))
        return LatentDist.gaussian(rng.normal(0, 2, size=d), M @ M.T + 0.1 * np.eye(d))
    lo = rng.normal(0, 2, size=d)
    return LatentDist.uniform(lo, lo + rng.uniform(0.1, 4.0, size=d))


def verify_table(n_pairs: int = 100_000, seed: int = 0, tol: float = 0.01) -> list[dict]:
    """Closed form vs Monte Carlo for the reference d = 1 laws."""
    rows = []
    for k, (name, dist) in enumerate(REFERENCE_D1):
        closed = et_closed_form_d1(dist.cdf_at_zero)
        est, se = et_monte_carlo(dist, n_pairs, seed + k)
        rows.append({"distribution": name, "g0": dist.cdf_at_zero, "closed_form": closed,
                     "mc_estimate": est, "std_err": se, "pass": abs(est - closed) <= tol})
    return rows
