"""Backdoor-pattern reverse engineering.

RE-AP searches a small additive perturbation sending a sample (or a group of
samples) to a target class by descending ``-log p(t | x + v)``. RE-PR searches
a mask / patch pair by descending ``-log p(t | (1 - m) x + m u) + lam |m|_1``.
Both are batched: ``P`` independent problems, each a group of ``G`` samples
sharing one pattern, advance together and each stops at its first feasible
iterate.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit, logit

from .attacks import BackdoorPattern
from .nn import (Classifier, logits_and_input_gradient, neg_log_posterior, penultimate_features,
                 softmax, targeted_margin, untargeted_margin)


@dataclass
class ReConfig:
    """Reverse-engineering settings.

    ``step_size`` is the RE-AP learning rate (the step length when
    ``normalized``); ``pr_step_size`` is the Adam learning rate on RE-PR
    logits; ``lam`` weighs the mask l1 term; ``init_sigma`` scales the
    Gaussian initialisation around ``init_center`` (zero by default).
    ``clip`` evaluates ``x + v`` clamped to [0, 1].
    """

    step_size: float = 0.01
    max_iters: int = 1000
    lam: float = 1e-2
    init_sigma: float = 1e-2
    target_class: int = 1
    seed: int = 0
    kappa: float = 0.0
    clip: bool = False
    normalized: bool = False
    pr_step_size: float = 0.1
    mask_init_logit: float = -3.0
    init_center: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if not self.step_size > 0 or not self.pr_step_size > 0:
            raise ValueError("step sizes must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")
        if self.lam < 0 or self.init_sigma < 0:
            raise ValueError("lam and init_sigma must be nonnegative")

    def with_(self, **kw) -> "ReConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("step_size", "max_iters", "lam", "init_sigma",
                                           "target_class", "seed", "kappa", "clip", "normalized",
                                           "pr_step_size", "mask_init_logit")}
        d["warm_start"] = self.init_center is not None
        return d


@dataclass
class ReSolution:
    pattern: BackdoorPattern
    norm: float
    success: bool
    iters: int


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def _as_groups(X, n: int) -> np.ndarray:
    """Coerce samples to ``(P, G, n)``."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != n:
        raise ValueError(f"samples have {X.shape[-1]} features, classifier expects {n}")
    if X.ndim == 1:
        return X[None, None, :]
    if X.ndim == 2:
        return X[:, None, :]
    return X


def _check_not_target(f: Classifier, X: np.ndarray, t: int) -> None:
    pred = f.predict(X.reshape(-1, X.shape[-1]))
    if np.any(pred == t):
        raise ValueError(f"some samples are already classified as target class {t}")


# -- RE-AP ----------------------------------------------------------------------

def ap_solve(f: Classifier, X, t: int, v0: np.ndarray, step_size: float, max_iters: int,
             clip: bool = False, normalized: bool = False):
    """Batched gradient descent for group additive perturbations.

    Steps are ``-step_size * grad`` (or ``-step_size * grad / |grad|`` when
    ``normalized``) on the group-mean loss.

    ``X`` is ``(P, G, n)``, ``v0`` is ``(P, n)``. Returns ``(v, success,
    iters)``; each problem keeps the first ``v`` (iterate index ``iters``) at
    which every sample in its group is classified ``t``.
    """
    X = _as_groups(X, f.n_inputs)
    P, G, n = X.shape
    v = np.array(v0, dtype=np.float64).reshape(P, n)
    success = np.zeros(P, dtype=bool)
    iters = np.full(P, max_iters, dtype=np.intp)
    active = np.arange(P)
    loss = neg_log_posterior(t)
    for k in range(max_iters + 1):
        Z = X[active] + v[active, None, :]
        Zc = np.clip(Z, 0.0, 1.0) if clip else Z
        logits, _, g = logits_and_input_gradient(f, Zc.reshape(-1, n), loss)
        hit = (logits.argmax(axis=1) == t).reshape(len(active), G).all(axis=1)
        if hit.any():
            success[active[hit]] = True
            iters[active[hit]] = k
        active, g, Z = active[~hit], g.reshape(len(active), G, n)[~hit], Z[~hit]
        if not len(active) or k == max_iters:
            break
        if clip:
            # outside the box the gradient passes only if the step heads back in
            g = np.where(((Z < 0) & (g > 0)) | ((Z > 1) & (g < 0)), 0.0, g)
        gbar = g.mean(axis=1)
        if normalized:
            norms = np.linalg.norm(gbar, axis=1, keepdims=True)
            norms[norms == 0] = 1.0
            gbar = gbar / norms
        v[active] -= step_size * gbar
    return v, success, iters


def _ap_init(cfg: ReConfig, n: int, rng: np.random.Generator) -> np.ndarray:
    center = np.zeros(n) if cfg.init_center is None else np.asarray(cfg.init_center, dtype=np.float64)
    return center + cfg.init_sigma * rng.standard_normal(n)


def re_ap_batch(f: Classifier, X, cfg: ReConfig, seeds) -> list[ReSolution]:
    """One RE-AP problem per group in ``X`` (``(P, n)`` or ``(P, G, n)``); problem ``p`` uses ``seeds[p]``."""
    X = _as_groups(X, f.n_inputs)
    t = cfg.target_class
    v0 = np.stack([_ap_init(cfg, X.shape[2], _rng(s)) for s in seeds]) if len(X) else np.zeros((0, X.shape[2]))
    v, ok, it = ap_solve(f, X, t, v0, cfg.step_size, cfg.max_iters, cfg.clip,
                            cfg.normalized)
    return [ReSolution(BackdoorPattern.additive(v[p], name="re_ap"), float(np.linalg.norm(v[p])),
                       bool(ok[p]), int(it[p])) for p in range(len(X))]


def re_ap(f: Classifier, x, cfg: ReConfig) -> ReSolution:
    """Minimal-norm additive perturbation sending ``x`` to ``cfg.target_class``."""
    x = np.asarray(x, dtype=np.float64).ravel()
    _check_not_target(f, x[None], cfg.target_class)
    return re_ap_batch(f, x[None, None, :], cfg, [cfg.seed])[0]


def re_ap_group(f: Classifier, xs, cfg: ReConfig) -> ReSolution:
    """One common perturbation sending every sample of ``xs`` to the target."""
    xs = np.asarray(xs, dtype=np.float64).reshape(-1, f.n_inputs)
    _check_not_target(f, xs, cfg.target_class)
    return re_ap_batch(f, xs[None], cfg, [cfg.seed])[0]


# -- RE-PR ----------------------------------------------------------------------

def _mask_layout(shape, n: int) -> tuple[int, int]:
    """(mask length, channel count): color images share one spatial mask across channels."""
    shape = tuple(shape) if shape else (n,)
    if len(shape) == 3:
        return shape[0] * shape[1], shape[2]
    return n, 1


def _expand(m: np.ndarray, C: int) -> np.ndarray:
    return m if C == 1 else np.repeat(m, C, axis=-1)


def _collapse(g: np.ndarray, C: int) -> np.ndarray:
    return g if C == 1 else g.reshape(*g.shape[:-1], -1, C).sum(axis=-1)


class _AdamState:
    def __init__(self, lr: float, *shapes):
        self.lr, self.t = lr, 0
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]

    def step(self, params, grads, rows):
        self.t += 1
        c1, c2 = 1 - 0.9 ** self.t, 1 - 0.999 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m[rows] = 0.9 * m[rows] + 0.1 * g
            v[rows] = 0.999 * v[rows] + 0.001 * g * g
            p[rows] -= self.lr * (m[rows] / c1) / (np.sqrt(v[rows] / c2) + 1e-8)


def pr_solve(f: Classifier, X, t: int, a0: np.ndarray, b0: np.ndarray, lam: float,
             lr: float, max_iters: int, C: int = 1):
    """Batched Adam on mask logits ``a`` and patch logits ``b``.

    Success is judged on the binarized mask ``sigmoid(a) > 0.5``; each problem
    returns its first feasible binary mask and patch. Returns
    ``(m_binary, u, success, iters)`` with ``m_binary`` in mask layout.
    """
    X = _as_groups(X, f.n_inputs)
    P, G, n = X.shape
    a = np.array(a0, dtype=np.float64)
    b = np.array(b0, dtype=np.float64)
    m_out = np.zeros_like(a)
    u_out = expit(b)
    success = np.zeros(P, dtype=bool)
    iters = np.full(P, max_iters, dtype=np.intp)
    active = np.arange(P)
    adam = _AdamState(lr, a.shape, b.shape)
    loss = neg_log_posterior(t)
    for k in range(max_iters + 1):
        Xa = X[active]
        m = expit(a[active])
        u = expit(b[active])
        mb = (m > 0.5).astype(np.float64)
        mbe = _expand(mb, C)[:, None, :]
        Db = (1 - mbe) * Xa + mbe * u[:, None, :]
        hit = (f.predict(Db.reshape(-1, n)) == t).reshape(len(active), G).all(axis=1)
        if hit.any():
            done = active[hit]
            success[done], iters[done] = True, k
            m_out[done], u_out[done] = mb[hit], u[hit]
        keep = ~hit
        active, Xa, m, u = active[keep], Xa[keep], m[keep], u[keep]
        if not len(active) or k == max_iters:
            break
        me = _expand(m, C)[:, None, :]
        D = (1 - me) * Xa + me * u[:, None, :]
        _, _, g = logits_and_input_gradient(f, D.reshape(-1, n), loss)
        g = g.reshape(len(active), G, n) / G
        gm = _collapse((g * (u[:, None, :] - Xa)).sum(axis=1), C) + lam
        gu = (g * me).sum(axis=1)
        adam.step([a, b], [gm * m * (1 - m), gu * u * (1 - u)], active)
    return m_out, u_out, success, iters


def _pr_init(cfg: ReConfig, mask_len: int, n: int, rng: np.random.Generator):
    a = cfg.mask_init_logit + rng.standard_normal(mask_len)
    b = logit(rng.uniform(0.05, 0.95, size=n))
    return a, b


def _pr_solution(m_bin, u, C, ok, it) -> ReSolution:
    m_full = _expand(m_bin, C)
    u_pat = np.where(m_full > 0, np.clip(u, 0.0, 1.0), 0.0)
    return ReSolution(BackdoorPattern.patch(m_full, u_pat, name="re_pr"), float(m_bin.sum()),
                      bool(ok), int(it))


def re_pr_batch(f: Classifier, X, cfg: ReConfig, seeds, shape=None) -> list[ReSolution]:
    """One RE-PR problem per group in ``X``; ``shape`` is the per-sample image shape."""
    X = _as_groups(X, f.n_inputs)
    P, G, n = X.shape
    L, C = _mask_layout(shape, n)
    inits = [_pr_init(cfg, L, n, _rng(s)) for s in seeds]
    a0 = np.stack([i[0] for i in inits]) if P else np.zeros((0, L))
    b0 = np.stack([i[1] for i in inits]) if P else np.zeros((0, n))
    m, u, ok, it = pr_solve(f, X, cfg.target_class, a0, b0, cfg.lam, cfg.pr_step_size,
                            cfg.max_iters, C)
    return [_pr_solution(m[p], u[p], C, ok[p], it[p]) for p in range(P)]


def re_pr(f: Classifier, x, cfg: ReConfig, shape=None) -> ReSolution:
    """Small binary mask and patch sending ``x`` to ``cfg.target_class``; norm is the mask l1."""
    x = np.asarray(x, dtype=np.float64).ravel()
    _check_not_target(f, x[None], cfg.target_class)
    return re_pr_batch(f, x[None, None, :], cfg, [cfg.seed], shape)[0]


def re_pr_group(f: Classifier, xs, cfg: ReConfig, shape=None) -> ReSolution:
    xs = np.asarray(xs, dtype=np.float64).reshape(-1, f.n_inputs)
    _check_not_target(f, xs, cfg.target_class)
    return re_pr_batch(f, xs[None], cfg, [cfg.seed], shape)[0]


def verify_solution(f: Classifier, X, sol: ReSolution, t: int, clip: bool = False) -> bool:
    """Re-check a solution's constraint with a fresh forward pass."""
    from .attacks import embed
    X = np.asarray(X, dtype=np.float64).reshape(-1, f.n_inputs)
    return bool(np.all(f.predict(embed(X, sol.pattern, bounded=clip)) == t))


# -- CS statistic ---------------------------------------------------------------

def _margin_loss(labels: np.ndarray, targeted: np.ndarray, t: int, kappa: float):
    """Per-row margin: untargeted (leave own class) or targeted toward ``t``."""
    push_in = targeted_margin(t, kappa)
    push_out = untargeted_margin(labels, kappa)

    def spec(logits):
        vi, gi = push_in(logits)
        vo, go = push_out(logits)
        return np.where(targeted, vi, vo), np.where(targeted[:, None], gi, go)
    return spec


def _patch_descent(f, X, loss_spec, a, b, lam, lr, iters, C):
    """Fixed-budget Adam on continuous (mask, patch) logits.

    ``X`` is ``(P, G, n)`` and ``loss_spec`` scores the flattened ``(P*G)``
    rows; group losses are summed.
    """
    P, G, n = X.shape
    adam = _AdamState(lr, a.shape, b.shape)
    rows = np.arange(P)
    for _ in range(iters):
        m, u = expit(a), expit(b)
        me = _expand(m, C)[:, None, :]
        D = (1 - me) * X + me * u[:, None, :]
        _, _, g = logits_and_input_gradient(f, D.reshape(-1, n), loss_spec)
        g = g.reshape(P, G, n)
        gm = _collapse((g * (u[:, None, :] - X)).sum(axis=1), C) + lam
        gu = (g * me).sum(axis=1)
        adam.step([a, b], [gm * m * (1 - m), gu * u * (1 - u)], rows)
    return expit(a), expit(b)


def cs_statistic(f: Classifier, t: int, detection_sets: dict, cfg: ReConfig, shape=None,
                 return_counts: bool = False):
    """Mean cosine similarity of penultimate features under a common vs sample-wise patch.

    The common patch minimizes the summed margin losses over all detection
    samples (pushing non-``t`` samples out of their class, keeping ``t``
    samples in ``t``) plus ``lam |m|_1``; each non-``t`` sample then gets its
    own patch pushing it into ``t``. Both use continuous masks and
    ``cfg.max_iters`` Adam steps. Samples whose feature vector is zero under
    either patch are excluded; ``return_counts`` adds ``(n_used, n_excluded)``.
    """
    others = [np.asarray(X, dtype=np.float64).reshape(-1, f.n_inputs)
              for c, X in sorted(detection_sets.items()) if c != t]
    other_labels = [np.full(len(X), c) for c, X in sorted(detection_sets.items()) if c != t]
    if not others or sum(len(X) for X in others) == 0:
        raise ValueError("need at least one sample outside class t")
    Xo, yo = np.concatenate(others), np.concatenate(other_labels)
    Xt = np.asarray(detection_sets.get(t, np.zeros((0, f.n_inputs))), dtype=np.float64).reshape(-1, f.n_inputs)
    n = f.n_inputs
    L, C = _mask_layout(shape, n)
    rng = _rng(cfg.seed)

    Xall = np.concatenate([Xo, Xt])
    labels = np.concatenate([yo, np.full(len(Xt), t)])
    targeted = np.concatenate([np.zeros(len(Xo), bool), np.ones(len(Xt), bool)])
    a0, b0 = _pr_init(cfg, L, n, rng)
    mc, uc = _patch_descent(f, Xall[None], _margin_loss(labels, targeted, t, cfg.kappa),
                            a0[None], b0[None], cfg.lam, cfg.pr_step_size, cfg.max_iters, C)

    inits = [_pr_init(cfg, L, n, rng) for _ in range(len(Xo))]
    A0 = np.stack([i[0] for i in inits])
    B0 = np.stack([i[1] for i in inits])
    ms, us = _patch_descent(f, Xo[:, None, :], targeted_margin(t, cfg.kappa), A0, B0, cfg.lam,
                            cfg.pr_step_size, cfg.max_iters, C)

    mce = _expand(mc, C)
    zc = penultimate_features(f, (1 - mce) * Xo + mce * uc)
    mse = _expand(ms, C)
    zs = penultimate_features(f, (1 - mse) * Xo + mse * us)
    nc, ns = np.linalg.norm(zc, axis=1), np.linalg.norm(zs, axis=1)
    ok = (nc > 0) & (ns > 0)
    cos = np.sum(zc[ok] * zs[ok], axis=1) / (nc[ok] * ns[ok])
    value = float(np.clip(cos.mean(), -1.0, 1.0)) if ok.any() else float("nan")
    return (value, int(ok.sum()), int((~ok).sum())) if return_counts else value


# -- model inversion ------------------------------------------------------------

def model_inversion_synthesize(f: Classifier, class_i: int, cfg: ReConfig, count: int = 1,
                               threshold: float = 0.9, noise: float = 0.01,
                               bounded: bool = True):
    """Synthesize ``count`` inputs of class ``class_i`` by ascending its posterior.

    Starts from an all-zero input plus uniform noise in ``[0, noise)`` and
    takes normalized gradient steps of length ``cfg.step_size`` until the
    posterior exceeds ``threshold``. Returns ``(X, success)``.
    """
    if not 0 <= class_i < f.n_classes:
        raise ValueError(f"class {class_i} out of range")
    rng = _rng(cfg.seed)
    X = rng.uniform(0.0, noise, size=(count, f.n_inputs))
    done = np.zeros(count, dtype=bool)
    loss = neg_log_posterior(class_i)
    for _ in range(cfg.max_iters + 1):
        live = np.flatnonzero(~done)
        logits, _, g = logits_and_input_gradient(f, X[live], loss)
        hit = softmax(logits)[:, class_i] > threshold
        done[live[hit]] = True
        live, g = live[~hit], g[~hit]
        if not len(live):
            break
        norms = np.linalg.norm(g, axis=1, keepdims=True)
        norms[norms == 0] = 1.0
        X[live] -= cfg.step_size * g / norms
        if bounded:
            X[live] = np.clip(X[live], 0.0, 1.0)
    return X, done
