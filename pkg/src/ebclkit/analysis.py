"""Unsupervised subtyping of embeddings: K-means with k-means++ seeding,
kneedle elbow selection, Kaplan-Meier curves, Welch contrasts between
clusters and stratification reports."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import ConfigurationError

LARGE_T = 1e12


@dataclass
class ClusterAssignment:
    K: int
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    inertia_trace: list = field(default_factory=list)


def _sq_dist(X, C):
    d = (X * X).sum(1)[:, None] - 2 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeans_pp(X, K, rng):
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    d2 = _sq_dist(X, np.asarray(centers))[:, 0]
    for _ in range(1, K):
        total = d2.sum()
        if total <= 0:
            # every point already coincides with a centre; pick unused rows
            nxt = X[rng.integers(n)]
        else:
            nxt = X[rng.choice(n, p=d2 / total)]
        centers.append(nxt)
        d2 = np.minimum(d2, _sq_dist(X, nxt[None, :])[:, 0])
    return np.asarray(centers, dtype=float)


def _lloyd(X, C, max_iter):
    labels = None
    trace = []
    for _ in range(max_iter):
        d = _sq_dist(X, C)
        new = d.argmin(axis=1)
        trace.append(float(d[np.arange(len(X)), new].sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for k in range(C.shape[0]):
            members = X[labels == k]
            if members.size:
                C[k] = members.mean(axis=0)
    inertia = float(((X - C[labels]) ** 2).sum())
    return labels, C, inertia, trace


def kmeans(X, K: int, seed: int = 0, n_init: int = 10, max_iter: int = 300) -> ClusterAssignment:
    """Lloyd iterations from k-means++ seeds; best of ``n_init`` restarts."""
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    if K < 1 or K > n:
        raise ConfigurationError(f"K={K} must lie in [1, {n}]")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        if K == n:
            C = X.copy()
        else:
            C = _kmeans_pp(X, K, rng)
        labels, C, inertia, trace = _lloyd(X, C, max_iter)
        if best is None or inertia < best.inertia:
            best = ClusterAssignment(K, labels, C, inertia, trace)
    return best


def elbow_select(inertias, K_grid) -> int:
    """Kneedle knee of a decreasing inertia curve.

    K and inertia are min-max normalized; the knee is the K maximizing
    ``(1 - inertia_norm) - K_norm``, ties going to the smallest K.
    """
    K_grid = np.asarray(K_grid, dtype=float)
    y = np.asarray(inertias, dtype=float)
    if K_grid.size < 3 or K_grid.size != y.size:
        raise ConfigurationError("elbow selection needs at least 3 grid points with matching inertias")
    if np.any(np.diff(K_grid) <= 0):
        raise ConfigurationError("K_grid must be ascending")
    x = (K_grid - K_grid[0]) / (K_grid[-1] - K_grid[0])
    span = y.max() - y.min()
    yn = np.zeros_like(y) if span == 0 else (y - y.min()) / span
    diff = (1.0 - yn) - x
    # round away float noise so exact ties resolve to the smallest K
    diff = np.round(diff, 12)
    return int(K_grid[int(np.argmax(diff))])


@dataclass
class SurvivalCurve:
    times: np.ndarray       # distinct event times
    survival: np.ndarray    # S just after each time
    at_risk: np.ndarray
    events: np.ndarray

    def __call__(self, t) -> np.ndarray:
        """Right-continuous step function S(t), with S = 1 before the first event."""
        t = np.asarray(t, dtype=float)
        k = np.searchsorted(self.times, t, side="right")
        s = np.r_[1.0, self.survival]
        return s[k]


def km_curve(times, observed) -> SurvivalCurve:
    """Product-limit estimate; censored subjects leave the risk set after
    their time without contributing an event factor (events at a censoring
    time are counted first)."""
    times = np.asarray(times, dtype=float)
    observed = np.asarray(observed, dtype=bool)
    if np.any(times < 0):
        raise ValueError("times must be nonnegative")
    event_times = np.unique(times[observed])
    at_risk = np.array([(times >= t).sum() for t in event_times], dtype=float)
    deaths = np.array([((times == t) & observed).sum() for t in event_times], dtype=float)
    surv = np.cumprod(1.0 - deaths / at_risk) if event_times.size else np.zeros(0)
    return SurvivalCurve(event_times, surv, at_risk, deaths)


@dataclass
class Contrast:
    t_stat: float
    p_value: float
    significant: bool
    dof: float
    degenerate: bool = False


def cluster_contrast(a, b, alpha: float = 0.01) -> Contrast:
    """Two-sided Welch t-test on time-to-outcome between two clusters.

    Zero variance in both groups: equal means give ``t = 0, p = 1``;
    different means give ``t = +/-LARGE_T, p = 0`` with ``degenerate`` set.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size < 2 or b.size < 2:
        raise ValueError("each group needs at least 2 samples")
    va, vb = a.var(ddof=1), b.var(ddof=1)
    diff = a.mean() - b.mean()
    if va == 0 and vb == 0:
        if diff == 0:
            return Contrast(0.0, 1.0, False, math.nan, True)
        return Contrast(math.copysign(LARGE_T, diff), 0.0, True, math.nan, True)
    se2 = va / a.size + vb / b.size
    t = diff / math.sqrt(se2)
    dof = se2 ** 2 / ((va / a.size) ** 2 / (a.size - 1) + (vb / b.size) ** 2 / (b.size - 1))
    p = float(2 * stats.t.sf(abs(t), dof))
    return Contrast(float(t), p, p < alpha, float(dof))


def pca2(X) -> np.ndarray:
    """First two principal-component coordinates (plotting only)."""
    X = np.asarray(X, dtype=float)
    Xc = X - X.mean(axis=0)
    _, _, vt = np.linalg.svd(Xc, full_matrices=False)
    comps = vt[:2]
    # fix sign so the output is deterministic
    signs = np.sign(comps[np.arange(comps.shape[0]), np.abs(comps).argmax(axis=1)])
    coords = Xc @ (comps * signs[:, None]).T
    if coords.shape[1] < 2:
        coords = np.hstack([coords, np.zeros((coords.shape[0], 2 - coords.shape[1]))])
    return coords


def stratification_report(assignment: ClusterAssignment, outcome, time_to_outcome=None, observed=None,
                          vectors=None, alpha: float = 0.01) -> dict:
    """Per-cluster outcome prevalence (sorted descending), pairwise Welch
    contrasts of time-to-outcome, the extreme-cluster prevalence gap and
    optional PCA coordinates.

    ``outcome`` is 0/1 with NaN for unlabelled rows; clusters without any
    labelled row get a null prevalence and are left out of the contrasts.
    """
    outcome = np.asarray(outcome, dtype=float)
    labels = assignment.labels
    clusters = []
    for k in range(assignment.K):
        rows = labels == k
        lab = outcome[rows][~np.isnan(outcome[rows])]
        entry = {"cluster": k, "size": int(rows.sum()), "n_labelled": int(lab.size),
                 "prevalence": float(lab.mean()) if lab.size else None}
        if time_to_outcome is not None:
            tt = np.asarray(time_to_outcome, float)[rows]
            obs = np.ones(tt.size, bool) if observed is None else np.asarray(observed, bool)[rows]
            if tt.size:
                curve = km_curve(tt, obs)
                entry["km"] = {"times": curve.times.tolist(), "survival": curve.survival.tolist()}
        clusters.append(entry)
    ranked = sorted(clusters, key=lambda c: (c["prevalence"] is None, -(c["prevalence"] or 0.0), c["cluster"]))
    with_prev = [c for c in ranked if c["prevalence"] is not None]
    report = {"K": assignment.K, "clusters": ranked, "contrasts": [], "delta_prevalence": None}
    if len(with_prev) >= 2:
        report["delta_prevalence"] = with_prev[0]["prevalence"] - with_prev[-1]["prevalence"]
    if time_to_outcome is not None:
        tt = np.asarray(time_to_outcome, float)
        for i, ca in enumerate(with_prev):
            for cb in with_prev[i + 1:]:
                a = tt[labels == ca["cluster"]]
                b = tt[labels == cb["cluster"]]
                if a.size < 2 or b.size < 2:
                    continue
                c = cluster_contrast(a, b, alpha)
                report["contrasts"].append({"a": ca["cluster"], "b": cb["cluster"], "t_stat": c.t_stat,
                                            "p_value": c.p_value, "significant": c.significant,
                                            "degenerate": c.degenerate})
    if vectors is not None:
        report["pca"] = pca2(vectors).tolist()
    return report


def elbow_curve(X, K_grid=range(2, 13), seed: int = 0, n_init: int = 10) -> tuple:
    """Inertia for each K in ``K_grid`` and the selected knee."""
    K_grid = [k for k in K_grid if k <= len(X)]
    inertias = [kmeans(X, k, seed, n_init).inertia for k in K_grid]
    return inertias, elbow_select(inertias, K_grid)


def survival_svg(curves: dict, width: int = 480, height: int = 320) -> str:
    """Minimal SVG step plot of ``{name: SurvivalCurve}``."""
    colours = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#666666"]
    t_max = max([float(c.times.max()) for c in curves.values() if c.times.size] + [1.0])
    pad = 40

    def xy(t, s):
        return pad + (width - 2 * pad) * t / t_max, height - pad - (height - 2 * pad) * s

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>']
    for i, (name, c) in enumerate(curves.items()):
        pts, s_prev = [xy(0, 1.0)], 1.0
        for t, s in zip(c.times, c.survival):
            pts.append(xy(t, s_prev))
            pts.append(xy(t, s))
            s_prev = s
        pts.append(xy(t_max, s_prev))
        path = " ".join(f"{x:.1f},{y:.1f}" for x, y in pts)
        col = colours[i % len(colours)]
        parts.append(f'<polyline fill="none" stroke="{col}" stroke-width="2" points="{path}"/>')
        parts.append(f'<text x="{width - pad}" y="{pad + 14 * i}" font-size="11" text-anchor="end" fill="{col}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts)
