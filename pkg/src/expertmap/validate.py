"""Internal validation battery: smoothness, concentration, bounds, baselines.

Nothing here plots; every check returns plain records that the pipeline can
serialize for external tools.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.csgraph import connected_components
from scipy.spatial.distance import cdist

from .dataset import DataMatrix
from .errors import BoundViolation, ValidationError
from .spectral import Kernel, MarkovOperator, signed_power


# ---------------------------------------------------------------------------
# smoothness of features against an embedding

@dataclass(frozen=True)
class LipschitzTable:
    rows: tuple[tuple[str, float], ...]      # sorted ascending by constant
    degenerate: tuple[str, ...] = ()

    def constant(self, name: str) -> float:
        for n, value in self.rows:
            if n == name:
                return value
        raise KeyError(name)


def feature_lipschitz(coords: np.ndarray, features: dict[str, np.ndarray],
                      n_neighbors: int = 10, all_pairs: bool = False) -> LipschitzTable:
    """Largest |f(x)-f(y)| / ||x-y|| over neighbor pairs, per feature.

    Features are normalized by their range first; the estimate is restricted
    to each point's nearest neighbors unless ``all_pairs`` is set (the
    all-pairs max is dominated by near-duplicate points).
    """
    coords = np.asarray(coords, dtype=float)
    n = coords.shape[0]
    dists = cdist(coords, coords)
    if all_pairs:
        pair_i, pair_j = np.triu_indices(n, k=1)
    else:
        order = np.argsort(dists + np.diag(np.full(n, np.inf)), axis=1, kind="stable")
        kk = min(n_neighbors, n - 1)
        pair_i = np.repeat(np.arange(n), kk)
        pair_j = order[:, :kk].ravel()
    gap = dists[pair_i, pair_j]
    usable = gap > 0

    rows = []
    degenerate = []
    for name, values in features.items():
        values = np.asarray(values, dtype=float)
        span = values.max() - values.min()
        if span == 0.0:
            rows.append((name, 0.0))
            degenerate.append(name)
            continue
        f = values / span
        slopes = np.abs(f[pair_i[usable]] - f[pair_j[usable]]) / gap[usable]
        rows.append((name, float(slopes.max(initial=0.0))))
    rows.sort(key=lambda item: (item[1], item[0]))
    return LipschitzTable(rows=tuple(rows), degenerate=tuple(degenerate))


# ---------------------------------------------------------------------------
# neighborhood concentration

@dataclass(frozen=True)
class MassStats:
    counts: np.ndarray
    mean: float
    sd: float


def neighborhood_mass(p: np.ndarray | MarkovOperator,
                      include_self: bool = False) -> MassStats:
    """Minimal number of neighbors holding half of each point's transition mass."""
    trans = p.transition if isinstance(p, MarkovOperator) else np.asarray(p, dtype=float)
    n = trans.shape[0]
    if np.max(np.abs(trans.sum(axis=1) - 1.0)) > 1e-9:
        raise ValidationError("rows of the transition matrix must sum to 1")
    counts = np.empty(n, dtype=np.int64)
    for i in range(n):
        row = trans[i].copy()
        if not include_self:
            row[i] = 0.0
        row = np.sort(row)[::-1]
        cum = np.cumsum(row)
        hit = np.flatnonzero(cum >= 0.5)
        counts[i] = int(hit[0]) + 1 if len(hit) else n
    return MassStats(counts=counts, mean=float(counts.mean()), sd=float(counts.std()))


# ---------------------------------------------------------------------------
# spectral dimension

def dimension_from_curve(eigencurve: np.ndarray, cutoff: float = 0.01) -> int:
    """max { d : S_d^t > cutoff } over the powered nontrivial eigenvalues."""
    above = np.flatnonzero(np.asarray(eigencurve) > cutoff)
    return int(above[-1]) + 1 if len(above) else 0


def spectral_dimension(k: Kernel, cutoff: float = 0.01):
    """Count of powered nontrivial eigenvalues above the cutoff.

    The diffusion time normalizes across kernels: t = 1 / (1 - S_1), the mean
    time to diffuse across the system.
    """
    sums = k.entries.sum(axis=1)
    half = 1.0 / np.sqrt(sums)
    sym = half[:, None] * k.entries * half[None, :]
    vals = np.linalg.eigvalsh(0.5 * (sym + sym.T))[::-1]
    vals = np.clip(vals, -1.0, 1.0)
    s1 = vals[1]
    if s1 >= 1.0 - 1e-12:
        n_comp, _ = connected_components((k.entries > 1e-12).astype(int), directed=False)
        raise ValidationError(f"kernel graph is disconnected ({n_comp} components); "
                              "spectral dimension undefined")
    t = 1.0 / (1.0 - s1)
    eigencurve = signed_power(vals[1:], t)
    return dimension_from_curve(eigencurve, cutoff), t, eigencurve


# ---------------------------------------------------------------------------
# affinity histograms split by label agreement

@dataclass(frozen=True)
class AffinityHistograms:
    bin_edges: np.ndarray
    hist_unequal: np.ndarray
    thresholds: np.ndarray
    ratio: np.ndarray            # P_neq(t) / P_eq(t); nan where P_eq = 0
    floor: float


def affinity_histograms(entries: np.ndarray, g: np.ndarray, bins: int = 18,
                        floor: float = 0.1) -> AffinityHistograms:
    """Survival ratio of affinities across unequal- vs equal-label pairs.

    Affinity values below ``floor`` are removed from all counting.
    """
    a = np.asarray(entries, dtype=float)
    g = np.asarray(g, dtype=float)
    iu = np.triu_indices(a.shape[0], k=1)
    vals = a[iu]
    unequal = g[iu[0]] != g[iu[1]]
    if not unequal.any():
        raise ValidationError("no unequal-label pairs; labels are constant")

    edges = np.linspace(floor, 1.0, bins + 1)
    hist_unequal, _ = np.histogram(vals[unequal & (vals >= floor)], bins=edges)

    thresholds = edges[:-1]
    n_neq = max(int(unequal.sum()), 1)
    n_eq = max(int((~unequal).sum()), 1)
    p_neq = np.array([(vals[unequal] > t).sum() / n_neq for t in thresholds])
    p_eq = np.array([(vals[~unequal] > t).sum() / n_eq for t in thresholds])
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(p_eq > 0, p_neq / np.where(p_eq > 0, p_eq, 1.0), np.nan)
    return AffinityHistograms(bin_edges=edges, hist_unequal=hist_unequal,
                              thresholds=thresholds, ratio=ratio, floor=floor)


# ---------------------------------------------------------------------------
# aggregate separation bound

@dataclass(frozen=True)
class SeparationRecord:
    lhs: float                   # E_neq (f(x) - f(y))^2
    e_neq_g_gap: float           # E_neq (g(x) - g(y))^2
    s_pairs: int                 # ordered unequal-label pairs
    max_factor: float            # max_i S_i * n / S
    cost: float                  # mean squared training error
    rhs: float
    holds: bool
    rhs_scaled: float | None = None
    slack: float = 1e-9


def separation_bound_check(f_values: np.ndarray, g_values: np.ndarray,
                           layer_norm_product: float | None = None,
                           slack: float = 1e-9) -> SeparationRecord:
    """Check E_neq f-gap^2 >= E_neq g-gap^2 - 2 (max_i S_i n / S) C.

    Computed exactly over all ordered unequal-label pairs.  Raises
    BoundViolation when the inequality fails beyond the slack; the scaled
    right-hand side (divided by the later-layer norm product) is reported
    but never asserted.
    """
    f = np.asarray(f_values, dtype=float)
    g = np.asarray(g_values, dtype=float)
    if f.shape != g.shape:
        raise ValidationError("f and g must cover the same points")
    n = len(g)
    unequal = g[:, None] != g[None, :]
    s_pairs = int(unequal.sum())
    if s_pairs == 0:
        raise ValidationError("labels are constant; no unequal-label pairs")

    f_gap = (f[:, None] - f[None, :]) ** 2
    g_gap = (g[:, None] - g[None, :]) ** 2
    lhs = float(f_gap[unequal].mean())
    e_g = float(g_gap[unequal].mean())
    cost = float(np.mean((g - f) ** 2))
    classes = np.unique(g)
    s_i = {float(c): int((g != c).sum()) for c in classes}
    max_factor = max(s_i.values()) * n / s_pairs
    rhs = e_g - 2.0 * max_factor * cost
    rhs_scaled = rhs / layer_norm_product if layer_norm_product else None

    holds = lhs >= rhs - slack
    record = SeparationRecord(lhs=lhs, e_neq_g_gap=e_g, s_pairs=s_pairs,
                              max_factor=float(max_factor), cost=cost, rhs=rhs,
                              holds=holds, rhs_scaled=rhs_scaled, slack=slack)
    if not holds:
        raise BoundViolation(f"separation bound violated: LHS {lhs:.6g} < "
                             f"RHS {rhs:.6g} - {slack}", record=record)
    return record


# ---------------------------------------------------------------------------
# baseline rankings

def row_sum_rank(d: DataMatrix) -> np.ndarray:
    """Sum over observed entries, scaled by m / |support| per point."""
    filled = np.where(d.mask, d.values, 0.0)
    support = d.mask.sum(axis=1)
    sums = filled.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(support > 0, sums * d.n_features / np.maximum(support, 1), 0.0)


def nnls(a: np.ndarray, b: np.ndarray, max_iter: int | None = None):
    """Lawson-Hanson active-set nonnegative least squares.

    Returns (x, kkt_residual).  The residual is the largest violation of the
    KKT conditions: negativity of x, positive gradient on the support, or
    negative dual on the zero set.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float).ravel()
    m, n = a.shape
    if len(b) != m:
        raise ValidationError(f"shape mismatch: design {a.shape}, target {len(b)}")
    if max_iter is None:
        max_iter = 3 * n + 30

    eps = np.finfo(float).eps
    tol = 10.0 * eps * np.linalg.norm(a, 1) * max(m, n)

    x = np.zeros(n)
    passive = np.zeros(n, dtype=bool)
    w = a.T @ (b - a @ x)
    iters = 0
    while (~passive).any() and np.any(w[~passive] > tol) and iters < max_iter:
        iters += 1
        masked = np.where(passive, -np.inf, w)
        passive[int(np.argmax(masked))] = True
        while True:
            s = np.zeros(n)
            sol, *_ = np.linalg.lstsq(a[:, passive], b, rcond=None)
            s[passive] = sol
            if np.all(s[passive] > tol):
                x = s
                break
            shrink = passive & (s <= tol)
            with np.errstate(invalid="ignore", divide="ignore"):
                steps = np.where(shrink & (x > s), x / (x - s), np.inf)
            alpha = float(steps.min())
            x = x + alpha * (s - x)
            passive &= x > tol
            x[~passive] = 0.0
        w = a.T @ (b - a @ x)

    grad = -w
    kkt = max(float(np.max(-x, initial=0.0)),
              float(np.max(np.abs(grad[x > 0]), initial=0.0)),
              float(np.max(-grad[x <= 0], initial=0.0)))
    return x, kkt


def nnls_rank(d: DataMatrix, target: np.ndarray, group: str | None = None):
    """Nonnegative least-squares weights fitting ``target`` from the features.

    Rows must be complete (imputed beforehand); ``group`` restricts the
    design to one feature group.
    """
    if group is None:
        cols = list(range(d.n_features))
    else:
        cols = [k for k, f in enumerate(d.feature_names) if d.group_of[f] == group]
        if not cols:
            raise ValidationError(f"no features in group {group!r}")
    design = d.values[:, cols]
    if not np.all(np.isfinite(design)):
        raise ValidationError("NNLS needs complete rows; impute missing entries first")
    weights, kkt = nnls(design, np.asarray(target, dtype=float))
    return weights, design @ weights, kkt


# ---------------------------------------------------------------------------
# ranking agreement

def confusion(initial: np.ndarray, final: np.ndarray, bins: int = 4) -> np.ndarray:
    """Counts by score-range quarter of each ranking (not population quantiles)."""
    initial = np.asarray(initial, dtype=float)
    final = np.asarray(final, dtype=float)
    if initial.shape != final.shape:
        raise ValidationError("rankings must cover the same points")

    def bin_of(values):
        lo, hi = values.min(), values.max()
        if hi == lo:
            return np.zeros(len(values), dtype=np.int64)
        idx = np.floor((values - lo) / (hi - lo) * bins).astype(np.int64)
        return np.clip(idx, 0, bins - 1)

    rows = bin_of(initial)
    cols = bin_of(final)
    out = np.zeros((bins, bins), dtype=np.int64)
    np.add.at(out, (rows, cols), 1)
    return out


def align_embeddings(e1: np.ndarray, e2: np.ndarray):
    """Orthogonal Procrustes: rotate e2 onto e1, returning (R, relative residual)."""
    e1 = np.asarray(e1, dtype=float)
    e2 = np.asarray(e2, dtype=float)
    if e1.shape != e2.shape:
        raise ValidationError(f"embedding shapes differ: {e1.shape} vs {e2.shape}")
    u, _, vt = np.linalg.svd(e2.T @ e1)
    rot = u @ vt
    denom = np.linalg.norm(e1)
    residual = float(np.linalg.norm(e1 - e2 @ rot) / denom) if denom > 0 else 0.0
    return rot, residual


# ---------------------------------------------------------------------------
# per-group summaries and neighbor smoothness

@dataclass(frozen=True)
class GroupScores:
    group_names: tuple[str, ...]
    means: np.ndarray                        # (n, n_groups), NaN when unobserved
    nnls_scores: np.ndarray | None = None
    nnls_weights: dict = field(default_factory=dict)


def group_scores(d: DataMatrix, target: np.ndarray | None = None) -> GroupScores:
    names = tuple(sorted(set(d.group_of.values())))
    filled = np.where(d.mask, d.values, 0.0)
    means = np.empty((d.n_points, len(names)))
    for gi, gname in enumerate(names):
        cols = [k for k, f in enumerate(d.feature_names) if d.group_of[f] == gname]
        if not cols:
            raise ValidationError(f"group {gname!r} has no features")
        counts = d.mask[:, cols].sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            means[:, gi] = np.where(counts > 0,
                                    filled[:, cols].sum(axis=1) / np.maximum(counts, 1),
                                    np.nan)
    if target is None:
        return GroupScores(group_names=names, means=means)

    scores = np.empty_like(means)
    weights = {}
    for gi, gname in enumerate(names):
        w, fitted, _ = nnls_rank(d, target, group=gname)
        scores[:, gi] = fitted
        weights[gname] = w.tolist()
    return GroupScores(group_names=names, means=means, nnls_scores=scores,
                       nnls_weights=weights)


@dataclass(frozen=True)
class SmoothnessResult:
    averages: np.ndarray
    correlation: float
    degenerate: bool


def neighbor_smoothness(space, f: np.ndarray, n_neighbors: int = 10) -> SmoothnessResult:
    """Neighbor-averaged f (affinity-weighted or k-NN mean) and its correlation.

    ``space`` is either a square affinity/kernel matrix (weights) or a
    coordinate array (k-NN in Euclidean distance).
    """
    f = np.asarray(f, dtype=float)
    n = len(f)
    if n < 2:
        return SmoothnessResult(averages=f.copy(), correlation=float("nan"),
                                degenerate=True)

    if hasattr(space, "entries"):                    # Kernel / AffinityMatrix
        weights = np.asarray(space.entries, dtype=float).copy()
        np.fill_diagonal(weights, 0.0)
        sums = weights.sum(axis=1)
        if np.any(sums <= 0):
            raise ValidationError("a point has zero affinity to all others")
        averages = (weights / sums[:, None]) @ f
    else:                                            # coordinates -> k-NN mean
        coords = space.coordinates if hasattr(space, "coordinates") else space
        coords = np.asarray(coords, dtype=float)
        dists = cdist(coords, coords)
        order = np.argsort(dists + np.diag(np.full(n, np.inf)), axis=1, kind="stable")
        hood = order[:, :min(n_neighbors, n - 1)]
        averages = f[hood].mean(axis=1)

    if np.ptp(f) == 0.0 or np.ptp(averages) == 0.0:
        return SmoothnessResult(averages=averages, correlation=float("nan"),
                                degenerate=True)
    corr = float(np.corrcoef(f, averages)[0, 1])
    return SmoothnessResult(averages=averages, correlation=corr, degenerate=False)


# ---------------------------------------------------------------------------
# report assembly

@dataclass
class ValidationReport:
    config_hash: str
    sections: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)   # name -> (header, rows)

    def add_section(self, name: str, payload: dict) -> None:
        self.sections[name] = {"config_hash": self.config_hash, **payload}

    def add_table(self, name: str, header: list[str], rows: list[list]) -> None:
        self.tables[name] = (header, rows)

    def write(self, outdir) -> list[str]:
        from pathlib import Path
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        written = []
        report_path = outdir / "validation.json"
        with open(report_path, "w", encoding="utf-8") as fh:
            json.dump({"schema_version": 1, "config_hash": self.config_hash,
                       "sections": self.sections}, fh, sort_keys=True, indent=1)
        written.append(str(report_path))
        for name, (header, rows) in self.tables.items():
            path = outdir / f"{name}.csv"
            with open(path, "w", encoding="utf-8", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(header + ["config_hash"])
                for row in rows:
                    writer.writerow(list(row) + [self.config_hash])
            written.append(str(path))
        return written
