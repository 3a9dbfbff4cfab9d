"""Coupled partition trees, tree-based EMD, and tree-driven imputation.

Both axes of the reference matrix get a hierarchical partition: points are
grouped by affinity, observations by how they co-vary across points, and each
tree refines the affinity used to build the other.  The observation tree also
drives imputation of missing entries (deepest folder with an observed
sibling).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .dataset import DataMatrix, ReferenceSet
from .errors import InternalError, ValidationError
from . import spectral


@dataclass(frozen=True)
class AffinityMatrix:
    """Symmetric affinity with unit diagonal; cosine in [-1,1], kernel in [0,1]."""

    entries: np.ndarray
    kind: str = "kernel"          # "cosine" | "kernel"
    flagged_pairs: tuple = ()     # pairs where a zero restricted norm forced 0

    def __post_init__(self):
        a = self.entries
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValidationError(f"affinity must be square, got {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ValidationError("affinity has non-finite entries")
        if np.max(np.abs(a - a.T)) > 1e-12:
            raise ValidationError("affinity not symmetric within 1e-12")
        if np.max(np.abs(np.diag(a) - 1.0)) > 1e-12:
            raise ValidationError("affinity diagonal is not 1")
        lo = -1.0 if self.kind == "cosine" else 0.0
        if a.min() < lo - 1e-12 or a.max() > 1.0 + 1e-12:
            raise ValidationError(f"{self.kind} affinity entries outside [{lo}, 1]")

    @property
    def size(self) -> int:
        return self.entries.shape[0]


@dataclass(frozen=True)
class PartitionTree:
    """Nested partitions of one axis; level 1 is the root folder.

    ``levels[l-1]`` is level l: a tuple of disjoint, sorted index tuples
    covering the axis, each a subset of exactly one level-(l-1) folder.
    """

    axis: str                                  # "points" | "observations"
    levels: tuple[tuple[tuple[int, ...], ...], ...]

    def __post_init__(self):
        if not self.levels:
            raise ValidationError("tree must have at least one level")
        size = sum(len(f) for f in self.levels[0])
        if len(self.levels[0]) != 1:
            raise ValidationError("level 1 must be a single root folder")
        universe = frozenset(range(size))
        prev = None
        for l, level in enumerate(self.levels, start=1):
            seen: set[int] = set()
            for folder in level:
                if not folder:
                    raise ValidationError(f"empty folder at level {l}")
                if seen.intersection(folder):
                    raise ValidationError(f"overlapping folders at level {l}")
                seen.update(folder)
                if prev is not None and not any(set(folder) <= p for p in prev):
                    raise ValidationError(f"folder at level {l} not nested in level {l-1}")
            if seen != universe:
                raise ValidationError(f"level {l} does not cover the axis")
            prev = [set(f) for f in level]

    @property
    def size(self) -> int:
        return sum(len(f) for f in self.levels[0])

    @property
    def depth(self) -> int:
        return len(self.levels)

    def folders_at(self, level: int) -> tuple[tuple[int, ...], ...]:
        if not 1 <= level <= self.depth:
            raise ValidationError(f"level must be in [1, {self.depth}], got {level}")
        return self.levels[level - 1]

    def folder_of(self, level: int) -> np.ndarray:
        """Map index -> folder position at the given level."""
        out = np.empty(self.size, dtype=np.int64)
        for j, folder in enumerate(self.folders_at(level)):
            out[list(folder)] = j
        return out

    def to_json(self) -> dict:
        return {"levels": [[list(f) for f in level] for level in self.levels],
                "axis": self.axis, "schema_version": 1}

    @classmethod
    def from_json(cls, obj: dict) -> "PartitionTree":
        levels = tuple(tuple(tuple(int(i) for i in f) for f in level)
                       for level in obj["levels"])
        return cls(axis=obj["axis"], levels=levels)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, sort_keys=True)

    @classmethod
    def load(cls, path) -> "PartitionTree":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


@dataclass(frozen=True)
class Imputation:
    """One filled entry: the deepest folder with an observed sibling."""

    index: int
    value: float
    level: int
    folder: int
    support_count: int


@dataclass(frozen=True)
class TreeConfig:
    depth: int | None = None       # default ceil(log2(n)) - 1
    balance_factor: float = 1.5    # folder size cap = factor * axis/target
    embed_dim: int = 10
    beta: float = 1.0              # EMD level-weight exponent
    refine_iters: int = 2

    def depth_for(self, n: int) -> int:
        d = self.depth if self.depth is not None else max(1, math.ceil(math.log2(n)) - 1)
        # finest level cannot have more folders than members
        return max(1, min(d, int(math.floor(math.log2(n))) + 1)) if n > 1 else 1


def cosine_affinity(omega: ReferenceSet, d: DataMatrix) -> AffinityMatrix:
    """Cosine affinity over jointly observed entries, unit diagonal.

    A pair with empty joint support is a hard error (the reference set is
    supposed to guarantee overlap); a pair where either restricted norm is 0
    gets affinity 0 and is flagged.
    """
    rows = d.values[omega.indices]
    mask = d.mask[omega.indices]
    filled = np.where(mask, rows, 0.0)
    msk = mask.astype(float)

    support = msk @ msk.T
    n = len(omega.indices)
    off_diag = ~np.eye(n, dtype=bool)
    if np.any(support[off_diag] < 1):
        j, k = np.argwhere((support < 1) & off_diag)[0]
        raise ValidationError(f"points {j} and {k} in the reference set share no "
                              "observed entries")

    num = filled @ filled.T
    sq = (filled ** 2) @ msk.T            # |x_j|^2 restricted to supp(x_j) & supp(x_k)
    denom = np.sqrt(sq * sq.T)

    flagged = []
    with np.errstate(invalid="ignore", divide="ignore"):
        entries = np.where(denom > 0, num / np.where(denom > 0, denom, 1.0), 0.0)
    zero_norm = (denom <= 0) & off_diag
    if np.any(zero_norm):
        flagged = [tuple(p) for p in np.argwhere(np.triu(zero_norm, 1))]
    entries = np.clip(0.5 * (entries + entries.T), -1.0, 1.0)
    np.fill_diagonal(entries, 1.0)
    return AffinityMatrix(entries=entries, kind="cosine", flagged_pairs=tuple(flagged))


def _affinity_to_kernel(a: AffinityMatrix) -> spectral.Kernel:
    """Map a cosine affinity onto [0, 1] so it can drive a diffusion map."""
    if a.kind == "cosine":
        entries = 0.5 * (a.entries + 1.0)
    else:
        entries = a.entries.copy()
    entries = np.clip(entries, 0.0, 1.0)
    np.fill_diagonal(entries, 1.0)
    entries = 0.5 * (entries + entries.T)
    return spectral.Kernel(entries=entries, bandwidth={"rule": "affinity", "value": 1.0})


def _balanced_agglomerate(coords: np.ndarray, depth: int, balance_factor: float):
    """Bottom-up average-linkage merging with ~dyadic size targets.

    Returns partitions at folder counts 2^(depth-1), ..., 2, 1 (finest
    first).  Ties in linkage break on the smallest member indices so the
    construction is deterministic.
    """
    n = coords.shape[0]
    dist = cdist(coords, coords)
    np.fill_diagonal(dist, np.inf)

    folders: list[tuple[int, ...] | None] = [(i,) for i in range(n)]
    sizes = np.ones(n)
    active = np.ones(n, dtype=bool)
    targets = [2 ** (l - 1) for l in range(depth, 0, -1)]
    targets = [t for t in targets if t <= n]

    snapshots = []
    count = n
    for target in targets:
        cap = max(2.0, math.ceil(balance_factor * n / target))
        while count > target:
            pair = _best_pair(dist, sizes, active, folders, cap)
            while pair is None:
                cap *= 2.0
                pair = _best_pair(dist, sizes, active, folders, cap)
            i, j = pair
            merged = tuple(sorted(folders[i] + folders[j]))
            # Lance-Williams update for average linkage
            ni, nj = sizes[i], sizes[j]
            new_row = (ni * dist[i] + nj * dist[j]) / (ni + nj)
            dist[i, :] = new_row
            dist[:, i] = new_row
            dist[i, i] = np.inf
            dist[j, :] = np.inf
            dist[:, j] = np.inf
            folders[i] = merged
            folders[j] = None
            sizes[i] = ni + nj
            active[j] = False
            count -= 1
        part = sorted((f for f, alive in zip(folders, active) if alive and f is not None),
                      key=lambda f: f[0])
        snapshots.append(tuple(part))
    return snapshots


def _best_pair(dist, sizes, active, folders, cap):
    """Minimum-linkage active pair whose merged size fits under the cap."""
    idx = np.flatnonzero(active)
    best = None
    best_d = np.inf
    best_key = None
    sub = dist[np.ix_(idx, idx)]
    iu = np.triu_indices(len(idx), k=1)
    if len(iu[0]) == 0:
        return None
    vals = sub[iu]
    order = np.argsort(vals, kind="stable")
    for o in order:
        a, b = idx[iu[0][o]], idx[iu[1][o]]
        if sizes[a] + sizes[b] > cap:
            continue
        d = vals[o]
        if d > best_d + 1e-12 and best is not None:
            break
        key = tuple(sorted((folders[a][0], folders[b][0])))
        if best is None or d < best_d - 1e-12 or (abs(d - best_d) <= 1e-12 and key < best_key):
            best, best_d, best_key = (a, b), d, key
    return best


def build_partition_tree(a: AffinityMatrix, cfg: TreeConfig | None = None,
                         axis: str = "points") -> PartitionTree:
    """Diffusion-embed the affinity, then agglomerate into a ~dyadic tree."""
    cfg = cfg or TreeConfig()
    n = a.size
    depth = cfg.depth_for(n)
    if depth == 1 or n == 1:
        return PartitionTree(axis=axis, levels=((tuple(range(n)),),))

    kernel = _affinity_to_kernel(a)
    q = max(1, min(cfg.embed_dim, n - 1))
    emb = spectral.diffusion_embed(kernel, d=q, t=1.0)
    snapshots = _balanced_agglomerate(emb.coordinates, depth, cfg.balance_factor)

    levels = tuple(reversed(snapshots))        # root first
    if len(levels[0]) != 1:                    # degenerate guard
        levels = ((tuple(range(n)),),) + levels
    return PartitionTree(axis=axis, levels=levels)


def _folder_stats(tree: PartitionTree, vectors: np.ndarray, beta: float):
    """NaN-aware folder means and EMD weights for a batch of vectors.

    Returns (means, weights): means is (n_vectors, total_folders) with NaN
    where a folder has no observed entries; weights carry the
    2^(beta*(l-L)) * |folder| factor per folder column.
    """
    n_vec, width = vectors.shape
    if width != tree.size:
        raise ValidationError(f"vector length {width} does not match tree axis {tree.size}")
    obs = np.isfinite(vectors)
    filled = np.where(obs, vectors, 0.0)

    means_blocks = []
    weights = []
    L = tree.depth
    for l in range(1, L + 1):
        folders = tree.folders_at(l)
        ind = np.zeros((width, len(folders)))
        for j, folder in enumerate(folders):
            ind[list(folder), j] = 1.0
        sums = filled @ ind
        counts = obs.astype(float) @ ind
        with np.errstate(invalid="ignore", divide="ignore"):
            means = np.where(counts > 0, sums / np.maximum(counts, 1.0), np.nan)
        means_blocks.append(means)
        level_w = 2.0 ** (beta * (l - L))
        weights.extend(level_w * len(folder) for folder in folders)
    return np.concatenate(means_blocks, axis=1), np.asarray(weights)


def tree_emd_distance(tree: PartitionTree, x: np.ndarray, y: np.ndarray,
                      beta: float = 1.0) -> float:
    """Multiscale tree-L1 distance between two vectors on the tree's axis.

    Folders where either vector has no observed entries are excluded from
    both sides (symmetric exclusion of missing data).
    """
    means, weights = _folder_stats(tree, np.vstack([x, y]), beta)
    diff = means[0] - means[1]
    ok = np.isfinite(diff)
    return float(np.sum(weights[ok] * np.abs(diff[ok])))


def emd_distance_matrix(tree: PartitionTree, vectors: np.ndarray,
                        beta: float = 1.0) -> np.ndarray:
    """All pairwise tree-EMD distances; vectors must be complete (no NaN)."""
    if not np.all(np.isfinite(vectors)):
        raise ValidationError("emd_distance_matrix requires complete vectors; impute first")
    means, weights = _folder_stats(tree, vectors, beta)
    return cdist(means * weights, means * weights, metric="cityblock")


def emd_affinity(tree: PartitionTree, vectors: np.ndarray, beta: float = 1.0) -> AffinityMatrix:
    """exp(-d_EMD / eps) with eps = median nonzero pairwise distance."""
    dist = emd_distance_matrix(tree, vectors, beta)
    nonzero = dist[dist > 0]
    eps = float(np.median(nonzero)) if nonzero.size else 1.0
    entries = np.exp(-dist / eps)
    entries = 0.5 * (entries + entries.T)
    np.fill_diagonal(entries, 1.0)
    return AffinityMatrix(entries=entries, kind="kernel")


def impute(v: np.ndarray, tree: PartitionTree) -> list[Imputation]:
    """Fill each missing entry from the deepest folder with observed siblings.

    ``v`` is indexed by the tree's axis with NaN marking missing entries; the
    imputed value is the mean of the observed entries in the folder.
    """
    v = np.asarray(v, dtype=float)
    if v.shape != (tree.size,):
        raise ValidationError(f"vector length {v.shape} does not match tree axis {tree.size}")
    observed = np.isfinite(v)
    if not observed.any():
        raise ValidationError("cannot impute: vector has no observed entries")

    out = []
    for k in np.flatnonzero(~observed):
        for level in range(tree.depth, 0, -1):
            j = int(tree.folder_of(level)[k])
            members = np.asarray(tree.folders_at(level)[j])
            known = members[observed[members]]
            if len(known):
                out.append(Imputation(index=int(k), value=float(v[known].mean()),
                                      level=level, folder=j, support_count=len(known)))
                break
        else:
            raise InternalError(f"root folder missing entry {k}; tree does not cover axis")
    return out


def imputed_vector(v: np.ndarray, tree: PartitionTree) -> np.ndarray:
    out = np.asarray(v, dtype=float).copy()
    for imp in impute(out, tree):
        out[imp.index] = imp.value
    return out


def impute_matrix(rows: np.ndarray, tree: PartitionTree) -> np.ndarray:
    """Row-wise imputation against a tree on the column axis (vectorized)."""
    rows = np.asarray(rows, dtype=float)
    obs = np.isfinite(rows)
    no_obs = ~obs.any(axis=1)
    if no_obs.any():
        raise ValidationError(f"cannot impute rows with no observed entries: "
                              f"{np.flatnonzero(no_obs).tolist()}")
    filled = np.where(obs, rows, 0.0)
    out = rows.copy()
    remaining = ~obs
    for level in range(tree.depth, 0, -1):
        if not remaining.any():
            break
        folders = tree.folders_at(level)
        ind = np.zeros((tree.size, len(folders)))
        for j, folder in enumerate(folders):
            ind[list(folder), j] = 1.0
        sums = filled @ ind
        counts = obs.astype(float) @ ind
        folder_of = tree.folder_of(level)
        cell_counts = counts[:, folder_of]
        with np.errstate(invalid="ignore", divide="ignore"):
            cell_means = sums[:, folder_of] / np.maximum(cell_counts, 1.0)
        fill_here = remaining & (cell_counts > 0)
        out[fill_here] = cell_means[fill_here]
        remaining &= ~fill_here
    if remaining.any():
        raise InternalError("imputation left unfilled entries despite observed data")
    return out


def coupled_refine(omega: ReferenceSet, d: DataMatrix, iters: int = 2,
                   cfg: TreeConfig | None = None):
    """Alternate point/observation trees, refining affinities with tree EMD.

    Each round: points tree from the current point affinity, observation
    EMD affinity (columns imputed against the points tree), observation
    tree, then a fresh point EMD affinity (rows imputed against the
    observation tree).  Runs a fixed number of rounds, no convergence test.
    """
    if iters < 1:
        raise ValidationError(f"iters must be >= 1, got {iters}")
    cfg = cfg or TreeConfig()

    rows = d.values[omega.indices]
    a_pts = cosine_affinity(omega, d)

    points_tree = obs_tree = None
    for _ in range(iters):
        points_tree = build_partition_tree(a_pts, cfg, axis="points")
        cols = impute_matrix(rows.T, points_tree)          # observations over points
        a_obs = emd_affinity(points_tree, cols, cfg.beta)
        obs_tree = build_partition_tree(a_obs, cfg, axis="observations")
        full_rows = impute_matrix(rows, obs_tree)
        a_pts = emd_affinity(obs_tree, full_rows, cfg.beta)

    return points_tree, obs_tree, a_pts
