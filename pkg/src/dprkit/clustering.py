"""Density-based clustering with silhouette and SSE scoring.

DBSCAN over Euclidean distance, brute-force O(n^2); no spatial index.  A
point is core when its closed eps-neighborhood (itself included) holds at
least ``min_pts`` points; ``core_strict=True`` switches the rule to strictly
more than ``min_pts``.  Clusters are the connected components of the core
points under the eps relation; a non-core point within eps of one or more
core points joins the cluster of the claiming core with the smallest row
index, everything else is noise.  Cluster ids are canonical: numbered by the
first row at which each cluster appears.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ValidationError

NOISE = -1

EUCLIDEAN = "euclidean"


@dataclass(frozen=True)
class DbscanParams:
    eps: float
    min_pts: int
    metric: str = EUCLIDEAN
    core_strict: bool = False

    def __post_init__(self) -> None:
        if not math.isfinite(self.eps) or self.eps <= 0:
            raise ValidationError(f"eps must be finite and > 0, got {self.eps}")
        if int(self.min_pts) != self.min_pts or self.min_pts < 1:
            raise ValidationError(f"min_pts must be an integer >= 1, got {self.min_pts}")
        if self.metric != EUCLIDEAN:
            raise ValidationError(f"unsupported metric {self.metric!r}")


@dataclass
class ClusterModel:
    """Result of one dbscan run; labels use -1 for noise."""

    params: DbscanParams
    labels: np.ndarray
    k: int
    sc: float | None
    sse: float
    core_mask: np.ndarray

    @property
    def n_noise(self) -> int:
        return int(np.sum(self.labels == NOISE))


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise ValidationError(f"points must be a non-empty 2-d array, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValidationError("points contain non-finite values")
    return pts


def pairwise_distances(points) -> np.ndarray:
    """Full Euclidean distance matrix, computed from explicit differences.

    Chunked so memory stays ~O(n d) per block; the difference form avoids the
    cancellation of the expanded-norm shortcut, so coincident points get an
    exact zero.
    """
    pts = _as_points(points)
    n = pts.shape[0]
    out = np.empty((n, n), dtype=np.float64)
    step = max(1, int(2_000_000 // max(1, n * pts.shape[1])))
    for start in range(0, n, step):
        stop = min(n, start + step)
        diff = pts[start:stop, None, :] - pts[None, :, :]
        np.sqrt(np.einsum("ijk,ijk->ij", diff, diff), out=out[start:stop])
    return out


def region_query(points, i: int, eps: float) -> set[int]:
    """Indices within the closed eps-ball around row i, the point itself included."""
    pts = _as_points(points)
    if not 0 <= i < pts.shape[0]:
        raise ValidationError(f"row index {i} out of range for {pts.shape[0]} points")
    if not math.isfinite(eps) or eps < 0:
        raise ValidationError(f"eps must be finite and >= 0, got {eps}")
    diff = pts - pts[i]
    dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    return set(np.flatnonzero(dist <= eps).tolist())


def _canonical_relabel(labels: np.ndarray) -> tuple[np.ndarray, int]:
    out = np.full_like(labels, NOISE)
    mapping: dict[int, int] = {}
    for i, lab in enumerate(labels):
        if lab == NOISE:
            continue
        if lab not in mapping:
            mapping[lab] = len(mapping)
        out[i] = mapping[lab]
    return out, len(mapping)


def dbscan(points, params: DbscanParams, distances: np.ndarray | None = None) -> ClusterModel:
    """Cluster ``points`` and score the result.

    ``sc`` is None when the silhouette is undefined (fewer than two clusters,
    or no cluster with at least two members).  ``sse`` is always defined;
    noise contributes zero.
    """
    pts = _as_points(points)
    n = pts.shape[0]
    D = pairwise_distances(pts) if distances is None else distances
    neigh = D <= params.eps
    counts = neigh.sum(axis=1)
    if params.core_strict:
        core = counts > params.min_pts
    else:
        core = counts >= params.min_pts

    labels = np.full(n, NOISE, dtype=np.intp)
    comp = np.full(n, NOISE, dtype=np.intp)
    cid = 0
    for seed in range(n):
        if not core[seed] or comp[seed] != NOISE:
            continue
        comp[seed] = cid
        queue = [seed]
        while queue:
            i = queue.pop()
            for j in np.flatnonzero(neigh[i] & core):
                if comp[j] == NOISE:
                    comp[j] = cid
                    queue.append(int(j))
        cid += 1
    labels[core] = comp[core]

    core_rows = np.flatnonzero(core)
    for i in np.flatnonzero(~core):
        claimants = core_rows[neigh[i, core_rows]]
        if claimants.size:
            labels[i] = comp[claimants[0]]  # smallest-index core claims the border point

    labels, k = _canonical_relabel(labels)

    sc = None
    if k >= 2:
        sizes = np.bincount(labels[labels != NOISE], minlength=k)
        if sizes.max() >= 2:
            sc = _silhouette_from_distances(D, labels, k)
    return ClusterModel(
        params=params,
        labels=labels,
        k=k,
        sc=sc,
        sse=sse(pts, labels),
        core_mask=core,
    )


def _silhouette_from_distances(D: np.ndarray, labels: np.ndarray, k: int) -> float:
    member = labels != NOISE
    idx = np.flatnonzero(member)
    lab = labels[idx]
    sub = D[np.ix_(idx, idx)]
    counts = np.bincount(lab, minlength=k).astype(np.float64)
    # per-point sums of distance into each cluster
    sums = np.zeros((idx.size, k))
    for c in range(k):
        sums[:, c] = sub[:, lab == c].sum(axis=1)

    own = counts[lab]
    s = np.zeros(idx.size)
    multi = own > 1
    a = np.zeros(idx.size)
    a[multi] = sums[np.arange(idx.size), lab][multi] / (own[multi] - 1.0)

    ratio = sums / counts[None, :]
    ratio[np.arange(idx.size), lab] = np.inf
    b = ratio.min(axis=1)

    denom = np.maximum(a, b)
    ok = multi & (denom > 0)
    s[ok] = (b[ok] - a[ok]) / denom[ok]
    # singletons and zero-denominator points stay at 0 by convention
    return float(s.mean())


def silhouette_sc(points, labels) -> float:
    """Mean silhouette over non-noise points.

    Noise is excluded entirely; a singleton member scores 0, as does any
    point whose max(a, b) is 0.  Raises when fewer than two clusters remain
    after noise removal.
    """
    pts = _as_points(points)
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape != (pts.shape[0],):
        raise ValidationError("labels length does not match points")
    ids = np.unique(labels[labels != NOISE])
    if ids.size < 2:
        raise ValidationError(
            f"silhouette undefined: {ids.size} cluster(s) after noise removal"
        )
    canon, k = _canonical_relabel(labels)
    return _silhouette_from_distances(pairwise_distances(pts), canon, k)


def sse(points, labels) -> float:
    """Sum of squared distances to each cluster's centroid; noise adds 0."""
    pts = _as_points(points)
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape != (pts.shape[0],):
        raise ValidationError("labels length does not match points")
    total = 0.0
    for c in np.unique(labels[labels != NOISE]):
        member = pts[labels == c]
        centroid = member.mean(axis=0)
        total += float(((member - centroid) ** 2).sum())
    return total


def k_distance_profile(points, k: int) -> np.ndarray:
    """Distance to each point's k-th nearest neighbor (self excluded), sorted descending."""
    pts = _as_points(points)
    n = pts.shape[0]
    if int(k) != k or not 1 <= k < n:
        raise ValidationError(f"k must be an integer in [1, {n - 1}], got {k}")
    D = pairwise_distances(pts)
    ordered = np.sort(D, axis=1)
    kth = ordered[:, int(k)]  # position 0 is the self-distance 0
    return np.sort(kth)[::-1].copy()


@dataclass(frozen=True)
class ScanRow:
    eps: float
    min_pts: int
    k: int
    sc: float | None
    sse: float


def scan_params(
    points,
    eps_grid: Sequence[float],
    minpts_grid: Sequence[int],
    core_strict: bool = False,
    threads: int = 1,
) -> list[ScanRow]:
    """Evaluate dbscan over the full eps x min_pts grid.

    One row per combination, eps varying slowest, in grid order.  Rows where
    the silhouette is undefined carry ``sc=None``.  Cells are independent, so
    they may be evaluated concurrently; assembly order is fixed by the grid.
    """
    pts = _as_points(points)
    if len(eps_grid) == 0 or len(minpts_grid) == 0:
        raise ValidationError("scan grids must be non-empty")
    D = pairwise_distances(pts)
    cells = [
        DbscanParams(eps=float(e), min_pts=int(m), core_strict=core_strict)
        for e in eps_grid
        for m in minpts_grid
    ]

    def _cell(p: DbscanParams) -> ScanRow:
        model = dbscan(pts, p, distances=D)
        return ScanRow(p.eps, p.min_pts, model.k, model.sc, model.sse)

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(_cell, cells))
    return [_cell(p) for p in cells]


def suggest_params(rows: Sequence[ScanRow]) -> ScanRow | None:
    """The SC-maximizing row; first in grid order on ties, None if SC never defined."""
    best: ScanRow | None = None
    for row in rows:
        if row.sc is None:
            continue
        if best is None or row.sc > best.sc:
            best = row
    return best


def assign_by_nearest_core(train_points, model: ClusterModel, new_points) -> np.ndarray:
    """Extend a fitted clustering to new rows.

    Each new row takes the label of its nearest core point when that core is
    within eps, and NOISE otherwise.  Ties go to the smallest core row index.
    """
    train = _as_points(train_points)
    new = _as_points(new_points)
    if train.shape[0] != model.labels.shape[0]:
        raise ValidationError("train points do not match the cluster model")
    if train.shape[1] != new.shape[1]:
        raise ValidationError("new points have a different dimension than train points")
    cores = np.flatnonzero(model.core_mask)
    out = np.full(new.shape[0], NOISE, dtype=np.intp)
    if cores.size == 0:
        return out
    core_pts = train[cores]
    for i in range(new.shape[0]):
        diff = core_pts - new[i]
        dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
        j = int(np.argmin(dist))  # first minimum = smallest core row index
        if dist[j] <= model.params.eps:
            out[i] = model.labels[cores[j]]
    return out
