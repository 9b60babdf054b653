"""
Clustering of per-head trajectories: Euclidean k-means, DTW k-means with
barycenter averaging, shape-based (SBD) k-means, and Ward agglomerative
clustering, with the usual internal metrics and cross-run label transfer.
"""
import json
import logging
import os
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import networkx as nx
import numpy as np
import pandas as pd
from networkx.readwrite import json_graph
from scipy.optimize import linear_sum_assignment
from sklearn.cluster import AgglomerativeClustering, kmeans_plusplus
from sklearn.metrics import (adjusted_rand_score, calinski_harabasz_score, davies_bouldin_score,
                             silhouette_score)

logger = logging.getLogger(__name__)

ALGORITHMS = ("kmeans", "dtw", "sbd", "hac")
OBJECTIVE_TOLERANCE = 1e-9


class DegenerateSeriesError(ValueError):
    """Raised when a shape-based distance is asked of a zero-norm series."""


@dataclass
class TrajectoryMatrix:
    """
    One row per head; each row is the concatenation of one series per
    (metric, source) segment, all sampled at ``steps``.
    """
    values: np.ndarray
    heads: List[str]
    steps: List[int]
    segments: List[Tuple[str, str]] = field(default_factory=lambda: [("value", "")])
    imputed: List[Tuple[str, str, str, int]] = field(default_factory=list)
    dropped: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"trajectory matrix must be 2-D, got shape {self.values.shape}")
        if len(self.heads) != self.values.shape[0]:
            raise ValueError(f"{len(self.heads)} head ids for {self.values.shape[0]} rows")
        if self.values.shape[0] and self.values.shape[1] != len(self.steps) * len(self.segments):
            raise ValueError(f"row length {self.values.shape[1]} does not match {len(self.segments)} "
                             f"segments of {len(self.steps)} steps")
        if np.isnan(self.values).any():
            raise ValueError("trajectory matrix has missing cells; impute or drop rows first")

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def segment_length(self) -> int:
        return len(self.steps)

    @classmethod
    def from_array(cls, values, heads: Optional[Sequence[str]] = None) -> "TrajectoryMatrix":
        values = np.atleast_2d(np.asarray(values, dtype=np.float64))
        if values.size == 0:
            values = values.reshape(0, values.shape[-1] if values.ndim == 2 else 0)
        heads = list(heads) if heads is not None else [f"row_{i}" for i in range(values.shape[0])]
        return cls(values, heads, list(range(values.shape[1])))

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, segments: Optional[Sequence[Tuple[str, str]]] = None,
                   targets: Optional[Sequence[str]] = None, impute: str = "interpolate") -> "TrajectoryMatrix":
        """
        Pivot trajectory rows (step, target, source, metric, value) into a matrix.

        Args:
            segments: (metric, source) pairs to concatenate per head, in order;
                all pairs present in the frame when omitted.
            targets: heads to keep; all targets present when omitted.
            impute: "interpolate" fills missing cells linearly along steps,
                "drop" removes any head with a missing cell.
        """
        if impute not in ("interpolate", "drop"):
            raise ValueError(f"impute must be 'interpolate' or 'drop', got {impute}")
        if segments is None:
            pairs = frame[["metric", "source"]].drop_duplicates().sort_values(["metric", "source"])
            segments = [tuple(p) for p in pairs.itertuples(index=False)]
        segments = [tuple(s) for s in segments]
        steps = sorted(int(s) for s in frame["step"].unique())
        heads = sorted(frame["target"].unique()) if targets is None else list(targets)
        missing_heads = [h for h in heads if h not in set(frame["target"])]
        if missing_heads:
            raise ValueError(f"no trajectory rows for heads {missing_heads}")

        blocks = []
        imputed = []
        for metric, source in segments:
            part = frame[(frame["metric"] == metric) & (frame["source"] == source)]
            if part.empty:
                raise ValueError(f"no trajectory rows for metric '{metric}' on source '{source}'")
            table = part.pivot_table(index="target", columns="step", values="value", aggfunc="first")
            table = table.reindex(index=heads, columns=steps).astype(float)
            for head, step in zip(*np.where(table.isna().to_numpy())):
                imputed.append((heads[head], metric, source, steps[step]))
            blocks.append(table)

        dropped = []
        if impute == "drop":
            bad = set(h for h, *_ in imputed)
            dropped = [h for h in heads if h in bad]
            imputed = []
        else:
            for i, table in enumerate(blocks):
                filled = table.interpolate(axis=1, limit_direction="both")
                dropped.extend(h for h in heads if filled.loc[h].isna().all() and h not in dropped)
                blocks[i] = filled
        keep = [h for h in heads if h not in dropped]
        imputed = [cell for cell in imputed if cell[0] not in dropped]
        for head, metric, source, step in imputed:
            logger.warning(f"Imputed missing {metric}/{source} cell for {head} at step {step}")
        for head in dropped:
            logger.warning(f"Dropped {head} from clustering: missing trajectory cells")
        values = np.hstack([b.loc[keep].to_numpy() for b in blocks]) if keep else np.zeros((0, len(steps) * len(segments)))
        return cls(values, keep, steps, segments, imputed, dropped)


@dataclass
class ClusteringResult:
    algorithm: str
    k: int
    labels: np.ndarray
    centroids: Optional[np.ndarray]
    objective: float
    seed: int
    metrics: Dict[str, Optional[float]] = field(default_factory=dict)
    normalized: bool = False
    segments: int = 1
    segment_length: int = 0
    window: Optional[int] = None
    dendrogram: Optional[dict] = None

    def to_dict(self) -> dict:
        return {
            "algorithm": self.algorithm,
            "k": self.k,
            "labels": [int(x) for x in self.labels],
            "objective": self.objective,
            "seed": self.seed,
            "metrics": self.metrics,
            "normalized": self.normalized,
            "segments": self.segments,
            "segment_length": self.segment_length,
            "window": self.window,
        }


def _matrix(m: Union[TrajectoryMatrix, np.ndarray]) -> TrajectoryMatrix:
    return m if isinstance(m, TrajectoryMatrix) else TrajectoryMatrix.from_array(m)


def _check_k(rows: int, k: int):
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    if k > rows:
        raise ValueError(f"k ({k}) exceeds the number of rows ({rows})")


def znormalize(x: np.ndarray, strict: bool = False) -> np.ndarray:
    """Row-wise zero mean and unit variance; constant rows become zeros unless ``strict``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    centred = x - x.mean(axis=1, keepdims=True)
    std = x.std(axis=1, keepdims=True)
    if strict and (std == 0).any():
        raise DegenerateSeriesError("cannot z-normalize a constant series")
    return np.divide(centred, std, out=np.zeros_like(centred), where=std > 0)


def canonical_labels(labels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Relabel clusters in order of first appearance; returns (labels, old-id order)."""
    order = list(dict.fromkeys(int(x) for x in labels))
    mapping = {old: new for new, old in enumerate(order)}
    return np.array([mapping[int(x)] for x in labels], dtype=int), np.array(order, dtype=int)


def _fix_empty(labels: np.ndarray, costs: np.ndarray, k: int, centroids: List[np.ndarray],
               x: np.ndarray) -> np.ndarray:
    """Give every empty cluster the point farthest from its own centroid."""
    labels = labels.copy()
    moved = set()
    for j in range(k):
        if np.any(labels == j):
            continue
        sizes = np.bincount(labels, minlength=k)
        candidates = [i for i in np.argsort(-costs, kind="stable") if i not in moved and sizes[labels[i]] > 1]
        if not candidates:
            raise ValueError(f"cannot form {k} nonempty clusters from these rows")
        i = candidates[0]
        labels[i] = j
        costs[i] = 0.0
        centroids[j] = x[i].copy()
        moved.add(i)
    return labels


def _check_objective(objective: float, previous: float, algorithm: str, iteration: int):
    if objective > previous + OBJECTIVE_TOLERANCE * max(1.0, abs(previous)):
        raise RuntimeError(f"{algorithm} objective increased at iteration {iteration}: "
                           f"{previous:.12g} -> {objective:.12g}")


def _restart_state(seed: int, restart: int) -> int:
    return int(np.random.SeedSequence([seed, restart]).generate_state(1)[0])


def _lloyd(x: np.ndarray, centers: np.ndarray, max_iter: int) -> Tuple[np.ndarray, np.ndarray, float]:
    k = centers.shape[0]
    centers = centers.copy()
    labels = None
    previous = np.inf
    for iteration in range(max_iter):
        d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1)
        new_labels = d2.argmin(axis=1)
        costs = d2[np.arange(len(x)), new_labels]
        as_list = list(centers)
        new_labels = _fix_empty(new_labels, costs, k, as_list, x)
        centers = np.array([x[new_labels == j].mean(axis=0) for j in range(k)])
        objective = float(((x - centers[new_labels]) ** 2).sum())
        _check_objective(objective, previous, "k-means", iteration)
        previous = objective
        if labels is not None and np.array_equal(labels, new_labels):
            break
        labels = new_labels
    return labels, centers, previous


def kmeans_euclidean(m: Union[TrajectoryMatrix, np.ndarray], k: int, seed: int = 0, restarts: int = 32,
                     max_iter: int = 300, normalize: bool = False) -> ClusteringResult:
    """
    Lloyd k-means with k-means++ seeding; the best of ``restarts`` runs by
    within-cluster sum of squares.
    """
    matrix = _matrix(m)
    _check_k(matrix.rows, k)
    x = znormalize(matrix.values) if normalize else matrix.values
    best = None
    for restart in range(restarts):
        init, _ = kmeans_plusplus(x, n_clusters=k, random_state=_restart_state(seed, restart))
        labels, centers, objective = _lloyd(x, init, max_iter)
        if best is None or objective < best[2]:
            best = (labels, centers, objective)
    labels, order = canonical_labels(best[0])
    result = ClusteringResult("kmeans", k, labels, best[1][order], best[2], seed, normalized=normalize,
                              segments=len(matrix.segments), segment_length=matrix.segment_length)
    result.metrics = cluster_metrics(x, labels)
    logger.info(f"Euclidean k-means k={k}: WCSS {best[2]:.6g} over {restarts} restarts")
    return result


def _dtw_table(a: np.ndarray, b: np.ndarray, window: Optional[int]) -> np.ndarray:
    n, m = len(a), len(b)
    if n == 0 or m == 0:
        raise ValueError("DTW needs nonempty series")
    radius = max(n, m) if window is None else max(int(window), abs(n - m))
    table = np.full((n + 1, m + 1), np.inf)
    table[0, 0] = 0.0
    for i in range(1, n + 1):
        lo, hi = max(1, i - radius), min(m, i + radius)
        for j in range(lo, hi + 1):
            cost = (a[i - 1] - b[j - 1]) ** 2
            table[i, j] = cost + min(table[i - 1, j], table[i, j - 1], table[i - 1, j - 1])
    return table


def dtw_distance(a, b, window: Optional[int] = None) -> float:
    """
    Dynamic-time-warping cost with squared local distance and an optional
    Sakoe-Chiba band of the given radius.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(_dtw_table(a, b, window)[len(a), len(b)])


def dtw_path(a, b, window: Optional[int] = None) -> Tuple[float, List[Tuple[int, int]]]:
    """Optimal warping path as (index in a, index in b) pairs from the start."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    table = _dtw_table(a, b, window)
    i, j = len(a), len(b)
    path = [(i - 1, j - 1)]
    while (i, j) != (1, 1):
        steps = [(table[i - 1, j - 1], i - 1, j - 1), (table[i - 1, j], i - 1, j), (table[i, j - 1], i, j - 1)]
        _, i, j = min(steps, key=lambda s: s[0])
        path.append((i - 1, j - 1))
    return float(table[len(a), len(b)]), path[::-1]


def dba(centroid: np.ndarray, members: np.ndarray, iterations: int = 10,
        window: Optional[int] = None) -> np.ndarray:
    """DTW barycenter averaging starting from ``centroid``."""
    centroid = np.asarray(centroid, dtype=np.float64).copy()
    for _ in range(iterations):
        sums = np.zeros_like(centroid)
        counts = np.zeros_like(centroid)
        for series in members:
            _, path = dtw_path(centroid, series, window)
            for i, j in path:
                sums[i] += series[j]
                counts[i] += 1
        updated = np.divide(sums, counts, out=centroid.copy(), where=counts > 0)
        if np.allclose(updated, centroid, rtol=0.0, atol=1e-12):
            break
        centroid = updated
    return centroid


def _pairwise(x: np.ndarray, centroids: Sequence[np.ndarray], distance) -> np.ndarray:
    return np.array([[distance(row, c) for c in centroids] for row in x])


def _dtw_run(x: np.ndarray, k: int, rng: np.random.Generator, max_iter: int, window: Optional[int],
             dba_iterations: int) -> Tuple[np.ndarray, List[np.ndarray], float]:
    def distance(a, b):
        return dtw_distance(a, b, window)

    n = len(x)
    chosen = [int(rng.integers(n))]
    while len(chosen) < k:
        d = np.array([min(distance(x[i], x[c]) for c in chosen) for i in range(n)])
        d[chosen] = 0.0
        if d.sum() > 0:
            chosen.append(int(rng.choice(n, p=d / d.sum())))
        else:
            remaining = [i for i in range(n) if i not in chosen]
            chosen.append(int(rng.choice(remaining)))
    centroids = [x[c].copy() for c in chosen]

    labels = None
    previous = np.inf
    for iteration in range(max_iter):
        d = _pairwise(x, centroids, distance)
        new_labels = d.argmin(axis=1)
        costs = d[np.arange(n), new_labels]
        new_labels = _fix_empty(new_labels, costs, k, centroids, x)
        for j in range(k):
            members = x[new_labels == j]
            current = sum(distance(s, centroids[j]) for s in members)
            candidate = dba(centroids[j], members, dba_iterations, window)
            if sum(distance(s, candidate) for s in members) <= current:
                centroids[j] = candidate
        objective = float(sum(distance(x[i], centroids[new_labels[i]]) for i in range(n)))
        _check_objective(objective, previous, "DTW k-means", iteration)
        previous = objective
        if labels is not None and np.array_equal(labels, new_labels):
            break
        labels = new_labels
    return labels, centroids, previous


def kmeans_dtw(m: Union[TrajectoryMatrix, np.ndarray], k: int, seed: int = 0, restarts: int = 8,
               max_iter: int = 50, window: Optional[int] = None, dba_iterations: int = 10,
               normalize: bool = False, workers: int = 1) -> ClusteringResult:
    """
    K-means under DTW with D^2-sampled seeding and DBA centroids.

    A centroid update is kept only when it does not raise its cluster's cost.
    """
    matrix = _matrix(m)
    _check_k(matrix.rows, k)
    x = znormalize(matrix.values) if normalize else matrix.values

    def run(restart):
        rng = np.random.default_rng(np.random.SeedSequence([seed, restart]))
        return _dtw_run(x, k, rng, max_iter, window, dba_iterations)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(run, range(restarts)))
    else:
        runs = [run(r) for r in range(restarts)]
    best = min(runs, key=lambda r: r[2])
    labels, order = canonical_labels(best[0])
    centroids = np.array([best[1][j] for j in order])
    result = ClusteringResult("dtw", k, labels, centroids, best[2], seed, normalized=normalize,
                              segments=len(matrix.segments), segment_length=matrix.segment_length, window=window)
    result.metrics = cluster_metrics(x, labels)
    logger.info(f"DTW k-means k={k}: cost {best[2]:.6g} over {restarts} restarts")
    return result


def _cross_correlation(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Sum_t a[t + lag] b[t] for lag = -(len(b) - 1) .. len(a) - 1."""
    size = 1 << int(np.ceil(np.log2(len(a) + len(b) - 1)))
    cc = np.fft.irfft(np.fft.rfft(a, size) * np.conj(np.fft.rfft(b, size)), size)
    return np.concatenate([cc[size - (len(b) - 1):], cc[:len(a)]]) if len(b) > 1 else cc[:len(a)]


def sbd_distance(a, b) -> float:
    """
    Shape-based distance: 1 minus the maximum normalized cross-correlation
    over all lags. In [0, 2].

    Raises:
        DegenerateSeriesError: if either series has zero norm.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    norm = np.linalg.norm(a) * np.linalg.norm(b)
    if norm == 0.0:
        raise DegenerateSeriesError("shape-based distance is undefined for a zero-norm series")
    ncc = _cross_correlation(a, b).max() / norm
    return float(min(2.0, max(0.0, 1.0 - ncc)))


def _align(reference: np.ndarray, series: np.ndarray) -> np.ndarray:
    """Shift ``series`` (zero-filled) to its best cross-correlation lag against ``reference``."""
    if not np.any(reference):
        return series
    n = len(series)
    lag = int(np.argmax(_cross_correlation(reference, series))) - (n - 1)
    aligned = np.zeros_like(series)
    if lag >= 0:
        aligned[lag:] = series[:n - lag]
    else:
        aligned[:n + lag] = series[-lag:]
    return aligned


def shape_extraction(members: np.ndarray, centroid: np.ndarray) -> np.ndarray:
    """Centroid maximizing squared NCC to the aligned, z-normalized members."""
    aligned = znormalize(np.array([_align(centroid, s) for s in members]))
    n = aligned.shape[1]
    s = aligned.T @ aligned
    q = np.eye(n) - np.ones((n, n)) / n
    _, vectors = np.linalg.eigh(q @ s @ q)
    shape = vectors[:, -1]
    if np.linalg.norm(aligned[0] - shape) > np.linalg.norm(aligned[0] + shape):
        shape = -shape
    return znormalize(shape, strict=False)[0]


def _sbd_run(x: np.ndarray, k: int, rng: np.random.Generator, max_iter: int) -> Tuple[np.ndarray, List[np.ndarray], float]:
    n, length = x.shape
    labels = rng.permutation(np.arange(n) % k)
    centroids = [shape_extraction(x[labels == j], np.zeros(length)) for j in range(k)]
    previous = float(sum(sbd_distance(x[i], centroids[labels[i]]) for i in range(n)))
    for iteration in range(max_iter):
        d = _pairwise(x, centroids, sbd_distance)
        new_labels = d.argmin(axis=1)
        costs = d[np.arange(n), new_labels]
        new_labels = _fix_empty(new_labels, costs, k, centroids, x)
        for j in range(k):
            members = x[new_labels == j]
            current = sum(sbd_distance(s, centroids[j]) for s in members)
            candidate = shape_extraction(members, centroids[j])
            if np.any(candidate) and sum(sbd_distance(s, candidate) for s in members) <= current:
                centroids[j] = candidate
        objective = float(sum(sbd_distance(x[i], centroids[new_labels[i]]) for i in range(n)))
        _check_objective(objective, previous, "shape-based k-means", iteration)
        previous = objective
        if np.array_equal(labels, new_labels) and iteration > 0:
            break
        labels = new_labels
    return labels, centroids, previous


def kmeans_sbd(m: Union[TrajectoryMatrix, np.ndarray], k: int, seed: int = 0, restarts: int = 8,
               max_iter: int = 100) -> ClusteringResult:
    """
    Shape-based k-means over z-normalized rows with shape-extraction centroids.

    Raises:
        DegenerateSeriesError: if a row is constant.
    """
    matrix = _matrix(m)
    _check_k(matrix.rows, k)
    if len(matrix.segments) > 1:
        logger.warning(f"Shape-based clustering on {len(matrix.segments)} concatenated metric series; "
                       f"single-metric input usually clusters better")
    x = znormalize(matrix.values, strict=True)
    runs = [_sbd_run(x, k, np.random.default_rng(np.random.SeedSequence([seed, r])), max_iter)
            for r in range(restarts)]
    best = min(runs, key=lambda r: r[2])
    labels, order = canonical_labels(best[0])
    centroids = np.array([best[1][j] for j in order])
    result = ClusteringResult("sbd", k, labels, centroids, best[2], seed, normalized=True,
                              segments=len(matrix.segments), segment_length=matrix.segment_length)
    result.metrics = cluster_metrics(x, labels)
    logger.info(f"Shape-based k-means k={k}: cost {best[2]:.6g} over {restarts} restarts")
    return result


def dendrogram_tree(model: AgglomerativeClustering, names: Sequence[str]) -> dict:
    """Merge tree as nested JSON: leaves carry the row name, merges their height."""
    n = len(names)
    graph = nx.DiGraph()
    for i, name in enumerate(names):
        graph.add_node(i, name=name, height=0.0)
    for step, (left, right) in enumerate(model.children_):
        node = n + step
        graph.add_node(node, name=f"merge_{step}", height=float(model.distances_[step]))
        graph.add_edge(node, int(left))
        graph.add_edge(node, int(right))
    root = n + len(model.children_) - 1
    return json_graph.tree_data(graph, root)


def hac_ward(m: Union[TrajectoryMatrix, np.ndarray], k: int, normalize: bool = False) -> ClusteringResult:
    """
    Ward agglomerative clustering cut at ``k`` clusters, deterministic in the
    row order. Centroids are the cluster means.
    """
    matrix = _matrix(m)
    _check_k(matrix.rows, k)
    x = znormalize(matrix.values) if normalize else matrix.values
    dendrogram = None
    if matrix.rows == 1:
        raw = np.zeros(1, dtype=int)
    else:
        model = AgglomerativeClustering(n_clusters=k, linkage="ward", compute_full_tree=True,
                                        compute_distances=True).fit(x)
        raw = model.labels_
        dendrogram = dendrogram_tree(model, matrix.heads)
    labels, _ = canonical_labels(raw)
    centroids = np.array([x[labels == j].mean(axis=0) for j in range(k)])
    objective = float(((x - centroids[labels]) ** 2).sum())
    result = ClusteringResult("hac", k, labels, centroids, objective, 0, normalized=normalize,
                              segments=len(matrix.segments), segment_length=matrix.segment_length,
                              dendrogram=dendrogram)
    result.metrics = cluster_metrics(x, labels)
    return result


def cluster(m: Union[TrajectoryMatrix, np.ndarray], algorithm: str, k: int, seed: int = 0,
            normalize: bool = False, **options) -> ClusteringResult:
    if algorithm == "kmeans":
        return kmeans_euclidean(m, k, seed, normalize=normalize, **options)
    if algorithm == "dtw":
        return kmeans_dtw(m, k, seed, normalize=normalize, **options)
    if algorithm == "sbd":
        return kmeans_sbd(m, k, seed, **options)
    if algorithm == "hac":
        return hac_ward(m, k, normalize=normalize)
    raise ValueError(f"algorithm must be one of {ALGORITHMS}, got {algorithm}")


def cluster_metrics(m: Union[TrajectoryMatrix, np.ndarray], labels) -> Dict[str, Optional[float]]:
    """
    Silhouette, Calinski-Harabasz and Davies-Bouldin over Euclidean distance;
    a metric that is undefined for the labelling is reported as None.
    """
    x = m.values if isinstance(m, TrajectoryMatrix) else np.atleast_2d(np.asarray(m, dtype=np.float64))
    labels = np.asarray(labels)
    clusters = len(np.unique(labels))
    metrics = {"silhouette": None, "calinski_harabasz": None, "davies_bouldin": None}
    if not 2 <= clusters <= len(labels) - 1:
        return metrics
    metrics["silhouette"] = float(silhouette_score(x, labels))
    metrics["calinski_harabasz"] = float(calinski_harabasz_score(x, labels))
    metrics["davies_bouldin"] = float(davies_bouldin_score(x, labels))
    return metrics


def _resample(values: np.ndarray, segments: int, length: int) -> np.ndarray:
    """Linearly resample every segment of every row to ``length`` points."""
    rows, width = values.shape
    current = width // segments
    if current == length:
        return values
    grid_old = np.linspace(0.0, 1.0, current)
    grid_new = np.linspace(0.0, 1.0, length)
    out = np.empty((rows, segments * length))
    for r in range(rows):
        for s in range(segments):
            chunk = values[r, s * current:(s + 1) * current]
            out[r, s * length:(s + 1) * length] = np.interp(grid_new, grid_old, chunk) if current > 1 else chunk[0]
    return out


def transfer_labels(fitted: ClusteringResult, m_new: Union[TrajectoryMatrix, np.ndarray]) -> np.ndarray:
    """
    Nearest-centroid labels for new rows under the fitted algorithm's distance.

    Rows are resampled segment-wise to the fitted length when step counts differ.
    """
    if fitted.centroids is None:
        raise ValueError(f"{fitted.algorithm} result has no centroids to transfer")
    matrix = _matrix(m_new)
    if matrix.rows == 0:
        return np.zeros(0, dtype=int)
    if isinstance(m_new, TrajectoryMatrix) and len(matrix.segments) != fitted.segments:
        raise ValueError(f"new matrix concatenates {len(matrix.segments)} metric series, "
                         f"the fitted clustering {fitted.segments}")
    length = fitted.segment_length or fitted.centroids.shape[1] // fitted.segments
    x = _resample(matrix.values, fitted.segments, length)
    if fitted.algorithm == "sbd":
        x = znormalize(x, strict=True)
        distance = sbd_distance
    elif fitted.algorithm == "dtw":
        x = znormalize(x) if fitted.normalized else x

        def distance(a, b):
            return dtw_distance(a, b, fitted.window)
    else:
        x = znormalize(x) if fitted.normalized else x

        def distance(a, b):
            return float(((a - b) ** 2).sum())
    return _pairwise(x, list(fitted.centroids), distance).argmin(axis=1)


def adjusted_rand(labels_a, labels_b) -> float:
    return float(adjusted_rand_score(np.asarray(labels_a), np.asarray(labels_b)))


def align_labels(reference, labels) -> np.ndarray:
    """Map ``labels`` onto ``reference`` ids by maximum overlap; unmatched ids get fresh ones."""
    reference = np.asarray(reference)
    labels = np.asarray(labels)
    table = pd.crosstab(labels, reference)
    rows, cols = linear_sum_assignment(-table.to_numpy())
    mapping = {table.index[r]: table.columns[c] for r, c in zip(rows, cols)}
    fresh = int(reference.max()) + 1 if reference.size else 0
    for label in table.index:
        if label not in mapping:
            mapping[label] = fresh
            fresh += 1
    return np.array([mapping[x] for x in labels], dtype=int)


def vote_report(results: Dict[str, ClusteringResult], heads: Sequence[str],
                reference: Optional[str] = None) -> pd.DataFrame:
    """
    Per-row labels of every algorithm aligned to a reference clustering,
    with the majority label and the fraction of algorithms agreeing with it.
    """
    if not results:
        raise ValueError("vote_report needs at least one clustering result")
    reference = reference or next(iter(results))
    base = results[reference].labels
    frame = pd.DataFrame({"head": list(heads)})
    for name, result in results.items():
        frame[name] = align_labels(base, result.labels)
    votes = frame[list(results)].to_numpy()
    majority, agreement = [], []
    for row in votes:
        label, count = Counter(row.tolist()).most_common(1)[0]
        majority.append(label)
        agreement.append(count / len(row))
    frame["majority"] = majority
    frame["agreement"] = agreement
    return frame


def contingency(labels, heads: Sequence[str], types: Dict[str, str]) -> pd.DataFrame:
    """Head-type by cluster counts; heads without a type are counted as 'unclassified'."""
    kinds = [types.get(h, "unclassified") for h in heads]
    return pd.crosstab(pd.Series(kinds, name="type"), pd.Series(np.asarray(labels), name="cluster"))


def export_clustering(result: ClusteringResult, matrix: TrajectoryMatrix, out_dir: str,
                      config_hash: str, tool_version: str) -> Tuple[str, str]:
    """labels_<algorithm>.csv plus clusters_<algorithm>.json (metrics, and the dendrogram for HAC)."""
    os.makedirs(out_dir, exist_ok=True)
    labels_path = os.path.join(out_dir, f"labels_{result.algorithm}.csv")
    frame = pd.DataFrame({"head": matrix.heads, "cluster": result.labels})
    frame["config_hash"] = config_hash
    frame["tool_version"] = tool_version
    frame.to_csv(labels_path, index=False)
    document = {
        "config_hash": config_hash,
        "tool_version": tool_version,
        **result.to_dict(),
        "heads": matrix.heads,
        "segments": [list(s) for s in matrix.segments],
        "imputed": [list(c) for c in matrix.imputed],
        "dropped": matrix.dropped,
    }
    if result.dendrogram is not None:
        document["dendrogram"] = result.dendrogram
    json_path = os.path.join(out_dir, f"clusters_{result.algorithm}.json")
    with open(json_path, "w") as f:
        json.dump(document, f, indent=2, sort_keys=True)
    logger.info(f"Wrote {result.algorithm} clustering of {matrix.rows} heads to {out_dir}")
    return labels_path, json_path
