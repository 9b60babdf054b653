import json

import numpy as np
import pandas as pd
import pytest

from clustering import (
    DegenerateSeriesError,
    TrajectoryMatrix,
    adjusted_rand,
    align_labels,
    cluster,
    cluster_metrics,
    contingency,
    dba,
    dtw_distance,
    dtw_path,
    export_clustering,
    hac_ward,
    kmeans_dtw,
    kmeans_euclidean,
    kmeans_sbd,
    sbd_distance,
    transfer_labels,
    vote_report,
    znormalize,
)

TRUTH = np.repeat([0, 1, 2], 6)


def templates(length=20):
    t = np.linspace(0.0, 1.0, length)
    return np.stack([t, 1.0 - t, np.exp(-((t - 0.5) / 0.12) ** 2)])


def planted(seed=0, length=20, sigma=0.05):
    rng = np.random.default_rng(seed)
    base = templates(length)[TRUTH]
    return base + rng.normal(0.0, sigma, size=base.shape)


def shifted_shapes(seed=0, length=30, per_class=6):
    """Narrow peak, dip and double peak with random shifts of up to 3 steps."""
    rng = np.random.default_rng(seed)
    t = np.arange(length)
    rows, labels = [], []
    for label in range(3):
        for _ in range(per_class):
            shift = rng.integers(-3, 4)
            if label == 0:
                row = 2.0 * np.exp(-((t - 15 - shift) / 1.0) ** 2)
            elif label == 1:
                row = -2.0 * np.exp(-((t - 15 - shift) / 1.0) ** 2)
            else:
                row = 2.0 * (np.exp(-((t - 9 - shift) / 1.0) ** 2) + np.exp(-((t - 21 - shift) / 1.0) ** 2))
            rows.append(row + rng.normal(0.0, 0.05, size=length))
            labels.append(label)
    return np.array(rows), np.array(labels)


def test_four_point_metrics_match_closed_form():
    x = np.array([[0.0, 0.0], [0.0, 1.0], [4.0, 0.0], [4.0, 1.0]])
    metrics = cluster_metrics(x, [0, 0, 1, 1])
    assert metrics["silhouette"] == pytest.approx(1 - 2 / (4 + np.sqrt(17)), abs=1e-9)
    assert metrics["calinski_harabasz"] == pytest.approx(32.0, abs=1e-9)
    assert metrics["davies_bouldin"] == pytest.approx(0.25, abs=1e-9)
    swapped = cluster_metrics(x, [1, 1, 0, 0])
    assert swapped == pytest.approx(metrics)


def test_metrics_are_undefined_for_trivial_partitions():
    x = np.arange(8.0).reshape(4, 2)
    assert cluster_metrics(x, [0, 0, 0, 0])["silhouette"] is None
    assert cluster_metrics(x, [0, 1, 2, 3])["davies_bouldin"] is None


@pytest.mark.parametrize("algorithm", ["kmeans", "dtw", "sbd", "hac"])
def test_planted_clusters_are_recovered(algorithm):
    options = {"restarts": 4} if algorithm in ("dtw", "sbd") else {}
    result = cluster(planted(), algorithm, 3, seed=0, **options)
    assert adjusted_rand(result.labels, TRUTH) == pytest.approx(1.0)
    assert result.labels[0] == 0


def test_constant_groups_split_and_singletons_cost_nothing():
    x = np.vstack([np.zeros((3, 5)), np.ones((3, 5))])
    result = kmeans_euclidean(x, 2)
    assert result.labels.tolist() == [0, 0, 0, 1, 1, 1]
    singletons = kmeans_euclidean(x[:4] + np.arange(4)[:, None], 4)
    assert singletons.objective == pytest.approx(0.0)
    with pytest.raises(ValueError, match="exceeds"):
        kmeans_euclidean(x, 7)


def test_clustering_is_deterministic_per_seed():
    a = kmeans_euclidean(planted(seed=3), 3, seed=5)
    b = kmeans_euclidean(planted(seed=3), 3, seed=5)
    assert np.array_equal(a.labels, b.labels)
    assert a.objective == b.objective


def test_dtw_examples():
    x = np.array([0.0, 1.0, 3.0, 2.0])
    assert dtw_distance(x, x) == 0.0
    assert dtw_distance([0, 0, 1], [0, 1, 1]) == 0.0
    rng = np.random.default_rng(0)
    for _ in range(20):
        a, b = rng.normal(size=8), rng.normal(size=8)
        assert dtw_distance(a, b) <= np.sum((a - b) ** 2) + 1e-12
        assert dtw_distance(a, b) == pytest.approx(dtw_distance(b, a))
        assert dtw_distance(a, b, window=0) == pytest.approx(np.sum((a - b) ** 2))
    cost, path = dtw_path([0, 0, 1], [0, 1, 1])
    assert cost == 0.0
    assert path[0] == (0, 0) and path[-1] == (2, 2)


def test_dba_of_identical_members_is_that_member():
    member = np.sin(np.linspace(0, 3, 12))
    start = member + np.random.default_rng(2).normal(0.0, 0.01, size=12)
    centroid = dba(start, np.stack([member, member]), iterations=5)
    assert np.allclose(centroid, member)


def test_dtw_clusters_shifted_shapes():
    x, labels = shifted_shapes()
    result = kmeans_dtw(x, 3, seed=0, restarts=4)
    assert adjusted_rand(result.labels, labels) >= 0.9


def test_sbd_examples():
    rng = np.random.default_rng(1)
    x = rng.normal(size=16)
    assert sbd_distance(x, x) == pytest.approx(0.0, abs=1e-12)
    assert sbd_distance(x, 3 * x) == pytest.approx(0.0, abs=1e-12)
    assert sbd_distance([2.0], [-2.0]) == pytest.approx(2.0)
    for _ in range(20):
        d = sbd_distance(rng.normal(size=10), rng.normal(size=7))
        assert 0.0 <= d <= 2.0
    with pytest.raises(DegenerateSeriesError):
        sbd_distance(np.zeros(4), x[:4])


def test_sbd_rejects_constant_rows():
    x = planted()
    x[2] = 1.0
    with pytest.raises(DegenerateSeriesError):
        kmeans_sbd(x, 3, restarts=1)


def test_znormalize():
    z = znormalize(np.array([[1.0, 2.0, 3.0], [5.0, 5.0, 5.0]]))
    assert np.allclose(z[0].mean(), 0.0) and np.allclose(z[0].std(), 1.0)
    assert np.array_equal(z[1], np.zeros(3))


def test_hac_dendrogram_and_edge_cases():
    x = planted()
    heads = [f"head_{i // 4}_{i % 4}" for i in range(len(x))]
    result = hac_ward(TrajectoryMatrix.from_array(x, heads), 3)
    assert adjusted_rand(result.labels, TRUTH) == pytest.approx(1.0)
    tree = result.dendrogram
    assert len(tree["children"]) == 2
    assert hac_ward(x, 1).labels.tolist() == [0] * len(x)
    assert hac_ward(x[:1], 1).labels.tolist() == [0]


def test_transfer_labels_to_new_and_resampled_matrices():
    fitted = kmeans_euclidean(planted(seed=0), 3)
    assert np.array_equal(transfer_labels(fitted, planted(seed=0)), fitted.labels)
    assert adjusted_rand(transfer_labels(fitted, planted(seed=9)), TRUTH) == pytest.approx(1.0)
    assert adjusted_rand(transfer_labels(fitted, planted(seed=9, length=40)), TRUTH) == pytest.approx(1.0)
    assert transfer_labels(fitted, np.zeros((0, 20))).size == 0
    two_segments = TrajectoryMatrix(np.hstack([planted(), planted()]), [str(i) for i in range(18)],
                                    list(range(20)), [("llc", "a"), ("llc", "b")])
    with pytest.raises(ValueError, match="metric series"):
        transfer_labels(fitted, two_segments)


def test_transfer_under_shape_distance():
    fitted = kmeans_sbd(planted(seed=0), 3, restarts=4)
    labels = transfer_labels(fitted, 5.0 * planted(seed=4) + 2.0)
    assert adjusted_rand(labels, TRUTH) == pytest.approx(1.0)


def frame_rows(values, heads, steps, metric="llc", source="train"):
    return [{"step": s, "target": h, "source": source, "metric": metric, "value": v}
            for h, row in zip(heads, values) for s, v in zip(steps, row)]


def test_matrix_from_frame_imputes_or_drops():
    heads, steps = ["head_0_0", "head_0_1"], [0, 10, 100]
    rows = frame_rows([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]], heads, steps)
    rows += frame_rows([[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]], heads, steps, source="code")
    frame = pd.DataFrame([r for r in rows if not (r["target"] == "head_0_1" and r["step"] == 10
                                                  and r["source"] == "train")])
    matrix = TrajectoryMatrix.from_frame(frame, segments=[("llc", "train"), ("llc", "code")])
    assert matrix.values.shape == (2, 6)
    assert matrix.values[1, 1] == pytest.approx(5.0)
    assert matrix.imputed == [("head_0_1", "llc", "train", 10)]
    dropped = TrajectoryMatrix.from_frame(frame, segments=[("llc", "train")], impute="drop")
    assert dropped.heads == ["head_0_0"]
    assert dropped.dropped == ["head_0_1"]
    with pytest.raises(ValueError, match="no trajectory rows for heads"):
        TrajectoryMatrix.from_frame(frame, targets=["head_1_0"])
    with pytest.raises(ValueError, match="metric"):
        TrajectoryMatrix.from_frame(frame, segments=[("hessian_trace", "train")])


def test_align_labels_and_vote_report():
    assert align_labels([0, 0, 1, 1, 2], [2, 2, 0, 0, 1]).tolist() == [0, 0, 1, 1, 2]
    x = planted()
    results = {"kmeans": cluster(x, "kmeans", 3), "hac": cluster(x, "hac", 3)}
    votes = vote_report(results, [f"h{i}" for i in range(len(x))])
    assert (votes["agreement"] == 1.0).all()
    assert votes["majority"].tolist() == results["kmeans"].labels.tolist()


def test_contingency_counts_types_by_cluster():
    table = contingency([0, 0, 1], ["a", "b", "c"], {"a": "induction", "c": "multigram"})
    assert table.loc["induction", 0] == 1
    assert table.loc["unclassified", 0] == 1
    assert table.loc["multigram", 1] == 1


def test_export_clustering(tmp_path):
    x = planted()
    matrix = TrajectoryMatrix.from_array(x, [f"h{i}" for i in range(len(x))])
    result = hac_ward(matrix, 3)
    labels_path, json_path = export_clustering(result, matrix, str(tmp_path), "abc", "0.3.0")
    frame = pd.read_csv(labels_path)
    assert frame["cluster"].tolist() == result.labels.tolist()
    with open(json_path) as f:
        document = json.load(f)
    assert document["config_hash"] == "abc"
    assert "dendrogram" in document
    assert document["metrics"]["silhouette"] > 0.5
