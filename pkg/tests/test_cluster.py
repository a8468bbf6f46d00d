import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.metrics import adjusted_rand_score, silhouette_score

from oracles import best_partition_objective, silhouette_brute
from slsr.cluster import ClusterModel, cluster_support, kmeans_fit, silhouette, silhouette_report


def raw_pixels(bundle):
    return np.stack([r.pixels.reshape(-1) for r in bundle.train]).astype(np.float64)


def test_exact_fit():
    m = kmeans_fit(np.array([[0.0], [10.0]]), 2)
    assert sorted(m.centroids.ravel()) == [0.0, 10.0]
    assert m.objective == 0.0


def test_four_points():
    m = kmeans_fit(np.array([[0.0], [1.0], [9.0], [10.0]]), 2)
    assert sorted(m.centroids.ravel()) == [0.5, 9.5]
    assert m.objective == pytest.approx(1.0)
    assert best_partition_objective([[0.0], [1.0], [9.0], [10.0]], 2) == pytest.approx(1.0)


def test_single_cluster_is_column_mean(rng):
    X = rng.normal(size=(20, 3))
    m = kmeans_fit(X, 1)
    np.testing.assert_allclose(m.centroids[0], X.mean(0))


def test_errors():
    X = np.zeros((3, 2))
    with pytest.raises(ValueError):
        kmeans_fit(X, 4)
    with pytest.raises(ValueError):
        kmeans_fit(X, 0)
    with pytest.raises(ValueError):
        silhouette(X, [0, 0, 0])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 5), st.sampled_from(["k-means++", "random"]))
def test_objective_monotone_and_recomputable(seed, K, init):
    X = np.random.default_rng(seed).normal(size=(40, 3))
    m = kmeans_fit(X, K, seed=seed, init=init, n_init=1)
    assert all(b <= a * (1 + 1e-12) for a, b in zip(m.history, m.history[1:]))
    assert m.recompute_objective(X) == pytest.approx(m.objective, rel=1e-6)
    assert set(np.unique(m.assignments)) <= set(range(K))


def test_small_instances_reach_global_optimum():
    rng = np.random.default_rng(0)
    for _ in range(10):
        X = rng.normal(size=(7, 1))
        assert kmeans_fit(X, 2, seed=1).objective == pytest.approx(best_partition_objective(X, 2), rel=1e-9)


def test_deterministic_given_seed(rng):
    X = rng.normal(size=(60, 4))
    a, b = kmeans_fit(X, 3, seed=9), kmeans_fit(X, 3, seed=9)
    np.testing.assert_array_equal(a.assignments, b.assignments)
    np.testing.assert_array_equal(a.centroids, b.centroids)


def test_empty_cluster_repair():
    # duplicate points force an empty cluster under random init; repair must keep K clusters
    X = np.array([[0.0]] * 5 + [[1.0]] * 5 + [[50.0]])
    m = kmeans_fit(X, 3, seed=0, init="random", n_init=1)
    assert len(np.unique(m.assignments)) == 3


def test_silhouette_examples():
    X = np.array([[0.0], [1.0], [10.0], [11.0]])
    s = silhouette(X, [0, 0, 1, 1])
    # per point: a = 1; b = 10.5 for the outer points and 9.5 for the inner ones
    expected = ((10.5 - 1) / 10.5 * 2 + (9.5 - 1) / 9.5 * 2) / 4
    assert s == pytest.approx(expected, abs=1e-12)
    assert s == pytest.approx(0.899749373433584, abs=1e-12)
    far = np.array([[0.0]] * 3 + [[1e9]] * 3)
    assert silhouette(far, [0, 0, 0, 1, 1, 1]) == 1.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(3, 50), st.integers(2, 5))
def test_silhouette_matches_brute_force(seed, n, K):
    r = np.random.default_rng(seed)
    X = r.normal(size=(n, 3))
    labels = np.arange(n) % K
    r.shuffle(labels)
    assert silhouette(X, labels) == pytest.approx(silhouette_brute(X, labels), abs=1e-9)


def test_silhouette_agrees_with_sklearn(rng):
    X = rng.normal(size=(30, 5))
    lab = rng.integers(0, 3, size=30)
    assert silhouette(X, lab) == pytest.approx(silhouette_score(X, lab), abs=1e-9)


def test_planted_corpus_recovered(corpus):
    X = raw_pixels(corpus)
    truth = [corpus.planted_clusters[r.identity] for r in corpus.train]
    assert adjusted_rand_score(truth, kmeans_fit(X, 3, seed=0).assignments) == 1.0


def test_silhouette_peaks_at_three(corpus):
    rows = {r["K"]: r["score"] for r in silhouette_report(raw_pixels(corpus), [2, 3, 4, 5])}
    assert rows[3] > rows[2] and rows[3] > rows[5]


def test_cluster_support(corpus):
    X = raw_pixels(corpus)
    m = cluster_support(kmeans_fit(X, 3, seed=0), corpus)
    assert m.p_c == [10, 10, 10]
    one = cluster_support(kmeans_fit(X, 1), corpus)
    assert one.p_c == [corpus.n_identities]
    assert one.support[0] == frozenset(range(corpus.n_identities))


def test_split_identity_in_both_supports(corpus):
    train = corpus.train
    assign = np.zeros(len(train), dtype=int)
    first = corpus.class_index[train[0].identity]
    idx = [i for i, r in enumerate(train) if corpus.class_index[r.identity] == first]
    assign[idx[0]] = 2
    assign[idx[1]] = 1
    m = ClusterModel(K=3, centroids=np.zeros((3, 1)), assignments=assign, objective=0.0)
    cluster_support(m, corpus)
    assert first in m.support[0] and first in m.support[1] and first in m.support[2]
    assert sum(m.p_c) >= corpus.n_identities
    dom = cluster_support(ClusterModel(3, np.zeros((3, 1)), assign, 0.0), corpus, mode="dominant")
    assert first in dom.support[0] and first not in dom.support[2]
