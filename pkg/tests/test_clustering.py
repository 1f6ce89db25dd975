"""GMM fitting, assignment, overlap ranking, Top-N, and ARI."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from herdid.clustering import (
    ClusterAssignment,
    GmmModel,
    adjusted_rand_index,
    assign,
    fit_gmm,
    overlap_scores,
    rank_clusters,
    top_n_accuracy,
)

from _oracles import pair_counting_ari, set_partitions


def _two_clouds(rng, n_per=60, d=8, spread=0.05, gap=6.0):
    a = rng.normal(0, spread, (n_per, d))
    b = rng.normal(0, spread, (n_per, d))
    b[:, 0] += gap
    return np.vstack([a, b])


class TestFitGmm:
    def test_k1_closed_form(self):
        rng = np.random.default_rng(0)
        x = rng.normal(2.0, 1.5, (200, 6))
        model = fit_gmm(x, k=1, rng_seed=0)
        np.testing.assert_allclose(model.means[0], x.mean(axis=0), atol=1e-9)
        np.testing.assert_allclose(model.covariances[0], x.var(axis=0),
                                   atol=1e-9)
        assert model.weights[0] == pytest.approx(1.0, abs=1e-12)

    def test_two_cloud_recovery(self):
        rng = np.random.default_rng(1)
        x = _two_clouds(rng)
        model = fit_gmm(x, k=2, iters=200, rng_seed=3)
        centroids = sorted(model.means[:, 0])
        expected = sorted([x[:60, 0].mean(), x[60:, 0].mean()])
        assert abs(centroids[0] - expected[0]) < 0.01
        assert abs(centroids[1] - expected[1]) < 0.01
        result = assign(model, x)
        top = result.responsibilities.max(axis=1)
        assert np.all(top > 0.999)

    def test_loglik_trace_non_decreasing(self):
        rng = np.random.default_rng(2)
        x = np.vstack([rng.normal(0, 1, (80, 4)), rng.normal(3, 0.5, (80, 4))])
        for seed in range(8):
            model = fit_gmm(x, k=3, iters=200, rng_seed=seed)
            trace = model.log_likelihoods
            assert len(trace) >= 1
            assert all(b >= a - 1e-9 for a, b in zip(trace, trace[1:]))

    def test_needs_enough_points(self):
        with pytest.raises(ValueError):
            fit_gmm(np.zeros((2, 3)), k=5)
        with pytest.raises(ValueError):
            fit_gmm(np.zeros((5, 3)), k=0)

    def test_variance_floor_holds(self):
        x = np.zeros((40, 3))
        x[:20, 0] = 1.0
        model = fit_gmm(x, k=2, rng_seed=0)
        assert np.all(model.covariances >= 1e-6)

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(4)
        x = _two_clouds(rng, n_per=30)
        a = fit_gmm(x, k=2, rng_seed=9)
        b = fit_gmm(x, k=2, rng_seed=9)
        assert np.array_equal(a.means, b.means)
        assert a.log_likelihoods == b.log_likelihoods

    def test_json_roundtrip(self):
        rng = np.random.default_rng(5)
        x = _two_clouds(rng, n_per=20)
        model = fit_gmm(x, k=2, rng_seed=0)
        back = GmmModel.from_json(model.to_json())
        np.testing.assert_array_equal(back.means, model.means)
        np.testing.assert_array_equal(back.covariances, model.covariances)
        assert back.log_likelihoods == model.log_likelihoods

    def test_empty_component_reseeded(self, monkeypatch):
        # seed one component impossibly far away: it receives no
        # responsibility mass and must be re-seeded from the data
        import herdid.clustering as clustering

        rng = np.random.default_rng(13)
        x = rng.normal(0, 1, (60, 4))

        def broken_seeding(data, k, _rng):
            means = np.zeros((k, data.shape[1]))
            means[0] = data.mean(axis=0)
            means[1] = 1e9
            return means

        monkeypatch.setattr(clustering, "_kmeanspp_means", broken_seeding)
        model = fit_gmm(x, k=2, iters=50, rng_seed=0)
        assert model.reseeds
        assert np.isfinite(model.log_likelihoods[-1])
        assert np.all(np.abs(model.means) < 1e6)


class TestAssign:
    def test_point_at_mean(self):
        rng = np.random.default_rng(6)
        x = _two_clouds(rng)
        model = fit_gmm(x, k=2, rng_seed=1)
        for j in range(2):
            result = assign(model, model.means[j][None, :])
            assert result.labels[0] == j

    def test_symmetric_midpoint(self):
        model = GmmModel(k=2,
                         weights=np.array([0.5, 0.5]),
                         means=np.array([[-1.0, 0.0], [1.0, 0.0]]),
                         covariances=np.full((2, 2), 0.3))
        result = assign(model, np.array([[0.0, 0.0]]))
        np.testing.assert_allclose(result.responsibilities[0], [0.5, 0.5],
                                   atol=1e-6)

    def test_batch_equals_per_point(self):
        rng = np.random.default_rng(7)
        x = _two_clouds(rng, n_per=25)
        model = fit_gmm(x, k=2, rng_seed=2)
        batch = assign(model, x)
        for i in range(0, len(x), 7):
            single = assign(model, x[i:i + 1])
            assert single.labels[0] == batch.labels[i]
            np.testing.assert_allclose(single.responsibilities[0],
                                       batch.responsibilities[i], atol=1e-12)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(8)
        x = _two_clouds(rng, n_per=40)
        model = fit_gmm(x, k=3, rng_seed=3)
        result = assign(model, x)
        np.testing.assert_allclose(result.responsibilities.sum(axis=1), 1.0,
                                   atol=1e-9)


def _assignment(labels, k=None):
    labels = np.asarray(labels)
    k = k or labels.max() + 1
    resp = np.zeros((len(labels), k))
    resp[np.arange(len(labels)), labels] = 1.0
    return ClusterAssignment(labels=labels, responsibilities=resp)


class TestOverlap:
    def test_basic_fraction(self):
        assignment = _assignment([0] * 10 + [1] * 30)
        labels = ["cow"] * 40
        scores = overlap_scores(assignment, labels)
        by_cluster = {s.cluster_index: s for s in scores}
        assert by_cluster[0].value == pytest.approx(0.25)
        assert by_cluster[1].value == pytest.approx(0.75)

    def test_identity_fully_inside_one_cluster(self):
        assignment = _assignment([0, 0, 0, 1, 1])
        labels = ["a", "a", "a", "b", "b"]
        scores = {(s.cluster_index, s.identity_label): s.value
                  for s in overlap_scores(assignment, labels)}
        assert scores[(0, "a")] == 1.0
        assert scores[(1, "b")] == 1.0
        assert (1, "a") not in scores
        assert (0, "b") not in scores

    def test_counts_sum_to_totals(self):
        rng = np.random.default_rng(9)
        labels = rng.integers(0, 5, 200)
        clusters = rng.integers(0, 7, 200)
        scores = overlap_scores(_assignment(clusters, k=7), labels.tolist())
        for ident in range(5):
            total = sum(s.count_in_cluster for s in scores
                        if s.identity_label == ident)
            assert total == int(np.sum(labels == ident))


class TestRanking:
    def test_assigned_id_is_top_overlap(self):
        assignment = _assignment([0, 0, 0, 1])
        labels = ["x", "x", "y", "y"]
        scores = overlap_scores(assignment, labels)
        rankings = rank_clusters(scores, ["x", "y"], n_clusters=2, rng_seed=0)
        assert rankings[0].assigned_id == "x"  # overlap 1.0 beats y's 0.5
        assert rankings[1].assigned_id == "y"

    def test_tie_broken_by_label_order(self):
        assignment = _assignment([0, 0])
        labels = ["b", "a"]  # both identities 100% inside cluster 0
        scores = overlap_scores(assignment, labels)
        rankings = rank_clusters(scores, ["a", "b"], n_clusters=1, rng_seed=0)
        assert rankings[0].identities == ["a", "b"]

    def test_every_identity_exactly_once(self):
        identities = list(range(30))
        assignment = _assignment([i % 4 for i in range(30)])
        scores = overlap_scores(assignment, identities)
        rankings = rank_clusters(scores, identities, n_clusters=4, rng_seed=1)
        for ranking in rankings:
            assert sorted(ranking.identities) == identities

    def test_zero_tail_is_seeded_shuffle(self):
        assignment = _assignment([0, 1])
        labels = ["a", "b"]
        scores = overlap_scores(assignment, labels)
        identities = ["a", "b", "c", "d", "e", "f"]
        r1 = rank_clusters(scores, identities, 2, rng_seed=5)
        r2 = rank_clusters(scores, identities, 2, rng_seed=5)
        assert [r.identities for r in r1] == [r.identities for r in r2]
        r3 = rank_clusters(scores, identities, 2, rng_seed=6)
        assert any(x.identities != y.identities for x, y in zip(r1, r3))

    def test_cluster_without_reference_points_gets_random_ranking(self):
        assignment = _assignment([0], k=3)
        scores = overlap_scores(assignment, ["a"])
        rankings = rank_clusters(scores, ["a", "b"], n_clusters=3, rng_seed=0)
        assert len(rankings) == 3
        assert sorted(rankings[2].identities) == ["a", "b"]


class TestTopN:
    def test_perfect_clustering(self):
        assignment = _assignment([0, 0, 1, 1, 2, 2])
        labels = ["a", "a", "b", "b", "c", "c"]
        scores = overlap_scores(assignment, labels)
        rankings = rank_clusters(scores, ["a", "b", "c"], 3, rng_seed=0)
        assert top_n_accuracy(rankings, assignment, labels, 1) == 1.0

    def test_full_depth_is_one(self):
        rng = np.random.default_rng(10)
        clusters = rng.integers(0, 4, 60)
        labels = rng.integers(0, 6, 60).tolist()
        assignment = _assignment(clusters, k=4)
        scores = overlap_scores(assignment, labels)
        rankings = rank_clusters(scores, list(range(6)), 4, rng_seed=0)
        assert top_n_accuracy(rankings, assignment, labels, 6) == 1.0
        # clamped above the identity count too
        assert top_n_accuracy(rankings, assignment, labels, 99) == 1.0

    def test_monotone_in_n(self):
        rng = np.random.default_rng(11)
        clusters = rng.integers(0, 5, 120)
        labels = rng.integers(0, 8, 120).tolist()
        assignment = _assignment(clusters, k=5)
        scores = overlap_scores(assignment, labels)
        rankings = rank_clusters(scores, list(range(8)), 5, rng_seed=0)
        values = [top_n_accuracy(rankings, assignment, labels, n)
                  for n in range(1, 9)]
        assert all(b >= a for a, b in zip(values, values[1:]))

    def test_hand_built_confusion_matches_bruteforce(self):
        # 3 identities, 3 clusters; identity i sends 6 points to cluster i
        # and 2 points to cluster (i+1) % 3
        clusters, labels = [], []
        for ident in range(3):
            clusters += [ident] * 6 + [(ident + 1) % 3] * 2
            labels += [ident] * 8
        assignment = _assignment(np.array(clusters))
        scores = overlap_scores(assignment, labels)
        rankings = rank_clusters(scores, [0, 1, 2], 3, rng_seed=0)
        by_index = {r.cluster_index: r.identities for r in rankings}
        for n in (1, 2, 3):
            expected = np.mean([labels[i] in by_index[clusters[i]][:n]
                                for i in range(len(labels))])
            got = top_n_accuracy(rankings, assignment, labels, n)
            assert got == pytest.approx(float(expected))

    def test_n_validation(self):
        assignment = _assignment([0, 0])
        scores = overlap_scores(assignment, ["a", "a"])
        rankings = rank_clusters(scores, ["a"], 1, rng_seed=0)
        with pytest.raises(ValueError):
            top_n_accuracy(rankings, assignment, ["a", "a"], 0)


class TestAri:
    def test_identical_partitions(self):
        labels = [0, 0, 1, 1, 2, 2, 2]
        assert adjusted_rand_index(labels, labels) == 1.0
        relabelled = ["x" if v == 0 else "y" if v == 1 else "z" for v in labels]
        assert adjusted_rand_index(labels, relabelled) == 1.0

    def test_one_cluster_vs_singletons(self):
        assert adjusted_rand_index([0, 0, 0, 0], [0, 1, 2, 3]) == 0.0

    def test_degenerate_identical_cases(self):
        assert adjusted_rand_index([0, 0, 0], [5, 5, 5]) == 1.0
        assert adjusted_rand_index([0, 1, 2], [7, 8, 9]) == 1.0

    def test_exhaustive_small_n_matches_pair_counting(self):
        for n in (2, 3, 4, 5):
            partitions = list(set_partitions(list(range(n))))
            for pa in partitions:
                for pb in partitions:
                    got = adjusted_rand_index(pa, pb)
                    want = pair_counting_ari(pa, pb)
                    assert abs(got - want) <= 1e-12

    def test_errors(self):
        with pytest.raises(ValueError):
            adjusted_rand_index([0, 1], [0, 1, 2])
        with pytest.raises(ValueError):
            adjusted_rand_index([0], [0])

    @given(st.lists(st.integers(0, 4), min_size=2, max_size=40), st.data())
    @settings(max_examples=80, deadline=None)
    def test_symmetric_and_permutation_invariant(self, labels_a, data):
        labels_b = data.draw(st.lists(st.integers(0, 4),
                                      min_size=len(labels_a),
                                      max_size=len(labels_a)))
        ari = adjusted_rand_index(labels_a, labels_b)
        assert ari == pytest.approx(adjusted_rand_index(labels_b, labels_a),
                                    abs=1e-12)
        remap = {v: f"label{v}" for v in set(labels_a)}
        assert adjusted_rand_index([remap[v] for v in labels_a],
                                   labels_b) == pytest.approx(ari, abs=1e-12)
        assert ari <= 1.0 + 1e-12

    def test_random_labels_near_zero(self):
        rng = np.random.default_rng(12)
        truth = rng.integers(0, 5, 100)
        values = []
        for _ in range(100):
            perm = rng.permutation(truth)
            values.append(adjusted_rand_index(truth, perm))
        assert abs(np.mean(values)) <= 0.05
