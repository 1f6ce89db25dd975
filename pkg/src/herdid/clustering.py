"""Identity discovery and evaluation over the latent space.

A diagonal-covariance Gaussian mixture fitted by EM groups embeddings into
candidate identities. Labelled reference points then score each (cluster,
identity) pair by overlap C/L (the identity's images inside the cluster
over its total images), rank identities per cluster, and from that ranking
come Top-N accuracy and the Adjusted Rand Index against ground truth.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .util import rng_for

logger = logging.getLogger(__name__)

VAR_FLOOR = 1e-6
LL_IMPROVEMENT_TOL = 1e-7


@dataclass
class GmmModel:
    """Fitted k-component diagonal Gaussian mixture."""

    k: int
    weights: np.ndarray          # (k,), non-negative, sums to 1
    means: np.ndarray            # (k, d)
    covariances: np.ndarray      # (k, d) diagonal entries >= VAR_FLOOR
    log_likelihoods: list[float] = field(default_factory=list)
    reseeds: list[tuple[int, int]] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "k": self.k,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
            "log_likelihoods": self.log_likelihoods,
            "reseeds": [list(r) for r in self.reseeds],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "GmmModel":
        return cls(k=obj["k"],
                   weights=np.asarray(obj["weights"]),
                   means=np.asarray(obj["means"]),
                   covariances=np.asarray(obj["covariances"]),
                   log_likelihoods=list(obj["log_likelihoods"]),
                   reseeds=[tuple(r) for r in obj["reseeds"]])


@dataclass
class ClusterAssignment:
    """Hard argmax labels plus the full responsibility matrix."""

    labels: np.ndarray           # (n,) cluster indices
    responsibilities: np.ndarray  # (n, k), rows sum to 1


@dataclass(frozen=True)
class OverlapScore:
    """Overlap C/L of one identity with one cluster."""

    cluster_index: int
    identity_label: object
    count_in_cluster: int   # C
    total_of_identity: int  # L

    @property
    def value(self) -> float:
        return self.count_in_cluster / self.total_of_identity


@dataclass
class ClusterRanking:
    """Per-cluster identity ranking: overlaps first, seeded-random tail."""

    cluster_index: int
    identities: list

    @property
    def assigned_id(self):
        return self.identities[0]


def _log_gaussian_prob(x: np.ndarray, weights: np.ndarray, means: np.ndarray,
                       covariances: np.ndarray) -> np.ndarray:
    """(n, k) joint log densities log(w_k N(x | mu_k, diag sigma2_k)).

    The Mahalanobis term is expanded into three matrix products so no
    (n, k, d) temporary is materialised.
    """
    d = x.shape[1]
    log_det = np.sum(np.log(covariances), axis=1)
    inv = 1.0 / covariances                                    # (k, d)
    maha = ((x * x) @ inv.T
            - 2.0 * (x @ (means * inv).T)
            + np.sum(means * means * inv, axis=1)[None, :])
    maha = np.maximum(maha, 0.0)
    return (np.log(weights)[None, :]
            - 0.5 * (d * np.log(2.0 * np.pi) + log_det[None, :] + maha))


def _logsumexp(a: np.ndarray, axis: int = 1) -> np.ndarray:
    amax = np.max(a, axis=axis, keepdims=True)
    return (amax + np.log(np.sum(np.exp(a - amax), axis=axis,
                                 keepdims=True))).squeeze(axis)


def _kmeanspp_means(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    means = np.empty((k, x.shape[1]))
    first = int(rng.integers(n))
    means[0] = x[first]
    closest = np.sum((x - means[0]) ** 2, axis=1)
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=closest / total))
        means[j] = x[idx]
        closest = np.minimum(closest, np.sum((x - means[j]) ** 2, axis=1))
    return means


def fit_gmm(x: np.ndarray, k: int, iters: int = 200,
            rng_seed: int = 0, n_init: int = 1) -> GmmModel:
    """EM fit of a diagonal-covariance GMM with k-means++ seeded means.

    The per-iteration log-likelihood trace is recorded (it is non-decreasing
    up to floating-point noise); fitting stops after ``iters`` iterations or
    once the improvement drops below 1e-7. A component that loses all
    responsibility mass is re-seeded from the point farthest from every
    mean and logged on the model. With n_init > 1 the fit restarts from that
    many seedings and the model with the best final log-likelihood wins.
    """
    if n_init < 1:
        raise ValueError("n_init must be >= 1")
    best: GmmModel | None = None
    for restart in range(n_init):
        model = _fit_gmm_once(x, k, iters, rng_for(rng_seed, "gmm", restart))
        if best is None or model.log_likelihoods[-1] > best.log_likelihoods[-1]:
            best = model
    return best


def _fit_gmm_once(x: np.ndarray, k: int, iters: int,
                  rng: np.random.Generator) -> GmmModel:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("X must be (n, d)")
    n, d = x.shape
    if k < 1:
        raise ValueError("k must be >= 1")
    if n < k:
        raise ValueError(f"need at least k={k} points, got {n}")
    means = _kmeanspp_means(x, k, rng)
    var0 = np.maximum(x.var(axis=0), VAR_FLOOR)
    covariances = np.tile(var0, (k, 1))
    weights = np.full(k, 1.0 / k)
    model = GmmModel(k=k, weights=weights, means=means,
                     covariances=covariances)

    for iteration in range(iters):
        log_prob = _log_gaussian_prob(x, model.weights, model.means,
                                      model.covariances)
        lse = _logsumexp(log_prob)
        ll = float(lse.sum())
        model.log_likelihoods.append(ll)
        if (len(model.log_likelihoods) >= 2
                and ll - model.log_likelihoods[-2] < LL_IMPROVEMENT_TOL):
            break
        resp = np.exp(log_prob - lse[:, None])
        nk = resp.sum(axis=0)
        empty = np.nonzero(nk < 1e-10)[0]
        for j in empty:
            dist_to_means = np.min(
                np.sum((x[:, None, :] - model.means[None, :, :]) ** 2, axis=2),
                axis=1)
            far = int(np.argmax(dist_to_means))
            model.means[j] = x[far]
            model.covariances[j] = np.maximum(x.var(axis=0), VAR_FLOOR)
            model.weights[j] = 1.0 / n
            model.weights /= model.weights.sum()
            model.reseeds.append((iteration, int(j)))
            logger.info("re-seeded empty GMM component %d at iteration %d",
                        j, iteration)
        if len(empty):
            continue  # parameters changed; recompute responsibilities next pass
        model.weights = nk / n
        model.means = (resp.T @ x) / nk[:, None]
        ex2 = (resp.T @ (x * x)) / nk[:, None]
        model.covariances = np.maximum(ex2 - model.means ** 2, VAR_FLOOR)
    return model


def assign(gmm: GmmModel, x: np.ndarray) -> ClusterAssignment:
    """Soft responsibilities and hard argmax cluster labels for points."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("X must be (n, d)")
    log_prob = _log_gaussian_prob(x, gmm.weights, gmm.means, gmm.covariances)
    lse = _logsumexp(log_prob)
    resp = np.exp(log_prob - lse[:, None])
    return ClusterAssignment(labels=np.argmax(resp, axis=1),
                             responsibilities=resp)


def overlap_scores(assignment: ClusterAssignment,
                   labels: Sequence) -> list[OverlapScore]:
    """One score per (cluster, identity) pair with a positive count.

    C counts the identity's points inside the cluster; L is the identity's
    total point count. Identities absent from ``labels`` are naturally
    excluded (L would be zero).
    """
    labels = list(labels)
    if len(labels) != len(assignment.labels):
        raise ValueError("labels must align with the assignment")
    totals: dict = {}
    for lab in labels:
        totals[lab] = totals.get(lab, 0) + 1
    counts: dict = {}
    for cluster, lab in zip(assignment.labels, labels):
        key = (int(cluster), lab)
        counts[key] = counts.get(key, 0) + 1
    scores = [OverlapScore(cluster_index=c, identity_label=lab,
                           count_in_cluster=cnt, total_of_identity=totals[lab])
              for (c, lab), cnt in counts.items()]
    scores.sort(key=lambda s: (s.cluster_index, s.identity_label))
    return scores


def rank_clusters(scores: Sequence[OverlapScore], identities: Sequence,
                  n_clusters: int, rng_seed: int = 0) -> list[ClusterRanking]:
    """Per-cluster identity rankings over every enrolled identity.

    Identities with positive overlap come first in descending overlap order
    (ties broken by identity label order); identities the cluster never saw
    form a seeded-random tail. The first entry is the cluster's assigned ID.
    Two clusters may share an assigned ID: the overlap argmax is not
    injective and no bijection is forced.
    """
    identities = list(identities)
    if len(set(identities)) != len(identities):
        raise ValueError("identities must be unique")
    by_cluster: dict[int, list[OverlapScore]] = {}
    for score in scores:
        by_cluster.setdefault(score.cluster_index, []).append(score)
    rng = rng_for(rng_seed, "ranking")
    rankings = []
    for cluster_index in range(n_clusters):
        cluster_scores = [s for s in by_cluster.get(cluster_index, [])
                          if s.identity_label in identities
                          and s.count_in_cluster > 0]
        cluster_scores.sort(key=lambda s: (-s.value, s.identity_label))
        head = [s.identity_label for s in cluster_scores]
        tail = [ident for ident in sorted(identities)
                if ident not in head]
        tail_arr = np.array(tail, dtype=object)
        rng.shuffle(tail_arr)
        rankings.append(ClusterRanking(cluster_index=cluster_index,
                                       identities=head + list(tail_arr)))
    return rankings


def top_n_accuracy(rankings: Sequence[ClusterRanking],
                   assignment: ClusterAssignment,
                   gt_labels: Sequence, n: int) -> float:
    """Fraction of points whose identity is in the first n ranking entries.

    n larger than the enrolled identity count clamps to the full ranking.
    """
    if n < 1:
        raise ValueError("N must be >= 1")
    gt_labels = list(gt_labels)
    if len(gt_labels) != len(assignment.labels):
        raise ValueError("ground-truth labels must align with the assignment")
    by_index = {r.cluster_index: r for r in rankings}
    hits = 0
    for cluster, truth in zip(assignment.labels, gt_labels):
        ranking = by_index[int(cluster)]
        depth = min(n, len(ranking.identities))
        if truth in ranking.identities[:depth]:
            hits += 1
    return hits / len(gt_labels)


def adjusted_rand_index(part_a: Sequence, part_b: Sequence) -> float:
    """Hubert-Arabie ARI between two labelings of the same points.

    Computed exactly from the contingency table with rational arithmetic;
    identical partitions give 1.0 (including the degenerate all-one-cluster
    and all-singleton cases, where the usual denominator vanishes).
    """
    a = list(part_a)
    b = list(part_b)
    if len(a) != len(b):
        raise ValueError("partitions must label the same points")
    n = len(a)
    if n < 2:
        raise ValueError("ARI needs at least two points")

    def comb2(x: int) -> int:
        return x * (x - 1) // 2

    contingency: dict = {}
    row_sums: dict = {}
    col_sums: dict = {}
    for la, lb in zip(a, b):
        contingency[(la, lb)] = contingency.get((la, lb), 0) + 1
        row_sums[la] = row_sums.get(la, 0) + 1
        col_sums[lb] = col_sums.get(lb, 0) + 1
    index = sum(comb2(v) for v in contingency.values())
    sum_a = sum(comb2(v) for v in row_sums.values())
    sum_b = sum(comb2(v) for v in col_sums.values())
    expected = Fraction(sum_a * sum_b, comb2(n))
    max_index = Fraction(sum_a + sum_b, 2)
    if max_index == expected:
        return 1.0
    return float((Fraction(index) - expected) / (max_index - expected))
