"""Accuracy, membership-inference attack, data heterogeneity, model divergence.

These read models and pools; none of them mutate anything.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from flgen.data import LabeledPool, pool_batch
from flgen.numerics import ModelParams, forward, per_sample_loss


@dataclass(frozen=True)
class RoundRecord:
    """Per-round metrics, one row of the metrics CSV."""

    round: int
    global_test_acc: float
    avg_local_global_acc: float
    divergence: float
    mean_pairwise_cosine: float
    mean_pairwise_l2: float
    attack_acc: float | None = None


@dataclass(frozen=True)
class AttackSpec:
    attacker_known_fraction: float
    eval_member_count: int
    eval_nonmember_count: int

    def __post_init__(self) -> None:
        if not 0.0 < self.attacker_known_fraction < 1.0:
            raise ValueError("attacker_known_fraction must be in (0, 1)")
        if self.eval_member_count < 1 or self.eval_nonmember_count < 1:
            raise ValueError("evaluation set sizes must be >= 1")


def accuracy(model: ModelParams, pool: LabeledPool) -> float:
    """Fraction of argmax predictions matching labels; argmax ties resolve to
    the lowest class index."""
    if len(pool) == 0:
        raise ValueError("cannot evaluate on an empty pool")
    logits = forward(model, pool_batch(pool)).logits
    preds = np.argmax(logits, axis=1)
    return float((preds == pool.labels).mean())


def avg_local_global_acc(local_models, test_pool: LabeledPool) -> float:
    """Mean accuracy of the local models on the shared test pool."""
    if not local_models:
        raise ValueError("no local models")
    return float(np.mean([accuracy(m, test_pool) for m in local_models]))


def model_losses(model: ModelParams, pool: LabeledPool) -> np.ndarray:
    """Per-sample cross-entropy of the model on every pool row."""
    if len(pool) == 0:
        return np.zeros(0)
    logits = forward(model, pool_batch(pool)).logits
    return per_sample_loss(logits, pool.labels)


def split_known_eval(
    n: int, known_fraction: float, eval_count: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint attacker-known and evaluation index sets from one permutation."""
    n_known = int(np.floor(known_fraction * n))
    if n_known < 1:
        raise ValueError("attacker-known set is empty")
    if n - n_known < eval_count:
        raise ValueError(
            f"need {eval_count} evaluation samples but only {n - n_known} remain after the known set"
        )
    perm = rng.permutation(n)
    return perm[:n_known], perm[n_known:n_known + eval_count]


def threshold_attack(
    known_member_losses: np.ndarray,
    known_nonmember_losses: np.ndarray,
    eval_member_losses: np.ndarray,
    eval_nonmember_losses: np.ndarray,
) -> float:
    """Loss-threshold membership attack.

    The threshold is chosen to maximize accuracy on the attacker-known
    losses, sweeping midpoints between consecutive sorted known losses plus
    all-member / all-nonmember sentinels; ties pick the smallest threshold.
    Predict member when loss <= threshold; returns evaluation accuracy.
    """
    km = np.asarray(known_member_losses, dtype=np.float64)
    kn = np.asarray(known_nonmember_losses, dtype=np.float64)
    em = np.asarray(eval_member_losses, dtype=np.float64)
    en = np.asarray(eval_nonmember_losses, dtype=np.float64)
    for name, arr in (("known member", km), ("known nonmember", kn),
                      ("eval member", em), ("eval nonmember", en)):
        if arr.size == 0:
            raise ValueError(f"{name} losses are empty")
    known = np.sort(np.unique(np.concatenate([km, kn])))
    candidates = [known[0] - 1.0]
    candidates.extend((known[:-1] + known[1:]) / 2.0)
    candidates.append(known[-1] + 1.0)
    best_t = candidates[0]
    best_acc = -1.0
    total = km.size + kn.size
    for t in candidates:
        acc = (int((km <= t).sum()) + int((kn > t).sum())) / total
        if acc > best_acc:
            best_acc = acc
            best_t = t
    return (int((em <= best_t).sum()) + int((en > best_t).sum())) / (em.size + en.size)


def mia_attack(
    model: ModelParams,
    members: LabeledPool,
    nonmembers: LabeledPool,
    spec: AttackSpec,
    rng: np.random.Generator,
) -> float:
    """End-to-end loss-threshold attack against a model.

    Known and evaluation subsets are disjoint inside each side (member draw
    first, then nonmember draw).
    """
    if len(members) == 0 or len(nonmembers) == 0:
        raise ValueError("attack needs non-empty member and nonmember pools")
    member_losses = model_losses(model, members)
    nonmember_losses = model_losses(model, nonmembers)
    m_known, m_eval = split_known_eval(
        len(members), spec.attacker_known_fraction, spec.eval_member_count, rng
    )
    n_known, n_eval = split_known_eval(
        len(nonmembers), spec.attacker_known_fraction, spec.eval_nonmember_count, rng
    )
    return threshold_attack(
        member_losses[m_known], nonmember_losses[n_known],
        member_losses[m_eval], nonmember_losses[n_eval],
    )


def random_projection(feature_dim: int, out_dim: int, seed: int) -> np.ndarray:
    """Fixed seeded linear map, entries N(0, 1/feature_dim)."""
    if feature_dim < 1 or out_dim < 1:
        raise ValueError("projection dimensions must be positive")
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, 1.0 / np.sqrt(feature_dim), size=(feature_dim, out_dim))


def dataset_heterogeneity(
    pools, projection: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Pairwise cosine and L2 distance between clients' mean projected features.

    ``projection`` is a (d, h) matrix or None for the identity. Returns
    (cosine, l2) matrices; diagonals are exactly 1 and 0.
    """
    if len(pools) == 0:
        raise ValueError("no pools")
    means = []
    for i, pool in enumerate(pools):
        if len(pool) == 0:
            raise ValueError(f"pool {i} is empty")
        m = pool.features.mean(axis=0)
        if projection is not None:
            if projection.shape[0] != pool.feature_dim:
                raise ValueError("projection rows do not match feature dim")
            m = m @ projection
        means.append(m)
    vectors = np.stack(means)
    norms = np.linalg.norm(vectors, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("zero-norm mean feature vector, cosine undefined")
    k = vectors.shape[0]
    cosine = (vectors @ vectors.T) / np.outer(norms, norms)
    np.fill_diagonal(cosine, 1.0)
    diff = vectors[:, None, :] - vectors[None, :, :]
    l2 = np.linalg.norm(diff, axis=2)
    np.fill_diagonal(l2, 0.0)
    return cosine, l2


def mean_offdiagonal(matrix: np.ndarray) -> float:
    """Mean over unordered pairs (i < j)."""
    m = np.asarray(matrix, dtype=np.float64)
    k = m.shape[0]
    if m.shape != (k, k):
        raise ValueError("matrix must be square")
    if k < 2:
        raise ValueError("need at least two rows for pairwise statistics")
    iu = np.triu_indices(k, 1)
    return float(m[iu].mean())


def model_divergence(local_models, global_model: ModelParams) -> float:
    """Mean L2 distance between local parameter vectors and the aggregated
    global model of the same round."""
    if not local_models:
        raise ValueError("no local models")
    for m in local_models:
        if m.layer_shapes != global_model.layer_shapes:
            raise ValueError("model shapes differ")
    dists = [float(np.linalg.norm(m.values - global_model.values)) for m in local_models]
    return float(np.mean(dists))
