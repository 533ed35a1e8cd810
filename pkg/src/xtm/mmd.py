"""Weighted squared-MMD between a topic's decoder distribution and its refined target.

Both distributions live on word embeddings. The kernel is Gaussian on the
cosine distance ``d(x, y) = 1 - x.y`` of unit vectors::

    k(x, y) = exp(-d(x, y)**2 / (2 * sigma2))

and the (biased, diagonal-inclusive) weighted estimator is

    sum_ii' w_i w_i' k(x_i, x_i') + sum_jj' u_j u_j' k(y_j, y_j') - 2 sum_ij w_i u_j k(x_i, y_j).

Only the raw weights carry gradients; points, the refined target and the
bandwidths are constants.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import torch

from .backbone import DTYPE, BilingualVAE, top_word_indices
from .corpus_io import Vocabulary
from .embeddings import EmbeddingTable
from .errors import ConfigError, EmptySupport
from .refiner import RefinedTopic

log = logging.getLogger(__name__)

DEFAULT_EPSILON = 1e-6


@dataclass(frozen=True)
class WeightedSample:
    """Finite distribution over labelled unit vectors; ``labels`` are ``(lang, token)``."""

    labels: tuple
    points: np.ndarray
    weights: torch.Tensor

    def __post_init__(self):
        n = len(self.labels)
        if n < 1 or self.points.shape[0] != n or self.weights.shape != (n,):
            raise ValueError("labels, points and weights must have equal length >= 1")
        total = float(self.weights.detach().sum())
        if abs(total - 1.0) > 1e-9 or bool((self.weights < 0).any()):
            raise ValueError(f"weights must be non-negative and sum to 1 (sum={total})")

    def __len__(self) -> int:
        return len(self.labels)


def make_sample(labels, points, weights) -> WeightedSample:
    """Build a sample from unnormalized weights (numpy or tensor)."""
    if not isinstance(weights, torch.Tensor):
        weights = torch.as_tensor(np.asarray(weights, dtype=np.float64))
    return WeightedSample(tuple(labels), np.asarray(points, dtype=np.float64), weights / weights.sum())


@dataclass(frozen=True)
class KernelConfig:
    mode: str = "median"
    values: tuple[float, ...] = ()
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if self.mode not in ("median", "fixed", "multi"):
            raise ConfigError(f"unknown kernel mode {self.mode!r}")
        if self.mode != "median" and not self.values:
            raise ConfigError(f"{self.mode} kernel needs at least one bandwidth")
        if any(v <= 0 for v in self.values) or self.epsilon <= 0:
            raise ConfigError("bandwidths must be positive")

    @classmethod
    def parse(cls, spec: str) -> "KernelConfig":
        """``median``, ``fixed:<sigma2>`` or ``multi:<s1>,<s2>,...``."""
        mode, _, rest = spec.partition(":")
        try:
            values = tuple(float(v) for v in rest.split(",")) if rest else ()
        except ValueError:
            raise ConfigError(f"bad kernel spec {spec!r}") from None
        if mode == "fixed" and len(values) != 1:
            raise ConfigError("fixed kernel takes exactly one bandwidth")
        return cls(mode, values)

    def bandwidths(self, p: WeightedSample, q: WeightedSample) -> tuple[float, ...]:
        if self.mode == "median":
            return (median_bandwidth(p, q, self.epsilon)[0],)
        return self.values


def cosine_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``1 - a_i . b_j`` for unit rows.

    An explicit product-sum instead of a BLAS matmul, so that
    ``cosine_distance(b, a)`` is bitwise the transpose of ``cosine_distance(a, b)``.
    """
    return 1.0 - (a[:, None, :] * b[None, :, :]).sum(axis=-1)


def median_of_pairs(sq_dists, epsilon: float = DEFAULT_EPSILON) -> tuple[float, bool]:
    """Median of pairwise squared distances floored at ``epsilon``; flag if all are zero."""
    sq_dists = np.asarray(sq_dists, dtype=np.float64)
    if sq_dists.size == 0 or np.all(sq_dists == 0.0):
        return epsilon, True
    return max(float(np.median(sq_dists)), epsilon), False


def median_bandwidth(p: WeightedSample, q: WeightedSample,
                     epsilon: float = DEFAULT_EPSILON) -> tuple[float, bool]:
    """Median heuristic on the combined support of ``p`` and ``q``.

    A label present in both samples counts once. Returns ``(sigma2, degenerate)``,
    where ``degenerate`` marks a support whose points all coincide.
    """
    points: dict = {}
    for sample in (p, q):
        for label, vec in zip(sample.labels, sample.points):
            points.setdefault(label, vec)
    mat = np.stack(list(points.values()))
    iu = np.triu_indices(len(mat), k=1)
    d2 = cosine_distance(mat, mat)[iu] ** 2
    return median_of_pairs(d2, epsilon)


def _gram(a: np.ndarray, b: np.ndarray, sigma2: float) -> torch.Tensor:
    d = cosine_distance(a, b)
    return torch.from_numpy(np.exp(-(d * d) / (2.0 * sigma2)))


def mmd_squared(p: WeightedSample, q: WeightedSample, kernel: KernelConfig | Sequence[float]) -> torch.Tensor:
    """Weighted squared MMD, averaged over the bandwidth list and clamped at 0."""
    sigmas = kernel.bandwidths(p, q) if isinstance(kernel, KernelConfig) else tuple(kernel)
    w = p.weights.to(DTYPE)
    u = q.weights.to(DTYPE)
    total = torch.zeros((), dtype=DTYPE)
    for s2 in sigmas:
        kxx = _gram(p.points, p.points, s2)
        kyy = _gram(q.points, q.points, s2)
        # both orientations of the cross term keep mmd(p, q) == mmd(q, p) bitwise
        cross = w @ _gram(p.points, q.points, s2) @ u + u @ _gram(q.points, p.points, s2) @ w
        total = total + (w @ kxx @ w + u @ kyy @ u) - cross
    return (total / len(sigmas)).clamp_min(0.0)


# raw and refined topic distributions

@dataclass(frozen=True)
class RawSupport:
    """Top-N word indices per language with embeddings, frozen for one gradient step."""

    topic: int
    idx1: tuple[int, ...]
    idx2: tuple[int, ...]
    labels: tuple
    points: np.ndarray


def raw_support(model: BilingualVAE, k: int, n_words: int, vocab1: Vocabulary,
                vocab2: Vocabulary, table: EmbeddingTable) -> RawSupport:
    idx = {}
    labels, points = [], []
    for lang, vocab in (("l1", vocab1), ("l2", vocab2)):
        keep = []
        for i in top_word_indices(model, lang, k, min(n_words, len(vocab))):
            vec = table.word(vocab.tokens[i])
            if vec is None:
                log.debug("topic %d: %s word %r has no embedding, dropped", k, lang, vocab.tokens[i])
                continue
            keep.append(i)
            labels.append((lang, vocab.tokens[i]))
            points.append(vec)
        idx[lang] = tuple(keep)
    if not labels:
        raise EmptySupport(f"topic {k}: no top word has an embedding")
    return RawSupport(k, idx["l1"], idx["l2"], tuple(labels), np.stack(points))


def raw_weights(beta1: torch.Tensor, beta2: torch.Tensor, support: RawSupport) -> torch.Tensor:
    """Concatenated decoder probabilities of the support words, normalized to sum 1."""
    k = support.topic
    w = torch.cat([beta1[list(support.idx1), k], beta2[list(support.idx2), k]])
    return w / w.sum()


def build_raw_distribution(model: BilingualVAE, k: int, n_words: int, vocab1: Vocabulary,
                           vocab2: Vocabulary, table: EmbeddingTable) -> WeightedSample:
    support = raw_support(model, k, n_words, vocab1, vocab2, table)
    weights = raw_weights(model.beta("l1"), model.beta("l2"), support)
    return WeightedSample(support.labels, support.points, weights)


def build_refined_distribution(refined: RefinedTopic, table: EmbeddingTable) -> WeightedSample:
    """Vote counts of the selected words of each language, normalized over their union."""
    labels, points, counts = [], [], []
    for lang, words, votes in (("l1", refined.selected_l1, refined.votes_l1),
                               ("l2", refined.selected_l2, refined.votes_l2)):
        for w in words:
            vec = table.word(w)
            if vec is None:
                log.warning("topic %d: refined %s word %r has no embedding, dropped",
                            refined.topic_id, lang, w)
                continue
            labels.append((lang, w))
            points.append(vec)
            counts.append(votes[w])
    if not labels:
        raise EmptySupport(f"topic {refined.topic_id}: no refined word has an embedding")
    return make_sample(labels, np.stack(points), np.asarray(counts, dtype=np.float64))


@dataclass(frozen=True)
class TopicTarget:
    refined: WeightedSample
    bandwidths: tuple[float, ...]
    degenerate: bool = False


def prepare_targets(model: BilingualVAE, refined: Mapping[int, RefinedTopic], kernel: KernelConfig,
                    n_words: int, vocab1: Vocabulary, vocab2: Vocabulary,
                    table: EmbeddingTable) -> dict[int, TopicTarget]:
    """Refined distributions plus bandwidths frozen at refinement time.

    Topics whose refined or raw support is empty are left out (they
    contribute zero MMD loss).
    """
    targets = {}
    for k in range(model.n_topics):
        topic = refined.get(k)
        if topic is None:
            continue
        try:
            ref = build_refined_distribution(topic, table)
            with torch.no_grad():
                raw = build_raw_distribution(model, k, n_words, vocab1, vocab2, table)
        except EmptySupport as err:
            log.warning("topic %d excluded from MMD: %s", k, err)
            continue
        degenerate = False
        if kernel.mode == "median":
            s2, degenerate = median_bandwidth(raw, ref, kernel.epsilon)
            bws = (s2,)
        else:
            bws = kernel.values
        targets[k] = TopicTarget(ref, bws, degenerate)
    return targets


def mmd_loss(model: BilingualVAE, targets: Mapping[int, TopicTarget], n_words: int,
             vocab1: Vocabulary, vocab2: Vocabulary, table: EmbeddingTable) -> torch.Tensor:
    """Mean over all K topics of MMD^2(raw_k, refined_k); untargeted topics add 0.

    Differentiable w.r.t. the beta logits through the raw weights. The top-N
    support is re-selected on every call but treated as constant.
    """
    beta1, beta2 = model.beta("l1"), model.beta("l2")
    total = torch.zeros((), dtype=DTYPE)
    for k in range(model.n_topics):
        target = targets.get(k)
        if target is None:
            continue
        support = raw_support(model, k, n_words, vocab1, vocab2, table)
        raw = WeightedSample(support.labels, support.points, raw_weights(beta1, beta2, support))
        total = total + mmd_squared(raw, target.refined, target.bandwidths)
    return total / model.n_topics
