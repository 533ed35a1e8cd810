"""Semantic document-topic targets and the KL alignment loss.

Documents and refined topics are embedded in the same space; the target
``theta_hat[d] = softmax(cos(h_d, t_k) / tau)`` and the loss is
``sum_d KL(theta_d || theta_hat_d)`` with ``theta_hat`` held constant.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping

import numpy as np
import torch

from .backbone import DTYPE, LOG_FLOOR
from .corpus_io import Corpus
from .embeddings import EmbeddingTable, EncoderProvider, document_embedding, topic_embedding
from .errors import NoCoveredWords, NoTopicsEmbeddable, ProviderError, ShapeMismatch
from .refiner import RefinedTopic

log = logging.getLogger(__name__)


def similarity_row(h: np.ndarray, topic_vecs: np.ndarray, tau: float, valid=None) -> np.ndarray:
    """Temperature softmax of the dot products ``topic_vecs @ h`` (unit vectors, so cosines).

    Topics outside ``valid`` get probability 0 and do not enter the normalizer.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    s = np.asarray(topic_vecs, dtype=np.float64) @ np.asarray(h, dtype=np.float64) / tau
    mask = np.ones(len(s), dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    out = np.zeros_like(s)
    z = s[mask] - s[mask].max()
    e = np.exp(z)
    out[mask] = e / e.sum()
    return out


@dataclass(frozen=True)
class AlignmentTargets:
    theta_hat: np.ndarray
    tau: float
    topic_vecs: np.ndarray
    doc_ids: tuple[str, ...]
    valid: np.ndarray
    lang_rows: Mapping[str, np.ndarray]

    def for_lang(self, lang: str) -> np.ndarray:
        """Target rows of one language, in ``corpus.by_lang`` order."""
        return self.theta_hat[self.lang_rows[lang]]


def kl_rows(theta: torch.Tensor, theta_hat: torch.Tensor) -> torch.Tensor:
    """Per-row ``KL(theta || theta_hat)`` with ``0 log 0 = 0``."""
    log_t = torch.log(theta.clamp_min(LOG_FLOOR))
    log_h = torch.log(theta_hat.clamp_min(LOG_FLOOR))
    return (theta * (log_t - log_h)).sum(dim=-1)


def doc_align_loss(theta: torch.Tensor, theta_hat, valid=None) -> torch.Tensor:
    """``sum_d KL(theta_d || theta_hat_d)``; differentiable in ``theta`` only.

    When some topics are invalid (no embeddable refinement) both sides are
    restricted to the valid topics and ``theta`` is renormalized there.
    """
    theta_hat = torch.as_tensor(theta_hat, dtype=DTYPE).detach()
    if theta.shape != theta_hat.shape:
        raise ShapeMismatch(f"theta {tuple(theta.shape)} vs targets {tuple(theta_hat.shape)}")
    if valid is not None and not np.all(valid):
        cols = torch.as_tensor(np.flatnonzero(valid))
        theta = theta[:, cols]
        theta = theta / theta.sum(dim=-1, keepdim=True)
        theta_hat = theta_hat[:, cols]
    return kl_rows(theta, theta_hat).sum()


def topic_vectors(refined: Mapping[int, RefinedTopic], n_topics: int, provider: EncoderProvider,
                  table: EmbeddingTable) -> tuple[np.ndarray, np.ndarray]:
    """``(K, dim)`` topic embeddings and the mask of topics that could be embedded."""
    vecs = np.zeros((n_topics, table.dim))
    valid = np.zeros(n_topics, dtype=bool)
    for k in range(n_topics):
        topic = refined.get(k)
        if topic is None:
            continue
        try:
            vecs[k] = topic_embedding(topic, provider, table)
            valid[k] = True
        except (NoCoveredWords, ProviderError) as err:
            log.warning("topic %d has no embedding: %s", k, err)
    return vecs, valid


def build_targets(corpus: Corpus, refined: Mapping[int, RefinedTopic], provider: EncoderProvider,
                  table: EmbeddingTable, tau: float, n_topics: int,
                  doc_vecs: Mapping[str, np.ndarray] | None = None) -> AlignmentTargets:
    """Target matrix for every document of both languages, in corpus order.

    ``doc_vecs`` may carry already computed document embeddings (they do not
    change between refinements).
    """
    topic_vecs, valid = topic_vectors(refined, n_topics, provider, table)
    if not valid.any():
        raise NoTopicsEmbeddable("no refined topic could be embedded")
    if doc_vecs is None:
        doc_vecs = document_vectors(corpus, provider, table)
    rows = np.stack([similarity_row(doc_vecs[d.id], topic_vecs, tau, valid) for d in corpus.docs])
    lang_rows = {lang: np.array([i for i, d in enumerate(corpus.docs) if d.lang == lang], dtype=np.int64)
                 for lang in ("l1", "l2")}
    return AlignmentTargets(rows, tau, topic_vecs, tuple(d.id for d in corpus.docs), valid, lang_rows)


def document_vectors(corpus: Corpus, provider: EncoderProvider, table: EmbeddingTable) -> dict[str, np.ndarray]:
    return {d.id: document_embedding(d, provider, table, corpus.vocab(d.lang)) for d in corpus.docs}
