"""Word, document and topic embeddings in one shared multilingual space.

Every vector leaving this module is unit-norm, so cosine similarity
downstream is a plain dot product.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path

import httpx
import numpy as np

from .corpus_io import BowDocument, Vocabulary
from .errors import (
    DimMismatch,
    IoError,
    MalformedHeader,
    MalformedLine,
    MissingDocEmbedding,
    NoCoveredWords,
    NonFiniteVector,
    ProviderError,
)
from .http import post_json

log = logging.getLogger(__name__)

ENC_ENDPOINT_ENV = "XTM_ENC_ENDPOINT"
MODES = ("remote", "fixture", "mean")


def normalize(vec) -> np.ndarray:
    vec = np.asarray(vec, dtype=np.float64)
    norm = np.linalg.norm(vec)
    if not np.isfinite(norm) or norm == 0.0:
        raise NonFiniteVector("<zero or non-finite norm>")
    return vec / norm


@dataclass
class EmbeddingTable:
    dim: int
    word_vecs: dict[str, np.ndarray] = field(default_factory=dict)
    doc_vecs: dict[str, np.ndarray] = field(default_factory=dict)

    def word(self, token: str):
        return self.word_vecs.get(token)

    def matrix(self, tokens) -> np.ndarray:
        return np.stack([self.word_vecs[t] for t in tokens]) if tokens else np.zeros((0, self.dim))


def _check_vec(key, values, dim) -> np.ndarray:
    if len(values) != dim:
        raise DimMismatch(key, dim, len(values))
    vec = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(vec)):
        raise NonFiniteVector(key)
    return vec


def load_word_embeddings(path, table: EmbeddingTable | None = None) -> EmbeddingTable:
    """Read word2vec text format: a ``<count> <dim>`` header, then ``<token> v1 .. vdim`` rows.

    Vectors are stored normalized. Rows whose norm is zero are rejected as
    non-finite (they have no direction to compare).
    """
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except (OSError, UnicodeDecodeError) as err:
        raise IoError(f"{path}: {err}") from err
    if not lines:
        raise MalformedHeader("empty embedding file")
    header = lines[0].split()
    try:
        count, dim = (int(x) for x in header)
    except ValueError:
        raise MalformedHeader(f"expected '<count> <dim>', got {lines[0]!r}") from None
    if dim <= 0 or count < 0:
        raise MalformedHeader(f"bad header {lines[0]!r}")
    if table is None:
        table = EmbeddingTable(dim)
    elif table.dim != dim:
        raise MalformedHeader(f"dimension {dim} does not match table dimension {table.dim}")
    for lineno, line in enumerate(lines[1:], 2):
        parts = line.rstrip().split(" ")
        if not parts or parts == [""]:
            continue
        token, values = parts[0], parts[1:]
        try:
            values = [float(v) for v in values]
        except ValueError:
            raise MalformedLine(lineno, "non-numeric component") from None
        vec = _check_vec(token, values, dim)
        try:
            table.word_vecs[token] = normalize(vec)
        except NonFiniteVector:
            raise NonFiniteVector(token) from None
    if len(table.word_vecs) < count:
        log.warning("header announces %d words, read %d", count, len(table.word_vecs))
    return table


def load_doc_embeddings(path, table: EmbeddingTable) -> EmbeddingTable:
    """Add JSON-lines ``{"id": str, "vec": [floats]}`` document vectors to ``table``."""
    try:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    doc_id, values = rec["id"], rec["vec"]
                except (json.JSONDecodeError, KeyError, TypeError) as err:
                    raise MalformedLine(lineno, str(err)) from err
                vec = _check_vec(doc_id, values, table.dim)
                try:
                    table.doc_vecs[doc_id] = normalize(vec)
                except NonFiniteVector:
                    raise NonFiniteVector(doc_id) from None
    except OSError as err:
        raise IoError(f"{path}: {err}") from err
    return table


def text_key(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class EncoderProvider:
    """Turns text into vectors.

    ``remote`` POSTs ``{"text": ...}`` and expects ``{"vec": [...]}``;
    ``fixture`` reads the same response body from ``<dir>/<sha256(text)>.json``;
    ``mean`` never encodes text and averages word vectors instead.
    Results are memoized per input text.
    """

    def __init__(self, mode: str = "mean", endpoint: str | None = None, *,
                 client: httpx.Client | None = None, max_retries: int = 2,
                 timeout: float = 60.0, backoff: float = 1.0):
        if mode not in MODES:
            raise ValueError(f"unknown encoder mode {mode!r}")
        if mode == "remote":
            endpoint = endpoint or os.environ.get(ENC_ENDPOINT_ENV)
            if not endpoint:
                raise ProviderError("config", f"remote encoder needs an endpoint or ${ENC_ENDPOINT_ENV}")
        if mode == "fixture" and not endpoint:
            raise ProviderError("config", "fixture encoder needs a directory")
        self.mode = mode
        self.endpoint = endpoint
        self.max_retries = max_retries
        self.timeout = timeout
        self.backoff = backoff
        self._client = client
        self._cache: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    def encode(self, text: str) -> np.ndarray:
        with self._lock:
            hit = self._cache.get(text)
        if hit is not None:
            return hit
        if self.mode == "fixture":
            path = Path(self.endpoint) / f"{text_key(text)}.json"
            try:
                body = json.loads(path.read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as err:
                raise ProviderError("fixture", f"{path}: {err}") from err
        elif self.mode == "remote":
            if self._client is None:
                self._client = httpx.Client()
            body = post_json(self._client, self.endpoint, {"text": text},
                             max_retries=self.max_retries, timeout=self.timeout,
                             backoff=self.backoff)
        else:
            raise ProviderError("config", "mean-of-words mode cannot encode text")
        values = body.get("vec")
        if not isinstance(values, list) or not values:
            raise ProviderError("protocol", "missing 'vec' in encoder response")
        vec = _check_vec("<text>", values, len(values))
        vec = normalize(vec)
        with self._lock:
            self._cache.setdefault(text, vec)
        return vec


def mean_of_words(tokens, table: EmbeddingTable, weights=None) -> np.ndarray:
    vecs, ws = [], []
    for i, tok in enumerate(tokens):
        vec = table.word(tok)
        if vec is None:
            continue
        vecs.append(vec)
        ws.append(1.0 if weights is None else float(weights[i]))
    if not vecs:
        raise NoCoveredWords(f"none of {len(tokens)} words has an embedding")
    mean = np.average(np.stack(vecs), axis=0, weights=ws)
    if np.linalg.norm(mean) == 0.0:
        raise NoCoveredWords("word vectors cancel out")
    return normalize(mean)


def topic_text(refined) -> str:
    """Refined L1 words then L2 words, single-space separated."""
    return " ".join(list(refined.selected_l1) + list(refined.selected_l2))


def topic_embedding(refined, provider: EncoderProvider, table: EmbeddingTable) -> np.ndarray:
    words = list(refined.selected_l1) + list(refined.selected_l2)
    if not words:
        raise NoCoveredWords(f"topic {refined.topic_id} has no refined words")
    if provider.mode == "mean":
        return mean_of_words(words, table)
    return provider.encode(topic_text(refined))


def document_embedding(doc: BowDocument, provider: EncoderProvider, table: EmbeddingTable,
                       vocab: Vocabulary | None = None) -> np.ndarray:
    """Unit vector for ``doc``.

    Precomputed vectors in ``table.doc_vecs`` always win. Otherwise mean mode
    takes the count-weighted mean of the document's word vectors and remote
    mode encodes the document's tokens joined by spaces; fixture mode has no
    fallback.
    """
    vec = table.doc_vecs.get(doc.id)
    if vec is not None:
        return vec
    if provider.mode == "fixture" or vocab is None:
        raise MissingDocEmbedding(doc.id)
    items = sorted(doc.bow.items())
    tokens = [vocab.tokens[i] for i, _ in items]
    if provider.mode == "mean":
        try:
            return mean_of_words(tokens, table, [c for _, c in items])
        except NoCoveredWords:
            raise MissingDocEmbedding(doc.id) from None
    return provider.encode(" ".join(tokens))

