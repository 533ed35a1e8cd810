"""Vocabulary and bilingual bag-of-words corpus loading.

Corpus files are JSON-lines, one document per line::

    {"id": "d0", "lang": "l1", "bow": [[3, 2], [17, 1]], "label": 1, "pair_id": "p0"}

``bow`` holds sparse ``[index, count]`` pairs against the vocabulary of the
document's language. ``label`` and ``pair_id`` are optional.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping

import numpy as np

from .errors import (
    BadLangTag,
    DanglingPair,
    DuplicateToken,
    EmptyFile,
    IndexOutOfVocab,
    IoError,
    MalformedLine,
)

LANGS = ("l1", "l2")


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    index_of: Mapping[str, int] = field(repr=False, compare=False)

    @classmethod
    def from_tokens(cls, tokens: Iterable[str]) -> "Vocabulary":
        tokens = tuple(tokens)
        if not tokens:
            raise EmptyFile("vocabulary is empty")
        index = {}
        for i, tok in enumerate(tokens):
            if tok in index:
                raise DuplicateToken(tok, i)
            index[tok] = i
        return cls(tokens, MappingProxyType(index))

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token) -> bool:
        return token in self.index_of


@dataclass(frozen=True)
class BowDocument:
    id: str
    lang: str
    bow: Mapping[int, int]
    label: int | None = None
    pair_id: str | None = None

    @property
    def length(self) -> int:
        return sum(self.bow.values())

    def to_json(self) -> dict:
        out = {"id": self.id, "lang": self.lang, "bow": [[i, c] for i, c in self.bow.items()]}
        if self.label is not None:
            out["label"] = self.label
        if self.pair_id is not None:
            out["pair_id"] = self.pair_id
        return out


@dataclass(frozen=True)
class Corpus:
    docs: tuple[BowDocument, ...]
    vocab1: Vocabulary
    vocab2: Vocabulary
    pair_index: Mapping[str, tuple[BowDocument, BowDocument]] = field(compare=False)

    def vocab(self, lang: str) -> Vocabulary:
        return self.vocab1 if lang == "l1" else self.vocab2

    def by_lang(self, lang: str) -> list[BowDocument]:
        return [d for d in self.docs if d.lang == lang]

    def bow_matrix(self, lang: str) -> np.ndarray:
        """Dense ``(n_docs, |V_lang|)`` count matrix of the language's documents, in corpus order."""
        docs = self.by_lang(lang)
        mat = np.zeros((len(docs), len(self.vocab(lang))))
        for row, doc in enumerate(docs):
            for idx, cnt in doc.bow.items():
                mat[row, idx] = cnt
        return mat

    def pairs(self) -> list[tuple[BowDocument, BowDocument]]:
        return [self.pair_index[p] for p in sorted(self.pair_index)]


def load_vocab(path) -> Vocabulary:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as err:
        raise IoError(f"{path}: {err}") from err
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise EmptyFile(str(path))
    return Vocabulary.from_tokens(line.rstrip("\r") for line in lines)


def save_vocab(vocab: Vocabulary, path) -> None:
    Path(path).write_text("".join(t + "\n" for t in vocab.tokens), encoding="utf-8")


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def parse_document(record, lineno: int, vocab1: Vocabulary, vocab2: Vocabulary) -> BowDocument:
    if not isinstance(record, dict):
        raise MalformedLine(lineno, "expected a JSON object")
    doc_id = record.get("id")
    if not isinstance(doc_id, str):
        raise MalformedLine(lineno, "missing string 'id'")
    lang = record.get("lang")
    if lang not in LANGS:
        raise BadLangTag(f"line {lineno}: lang must be 'l1' or 'l2', got {lang!r}")
    vocab = vocab1 if lang == "l1" else vocab2
    raw = record.get("bow")
    if not isinstance(raw, list) or not raw:
        raise MalformedLine(lineno, "'bow' must be a non-empty list")
    bow: dict[int, int] = {}
    for entry in raw:
        if not (isinstance(entry, list) and len(entry) == 2 and all(map(_is_int, entry))):
            raise MalformedLine(lineno, f"bad bow entry {entry!r}")
        idx, cnt = entry
        if cnt < 1:
            raise MalformedLine(lineno, f"count must be >= 1, got {cnt}")
        if idx < 0 or idx >= len(vocab):
            raise IndexOutOfVocab(doc_id, idx)
        if idx in bow:
            raise MalformedLine(lineno, f"index {idx} repeated")
        bow[idx] = cnt
    label = record.get("label")
    if label is not None and not _is_int(label):
        raise MalformedLine(lineno, "'label' must be an integer")
    pair_id = record.get("pair_id")
    if pair_id is not None and not isinstance(pair_id, str):
        raise MalformedLine(lineno, "'pair_id' must be a string")
    return BowDocument(doc_id, lang, MappingProxyType(bow), label, pair_id)


def build_corpus(docs: Iterable[BowDocument], vocab1: Vocabulary, vocab2: Vocabulary) -> Corpus:
    docs = tuple(docs)
    if not docs:
        raise EmptyFile("corpus has no documents")
    halves: dict[str, dict[str, BowDocument]] = {"l1": {}, "l2": {}}
    seen_ids = set()
    for lineno, doc in enumerate(docs, 1):
        if doc.id in seen_ids:
            raise MalformedLine(lineno, f"duplicate document id {doc.id!r}")
        seen_ids.add(doc.id)
        if doc.pair_id is None:
            continue
        if doc.pair_id in halves[doc.lang]:
            raise MalformedLine(lineno, f"pair_id {doc.pair_id!r} used twice in {doc.lang}")
        halves[doc.lang][doc.pair_id] = doc
    for pid in sorted(halves["l1"].keys() ^ halves["l2"].keys()):
        raise DanglingPair(pid)
    pair_index = {pid: (halves["l1"][pid], halves["l2"][pid]) for pid in halves["l1"]}
    return Corpus(docs, vocab1, vocab2, MappingProxyType(pair_index))


def load_corpus(path, vocab1: Vocabulary, vocab2: Vocabulary) -> Corpus:
    docs = []
    try:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as err:
                    raise MalformedLine(lineno, str(err)) from err
                docs.append(parse_document(record, lineno, vocab1, vocab2))
    except (OSError, UnicodeDecodeError) as err:
        raise IoError(f"{path}: {err}") from err
    return build_corpus(docs, vocab1, vocab2)


def dump_corpus(corpus: Corpus, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for doc in corpus.docs:
            fh.write(json.dumps(doc.to_json(), ensure_ascii=False) + "\n")
