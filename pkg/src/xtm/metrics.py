"""Topic evaluation: CNPMI, topic uniqueness, topic quality, linear-SVM
classification on theta, and LLM relatedness ratings."""

from __future__ import annotations

import csv
import json
import logging
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np
from scipy.optimize import minimize

from .corpus_io import Corpus
from .errors import EmptyReference, SingleClassTraining, UnparseableRating

log = logging.getLogger(__name__)

NPMI_EPS = 1e-12
DEFAULT_TOP_C = 15


class RefStats:
    """Document frequencies over linked bilingual pairs.

    ``joint(a, b)`` counts pairs whose L1 side contains ``a`` and whose L2
    side contains ``b``; it is computed on demand and memoized.
    """

    def __init__(self, pairs: Sequence[tuple[set, set]]):
        self.n_pairs = len(pairs)
        self._docs1: dict[str, set[int]] = {}
        self._docs2: dict[str, set[int]] = {}
        for i, (toks1, toks2) in enumerate(pairs):
            for t in toks1:
                self._docs1.setdefault(t, set()).add(i)
            for t in toks2:
                self._docs2.setdefault(t, set()).add(i)
        self._joint: dict[tuple[str, str], int] = {}

    @classmethod
    def from_corpus(cls, corpus: Corpus) -> "RefStats":
        pairs = []
        for d1, d2 in corpus.pairs():
            pairs.append(({corpus.vocab1.tokens[i] for i in d1.bow},
                          {corpus.vocab2.tokens[i] for i in d2.bow}))
        return cls(pairs)

    def df1(self, token: str) -> int:
        return len(self._docs1.get(token, ()))

    def df2(self, token: str) -> int:
        return len(self._docs2.get(token, ()))

    def joint(self, a: str, b: str) -> int:
        key = (a, b)
        if key not in self._joint:
            self._joint[key] = len(self._docs1.get(a, set()) & self._docs2.get(b, set()))
        return self._joint[key]


def npmi_pair(w1: str, w2: str, stats: RefStats, eps: float = NPMI_EPS) -> float:
    if stats.n_pairs == 0:
        raise EmptyReference("reference has no document pairs")
    n = stats.n_pairs
    p1, p2 = stats.df1(w1) / n, stats.df2(w2) / n
    if p1 == 0 or p2 == 0:
        return 0.0
    p12 = stats.joint(w1, w2) / n
    denom = -math.log(p12 + eps)
    if denom <= 0:
        # both words occur in every pair: no information, treat as independent
        return 0.0
    return math.log((p12 + eps) / (p1 * p2 + eps)) / denom


def cnpmi_per_topic(topics: Sequence[tuple[Sequence[str], Sequence[str]]], stats: RefStats,
                    top_c: int = DEFAULT_TOP_C) -> list[float]:
    """Mean NPMI over the ``top_c x top_c`` cross-lingual word pairs of each topic."""
    if stats.n_pairs == 0:
        raise EmptyReference("reference has no document pairs")
    scores = []
    for k, (l1, l2) in enumerate(topics):
        l1, l2 = list(l1)[:top_c], list(l2)[:top_c]
        if len(l1) < top_c or len(l2) < top_c:
            log.warning("topic %d has fewer than %d words per language", k, top_c)
        if not l1 or not l2:
            scores.append(0.0)
            continue
        vals = [npmi_pair(a, b, stats) for a in l1 for b in l2]
        scores.append(sum(vals) / len(vals))
    return scores


def cnpmi(topics, stats: RefStats, top_c: int = DEFAULT_TOP_C) -> float:
    scores = cnpmi_per_topic(topics, stats, top_c)
    return sum(scores) / len(scores) if scores else 0.0


def topic_uniqueness(lists_l1: Sequence[Sequence[str]], lists_l2: Sequence[Sequence[str]] | None = None) -> float:
    """Average of ``1 / occurrences`` over every listed word.

    Occurrences are counted across all topics' lists of the same language.
    Accumulated in exact rationals, so e.g. K identical lists give exactly 1/K.
    """
    total, n = Fraction(0), 0
    for lists in (lists_l1, lists_l2 or []):
        counts = Counter(w for lst in lists for w in lst)
        for lst in lists:
            for w in lst:
                total += Fraction(1, counts[w])
                n += 1
    return float(total / n) if n else 0.0


def topic_quality(cnpmi_value: float, tu: float) -> float:
    return max(0.0, cnpmi_value) * tu


@dataclass
class MetricsReport:
    cnpmi: float
    tu: float
    per_topic_cnpmi: list[float] = field(default_factory=list)
    classification: dict[str, float] = field(default_factory=dict)
    tq: float = field(init=False)

    def __post_init__(self):
        self.tq = topic_quality(self.cnpmi, self.tu)

    def to_json(self) -> dict:
        return {"cnpmi": self.cnpmi, "tu": self.tu, "tq": self.tq,
                "per_topic": self.per_topic_cnpmi, "classification": self.classification}


def evaluate_topics(topics, stats: RefStats, top_c: int = DEFAULT_TOP_C, tu_top: int = 15) -> MetricsReport:
    per_topic = cnpmi_per_topic(topics, stats, top_c)
    tu = topic_uniqueness([list(t[0])[:tu_top] for t in topics], [list(t[1])[:tu_top] for t in topics])
    return MetricsReport(sum(per_topic) / len(per_topic), tu, per_topic)


# classification

class LinearSVM:
    """One-vs-rest linear SVM: squared hinge loss, L2 penalty, L-BFGS.

    Deterministic for a given input (zero initialization, no shuffling).
    """

    def __init__(self, C: float = 10.0, max_iter: int = 500):
        self.C = C
        self.max_iter = max_iter

    def _fit_binary(self, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        n, d = X.shape
        Xb = np.hstack([X, np.ones((n, 1))])
        C = self.C

        def objective(params):
            w = params[:d]
            margin = 1.0 - y * (Xb @ params)
            active = np.maximum(margin, 0.0)
            loss = 0.5 * w @ w + C * active @ active
            grad = -2.0 * C * (Xb.T @ (y * active))
            grad[:d] += w
            return loss, grad

        res = minimize(objective, np.zeros(d + 1), jac=True, method="L-BFGS-B",
                       options={"maxiter": self.max_iter})
        return res.x

    def fit(self, X, labels) -> "LinearSVM":
        X = np.asarray(X, dtype=np.float64)
        labels = np.asarray(labels)
        self.classes_ = np.unique(labels)
        if len(self.classes_) < 2:
            raise SingleClassTraining(f"training labels contain a single class {self.classes_}")
        if len(self.classes_) == 2:
            y = np.where(labels == self.classes_[1], 1.0, -1.0)
            self.coef_ = self._fit_binary(X, y)[None, :]
        else:
            self.coef_ = np.stack([self._fit_binary(X, np.where(labels == c, 1.0, -1.0))
                                   for c in self.classes_])
        return self

    def decision_function(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        Xb = np.hstack([X, np.ones((len(X), 1))])
        return Xb @ self.coef_.T

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        if len(self.classes_) == 2:
            return np.where(scores[:, 0] > 0, self.classes_[1], self.classes_[0])
        return self.classes_[np.argmax(scores, axis=1)]

    def score(self, X, labels) -> float:
        if len(X) == 0:
            return float("nan")
        return float(np.mean(self.predict(X) == np.asarray(labels)))


def classify_eval(theta_train, labels_train, theta_test_same, labels_same,
                  theta_test_other, labels_other, C: float = 10.0) -> tuple[float, float]:
    """Train on one language's theta; return (intra-lingual, cross-lingual) accuracy."""
    clf = LinearSVM(C).fit(theta_train, labels_train)
    return clf.score(theta_test_same, labels_same), clf.score(theta_test_other, labels_other)


def classification_report(train: dict, test: dict, C: float = 10.0) -> dict[str, float]:
    """Four accuracies from ``{lang: (theta, labels)}`` train and test splits."""
    out = {}
    for lang, other in (("l1", "l2"), ("l2", "l1")):
        intra, cross = classify_eval(*train[lang], *test[lang], *test[other], C=C)
        out[f"acc_intra_{lang}"] = intra
        out[f"acc_cross_{lang}"] = cross
    return out


# LLM ratings

INTRA_PROMPT = (
    "You are a helpful assistant evaluating the top words of a topic model output for a given "
    "topic. The dataset is {dataset}. Please rate how related the following words are to each "
    "other on a scale from 1 to 3 (\"1\"=not very related, \"2\"=moderately related, \"3\"=very "
    "related). Reply with a single number, indicating the overall appropriateness of the topic."
)

CROSS_PROMPT = (
    "You are a helpful assistant evaluating the similarity of topics derived from topic modeling "
    "on parallel {corpus_kind} corpora. The dataset is {dataset}. You will be given two sets of "
    "top words, one for an {name1} topic (Language 1) and one for a {name2} topic (Language 2). "
    "Please rate how similar the underlying topics represented by these two sets of words are, on "
    "a scale from 1 to 3 (\"1\"=not very similar, \"2\"=moderately similar, \"3\"=very similar). "
    "Reply with a single number."
)

_INT_RE = re.compile(r"\d+")


def parse_rating(reply: str, topic) -> int:
    """First integer in the reply that is 1, 2 or 3."""
    for m in _INT_RE.finditer(reply):
        if m.group() in ("1", "2", "3"):
            return int(m.group())
    raise UnparseableRating(topic, reply)


def rating_prompt(kind: str, dataset: str, words_a, words_b=None, *, name1="English",
                  name2="Chinese", corpus_kind="news") -> str:
    if kind == "intra":
        return INTRA_PROMPT.format(dataset=dataset) + "\n\nWords: " + ", ".join(words_a)
    if kind == "cross":
        head = CROSS_PROMPT.format(dataset=dataset, corpus_kind=corpus_kind, name1=name1, name2=name2)
        return f"{head}\n\nLanguage 1: {', '.join(words_a)}\nLanguage 2: {', '.join(words_b)}"
    raise ValueError(f"unknown rating kind {kind!r}")


def llm_rate_topics(topics, provider, kind: str, dataset: str, runs: int = 1, **prompt_kw) -> dict:
    """Ratings per run, keyed ``(topic, lang)`` for intra and ``topic`` for cross."""
    ratings: dict = {}
    for k, (l1, l2) in enumerate(topics):
        if kind == "intra":
            jobs = [((k, "l1"), rating_prompt("intra", dataset, l1, **prompt_kw)),
                    ((k, "l2"), rating_prompt("intra", dataset, l2, **prompt_kw))]
        else:
            jobs = [(k, rating_prompt("cross", dataset, l1, l2, **prompt_kw))]
        for key, prompt in jobs:
            ratings[key] = [parse_rating(provider.complete(prompt, run), key) for run in range(1, runs + 1)]
    return ratings


def write_ratings_csv(ratings: dict, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["topic", "lang", "mean", "ratings"])
        for key, vals in ratings.items():
            topic, lang = key if isinstance(key, tuple) else (key, "cross")
            writer.writerow([topic, lang, f"{np.mean(vals):.4f}", " ".join(map(str, vals))])


# topic export

def write_topics(topics, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for k, (l1, l2) in enumerate(topics):
            fh.write(json.dumps({"topic": k, "l1": list(l1), "l2": list(l2)}, ensure_ascii=False) + "\n")


def read_topics(path) -> list[tuple[list[str], list[str]]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                rows.append((rec["topic"], rec["l1"], rec["l2"]))
    return [(l1, l2) for _, l1, l2 in sorted(rows, key=lambda r: r[0])]
