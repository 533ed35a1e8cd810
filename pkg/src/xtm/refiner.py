"""LLM topic-word refinement with self-consistency voting.

One prompt covers every topic. It is sent ``R`` times; each parsed reply is
a round of refined bilingual word lists. Words are counted per language over
the successful rounds and the ``top_m`` most frequent per language form the
refined topic.
"""

from __future__ import annotations

import hashlib
import logging
import os
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import httpx

from .errors import (
    AllRetriesFailed,
    EmptyBatch,
    MissingTopic,
    MultiwordToken,
    NoSuccessfulRounds,
    OutOfOrderTopics,
    ParseError,
    ProviderError,
    WordCountMismatch,
)
from .http import post_json

log = logging.getLogger(__name__)

WORDS_PER_LANGUAGE = 15
LLM_ENDPOINT_ENV = "XTM_LLM_ENDPOINT"
LLM_KEY_ENV = "XTM_LLM_API_KEY"


@dataclass(frozen=True)
class Languages:
    """Display names used in the prompt and the line tags expected in replies."""

    name1: str = "English"
    name2: str = "Chinese"
    tag1: str = "EN"
    tag2: str = "CN"


DEFAULT_LANGUAGES = Languages()

PROMPT_TEMPLATE = """\
Given the following cross-lingual topic words from {name1} and {name2} for N topics, refine each topic:

1) Identify the main theme shared across both languages.
2) Remove irrelevant/noisy words that do not fit the theme.
3) Add relevant words that strengthen coherence and cross-lingual coverage.
4) Use only SINGLE WORDS (no phrases, no underscores, no hyphenated expressions).
5) Return exactly 15 words per language for each topic.

Output format for all topics:
Topic <id>: <brief theme>
{tag1}: word1 - word2 - ... - word15
{tag2}: word1 - word2 - ... - word15

Rules:
- Exactly 15 words after {tag1}: and {tag2}:.
- Separate words with " - ".
- List topics in order from 0 to N–1.
"""

SEPARATOR = " - "


@dataclass(frozen=True)
class CandidatePool:
    topic_id: int
    words_l1: tuple[str, ...]
    words_l2: tuple[str, ...]

    def __post_init__(self):
        for lang, words in (("l1", self.words_l1), ("l2", self.words_l2)):
            if len(words) != WORDS_PER_LANGUAGE:
                raise ValueError(f"topic {self.topic_id} {lang}: pool needs "
                                 f"{WORDS_PER_LANGUAGE} words, got {len(words)}")
            if len(set(words)) != len(words):
                raise ValueError(f"topic {self.topic_id} {lang}: duplicate words in pool")


@dataclass(frozen=True)
class RefinementRound:
    topic_id: int
    round_index: int
    words_l1: tuple[str, ...]
    words_l2: tuple[str, ...]
    theme: str = ""
    short: bool = False


@dataclass(frozen=True)
class TopicVotes:
    """Per-language vote counts and the first round in which each word appeared."""

    topic_id: int
    counts_l1: dict[str, int]
    counts_l2: dict[str, int]
    first_seen_l1: dict[str, int]
    first_seen_l2: dict[str, int]
    n_rounds: int

    def frequency(self, token: str, lang: str = "l1") -> float:
        counts = self.counts_l1 if lang == "l1" else self.counts_l2
        return counts.get(token, 0) / self.n_rounds


@dataclass(frozen=True)
class RefinedTopic:
    topic_id: int
    votes: TopicVotes
    selected_l1: tuple[str, ...]
    selected_l2: tuple[str, ...]
    short: bool = False

    @property
    def votes_l1(self) -> dict[str, int]:
        return self.votes.counts_l1

    @property
    def votes_l2(self) -> dict[str, int]:
        return self.votes.counts_l2


def build_prompt(pools: Sequence[CandidatePool], languages: Languages = DEFAULT_LANGUAGES) -> str:
    if not pools:
        raise EmptyBatch("no candidate pools to refine")
    ids = [p.topic_id for p in pools]
    if ids != list(range(len(pools))):
        raise ValueError(f"pools must be ordered by topic id 0..N-1, got {ids}")
    parts = [PROMPT_TEMPLATE.format(**vars(languages)),
             f"N = {len(pools)}\n\nCandidate topic words:\n"]
    for pool in pools:
        parts.append(f"Topic {pool.topic_id}:\n"
                     f"{languages.tag1}: {SEPARATOR.join(pool.words_l1)}\n"
                     f"{languages.tag2}: {SEPARATOR.join(pool.words_l2)}\n")
    return "\n".join(parts)


_TOPIC_RE = re.compile(r"^topic\s+(\d+)\s*[:.]?\s*(.*)$", re.IGNORECASE)
_SPLIT_RE = re.compile(r"\s+-\s+")
_FORBIDDEN = re.compile(r"[\s_\-]")


def _clean(line: str) -> str:
    # tolerate markdown emphasis and bullets around the required lines
    return line.strip().lstrip("#>*` ").replace("**", "").strip()


def _split_words(rest: str) -> list[str]:
    return [w.strip() for w in _SPLIT_RE.split(rest.strip()) if w.strip()]


def _check_words(topic_id: int, lang: str, words: list[str]) -> tuple[tuple[str, ...], bool]:
    if len(words) != WORDS_PER_LANGUAGE:
        raise WordCountMismatch(topic_id, lang, len(words))
    for w in words:
        if _FORBIDDEN.search(w):
            raise MultiwordToken(topic_id, lang, w)
    unique = tuple(dict.fromkeys(words))
    return unique, len(unique) < WORDS_PER_LANGUAGE


def parse_response(text: str, expected_topics: int, round_index: int = 1,
                   languages: Languages = DEFAULT_LANGUAGES) -> list[RefinementRound]:
    """Parse a refinement reply into one ``RefinementRound`` per expected topic.

    Topics must appear in increasing order. Topics with ids beyond
    ``expected_topics`` are ignored. Duplicate words are dropped (first
    occurrence kept) and the round is flagged ``short``.
    """
    tags = {languages.tag1.lower(): "l1", languages.tag2.lower(): "l2"}
    blocks: dict[int, dict] = {}
    order: list[int] = []
    current = None
    for raw in text.splitlines():
        line = _clean(raw)
        if not line:
            continue
        m = _TOPIC_RE.match(line)
        if m:
            tid = int(m.group(1))
            if tid in blocks or (order and tid < order[-1]):
                raise OutOfOrderTopics(f"topic {tid} appears after topic {order[-1]}")
            order.append(tid)
            current = blocks[tid] = {"theme": m.group(2).strip()}
            continue
        if current is None or ":" not in line:
            continue
        tag, rest = line.split(":", 1)
        lang = tags.get(tag.strip().lower())
        if lang is not None and lang not in current:
            current[lang] = _split_words(rest)
    rounds = []
    for tid in range(expected_topics):
        block = blocks.get(tid)
        if block is None:
            raise MissingTopic(tid)
        w1, short1 = _check_words(tid, "l1", block.get("l1", []))
        w2, short2 = _check_words(tid, "l2", block.get("l2", []))
        rounds.append(RefinementRound(tid, round_index, w1, w2, block["theme"], short1 or short2))
    extra = [t for t in order if t >= expected_topics]
    if extra:
        log.warning("ignoring unexpected topics %s in reply", extra)
    return rounds


# providers

class LlmProvider(Protocol):
    max_retries: int

    def complete(self, prompt: str, round_index: int) -> str: ...


def prompt_key(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


class _CallLog:
    def __init__(self):
        self.calls: list[tuple[str, int]] = []
        self._lock = threading.Lock()

    def record(self, prompt: str, round_index: int) -> None:
        with self._lock:
            self.calls.append((prompt_key(prompt), round_index))


class FixtureLlm(_CallLog):
    """Canned replies from ``<dir>/<sha256(prompt)>.r<round>.txt``.

    When no file matches the prompt, ``<dir>/default.r<round>.txt`` is used if
    present, which lets a fixture serve prompts that depend on training state.
    """

    mode = "fixture"

    def __init__(self, directory, max_retries: int = 2):
        super().__init__()
        self.directory = Path(directory)
        self.max_retries = max_retries
        if not self.directory.is_dir():
            raise ProviderError("fixture", f"{directory} is not a directory")

    def complete(self, prompt: str, round_index: int) -> str:
        self.record(prompt, round_index)
        for stem in (prompt_key(prompt), "default"):
            path = self.directory / f"{stem}.r{round_index}.txt"
            if path.is_file():
                return path.read_text(encoding="utf-8")
        raise ProviderError("fixture", f"no reply for prompt {prompt_key(prompt)[:12]} round {round_index}")


class CallableLlm(_CallLog):
    """Adapter turning ``fn(prompt, round_index) -> str`` into a provider."""

    mode = "fixture"

    def __init__(self, fn: Callable[[str, int], str], max_retries: int = 2):
        super().__init__()
        self.fn = fn
        self.max_retries = max_retries

    def complete(self, prompt: str, round_index: int) -> str:
        self.record(prompt, round_index)
        return self.fn(prompt, round_index)


class RemoteLlm(_CallLog):
    """POST ``{"prompt": ...}`` to the endpoint and read ``{"text": ...}``."""

    mode = "remote"

    def __init__(self, endpoint: str | None = None, api_key: str | None = None, *,
                 max_retries: int = 2, timeout: float = 120.0, http_retries: int = 3,
                 backoff: float = 2.0, client: httpx.Client | None = None):
        super().__init__()
        self.endpoint = endpoint or os.environ.get(LLM_ENDPOINT_ENV)
        if not self.endpoint:
            raise ProviderError("config", "no LLM provider configured")
        self.api_key = api_key if api_key is not None else os.environ.get(LLM_KEY_ENV)
        self.max_retries = max_retries
        self.timeout = timeout
        self.http_retries = http_retries
        self.backoff = backoff
        self._client = client or httpx.Client()

    def complete(self, prompt: str, round_index: int) -> str:
        self.record(prompt, round_index)
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else None
        body = post_json(self._client, self.endpoint, {"prompt": prompt}, headers=headers,
                         max_retries=self.http_retries, backoff=self.backoff, timeout=self.timeout)
        text = body.get("text")
        if not isinstance(text, str):
            raise ProviderError("protocol", "missing 'text' in LLM response")
        return text


def refine_round(provider: LlmProvider, pools: Sequence[CandidatePool], round_index: int = 1,
                 languages: Languages = DEFAULT_LANGUAGES) -> list[RefinementRound]:
    """One self-consistency round: prompt, query, parse; re-ask on parse errors.

    Raises ``AllRetriesFailed`` after ``provider.max_retries + 1`` unparseable replies.
    """
    prompt = build_prompt(pools, languages)
    last = None
    for _ in range(provider.max_retries + 1):
        text = provider.complete(prompt, round_index)
        try:
            return parse_response(text, len(pools), round_index, languages)
        except ParseError as err:
            log.warning("round %d: %s", round_index, err)
            last = err
    raise AllRetriesFailed(provider.max_retries + 1, last)


def aggregate_votes(rounds: Iterable[RefinementRound], r_effective: int | None = None) -> dict[int, TopicVotes]:
    """Count, per topic and language, the rounds in which each word appears.

    ``r_effective`` defaults to the number of distinct round indices present.
    """
    rounds = list(rounds)
    if r_effective is None:
        r_effective = len({r.round_index for r in rounds})
    if r_effective < 1 or not rounds:
        raise NoSuccessfulRounds("no parsed refinement rounds to aggregate")
    acc: dict[int, tuple[dict, dict, dict, dict]] = {}
    for rnd in rounds:
        c1, c2, f1, f2 = acc.setdefault(rnd.topic_id, ({}, {}, {}, {}))
        for words, counts, first in ((rnd.words_l1, c1, f1), (rnd.words_l2, c2, f2)):
            for w in set(words):
                counts[w] = counts.get(w, 0) + 1
                first[w] = min(first.get(w, rnd.round_index), rnd.round_index)
    return {tid: TopicVotes(tid, c1, c2, f1, f2, r_effective)
            for tid, (c1, c2, f1, f2) in sorted(acc.items())}


def _rank(counts: dict[str, int], first_seen: dict[str, int]) -> list[str]:
    return sorted(counts, key=lambda w: (-counts[w], first_seen[w], w))


def select_top_m(votes: TopicVotes, top_m: int) -> RefinedTopic:
    """Most-voted ``top_m`` words per language.

    Ties go to the word first seen in an earlier round, then to the
    lexicographically smaller word. Fewer voted words than ``top_m`` yields a
    shorter list flagged ``short``.
    """
    sel1 = tuple(_rank(votes.counts_l1, votes.first_seen_l1)[:top_m])
    sel2 = tuple(_rank(votes.counts_l2, votes.first_seen_l2)[:top_m])
    short = len(sel1) < top_m or len(sel2) < top_m
    if short:
        log.warning("topic %d: fewer than %d voted words", votes.topic_id, top_m)
    return RefinedTopic(votes.topic_id, votes, sel1, sel2, short)


@dataclass
class RefinementResult:
    topics: dict[int, RefinedTopic]
    rounds_ok: list[int] = field(default_factory=list)
    rounds_failed: list[int] = field(default_factory=list)


def self_consistent_refine(provider: LlmProvider, pools: Sequence[CandidatePool], rounds: int,
                           top_m: int, *, workers: int = 1,
                           languages: Languages = DEFAULT_LANGUAGES) -> RefinementResult:
    """Run ``rounds`` independent refinement rounds, then vote.

    Rounds whose replies never parse are skipped and excluded from the vote
    denominator. Raises ``NoSuccessfulRounds`` when every round fails;
    provider errors propagate.
    """
    def one(r):
        try:
            return r, refine_round(provider, pools, r, languages)
        except AllRetriesFailed as err:
            log.warning("round %d skipped: %s", r, err)
            return r, None

    indices = range(1, rounds + 1)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, indices))
    else:
        results = [one(r) for r in indices]
    ok = [r for r, res in results if res is not None]
    failed = [r for r, res in results if res is None]
    parsed = [rnd for _, res in results if res is not None for rnd in res]
    votes = aggregate_votes(parsed, len(ok))
    topics = {tid: select_top_m(v, top_m) for tid, v in votes.items()}
    return RefinementResult(topics, ok, failed)
