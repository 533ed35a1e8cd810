"""Planted-topic bilingual corpus generator and an oracle refinement LLM.

Each language has ``n_topics`` disjoint word blocks plus a background block.
Word ``j`` of topic ``k`` is ``e{k}w{j}`` in L1 and ``c{k}w{j}`` in L2; both
get embeddings near a shared topic centre, so the two languages live in one
space. Documents draw a sparse Dirichlet mixture over topics and Zipf-like
word frequencies inside a block. The first ``n_pairs`` documents of each
language are translations: they share the same topic mixture.

Run ``python -m xtm.synthetic OUTDIR`` to write a ready-to-use data set.
"""

from __future__ import annotations

import argparse
import json
import re
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus_io import BowDocument, Corpus, Vocabulary, build_corpus, dump_corpus, save_vocab
from .embeddings import EmbeddingTable, normalize
from .refiner import SEPARATOR, WORDS_PER_LANGUAGE, CallableLlm

PREFIX = {"l1": "e", "l2": "c"}


@dataclass
class Synthetic:
    corpus: Corpus
    table: EmbeddingTable
    topic_words: dict[str, list[list[str]]]
    theta: dict[str, np.ndarray]

    @property
    def n_topics(self) -> int:
        return len(self.topic_words["l1"])


def _vocab(lang: str, n_topics: int, per_topic: int, n_background: int) -> tuple[list[str], list[list[str]]]:
    p = PREFIX[lang]
    blocks = [[f"{p}{k}w{j}" for j in range(per_topic)] for k in range(n_topics)]
    background = [f"{p}bg{j}" for j in range(n_background)]
    return [w for b in blocks for w in b] + background, blocks


def make_synthetic(n_topics: int = 4, vocab_size: int = 200, docs_per_lang: int = 400,
                   n_pairs: int = 100, dim: int = 16, seed: int = 0, alpha: float = 0.1,
                   background: float = 0.1, doc_len: tuple[int, int] = (40, 80),
                   word_noise: float = 0.35) -> Synthetic:
    rng = np.random.default_rng(seed)
    n_background = vocab_size // 5
    per_topic = (vocab_size - n_background) // n_topics
    n_background = vocab_size - per_topic * n_topics

    tokens, blocks = {}, {}
    for lang in ("l1", "l2"):
        tokens[lang], blocks[lang] = _vocab(lang, n_topics, per_topic, n_background)
    vocab1, vocab2 = Vocabulary.from_tokens(tokens["l1"]), Vocabulary.from_tokens(tokens["l2"])

    centres = rng.normal(size=(n_topics, dim))
    table = EmbeddingTable(dim)
    for k in range(n_topics):
        for j in range(per_topic):
            base = centres[k] + word_noise * rng.normal(size=dim)
            for lang in ("l1", "l2"):
                table.word_vecs[blocks[lang][k][j]] = normalize(base + 0.05 * rng.normal(size=dim))
    for j in range(n_background):
        base = rng.normal(size=dim)
        for lang in ("l1", "l2"):
            table.word_vecs[f"{PREFIX[lang]}bg{j}"] = normalize(base + 0.05 * rng.normal(size=dim))

    zipf = 1.0 / np.arange(1, per_topic + 1)
    zipf /= zipf.sum()
    theta_shared = rng.dirichlet(np.full(n_topics, alpha), size=n_pairs)

    docs, thetas = [], {}
    for lang, vocab in (("l1", vocab1), ("l2", vocab2)):
        own = rng.dirichlet(np.full(n_topics, alpha), size=docs_per_lang - n_pairs)
        theta = np.vstack([theta_shared, own])
        thetas[lang] = theta
        for d in range(docs_per_lang):
            length = int(rng.integers(doc_len[0], doc_len[1] + 1))
            counts: dict[int, int] = {}
            for _ in range(length):
                if rng.random() < background:
                    idx = per_topic * n_topics + int(rng.integers(n_background))
                else:
                    k = int(rng.choice(n_topics, p=theta[d]))
                    idx = k * per_topic + int(rng.choice(per_topic, p=zipf))
                counts[idx] = counts.get(idx, 0) + 1
            docs.append(BowDocument(
                id=f"{lang}-{d}", lang=lang, bow=dict(sorted(counts.items())),
                label=int(np.argmax(theta[d])),
                pair_id=f"p{d}" if d < n_pairs else None,
            ))
    corpus = build_corpus(docs, vocab1, vocab2)
    return Synthetic(corpus, table, blocks, thetas)


# oracle LLM

_CAND_TOPIC = re.compile(r"^Topic (\d+):\s*$")
_TOKEN_TOPIC = re.compile(r"^[ec](\d+)w\d+$")


def candidate_blocks(prompt: str) -> list[tuple[list[str], list[str]]]:
    """Recover the candidate word lists from a refinement prompt."""
    body = prompt.split("Candidate topic words:", 1)[1]
    out, cur = [], None
    for line in body.splitlines():
        if _CAND_TOPIC.match(line.strip()):
            cur = [[], []]
            out.append(cur)
        elif cur is not None and ":" in line:
            tag, rest = line.split(":", 1)
            slot = 0 if tag.strip() == "EN" else 1
            cur[slot] = [w.strip() for w in rest.split(SEPARATOR) if w.strip()]
    return [tuple(c) for c in out]


def _planted_topic(words: list[str]) -> int | None:
    votes: dict[int, int] = {}
    for w in words:
        m = _TOKEN_TOPIC.match(w)
        if m:
            votes[int(m.group(1))] = votes.get(int(m.group(1)), 0) + 1
    if not votes:
        return None
    return min(votes, key=lambda k: (-votes[k], k))


def planted_reply(assignments: list[int], topic_words, round_index: int, jitter: int = 3) -> str:
    """A well-formed reply giving topic ``i`` the head words of planted topic ``assignments[i]``.

    The last ``jitter`` words rotate with ``round_index`` so rounds disagree a little.
    """
    n = WORDS_PER_LANGUAGE
    lines = []
    for i, k in enumerate(assignments):
        lines.append(f"Topic {i}: planted theme {k}")
        for tag, lang in (("EN", "l1"), ("CN", "l2")):
            block = topic_words[lang][k]
            head = block[:n - jitter]
            tail_pool = block[n - jitter:]
            start = (round_index - 1) * jitter % max(1, len(tail_pool))
            tail = [tail_pool[(start + t) % len(tail_pool)] for t in range(jitter)]
            lines.append(f"{tag}: " + SEPARATOR.join(head + tail))
    return "\n".join(lines) + "\n"


def oracle_llm(synth: Synthetic, max_retries: int = 2) -> CallableLlm:
    """LLM stand-in that maps every candidate topic to its dominant planted topic."""
    def reply(prompt: str, round_index: int) -> str:
        assignments = []
        for l1, l2 in candidate_blocks(prompt):
            k = _planted_topic(list(l1) + list(l2))
            assignments.append(0 if k is None else k)
        return planted_reply(assignments, synth.topic_words, round_index)

    return CallableLlm(reply, max_retries=max_retries)


def write_synthetic(synth: Synthetic, outdir, rounds: int = 5, n_model_topics: int | None = None) -> dict:
    """Write vocabularies, corpus, word vectors and a ``default.r<i>.txt`` LLM fixture."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "vocab1": out / "vocab1.txt", "vocab2": out / "vocab2.txt",
        "corpus": out / "corpus.jsonl", "word_emb": out / "words.vec", "llm_fixture": out / "llm",
    }
    save_vocab(synth.corpus.vocab1, paths["vocab1"])
    save_vocab(synth.corpus.vocab2, paths["vocab2"])
    dump_corpus(synth.corpus, paths["corpus"])
    with open(paths["word_emb"], "w", encoding="utf-8") as fh:
        fh.write(f"{len(synth.table.word_vecs)} {synth.table.dim}\n")
        for tok, vec in synth.table.word_vecs.items():
            fh.write(tok + " " + " ".join(repr(float(v)) for v in vec) + "\n")
    paths["llm_fixture"].mkdir(exist_ok=True)
    k_model = n_model_topics or synth.n_topics
    assignments = [k % synth.n_topics for k in range(k_model)]
    for r in range(1, rounds + 1):
        (paths["llm_fixture"] / f"default.r{r}.txt").write_text(
            planted_reply(assignments, synth.topic_words, r), encoding="utf-8")
    return {k: str(v) for k, v in paths.items()}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="python -m xtm.synthetic",
                                 description="write a planted-topic bilingual data set")
    ap.add_argument("outdir")
    ap.add_argument("--topics", type=int, default=4)
    ap.add_argument("--vocab-size", type=int, default=200)
    ap.add_argument("--docs", type=int, default=400, help="documents per language")
    ap.add_argument("--pairs", type=int, default=100)
    ap.add_argument("--rounds", type=int, default=5, help="LLM fixture rounds to write")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    synth = make_synthetic(n_topics=args.topics, vocab_size=args.vocab_size, docs_per_lang=args.docs,
                           n_pairs=args.pairs, seed=args.seed)
    print(json.dumps(write_synthetic(synth, args.outdir, rounds=args.rounds), indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
