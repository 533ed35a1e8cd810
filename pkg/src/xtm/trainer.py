"""Phase-2 enhancement: periodic LLM refinement plus the composite objective

    J = L_phase1 + lambda_mmd * L_MMD + lambda_qa * L_doc

where ``L_doc`` is the batch KL alignment divided by the batch size.
Refinement runs once before the first gradient step and then at every epoch
``e`` with ``e % refine_every == 0``.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import torch

from . import backbone
from .backbone import DTYPE, Batch, BilingualVAE, BowData, Phase1Loss, TrainConfig, tm_loss
from .corpus_io import Corpus, Vocabulary
from .doc_align import AlignmentTargets, build_targets, doc_align_loss, document_vectors
from .embeddings import EmbeddingTable, EncoderProvider
from .errors import ConfigError, NonFiniteLoss, NoSuccessfulRounds, NoTopicsEmbeddable, XtmError
from .metrics import MetricsReport, RefStats, evaluate_topics
from .mmd import KernelConfig, TopicTarget, mmd_loss, prepare_targets
from .refiner import (
    DEFAULT_LANGUAGES,
    WORDS_PER_LANGUAGE,
    CandidatePool,
    Languages,
    LlmProvider,
    RefinedTopic,
    self_consistent_refine,
)

log = logging.getLogger(__name__)


@dataclass
class LossRecord:
    epoch: int
    l_phase1: float
    l_mmd: float
    l_doc: float
    j: float


@dataclass
class LossTerms:
    l_phase1: torch.Tensor
    l_mmd: torch.Tensor
    l_doc: torch.Tensor
    j: torch.Tensor

    def record(self, epoch: int) -> LossRecord:
        return LossRecord(epoch, self.l_phase1.item(), self.l_mmd.item(), self.l_doc.item(), self.j.item())


@dataclass
class EnhanceContext:
    """Everything the composite loss needs besides the model and the batch."""

    corpus: Corpus
    table: EmbeddingTable
    enc_provider: EncoderProvider
    kernel: KernelConfig
    phase1_loss: Phase1Loss = tm_loss
    languages: Languages = DEFAULT_LANGUAGES
    workers: int = 1
    doc_vecs: dict | None = None

    @property
    def vocab1(self) -> Vocabulary:
        return self.corpus.vocab1

    @property
    def vocab2(self) -> Vocabulary:
        return self.corpus.vocab2


@dataclass
class EnhanceState:
    model: BilingualVAE
    config: TrainConfig
    refined: dict[int, RefinedTopic] = field(default_factory=dict)
    mmd_targets: dict[int, TopicTarget] = field(default_factory=dict)
    targets: AlignmentTargets | None = None
    epoch: int = 0
    loss_log: list[LossRecord] = field(default_factory=list)
    step_log: list[LossRecord] = field(default_factory=list)
    refinement_epochs: list[int] = field(default_factory=list)


def candidate_pools(model: BilingualVAE, vocab1: Vocabulary, vocab2: Vocabulary) -> list[CandidatePool]:
    return [CandidatePool(k,
                          tuple(backbone.top_words(model, vocab1, "l1", k, WORDS_PER_LANGUAGE)),
                          tuple(backbone.top_words(model, vocab2, "l2", k, WORDS_PER_LANGUAGE)))
            for k in range(model.n_topics)]


def refinement_epochs(epochs: int, refine_every: int) -> list[int]:
    return sorted({0} | {e for e in range(epochs) if e % refine_every == 0})


def refine(state: EnhanceState, llm: LlmProvider, ctx: EnhanceContext) -> bool:
    """Query the LLM, vote, and rebuild MMD targets and alignment targets.

    Returns False (keeping the previous refinement) when no round parsed.
    """
    cfg = state.config
    pools = candidate_pools(state.model, ctx.vocab1, ctx.vocab2)
    try:
        result = self_consistent_refine(llm, pools, cfg.rounds, cfg.top_m,
                                        workers=ctx.workers, languages=ctx.languages)
    except NoSuccessfulRounds as err:
        log.warning("epoch %d: refinement failed (%s); keeping previous refined topics", state.epoch, err)
        return False
    state.refined = result.topics
    missing = [k for k in range(state.model.n_topics) if k not in result.topics]
    if missing:
        log.warning("no refinement for topics %s", missing)
    state.mmd_targets = prepare_targets(state.model, state.refined, ctx.kernel, cfg.top_n,
                                        ctx.vocab1, ctx.vocab2, ctx.table)
    if ctx.doc_vecs is None:
        ctx.doc_vecs = document_vectors(ctx.corpus, ctx.enc_provider, ctx.table)
    try:
        state.targets = build_targets(ctx.corpus, state.refined, ctx.enc_provider, ctx.table,
                                      cfg.tau, state.model.n_topics, ctx.doc_vecs)
    except NoTopicsEmbeddable as err:
        log.warning("document alignment disabled: %s", err)
        state.targets = None
    return True


def doc_loss(batch: Batch, model: BilingualVAE, targets: AlignmentTargets | None) -> torch.Tensor:
    """Per-document mean of KL(theta || theta_hat) over the batch, with theta = softmax(mu)."""
    total = torch.zeros((), dtype=DTYPE)
    if targets is None:
        return total
    for lang, x, rows, _ in batch.parts():
        theta = model.theta_mean(x, lang)
        target = targets.for_lang(lang)[rows.numpy()]
        total = total + doc_align_loss(theta, target, targets.valid)
    return total / batch.size


def composite_loss(batch: Batch, state: EnhanceState, ctx: EnhanceContext) -> LossTerms:
    cfg, model = state.config, state.model
    l1 = ctx.phase1_loss(batch, model)
    if state.mmd_targets:
        lm = mmd_loss(model, state.mmd_targets, cfg.top_n, ctx.vocab1, ctx.vocab2, ctx.table)
    else:
        lm = torch.zeros((), dtype=DTYPE)
    ld = doc_loss(batch, model, state.targets)
    for name, term in (("L_phase1", l1), ("L_MMD", lm), ("L_doc", ld)):
        if not torch.isfinite(term):
            raise NonFiniteLoss(name, state.epoch)
    j = l1 + cfg.lambda_mmd * lm + cfg.lambda_qa * ld
    return LossTerms(l1, lm, ld, j)


def enhance(model: BilingualVAE, corpus: Corpus, llm: LlmProvider, enc_provider: EncoderProvider,
            table: EmbeddingTable, config: TrainConfig, *, phase1_loss: Phase1Loss = tm_loss,
            languages: Languages = DEFAULT_LANGUAGES, workers: int = 1,
            on_step: Callable | None = None) -> EnhanceState:
    """Run ``config.epochs`` Phase-2 epochs on a copy of ``model``.

    ``on_step(state, terms)`` is called after every optimizer step.
    """
    config.validate()
    if config.n_topics != model.n_topics or config.hidden_dim != model.config.hidden_dim:
        raise ConfigError("config topic count / hidden size must match the model")
    model = copy.deepcopy(model)
    model.config = config
    ctx = EnhanceContext(corpus, table, enc_provider, KernelConfig.parse(config.kernel),
                         phase1_loss, languages, workers)
    state = EnhanceState(model, config)
    schedule = set(refinement_epochs(config.epochs, config.refine_every))

    state.epoch = 0
    refine(state, llm, ctx)
    state.refinement_epochs.append(0)
    if config.epochs == 0:
        return state

    data = BowData(corpus)
    gen = torch.Generator().manual_seed(config.seed + 2)
    opt = backbone.make_optimizer(model, config.learning_rate)
    for epoch in range(config.epochs):
        state.epoch = epoch
        if epoch > 0 and epoch in schedule:
            refine(state, llm, ctx)
            state.refinement_epochs.append(epoch)
        records = []
        for batch in data.batches(config.batch_size, config.n_topics, gen):
            opt.zero_grad()
            terms = composite_loss(batch, state, ctx)
            terms.j.backward()
            opt.step()
            rec = terms.record(epoch)
            records.append(rec)
            state.step_log.append(rec)
            if on_step is not None:
                on_step(state, terms)
        state.loss_log.append(LossRecord(
            epoch, *(float(np.mean([getattr(r, f) for r in records]))
                     for f in ("l_phase1", "l_mmd", "l_doc", "j"))))
        last = state.loss_log[-1]
        log.info("phase2 epoch %d: L1 %.4f MMD %.6f doc %.4f J %.4f",
                 epoch, last.l_phase1, last.l_mmd, last.l_doc, last.j)
    state.epoch = config.epochs
    return state


def write_loss_log(state: EnhanceState, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "l_phase1", "l_mmd", "l_doc", "j"])
        for r in state.loss_log:
            writer.writerow([r.epoch, repr(r.l_phase1), repr(r.l_mmd), repr(r.l_doc), repr(r.j)])


def evaluate_model(model: BilingualVAE, vocab1: Vocabulary, vocab2: Vocabulary, stats: RefStats,
                   top_c: int = 15) -> MetricsReport:
    return evaluate_topics(backbone.topic_lists(model, vocab1, vocab2, max(top_c, 15)), stats, top_c)


@dataclass
class SweepRow:
    r: int
    f: int
    cnpmi: float
    tu: float
    tq: float
    error: str = ""


def sweep(model: BilingualVAE, corpus: Corpus, llm: LlmProvider, enc_provider: EncoderProvider,
          table: EmbeddingTable, config: TrainConfig, rounds_grid: Sequence[int],
          refine_grid: Sequence[int], stats: RefStats, **enhance_kw) -> list[SweepRow]:
    """Enhance the same Phase-1 model once per unique ``(R, f)`` cell and evaluate it.

    A failing cell yields a row of NaNs with the error text; the sweep goes on.
    """
    cells = list(dict.fromkeys((int(r), int(f)) for r in rounds_grid for f in refine_grid))
    if not cells:
        raise ConfigError("empty sweep grid")
    rows = []
    for r, f in cells:
        try:
            cell_cfg = replace(config, rounds=r, refine_every=f)
            state = enhance(model, corpus, llm, enc_provider, table, cell_cfg, **enhance_kw)
            rep = evaluate_model(state.model, corpus.vocab1, corpus.vocab2, stats)
            rows.append(SweepRow(r, f, rep.cnpmi, rep.tu, rep.tq))
        except XtmError as err:
            log.error("sweep cell R=%d f=%d failed: %s", r, f, err)
            rows.append(SweepRow(r, f, math.nan, math.nan, math.nan, f"{type(err).__name__}: {err}"))
    return rows


def write_sweep(rows: Sequence[SweepRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["r", "f", "cnpmi", "tu", "tq"])
        for row in rows:
            writer.writerow([row.r, row.f, repr(row.cnpmi), repr(row.tu), repr(row.tq)])
