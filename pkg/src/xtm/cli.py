"""Command-line entry point.

    xtm train-backbone --corpus c.jsonl --vocab1 v1.txt --vocab2 v2.txt --topics 10 --out m.json
    xtm enhance --model m.json --corpus c.jsonl ... --word-emb w.vec --llm-fixture DIR --out m2.json
    xtm eval --model m2.json --corpus c.jsonl ... --ref-pairs ref.jsonl --out report.json
    xtm export-topics --model m2.json --vocab1 v1.txt --vocab2 v2.txt --out topics.jsonl
    xtm sweep --model m.json ... --grid-rounds 1,3,5 --grid-refine-every 5,8 --out sweep.csv

Every training knob may also come from ``--config file.json`` (keys are the
``TrainConfig`` field names); explicit flags win over the file.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import torch

from . import backbone, metrics, trainer
from .backbone import TrainConfig
from .corpus_io import load_corpus, load_vocab
from .embeddings import EncoderProvider, load_doc_embeddings, load_word_embeddings
from .errors import ConfigError, ProviderError, XtmError
from .mmd import KernelConfig
from .refiner import LLM_ENDPOINT_ENV, FixtureLlm, RemoteLlm

log = logging.getLogger("xtm")

EPOCH_DEFAULTS = {"train-backbone": 100, "enhance": 30, "sweep": 30}

KNOBS = [
    # flag, dest, type
    ("--topics", "n_topics", int),
    ("--hidden", "hidden_dim", int),
    ("--epochs", "epochs", int),
    ("--batch-size", "batch_size", int),
    ("--lr", "learning_rate", float),
    ("--seed", "seed", int),
    ("--top-n", "top_n", int),
    ("--top-m", "top_m", int),
    ("--rounds", "rounds", int),
    ("--refine-every", "refine_every", int),
    ("--lambda-mmd", "lambda_mmd", float),
    ("--lambda-qa", "lambda_qa", float),
    ("--tau", "tau", float),
    ("--kernel", "kernel", str),
]


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    knobs = argparse.ArgumentParser(add_help=False)
    for flag, dest, typ in KNOBS:
        knobs.add_argument(flag, dest=dest, type=typ, default=argparse.SUPPRESS)
    knobs.add_argument("--config", type=Path, help="JSON file of TrainConfig fields (flags win)")
    knobs.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--corpus", type=Path, required=True)
    data.add_argument("--vocab1", type=Path, required=True)
    data.add_argument("--vocab2", type=Path, required=True)

    providers = argparse.ArgumentParser(add_help=False)
    providers.add_argument("--model", type=Path, required=True, help="Phase-1 checkpoint")
    providers.add_argument("--word-emb", type=Path, required=True)
    providers.add_argument("--doc-emb", type=Path)
    providers.add_argument("--enc-mode", choices=["fixture", "mean", "remote"], default="mean")
    providers.add_argument("--enc-fixture", type=Path, help="directory of <sha256>.json encoder replies")
    providers.add_argument("--llm-fixture", type=Path)
    providers.add_argument("--workers", type=int, default=1, help="concurrent LLM rounds")

    parser = argparse.ArgumentParser(prog="xtm", description="cross-lingual topic model training")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-backbone", parents=[knobs, data])
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("enhance", parents=[knobs, data, providers])
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--loss-log", type=Path, help="defaults to <out stem>.losses.csv")
    p.add_argument("--dump-targets", type=Path, help="write final theta-hat rows as JSON-lines")

    p = sub.add_parser("eval", parents=[knobs, data])
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--ref-pairs", type=Path, help="reference corpus with pair_id links (default: --corpus)")
    p.add_argument("--test-corpus", type=Path, help="labelled held-out documents for classification")
    p.add_argument("--top-c", type=int, default=metrics.DEFAULT_TOP_C)
    p.add_argument("--rate", choices=["intra", "cross"], help="also collect LLM ratings")
    p.add_argument("--dataset-blurb", default="a bilingual corpus")
    p.add_argument("--llm-fixture", type=Path)
    p.add_argument("--ratings-out", type=Path)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("export-topics", parents=[knobs])
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--vocab1", type=Path, required=True)
    p.add_argument("--vocab2", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("sweep", parents=[knobs, data, providers])
    p.add_argument("--ref-pairs", type=Path)
    p.add_argument("--grid-rounds", type=_int_list, default=[1, 3, 5, 7, 10, 13])
    p.add_argument("--grid-refine-every", type=_int_list, default=[5, 8, 10, 13])
    p.add_argument("--out", type=Path, required=True)
    return parser


def resolve_config(args, base: dict | None = None) -> TrainConfig:
    """Defaults < checkpoint config (``base``) < ``--config`` file < explicit flags."""
    values = asdict(TrainConfig())
    values["epochs"] = EPOCH_DEFAULTS.get(args.command, values["epochs"])
    if base:
        values.update({k: v for k, v in base.items() if k != "epochs"})
    if args.config:
        try:
            overlay = json.loads(args.config.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError(f"{args.config}: {err}") from err
        values.update(TrainConfig.from_dict({**values, **overlay}).__dict__)
    names = {f.name for f in fields(TrainConfig)}
    values.update({k: v for k, v in vars(args).items() if k in names})
    cfg = TrainConfig.from_dict(values).validate()
    KernelConfig.parse(cfg.kernel)
    return cfg


def llm_provider(path):
    if path is not None:
        return FixtureLlm(path)
    if os.environ.get(LLM_ENDPOINT_ENV):
        return RemoteLlm()
    raise ProviderError("config", "no LLM provider configured")


def _load_data(args):
    v1, v2 = load_vocab(args.vocab1), load_vocab(args.vocab2)
    return load_corpus(args.corpus, v1, v2)


def _phase2_inputs(args):
    model = backbone.load_checkpoint(args.model)
    cfg = resolve_config(args, asdict(model.config))
    if cfg.n_topics != model.n_topics or cfg.hidden_dim != model.config.hidden_dim:
        raise ConfigError("--topics/--hidden must match the checkpoint")
    llm = llm_provider(args.llm_fixture)
    corpus = _load_data(args)
    table = load_word_embeddings(args.word_emb)
    if args.doc_emb:
        load_doc_embeddings(args.doc_emb, table)
    enc_endpoint = str(args.enc_fixture) if args.enc_fixture else None
    encoder = EncoderProvider(args.enc_mode, enc_endpoint)
    return model, cfg, llm, corpus, table, encoder


def cmd_train_backbone(args) -> None:
    cfg = resolve_config(args)
    corpus = _load_data(args)
    model = backbone.train_phase1(corpus, cfg)
    backbone.save_checkpoint(model, args.out)
    log.info("wrote %s", args.out)


def cmd_enhance(args) -> None:
    model, cfg, llm, corpus, table, encoder = _phase2_inputs(args)
    state = trainer.enhance(model, corpus, llm, encoder, table, cfg, workers=args.workers)
    backbone.save_checkpoint(state.model, args.out)
    loss_log = args.loss_log or args.out.with_suffix(".losses.csv")
    trainer.write_loss_log(state, loss_log)
    if args.dump_targets and state.targets is not None:
        with open(args.dump_targets, "w", encoding="utf-8") as fh:
            for doc_id, row in zip(state.targets.doc_ids, state.targets.theta_hat):
                fh.write(json.dumps({"id": doc_id, "theta_hat": row.tolist()}) + "\n")
    log.info("wrote %s and %s", args.out, loss_log)


def _thetas(model, corpus):
    out = {}
    for lang in ("l1", "l2"):
        docs = corpus.by_lang(lang)
        x = torch.from_numpy(corpus.bow_matrix(lang))
        labelled = [i for i, d in enumerate(docs) if d.label is not None]
        theta = backbone.theta_matrix(model, x, lang)[labelled]
        out[lang] = (theta, [docs[i].label for i in labelled])
    return out


def cmd_eval(args) -> None:
    model = backbone.load_checkpoint(args.model)
    corpus = _load_data(args)
    ref = load_corpus(args.ref_pairs, corpus.vocab1, corpus.vocab2) if args.ref_pairs else corpus
    stats = metrics.RefStats.from_corpus(ref)
    report = trainer.evaluate_model(model, corpus.vocab1, corpus.vocab2, stats, args.top_c)
    if args.test_corpus:
        test = load_corpus(args.test_corpus, corpus.vocab1, corpus.vocab2)
        report.classification = metrics.classification_report(_thetas(model, corpus), _thetas(model, test))
    args.out.write_text(json.dumps(report.to_json(), indent=2) + "\n", encoding="utf-8")
    if args.rate:
        llm = llm_provider(args.llm_fixture)
        topics = backbone.topic_lists(model, corpus.vocab1, corpus.vocab2, 10)
        ratings = metrics.llm_rate_topics(topics, llm, args.rate, args.dataset_blurb)
        metrics.write_ratings_csv(ratings, args.ratings_out or args.out.with_suffix(".ratings.csv"))
    print(json.dumps({"cnpmi": report.cnpmi, "tu": report.tu, "tq": report.tq}))


def cmd_export_topics(args) -> None:
    model = backbone.load_checkpoint(args.model)
    cfg = resolve_config(args, asdict(model.config))
    v1, v2 = load_vocab(args.vocab1), load_vocab(args.vocab2)
    metrics.write_topics(backbone.topic_lists(model, v1, v2, cfg.top_n), args.out)


def cmd_sweep(args) -> None:
    model, cfg, llm, corpus, table, encoder = _phase2_inputs(args)
    ref = load_corpus(args.ref_pairs, corpus.vocab1, corpus.vocab2) if args.ref_pairs else corpus
    stats = metrics.RefStats.from_corpus(ref)
    rows = trainer.sweep(model, corpus, llm, encoder, table, cfg, args.grid_rounds,
                         args.grid_refine_every, stats, workers=args.workers)
    trainer.write_sweep(rows, args.out)


COMMANDS = {
    "train-backbone": cmd_train_backbone,
    "enhance": cmd_enhance,
    "eval": cmd_eval,
    "export-topics": cmd_export_topics,
    "sweep": cmd_sweep,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except XtmError as err:
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
