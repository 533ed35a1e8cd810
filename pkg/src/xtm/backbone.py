"""Bilingual VAE topic model (the Phase-1 backbone).

Each language has its own input layer (vocabularies differ); a shared hidden
layer and two linear heads produce the Gaussian posterior over the K-dim
latent ``z``. Topic proportions are ``softmax(z)`` and each language decodes
with its own free topic-word logit matrix of shape ``(|V_l|, K)``. The
reconstruction is ``softmax(B_l @ theta)``, i.e. ProdLDA-style mixing in
logit space; the per-topic word distributions ``beta_k`` are the column
softmaxes of the same logits.

All tensors are float64.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from typing import Callable, Iterator

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .corpus_io import BowDocument, Corpus, Vocabulary
from .errors import ConfigError, IoError, NonFiniteActivation, NonFiniteLoss

log = logging.getLogger(__name__)

DTYPE = torch.float64
LOG_FLOOR = 1e-12
LOGVAR_CLAMP = 10.0


@dataclass
class TrainConfig:
    n_topics: int = 50
    hidden_dim: int = 200
    epochs: int = 100
    batch_size: int = 200
    learning_rate: float = 2e-3
    seed: int = 0
    top_n: int = 15
    lambda_mmd: float = 20000.0
    lambda_qa: float = 200.0
    tau: float = 0.5
    rounds: int = 5
    refine_every: int = 8
    top_m: int = 15
    kernel: str = "median"

    def validate(self) -> "TrainConfig":
        if self.n_topics < 2:
            raise ConfigError("need at least 2 topics")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.refine_every < 1:
            raise ConfigError("refine_every must be >= 1")
        for name in ("hidden_dim", "batch_size", "top_n", "top_m"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        return self

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


def _uniform(gen: torch.Generator, shape, bound: float) -> torch.Tensor:
    return (torch.rand(shape, generator=gen, dtype=DTYPE) * 2 - 1) * bound


class BilingualVAE(nn.Module):
    """Model state: per-language encoders, shared hidden stack, per-language beta logits."""

    def __init__(self, vocab_size1: int, vocab_size2: int, config: TrainConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.seed = config.seed
        K, H = config.n_topics, config.hidden_dim
        self.in1 = nn.Linear(vocab_size1, H, dtype=DTYPE)
        self.in2 = nn.Linear(vocab_size2, H, dtype=DTYPE)
        self.hidden = nn.Linear(H, H, dtype=DTYPE)
        self.mu_head = nn.Linear(H, K, dtype=DTYPE)
        self.logvar_head = nn.Linear(H, K, dtype=DTYPE)
        self.beta1_logits = nn.Parameter(torch.zeros(vocab_size1, K, dtype=DTYPE))
        self.beta2_logits = nn.Parameter(torch.zeros(vocab_size2, K, dtype=DTYPE))
        self.reset_parameters(config.seed)

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for layer in (self.in1, self.in2, self.hidden, self.mu_head, self.logvar_head):
                layer.weight.copy_(_uniform(gen, layer.weight.shape, 1.0 / math.sqrt(layer.in_features)))
                layer.bias.zero_()
            self.beta1_logits.copy_(torch.randn(self.beta1_logits.shape, generator=gen, dtype=DTYPE) * 0.02)
            self.beta2_logits.copy_(torch.randn(self.beta2_logits.shape, generator=gen, dtype=DTYPE) * 0.02)

    @property
    def n_topics(self) -> int:
        return self.config.n_topics

    def input_layer(self, lang: str) -> nn.Linear:
        return self.in1 if lang == "l1" else self.in2

    def logits(self, lang: str) -> torch.Tensor:
        return self.beta1_logits if lang == "l1" else self.beta2_logits

    def beta(self, lang: str) -> torch.Tensor:
        """Topic-word distributions, ``(|V|, K)`` with columns on the simplex."""
        return torch.softmax(self.logits(lang), dim=0)

    def encode(self, x: torch.Tensor, lang: str) -> tuple[torch.Tensor, torch.Tensor]:
        """Posterior parameters for a ``(n, |V|)`` count matrix."""
        freq = x / x.sum(dim=1, keepdim=True).clamp_min(1.0)
        h = F.softplus(self.input_layer(lang)(freq))
        h = F.softplus(self.hidden(h))
        mu = self.mu_head(h)
        logvar = self.logvar_head(h).clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP)
        if not (torch.isfinite(mu).all() and torch.isfinite(logvar).all()):
            raise NonFiniteActivation(f"encoder output for {lang} is not finite")
        return mu, logvar

    def theta_mean(self, x: torch.Tensor, lang: str) -> torch.Tensor:
        """Deterministic topic proportions ``softmax(mu)`` used for evaluation and alignment."""
        mu, _ = self.encode(x, lang)
        return theta_from_z(mu)


def bow_tensor(doc: BowDocument, vocab_size: int) -> torch.Tensor:
    x = torch.zeros(1, vocab_size, dtype=DTYPE)
    for idx, cnt in doc.bow.items():
        x[0, idx] = cnt
    return x


def encode(doc: BowDocument, model: BilingualVAE) -> tuple[torch.Tensor, torch.Tensor]:
    """Posterior ``(mu, logvar)`` of a single document, routed by its language."""
    size = model.input_layer(doc.lang).in_features
    mu, logvar = model.encode(bow_tensor(doc, size), doc.lang)
    return mu[0], logvar[0]


def reparameterize(mu, logvar, noise):
    return mu + torch.exp(0.5 * logvar) * noise


def theta_from_z(z):
    return torch.softmax(z, dim=-1)


def recon_loss(x, theta, logits) -> torch.Tensor:
    """Per-document ``-x . log softmax(B theta)``; ``x`` is ``(n, V)`` or ``(V,)``."""
    probs = torch.softmax(theta @ logits.T, dim=-1)
    return -(x * torch.log(probs.clamp_min(LOG_FLOOR))).sum(dim=-1)


def kl_gaussian(mu, logvar) -> torch.Tensor:
    """KL(N(mu, diag exp(logvar)) || N(0, I)), summed over the last axis."""
    return 0.5 * (mu.pow(2) + logvar.exp() - 1.0 - logvar).sum(dim=-1)


@dataclass
class Batch:
    """A mini-batch split by language. ``rows*`` index the per-language document lists."""

    x1: torch.Tensor
    x2: torch.Tensor
    rows1: torch.Tensor
    rows2: torch.Tensor
    noise1: torch.Tensor
    noise2: torch.Tensor

    @property
    def size(self) -> int:
        return len(self.rows1) + len(self.rows2)

    def parts(self):
        """Yield ``(lang, x, rows, noise)`` for each language present in the batch."""
        if len(self.rows1):
            yield "l1", self.x1, self.rows1, self.noise1
        if len(self.rows2):
            yield "l2", self.x2, self.rows2, self.noise2


Phase1Loss = Callable[[Batch, BilingualVAE], torch.Tensor]


def tm_loss(batch: Batch, model: BilingualVAE) -> torch.Tensor:
    """Mean over the batch of reconstruction + KL (the bundled Phase-1 loss)."""
    total = torch.zeros((), dtype=DTYPE)
    for lang, x, _, noise in batch.parts():
        mu, logvar = model.encode(x, lang)
        theta = theta_from_z(reparameterize(mu, logvar, noise))
        total = total + recon_loss(x, theta, model.logits(lang)).sum() + kl_gaussian(mu, logvar).sum()
    return total / batch.size


class BowData:
    """Dense per-language count matrices of a corpus, in corpus order."""

    def __init__(self, corpus: Corpus):
        self.corpus = corpus
        self.docs = {lang: corpus.by_lang(lang) for lang in ("l1", "l2")}
        self.x = {lang: torch.from_numpy(corpus.bow_matrix(lang)) for lang in ("l1", "l2")}

    def __len__(self) -> int:
        return len(self.docs["l1"]) + len(self.docs["l2"])

    def batches(self, batch_size: int, n_topics: int, gen: torch.Generator) -> Iterator[Batch]:
        """Shuffle all documents of both languages together and cut into batches.

        Shuffling and per-document reparameterization noise both draw from
        ``gen``, so a seeded generator makes the whole epoch reproducible.
        """
        n1 = len(self.docs["l1"])
        order = torch.randperm(len(self), generator=gen)
        for start in range(0, len(order), batch_size):
            chunk = order[start:start + batch_size]
            rows1 = chunk[chunk < n1].sort().values
            rows2 = (chunk[chunk >= n1] - n1).sort().values
            noise = torch.randn(len(chunk), n_topics, generator=gen, dtype=DTYPE)
            yield Batch(self.x["l1"][rows1], self.x["l2"][rows2], rows1, rows2,
                        noise[:len(rows1)], noise[len(rows1):])

    def full_batch(self, n_topics: int) -> Batch:
        """Every document, with zero noise (so z equals the posterior mean)."""
        n1, n2 = len(self.docs["l1"]), len(self.docs["l2"])
        return Batch(self.x["l1"], self.x["l2"], torch.arange(n1), torch.arange(n2),
                     torch.zeros(n1, n_topics, dtype=DTYPE), torch.zeros(n2, n_topics, dtype=DTYPE))


def make_optimizer(model: nn.Module, lr: float) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.parameters(), lr=lr)


def init_model(corpus: Corpus, config: TrainConfig) -> BilingualVAE:
    return BilingualVAE(len(corpus.vocab1), len(corpus.vocab2), config)


def train_phase1(corpus: Corpus, config: TrainConfig, model: BilingualVAE | None = None,
                 loss_fn: Phase1Loss = tm_loss, on_step=None) -> BilingualVAE:
    """Train the backbone with Adam on mini-batches; returns the model.

    ``on_step(model, epoch, batch_index, loss)`` is called after every optimizer
    step. ``model.phase1_log`` receives the per-epoch mean batch loss.
    """
    config.validate()
    if model is None:
        model = init_model(corpus, config)
    data = BowData(corpus)
    gen = torch.Generator().manual_seed(config.seed + 1)
    opt = make_optimizer(model, config.learning_rate)
    model.phase1_log = []
    for epoch in range(config.epochs):
        losses = []
        for b, batch in enumerate(data.batches(config.batch_size, config.n_topics, gen)):
            opt.zero_grad()
            loss = loss_fn(batch, model)
            if not torch.isfinite(loss):
                raise NonFiniteLoss("L_TM", epoch, b)
            loss.backward()
            opt.step()
            losses.append(loss.item())
            if on_step is not None:
                on_step(model, epoch, b, loss.item())
        model.phase1_log.append(float(np.mean(losses)))
        log.info("phase1 epoch %d loss %.4f", epoch, model.phase1_log[-1])
    return model


def top_word_indices(model: BilingualVAE, lang: str, k: int, n: int) -> list[int]:
    """Indices of the ``n`` most probable words of topic ``k``; ties go to the lower index."""
    with torch.no_grad():
        col = model.beta(lang)[:, k].numpy()
    # lexsort sorts by the last key first: descending prob, then ascending index
    order = np.lexsort((np.arange(len(col)), -col))
    return order[:n].tolist()


def top_words(model: BilingualVAE, vocab: Vocabulary, lang: str, k: int, n: int) -> list[str]:
    return [vocab.tokens[i] for i in top_word_indices(model, lang, k, n)]


def topic_lists(model: BilingualVAE, vocab1: Vocabulary, vocab2: Vocabulary, n: int) -> list[tuple[list[str], list[str]]]:
    """Top-``n`` words of every topic in both languages."""
    return [(top_words(model, vocab1, "l1", k, n), top_words(model, vocab2, "l2", k, n))
            for k in range(model.n_topics)]


def theta_matrix(model: BilingualVAE, x: torch.Tensor, lang: str) -> np.ndarray:
    with torch.no_grad():
        if x.shape[0] == 0:
            return np.zeros((0, model.n_topics))
        return model.theta_mean(x, lang).numpy()


# checkpoints: JSON, linear weights stored as (out, in) row-major nested lists

def _linear_json(layer: nn.Linear) -> list:
    return [layer.weight.detach().tolist(), layer.bias.detach().tolist()]


def _load_linear(layer: nn.Linear, data) -> None:
    weight, bias = data
    layer.weight.copy_(torch.tensor(weight, dtype=DTYPE))
    layer.bias.copy_(torch.tensor(bias, dtype=DTYPE))


def checkpoint_dict(model: BilingualVAE) -> dict:
    return {
        "config": asdict(model.config),
        "encoder1": _linear_json(model.in1),
        "encoder2": _linear_json(model.in2),
        "shared": _linear_json(model.hidden) + _linear_json(model.mu_head) + _linear_json(model.logvar_head),
        "beta1_logits": model.beta1_logits.detach().tolist(),
        "beta2_logits": model.beta2_logits.detach().tolist(),
        "seed": model.seed,
    }


def save_checkpoint(model: BilingualVAE, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(checkpoint_dict(model), fh)


def model_from_dict(data: dict) -> BilingualVAE:
    config = TrainConfig.from_dict(data["config"])
    v1, v2 = len(data["beta1_logits"]), len(data["beta2_logits"])
    model = BilingualVAE(v1, v2, config)
    model.seed = data.get("seed", config.seed)
    shared = data["shared"]
    with torch.no_grad():
        _load_linear(model.in1, data["encoder1"])
        _load_linear(model.in2, data["encoder2"])
        _load_linear(model.hidden, shared[0:2])
        _load_linear(model.mu_head, shared[2:4])
        _load_linear(model.logvar_head, shared[4:6])
        model.beta1_logits.copy_(torch.tensor(data["beta1_logits"], dtype=DTYPE))
        model.beta2_logits.copy_(torch.tensor(data["beta2_logits"], dtype=DTYPE))
    return model


def load_checkpoint(path) -> BilingualVAE:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except (OSError, UnicodeDecodeError) as err:
        raise IoError(f"{path}: {err}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: not a checkpoint ({err})") from err
    try:
        return model_from_dict(data)
    except (KeyError, IndexError, TypeError, ValueError, RuntimeError) as err:
        raise ConfigError(f"{path}: malformed checkpoint ({type(err).__name__}: {err})") from err
