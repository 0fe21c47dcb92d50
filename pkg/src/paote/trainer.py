"""Joint training of span typing and pair detection, plus checkpoints."""

from __future__ import annotations

import copy
import json
import logging
import math
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import torch

from .corpus import GoldPair, Sentence, SpanRef
from .encoder import config_from_dict
from .evaluate import EvalReport, evaluate_model
from .model import ModelConfig, SynFueModel, Vocabs
from .terms import TermType, gold_spans, sample_negative_spans

logger = logging.getLogger(__name__)

EPS = 1e-7


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 4e-5
    batch_size: int = 16
    lambda1: float = 1.0
    lambda2: float = 1e-5
    patience: int = 5
    max_epochs: int = 100
    neg_spans: int = 100
    neg_pairs: int = 50
    negative_sampling: bool = True
    seed: int = 13
    target_f1: float = 0.0  # stop as soon as dev pair F1 reaches this (0 disables)

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1:
            raise ValueError("learning_rate must be > 0 and batch_size >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1 and lambda2 must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return config_from_dict(cls, dict(data))


# ---------------------------------------------------------------------------
# losses


def type_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Summed negative log-likelihood of the gold term type per span."""
    labels = torch.as_tensor(labels, dtype=torch.long, device=logits.device)
    if labels.numel() and (labels.min() < 0 or labels.max() >= len(TermType)):
        raise ValueError(f"term type labels must lie in 0..{len(TermType) - 1}")
    logp = torch.log_softmax(logits, dim=-1)
    return -logp.gather(1, labels[:, None]).sum()


def pair_loss(y: torch.Tensor, gold: torch.Tensor) -> torch.Tensor:
    """Summed binary cross-entropy over candidate pairs."""
    gold = torch.as_tensor(gold, dtype=y.dtype, device=y.device)
    if y.numel() and (y.min() < EPS or y.max() > 1 - EPS):
        logger.warning("pair probabilities outside (%g, 1-%g) clamped", EPS, EPS)
    y = y.clamp(EPS, 1 - EPS)
    return -(gold * torch.log(y) + (1 - gold) * torch.log(1 - y)).sum()


def l2_penalty(model: torch.nn.Module) -> torch.Tensor:
    return sum((p * p).sum() for p in model.parameters() if p.requires_grad)


# ---------------------------------------------------------------------------
# examples


@dataclass
class Example:
    """One sentence with its sampled supervision fixed."""

    sentence: Sentence
    spans: list[tuple[int, int]]
    span_labels: list[int]
    aspects: list[SpanRef]
    opinions: list[SpanRef]
    pair_index: list[tuple[int, int]] = field(default_factory=list)
    pair_labels: list[int] = field(default_factory=list)


def prepare_example(sentence: Sentence, cfg: TrainConfig, max_span_width: int, rng: random.Random) -> Example:
    gold = [(s, t) for s, t in gold_spans(sentence) if s.width <= max_span_width]
    if len(gold) != len(gold_spans(sentence)):
        logger.debug("%s: gold spans wider than %d skipped", sentence.id, max_span_width)
    n_neg = cfg.neg_spans if cfg.negative_sampling else None
    negs = sample_negative_spans(sentence, n_neg, rng, max_span_width)
    spans = [tuple(s) for s, _ in gold] + negs
    labels = [int(t) for _, t in gold] + [int(TermType.INVALID)] * len(negs)

    aspects = [a for a in sentence.aspects if a.width <= max_span_width]
    opinions = [o for o in sentence.opinions if o.width <= max_span_width]
    gold_pairs = set(sentence.gold_pairs)
    positives, negatives = [], []
    for n, a in enumerate(aspects):
        for m, o in enumerate(opinions):
            (positives if GoldPair(a, o) in gold_pairs else negatives).append((n, m))
    if len(negatives) > cfg.neg_pairs:
        negatives = sorted(rng.sample(negatives, cfg.neg_pairs))
    index = positives + negatives
    return Example(sentence, spans, labels, aspects, opinions, index, [1] * len(positives) + [0] * len(negatives))


def example_losses(model: SynFueModel, ex: Example, inputs=None, with_pairs: bool = True):
    """``(type_loss, pair_loss)`` for one prepared example."""
    state = model.encode(inputs if inputs is not None else ex.sentence)
    reprs, logits = model.span_scores(state, ex.spans)
    lt = type_loss(logits, ex.span_labels)
    lp = logits.new_zeros(())
    if with_pairs and ex.pair_index:
        row = {s: i for i, s in enumerate(ex.spans)}
        a_rep = reprs[[row[tuple(a)] for a in ex.aspects]]
        o_rep = reprs[[row[tuple(o)] for o in ex.opinions]]
        scores = model.pair_scores(state, a_rep, o_rep, ex.aspects, ex.opinions)
        n_idx = torch.tensor([n for n, _ in ex.pair_index])
        m_idx = torch.tensor([m for _, m in ex.pair_index])
        lp = pair_loss(scores["y"][n_idx, m_idx], ex.pair_labels)
    return lt, lp


def batch_loss(model: SynFueModel, examples: Sequence[Example], cfg: TrainConfig, inputs=None):
    """Sum of per-sentence ``L_type + lambda1 * L_pair`` plus ``lambda2 * ||theta||^2``."""
    total = None
    parts = []
    for i, ex in enumerate(examples):
        lt, lp = example_losses(model, ex, inputs[i] if inputs else None, with_pairs=cfg.lambda1 != 0)
        parts.append((ex.sentence.id, lt.item(), lp.item()))
        term = lt + cfg.lambda1 * lp if cfg.lambda1 != 0 else lt
        total = term if total is None else total + term
    if cfg.lambda2:
        total = total + cfg.lambda2 * l2_penalty(model)
    return total, parts


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    state_dict: dict
    model_config: dict
    train_config: dict
    vocabs: dict
    best_dev_metric: float = 0.0
    epoch: int = 0
    history: list = field(default_factory=list)

    def save(self, path: str | Path) -> None:
        torch.save(asdict(self), str(path))

    @classmethod
    def load(cls, path: str | Path, map_location="cpu") -> "Checkpoint":
        data = torch.load(str(path), map_location=map_location, weights_only=True)
        return cls(**data)

    def build_model(self, embedder=None) -> SynFueModel:
        model = SynFueModel(ModelConfig.from_dict(self.model_config), Vocabs.from_state(self.vocabs), embedder)
        model.load_state_dict(self.state_dict)
        model.eval()
        return model

    @classmethod
    def from_model(cls, model: SynFueModel, train_cfg: TrainConfig, **kw) -> "Checkpoint":
        state = {k: v.detach().cpu().clone() for k, v in model.state_dict().items()}
        return cls(state, model.config.to_dict(), train_cfg.to_dict(), model.vocabs.to_state(), **kw)


# ---------------------------------------------------------------------------
# training loop


def _dump_batch(path: Optional[Path], epoch: int, parts) -> str:
    info = {"epoch": epoch, "batch": [{"id": i, "type_loss": a, "pair_loss": b} for i, a, b in parts]}
    text = json.dumps(info)
    if path is not None:
        path.write_text(text)
    return text


def train(
    model_config: ModelConfig,
    corpus: Sequence[Sentence],
    dev_corpus: Optional[Sequence[Sentence]],
    cfg: TrainConfig,
    embedder=None,
    vocab_corpus: Optional[Sequence[Sentence]] = None,
    out_dir: str | Path | None = None,
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> Checkpoint:
    """Train from scratch and return the checkpoint with the best dev pair F1.

    Vocabularies are built from ``vocab_corpus`` (default: the training
    corpus). Without a dev corpus the final epoch is kept.
    """
    torch.manual_seed(cfg.seed)
    rng = random.Random(cfg.seed)
    model_config = copy.deepcopy(model_config)
    vocabs = Vocabs.build(vocab_corpus or corpus, model_config.encoder.lowercase)
    model = SynFueModel(model_config, vocabs, embedder)
    optimizer = torch.optim.Adam((p for p in model.parameters() if p.requires_grad), lr=cfg.learning_rate)
    out_dir = Path(out_dir) if out_dir else None
    inputs = [model.inputs(s) for s in corpus]

    best_metric, best_state, best_epoch, stale = -1.0, None, 0, 0
    history = []
    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        order = list(range(len(corpus)))
        rng.shuffle(order)
        epoch_loss, n_batches = 0.0, 0
        for b in range(0, len(order), cfg.batch_size):
            idx = order[b : b + cfg.batch_size]
            examples = [prepare_example(corpus[i], cfg, model_config.max_span_width, rng) for i in idx]
            loss, parts = batch_loss(model, examples, cfg, [inputs[i] for i in idx])
            if not math.isfinite(loss.item()):
                dump = _dump_batch(out_dir / "nan_batch.json" if out_dir else None, epoch, parts)
                raise TrainingError(f"non-finite loss at epoch {epoch}: {dump}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_loss += loss.item()
            n_batches += 1
        record = {"epoch": epoch, "loss": epoch_loss / max(n_batches, 1)}
        if dev_corpus:
            report = evaluate_model(model, dev_corpus)
            record["dev_pair_f1"] = report.pair.f1
            metric = report.pair.f1
        else:
            metric = -record["loss"]
        history.append(record)
        logger.info("epoch %d %s", epoch, record)
        if on_epoch:
            on_epoch(record)
        if metric > best_metric:
            best_metric, best_epoch, stale = metric, epoch, 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            stale += 1
        if dev_corpus and cfg.target_f1 and metric >= cfg.target_f1:
            break
        if dev_corpus and stale >= cfg.patience:
            logger.info("early stop after %d epochs without improvement", stale)
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    stored = best_metric if dev_corpus else evaluate_model(model, corpus).pair.f1 if corpus else 0.0
    return Checkpoint.from_model(model, cfg, best_dev_metric=stored, epoch=best_epoch, history=history)


def train_model(*args, **kwargs) -> tuple[SynFueModel, Checkpoint]:
    ckpt = train(*args, **kwargs)
    return ckpt.build_model(kwargs.get("embedder")), ckpt


def evaluate_checkpoint(ckpt: Checkpoint, corpus: Sequence[Sentence], embedder=None) -> EvalReport:
    return evaluate_model(ckpt.build_model(embedder), corpus)
