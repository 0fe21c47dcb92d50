"""The joint model: encoder, span typing and pair scoring wired together."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import torch
from torch import nn

from .corpus import Sentence, SpanRef, Vocab, adjacency, build_vocab, build_word_vocab, label_matrix
from .encoder import (
    PRETRAINED,
    STATIC,
    EncoderConfig,
    PretrainedEmbedder,
    StaticRecurrentEmbedder,
    SynFueEncoder,
    SynFueState,
    config_from_dict,
)
from .pairing import PairDecision, PairScorer, decode
from .terms import SpanCandidate, SpanRepresenter, TermSet, classify_terms, enumerate_spans


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    max_span_width: int = 8
    width_emb_dim: int = 25
    span_dim: int = 768
    dropout: float = 0.1
    pair_dim: int = 150
    eta1: float = 0.4
    eta2: float = 1.0
    delta: float = 0.6
    use_biaffine: bool = True
    use_triaffine: bool = True
    use_syntactic: bool = True
    use_cross_attention: bool = True

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = config_from_dict(EncoderConfig, self.encoder)
        if self.max_span_width < 1:
            raise ValueError("max_span_width must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if not (self.use_biaffine or self.use_triaffine or self.use_syntactic):
            raise ValueError("at least one pair score component must be enabled")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return config_from_dict(cls, dict(data))


@dataclass
class Vocabs:
    pos: Vocab
    dep: Vocab
    word: Vocab

    @classmethod
    def build(cls, corpus: Sequence[Sentence], lowercase: bool = True) -> "Vocabs":
        pos, dep = build_vocab(corpus)
        return cls(pos, dep, build_word_vocab(corpus, lowercase))

    def to_state(self) -> dict:
        return {"pos": self.pos.to_state(), "dep": self.dep.to_state(), "word": self.word.to_state()}

    @classmethod
    def from_state(cls, state: dict) -> "Vocabs":
        return cls(*(Vocab.from_state(state[k]) for k in ("pos", "dep", "word")))


@dataclass
class SentenceInputs:
    tokens: tuple[str, ...]
    word_ids: torch.Tensor
    pos_ids: torch.Tensor
    label_ids: torch.Tensor
    adj: torch.Tensor

    def __len__(self):
        return len(self.tokens)


@dataclass
class Prediction:
    id: str
    terms: TermSet
    decisions: list[PairDecision]

    @property
    def pairs(self) -> list[PairDecision]:
        return [d for d in self.decisions if d.accepted]


class SynFueModel(nn.Module):
    def __init__(self, config: ModelConfig, vocabs: Vocabs, embedder: Optional[nn.Module] = None):
        super().__init__()
        enc = config.encoder
        if embedder is None:
            if enc.embedding_mode == PRETRAINED:
                embedder = PretrainedEmbedder(enc.lm_name)
            else:
                embedder = StaticRecurrentEmbedder(len(vocabs.word), enc.word_emb_dim, enc.lm_dim)
        if enc.embedding_mode == PRETRAINED:
            enc.lm_dim = embedder.out_dim
        self.config = config
        self.vocabs = vocabs
        self.encoder = SynFueEncoder(enc, len(vocabs.pos), len(vocabs.dep), embedder)
        token_dim = enc.lm_dim + self.encoder.out_dim
        self.spans = SpanRepresenter(
            token_dim, enc.lm_dim, config.max_span_width, config.width_emb_dim, config.span_dim, config.dropout
        )
        self.pairs = PairScorer(
            config.span_dim,
            enc.hidden_dim,
            config.pair_dim,
            config.eta1,
            config.eta2,
            config.use_biaffine,
            config.use_triaffine,
            config.use_syntactic and enc.use_lagcn,
            config.use_cross_attention,
        )

    @property
    def device(self):
        return next(self.parameters()).device

    def inputs(self, sentence: Sentence) -> SentenceInputs:
        v = self.vocabs
        dev = self.device
        norm = str.lower if self.config.encoder.lowercase else str
        return SentenceInputs(
            tokens=sentence.tokens,
            word_ids=torch.tensor(v.word.encode(norm(t) for t in sentence.tokens), device=dev),
            pos_ids=torch.tensor(v.pos.encode(sentence.pos_tags), device=dev),
            label_ids=torch.as_tensor(label_matrix(sentence, v.dep), device=dev),
            adj=torch.as_tensor(adjacency(sentence), device=dev),
        )

    def encode(self, inputs: SentenceInputs | Sentence) -> SynFueState:
        if isinstance(inputs, Sentence):
            inputs = self.inputs(inputs)
        return self.encoder(inputs)

    def span_scores(self, state: SynFueState, spans: Sequence[tuple[int, int]]):
        return self.spans(state.tokens, state.sentence, spans)

    def pair_scores(self, state: SynFueState, aspect_reprs, opinion_reprs, aspect_spans, opinion_spans) -> dict:
        return self.pairs(aspect_reprs, opinion_reprs, aspect_spans, opinion_spans, state.r_syn)

    @torch.no_grad()
    def predict(self, sentence: Sentence) -> Prediction:
        """Type every span up to the width limit, then score all predicted
        aspect x opinion pairs."""
        was_training = self.training
        self.eval()
        try:
            state = self.encode(sentence)
            spans = enumerate_spans(len(sentence), self.config.max_span_width)
            reprs, logits = self.span_scores(state, spans)
            cands = [SpanCandidate(s, e, reprs[i], logits[i]) for i, (s, e) in enumerate(spans)]
            terms = classify_terms(cands)
            decisions = []
            if terms.aspects and terms.opinions:
                a_spans = [c.span for c in terms.aspects]
                o_spans = [c.span for c in terms.opinions]
                scores = self.pair_scores(
                    state,
                    torch.stack([c.repr for c in terms.aspects]),
                    torch.stack([c.repr for c in terms.opinions]),
                    a_spans,
                    o_spans,
                )
                decisions = decode(scores, a_spans, o_spans, self.config.delta)
            return Prediction(sentence.id, terms, decisions)
        finally:
            self.train(was_training)

    def set_pair_weights(self, eta1: float | None = None, eta2: float | None = None, delta: float | None = None):
        if eta1 is not None:
            self.config.eta1 = self.pairs.eta1 = eta1
        if eta2 is not None:
            self.config.eta2 = self.pairs.eta2 = eta2
        if delta is not None:
            self.config.delta = delta


def build_model(config: ModelConfig, corpus: Sequence[Sentence], embedder=None) -> SynFueModel:
    vocabs = Vocabs.build(corpus, config.encoder.lowercase)
    return SynFueModel(config, vocabs, embedder)


def predicted_pairs(pred: Prediction) -> list[tuple[SpanRef, SpanRef, float]]:
    return sorted((d.aspect, d.opinion, d.score.y) for d in pred.pairs)


__all__ = ["ModelConfig", "Vocabs", "SynFueModel", "Prediction", "build_model", "STATIC", "PRETRAINED"]
