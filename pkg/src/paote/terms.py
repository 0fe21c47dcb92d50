"""Span enumeration, span representations, term typing and negative sampling."""

from __future__ import annotations

import enum
import random
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn

from .corpus import Sentence, SpanRef


class TermType(enum.IntEnum):
    ASPECT = 0
    OPINION = 1
    INVALID = 2


def enumerate_spans(T: int, max_span_width: int) -> list[tuple[int, int]]:
    """All contiguous ``(start, end)`` intervals of width <= max_span_width,
    in lexicographic order."""
    if T < 1 or max_span_width < 1:
        raise ValueError("T and max_span_width must be >= 1")
    return [(s, e) for s in range(T) for e in range(s, min(s + max_span_width, T))]


def span_count(T: int, max_span_width: int) -> int:
    W = min(max_span_width, T)
    return sum(T - w + 1 for w in range(1, W + 1))


def max_pool_spans(h: torch.Tensor, spans: Sequence[tuple[int, int]]) -> torch.Tensor:
    """Element-wise max over ``h[start..end]`` for each span."""
    out = h.new_empty(len(spans), h.shape[-1])
    by_width: dict[int, list[int]] = {}
    for i, (s, e) in enumerate(spans):
        by_width.setdefault(e - s + 1, []).append(i)
    rows = []
    cols = []
    for w, members in by_width.items():
        windows = h.unfold(0, w, 1).amax(dim=-1)  # (T - w + 1, dim)
        starts = torch.tensor([spans[i][0] for i in members], device=h.device)
        rows.append(torch.tensor(members, device=h.device))
        cols.append(windows.index_select(0, starts))
    if rows:
        out = out.index_copy(0, torch.cat(rows), torch.cat(cols))
    return out


class SpanRepresenter(nn.Module):
    """Span vectors ``FFN(Dropout([h_start; h_end; h_S; w_width; maxpool]))``
    and their three-way type logits."""

    def __init__(
        self,
        token_dim: int,
        sentence_dim: int,
        max_span_width: int = 8,
        width_dim: int = 25,
        span_dim: int = 768,
        dropout: float = 0.1,
    ):
        super().__init__()
        self.max_span_width = max_span_width
        self.width_emb = nn.Embedding(max_span_width + 1, width_dim)
        in_dim = 3 * token_dim + sentence_dim + width_dim
        self.dropout = nn.Dropout(dropout)
        self.ffn = nn.Sequential(nn.Linear(in_dim, span_dim), nn.ReLU(), nn.Linear(span_dim, span_dim))
        self.classifier = nn.Linear(span_dim, len(TermType))

    def features(self, h: torch.Tensor, sentence: torch.Tensor, spans: Sequence[tuple[int, int]]) -> torch.Tensor:
        T = h.shape[0]
        for s, e in spans:
            if not 0 <= s <= e < T:
                raise IndexError(f"span ({s}, {e}) out of bounds for {T} tokens")
            if e - s + 1 > self.max_span_width:
                raise IndexError(f"span ({s}, {e}) wider than {self.max_span_width}")
        starts = torch.tensor([s for s, _ in spans], dtype=torch.long, device=h.device)
        ends = torch.tensor([e for _, e in spans], dtype=torch.long, device=h.device)
        widths = self.width_emb(ends - starts + 1)
        pooled = max_pool_spans(h, spans)
        sent = sentence.unsqueeze(0).expand(len(spans), -1)
        return torch.cat([h[starts], h[ends], sent, widths, pooled], dim=-1)

    def forward(self, h, sentence, spans):
        """Returns ``(span_reprs, type_logits)`` for the given spans."""
        reprs = self.ffn(self.dropout(self.features(h, sentence, spans)))
        return reprs, self.classifier(reprs)


@dataclass
class SpanCandidate:
    start: int
    end: int
    repr: torch.Tensor | None = None
    type_logits: torch.Tensor | None = None
    type: TermType = TermType.INVALID

    @property
    def width(self) -> int:
        return self.end - self.start + 1

    @property
    def span(self) -> SpanRef:
        return SpanRef(self.start, self.end)


@dataclass
class TermSet:
    aspects: list[SpanCandidate] = field(default_factory=list)
    opinions: list[SpanCandidate] = field(default_factory=list)


def argmax_first(probs: np.ndarray) -> np.ndarray:
    # ties go to the lowest class index: ASPECT < OPINION < INVALID
    return np.argmax(probs, axis=-1)


def classify_terms(candidates: Iterable[SpanCandidate]) -> TermSet:
    """Type each candidate by its highest softmax class and drop INVALID ones."""
    candidates = list(candidates)
    terms = TermSet()
    if not candidates:
        return terms
    logits = torch.stack([c.type_logits for c in candidates]).detach()
    probs = torch.softmax(logits.double(), dim=-1).cpu().numpy()
    types = argmax_first(probs)
    seen = set()
    for cand, t in zip(candidates, types):
        cand.type = TermType(int(t))
        if cand.type == TermType.INVALID or (cand.start, cand.end, cand.type) in seen:
            continue
        seen.add((cand.start, cand.end, cand.type))
        (terms.aspects if cand.type == TermType.ASPECT else terms.opinions).append(cand)
    return terms


def gold_spans(sentence: Sentence) -> list[tuple[SpanRef, TermType]]:
    """Unique gold term spans with their type. A span annotated as both
    aspect and opinion keeps the aspect label."""
    out: dict[SpanRef, TermType] = {}
    for a in sentence.aspects:
        out.setdefault(a, TermType.ASPECT)
    for o in sentence.opinions:
        out.setdefault(o, TermType.OPINION)
    return list(out.items())


def sample_negative_spans(
    sentence: Sentence,
    n: int | None,
    rng: int | random.Random | None = None,
    max_span_width: int = 8,
) -> list[tuple[int, int]]:
    """Up to ``n`` distinct non-gold spans drawn uniformly without replacement.

    ``n=None`` returns the whole pool (no sampling).
    """
    gold = {tuple(s) for s, _ in gold_spans(sentence)}
    pool = [s for s in enumerate_spans(len(sentence), max_span_width) if s not in gold]
    if n is None:
        return pool
    if not isinstance(rng, random.Random):
        rng = random.Random(rng)
    return rng.sample(pool, min(n, len(pool)))
