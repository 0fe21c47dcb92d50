"""Aspect-opinion pair scoring.

Every candidate pair ``(n, m)`` gets

* a first-order Biaffine score over the two term vectors,
* the sum of second-order Triaffine scores over every other term ``k``,
* a syntactic score from span-pooled encoder relation vectors, refined by
  row/column cross-attention over the candidate grid,

combined as ``y = sigmoid(bi + eta1 * tri_sum + eta2 * syn)`` and accepted
when ``y > delta``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn

from .corpus import SpanRef


def with_bias(x: torch.Tensor) -> torch.Tensor:
    return torch.cat([x, x.new_ones(*x.shape[:-1], 1)], dim=-1)


# ---------------------------------------------------------------------------
# functional scores


def biaffine_logits(aspects: torch.Tensor, opinions: torch.Tensor, W6: torch.Tensor) -> torch.Tensor:
    """``[s_a; 1]^T W6 s_o`` for all pairs: (N, d) x (M, d) -> (N, M)."""
    return with_bias(aspects) @ W6 @ opinions.T


def biaffine_score(s_a: torch.Tensor, s_o: torch.Tensor, W6: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(biaffine_logits(s_a[None], s_o[None], W6)[0, 0])


def triaffine_logits(aspects, opinions, terms, W7) -> torch.Tensor:
    """Trilinear form over (aspect, opinion, third term): -> (N, M, K).

    ``W7`` has shape ``(d + 1, d, d + 1)``; aspect and third term carry the
    bias augmentation.
    """
    return torch.einsum("ni,mj,kl,ijl->nmk", with_bias(aspects), opinions, with_bias(terms), W7)


def triaffine_score(s_a, s_o, s_k, W7) -> torch.Tensor:
    return torch.sigmoid(triaffine_logits(s_a[None], s_o[None], s_k[None], W7)[0, 0, 0])


def third_term_mask(n_aspects: int, n_opinions: int, device=None) -> torch.Tensor:
    """(N, M, N + M) mask over the term list ``aspects + opinions`` that
    excludes the pair's own two endpoints."""
    N, M = n_aspects, n_opinions
    mask = torch.ones(N, M, N + M, dtype=torch.bool, device=device)
    n = torch.arange(N, device=device)
    m = torch.arange(M, device=device)
    mask[n, :, n] = False
    mask[:, m, N + m] = False
    return mask


def triaffine_sums(aspects, opinions, W7) -> torch.Tensor:
    """Sum over third terms ``k`` of sigmoid triaffine scores: -> (N, M).

    The third term ranges over all aspects and opinions except the pair's
    own endpoints; with no such term the sum is 0.
    """
    N, M = aspects.shape[0], opinions.shape[0]
    terms = torch.cat([aspects, opinions], dim=0)
    phi = torch.sigmoid(triaffine_logits(aspects, opinions, terms, W7))
    mask = third_term_mask(N, M, aspects.device)
    return (phi * mask).sum(-1)


def span_pool(r_syn: torch.Tensor, aspects: Sequence[SpanRef], opinions: Sequence[SpanRef]) -> torch.Tensor:
    """Mean of ``r_syn`` over the rectangle aspect rows x opinion columns,
    for every candidate pair: -> (N, M, d). Uses 2-D prefix sums."""
    T = r_syn.shape[0]
    P = r_syn.new_zeros(T + 1, T + 1, r_syn.shape[-1])
    P[1:, 1:] = r_syn.cumsum(0).cumsum(1)
    dev = r_syn.device
    a0 = torch.tensor([a.start for a in aspects], device=dev)
    a1 = torch.tensor([a.end + 1 for a in aspects], device=dev)
    o0 = torch.tensor([o.start for o in opinions], device=dev)
    o1 = torch.tensor([o.end + 1 for o in opinions], device=dev)
    A0, O0 = a0[:, None], o0[None, :]
    A1, O1 = a1[:, None], o1[None, :]
    total = P[A1, O1] - P[A0, O1] - P[A1, O0] + P[A0, O0]
    area = ((A1 - A0) * (O1 - O0)).to(r_syn.dtype)
    return total / area.unsqueeze(-1)


def cross_attention(sp: torch.Tensor):
    """Row and column attention over the candidate grid ``sp`` (N, M, d).

    Returns ``(row_weights (N,M,M), col_weights (N,M,N), context (N,M,d))``
    where context is the row-weighted plus column-weighted sum.
    """
    N, M = sp.shape[:2]
    row_logits = torch.einsum("nmd,nkd->nmk", sp, sp) / math.sqrt(M)
    col_logits = torch.einsum("nmd,kmd->nmk", sp, sp) / math.sqrt(N)
    row = torch.softmax(row_logits, dim=-1)
    col = torch.softmax(col_logits, dim=-1)
    context = torch.einsum("nmk,nkd->nmd", row, sp) + torch.einsum("nmk,kmd->nmd", col, sp)
    return row, col, context


def syntactic_scores(r_syn, aspects, opinions, W8: torch.Tensor, use_cross_attention: bool = True) -> torch.Tensor:
    """Syntactic pair scores (N, M). ``W8`` is a (d,) vector."""
    if not aspects or not opinions:
        return r_syn.new_zeros(len(aspects), len(opinions))
    sp = span_pool(r_syn, aspects, opinions)
    features = cross_attention(sp)[2] if use_cross_attention else sp
    return torch.sigmoid(features @ W8)


def syntactic_score(r_syn, aspect: SpanRef, opinion: SpanRef, all_aspects, all_opinions, W8, use_cross_attention=True):
    """Syntactic score of one pair in the context of the full candidate grid."""
    grid = syntactic_scores(r_syn, list(all_aspects), list(all_opinions), W8, use_cross_attention)
    return grid[list(all_aspects).index(aspect), list(all_opinions).index(opinion)]


def combine(biaffine, triaffine_sum, syntactic, eta1: float, eta2: float, use_biaffine: bool = True):
    """Combined potential ``Q`` and likelihood ``y = sigmoid(Q)``.

    Any component passed as ``None`` is left out of ``Q``.
    """
    parts = []
    if use_biaffine and biaffine is not None:
        parts.append(biaffine)
    if triaffine_sum is not None:
        parts.append(eta1 * triaffine_sum)
    if syntactic is not None:
        parts.append(eta2 * syntactic)
    if not parts:
        raise ValueError("all pair score components are disabled")
    Q = parts[0]
    for p in parts[1:]:
        Q = Q + p
    return Q, torch.sigmoid(Q)


# ---------------------------------------------------------------------------
# module


class PairScorer(nn.Module):
    def __init__(
        self,
        span_dim: int,
        syn_dim: int,
        pair_dim: int = 150,
        eta1: float = 0.4,
        eta2: float = 1.0,
        use_biaffine: bool = True,
        use_triaffine: bool = True,
        use_syntactic: bool = True,
        use_cross_attention: bool = True,
    ):
        super().__init__()
        self.proj = nn.Linear(span_dim, pair_dim)
        self.W6 = nn.Parameter(torch.empty(pair_dim + 1, pair_dim))
        self.W7 = nn.Parameter(torch.empty(pair_dim + 1, pair_dim, pair_dim + 1))
        self.W8 = nn.Parameter(torch.empty(syn_dim))
        self.eta1 = eta1
        self.eta2 = eta2
        self.use_biaffine = use_biaffine
        self.use_triaffine = use_triaffine
        self.use_syntactic = use_syntactic
        self.use_cross_attention = use_cross_attention
        self.reset_parameters()

    def reset_parameters(self):
        from .encoder import reset_uniform_

        reset_uniform_(self.W6, 2)
        reset_uniform_(self.W7, 3)
        reset_uniform_(self.W8, 1)
        nn.init.zeros_(self.proj.bias)

    def forward(self, aspect_reprs, opinion_reprs, aspect_spans, opinion_spans, r_syn) -> dict:
        """Score the full N x M grid.

        Returns a dict with ``biaffine``, ``triaffine_sum``, ``syntactic``
        (each ``None`` when switched off), ``Q`` and ``y``.
        """
        a = self.proj(aspect_reprs)
        o = self.proj(opinion_reprs)
        bi = torch.sigmoid(biaffine_logits(a, o, self.W6)) if self.use_biaffine else None
        tri = triaffine_sums(a, o, self.W7) if self.use_triaffine else None
        syn = None
        if self.use_syntactic:
            syn = syntactic_scores(r_syn, list(aspect_spans), list(opinion_spans), self.W8, self.use_cross_attention)
        Q, y = combine(bi, tri, syn, self.eta1, self.eta2, self.use_biaffine)
        return {"biaffine": bi, "triaffine_sum": tri, "syntactic": syn, "Q": Q, "y": y}


@dataclass(frozen=True)
class PairScore:
    biaffine: float
    triaffine_sum: float
    syntactic: float
    Q: float
    y: float


@dataclass(frozen=True)
class PairDecision:
    aspect: SpanRef
    opinion: SpanRef
    score: PairScore
    accepted: bool


def decode(scores: dict, aspect_spans, opinion_spans, delta: float) -> list[PairDecision]:
    """One decision per grid cell; ``accepted`` iff ``y > delta``."""
    def cell(name, n, m):
        t = scores.get(name)
        return 0.0 if t is None else float(t[n, m])

    out = []
    for n, a in enumerate(aspect_spans):
        for m, o in enumerate(opinion_spans):
            ps = PairScore(
                cell("biaffine", n, m), cell("triaffine_sum", n, m), cell("syntactic", n, m),
                cell("Q", n, m), cell("y", n, m),
            )
            out.append(PairDecision(SpanRef(*a), SpanRef(*o), ps, ps.y > delta))
    return out


def combine_and_decode(scores: dict, aspect_spans, opinion_spans, eta1, eta2, delta, use_biaffine=True):
    """Recombine precomputed components with new weights and decode."""
    Q, y = combine(scores.get("biaffine"), scores.get("triaffine_sum"), scores.get("syntactic"), eta1, eta2, use_biaffine)
    merged = dict(scores, Q=Q, y=y)
    return decode(merged, aspect_spans, opinion_spans, delta)
