"""Exact-match P/R/F1 for pairs and terms, and the label/POS correlation view
of the encoder's connection strengths."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, Mapping, Optional, Sequence

import numpy as np
import torch

from .corpus import ROOT, SELF_LOOP, GoldPair, Sentence, SpanRef, overlapping_flags

if TYPE_CHECKING:
    from .model import Prediction, SynFueModel


@dataclass
class Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def add(self, gold: set, pred: set) -> None:
        hit = len(gold & pred)
        self.tp += hit
        self.fp += len(pred) - hit
        self.fn += len(gold) - hit

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    def as_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "p": self.precision, "r": self.recall, "f1": self.f1}


@dataclass
class EvalReport:
    pair: Counts = field(default_factory=Counts)
    aspect: Counts = field(default_factory=Counts)
    opinion: Counts = field(default_factory=Counts)
    # diagnostic split, not a standard benchmark metric
    overlap_pair: Counts = field(default_factory=Counts)
    nonoverlap_pair: Counts = field(default_factory=Counts)

    @property
    def pair_p(self) -> float:
        return self.pair.precision

    @property
    def pair_r(self) -> float:
        return self.pair.recall

    @property
    def pair_f1(self) -> float:
        return self.pair.f1

    @property
    def aspect_f1(self) -> float:
        return self.aspect.f1

    @property
    def opinion_f1(self) -> float:
        return self.opinion.f1

    @property
    def overlap_pair_f1(self) -> float:
        return self.overlap_pair.f1

    @property
    def nonoverlap_pair_f1(self) -> float:
        return self.nonoverlap_pair.f1

    def as_dict(self) -> dict:
        return {
            "pair": self.pair.as_dict(),
            "aspect": self.aspect.as_dict(),
            "opinion": self.opinion.as_dict(),
            "overlap_pair": self.overlap_pair.as_dict(),
            "nonoverlap_pair": self.nonoverlap_pair.as_dict(),
            "note": "overlap_pair/nonoverlap_pair are an added diagnostic split of the pair metric",
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)


def _split_overlap(pairs: Sequence[GoldPair]) -> tuple[set, set]:
    flags = overlapping_flags(pairs)
    return {p for p, f in zip(pairs, flags) if f}, {p for p, f in zip(pairs, flags) if not f}


def score_pairs(
    gold: Mapping[str, Iterable[GoldPair]],
    pred: Mapping[str, Iterable[GoldPair]],
    pred_terms: Optional[Mapping[str, tuple[Iterable[SpanRef], Iterable[SpanRef]]]] = None,
) -> EvalReport:
    """Micro-averaged exact-match scores.

    A predicted pair is correct iff both its aspect and opinion intervals
    equal those of a gold pair. Term scores use deduplicated term sets, taken
    from ``pred_terms`` when given and from the predicted pairs otherwise.
    The overlap split applies the gold overlap rule to each side separately.
    """
    if set(gold) != set(pred):
        missing = sorted(set(gold) ^ set(pred))
        raise KeyError(f"sentence ids differ between gold and predictions: {missing[:5]}")
    report = EvalReport()
    for sid in sorted(gold):
        g = list(dict.fromkeys(gold[sid]))
        p = list(dict.fromkeys(pred[sid]))
        report.pair.add(set(g), set(p))
        if pred_terms is not None:
            pa, po = (set(x) for x in pred_terms[sid])
        else:
            pa, po = {x.aspect for x in p}, {x.opinion for x in p}
        report.aspect.add({x.aspect for x in g}, pa)
        report.opinion.add({x.opinion for x in g}, po)
        g_ovl, g_non = _split_overlap(g)
        p_ovl, p_non = _split_overlap(p)
        report.overlap_pair.add(g_ovl, p_ovl)
        report.nonoverlap_pair.add(g_non, p_non)
    return report


def predictions_to_maps(preds: Iterable["Prediction"]):
    pairs, terms = {}, {}
    for pr in preds:
        pairs[pr.id] = [GoldPair(d.aspect, d.opinion) for d in pr.pairs]
        terms[pr.id] = ([c.span for c in pr.terms.aspects], [c.span for c in pr.terms.opinions])
    return pairs, terms


def evaluate_model(model: "SynFueModel", corpus: Sequence[Sentence]) -> EvalReport:
    preds = [model.predict(s) for s in corpus]
    pairs, terms = predictions_to_maps(preds)
    gold = {s.id: s.gold_pairs for s in corpus}
    return score_pairs(gold, pairs, terms)


# ---------------------------------------------------------------------------
# correlation inspector


@dataclass
class CorrelationTable:
    labels: list[str]
    pos_tags: list[str]
    matrix: np.ndarray  # rows: labels, cols: POS tags
    mass: np.ndarray  # unnormalized

    def row(self, label: str) -> dict[str, float]:
        i = self.labels.index(label)
        return dict(zip(self.pos_tags, self.matrix[i].tolist()))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["label"] + self.pos_tags)
        for lab, row in zip(self.labels, self.matrix):
            w.writerow([lab] + [f"{x:.6f}" for x in row])
        return buf.getvalue()

    def save_heatmap(self, path, top_labels: int | None = 20) -> None:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        order = np.argsort(-self.mass.sum(1), kind="stable")
        if top_labels:
            order = order[:top_labels]
        m = self.matrix[order]
        fig, ax = plt.subplots(figsize=(max(4, 0.4 * len(self.pos_tags) + 2), max(3, 0.35 * len(order) + 1.5)))
        im = ax.imshow(m, aspect="auto", cmap="Blues", vmin=0, vmax=max(float(m.max()) if m.size else 1.0, 1e-12))
        ax.set_xticks(range(len(self.pos_tags)), self.pos_tags, rotation=90, fontsize=7)
        ax.set_yticks(range(len(order)), [self.labels[i] for i in order], fontsize=7)
        fig.colorbar(im, ax=ax)
        fig.tight_layout()
        fig.savefig(path, dpi=120, metadata={"Software": None})
        plt.close(fig)


def correlation_table(
    model: "SynFueModel", corpus: Sequence[Sentence], layer: int = -1, weighting: str = "relative"
) -> CorrelationTable:
    """Aggregate connection strengths by (dependency label, neighbour POS).

    Every dependency arc contributes in both directions: the weight
    ``alpha[t, j]`` is added to cell ``(label(t, j), pos(j))``. With
    ``weighting="relative"`` each weight is scaled by the number of
    neighbours of ``t`` (self-loop included), so a uniform distribution
    contributes 1 per arc and rows reduce to plain co-occurrence frequencies;
    ``"raw"`` adds ``alpha`` unscaled. Self-loops are not reported and rows
    are normalized to sum to 1.
    """
    if weighting not in ("relative", "raw"):
        raise ValueError("weighting must be 'relative' or 'raw'")
    labels = [l for l in model.vocabs.dep.symbols if l != SELF_LOOP]
    pos_tags = list(model.vocabs.pos.symbols)
    li = {l: i for i, l in enumerate(labels)}
    pi = {p: i for i, p in enumerate(pos_tags)}
    mass = np.zeros((len(labels), len(pos_tags)))
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            for sent in corpus:
                inputs = model.inputs(sent)
                alpha = model.encode(inputs).alpha[layer]
                if alpha is None:
                    raise ValueError("model has no graph layer (use_lagcn is off)")
                alpha = alpha.double().cpu().numpy()
                deg = inputs.adj.sum(1).cpu().numpy()
                for dep, head in enumerate(sent.dep_heads):
                    if head == ROOT:
                        continue
                    lab = model.vocabs.dep.symbols[model.vocabs.dep[sent.dep_labels[dep]]]
                    for t, j in ((dep, head), (head, dep)):
                        w = alpha[t, j] * (deg[t] if weighting == "relative" else 1.0)
                        p = model.vocabs.pos.symbols[model.vocabs.pos[sent.pos_tags[j]]]
                        mass[li[lab], pi[p]] += w
    finally:
        model.train(was_training)
    totals = mass.sum(1, keepdims=True)
    matrix = np.divide(mass, totals, out=np.zeros_like(mass), where=totals > 0)
    return CorrelationTable(labels, pos_tags, matrix, mass)
