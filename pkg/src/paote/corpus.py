"""Sentence data model, corpus I/O, benchmark conversion and dataset statistics.

Canonical corpora are JSON-lines files, one sentence per line::

    {"id": "s1", "tokens": [...], "pos": [...], "dep_head": [1, -1, 1],
     "dep_label": [...], "pairs": [{"aspect": [0, 0], "opinion": [2, 2]}]}

Spans are inclusive token intervals and ``dep_head`` is 0-based with ``-1``
marking the root token.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

logger = logging.getLogger(__name__)

ROOT = -1
UNK = "<unk>"
SELF_LOOP = "<self>"

CANONICAL = "canonical-jsonl"
BENCHMARK = "benchmark-source"
FORMATS = (CANONICAL, BENCHMARK)


class CorpusError(ValueError):
    """Raised for malformed or invalid corpus records."""


class SpanRef(NamedTuple):
    start: int
    end: int

    @property
    def width(self) -> int:
        return self.end - self.start + 1


@dataclass(frozen=True, order=True)
class GoldPair:
    aspect: SpanRef
    opinion: SpanRef

    @classmethod
    def of(cls, aspect: Sequence[int], opinion: Sequence[int]) -> "GoldPair":
        return cls(SpanRef(int(aspect[0]), int(aspect[1])), SpanRef(int(opinion[0]), int(opinion[1])))


@dataclass(frozen=True)
class Sentence:
    id: str
    tokens: tuple[str, ...]
    pos_tags: tuple[str, ...]
    dep_heads: tuple[int, ...]
    dep_labels: tuple[str, ...]
    gold_pairs: tuple[GoldPair, ...] = ()

    def __post_init__(self):
        for name in ("tokens", "pos_tags", "dep_heads", "dep_labels", "gold_pairs"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def aspects(self) -> list[SpanRef]:
        return _unique(p.aspect for p in self.gold_pairs)

    @property
    def opinions(self) -> list[SpanRef]:
        return _unique(p.opinion for p in self.gold_pairs)

    def validate(self) -> "Sentence":
        validate_sentence(self)
        return self


def _unique(spans: Iterable[SpanRef]) -> list[SpanRef]:
    seen = {}
    for s in spans:
        seen.setdefault(s, None)
    return list(seen)


@dataclass(frozen=True)
class DatasetStats:
    n_sentences: int = 0
    n_aspects: int = 0
    n_opinions: int = 0
    n_pairs: int = 0
    n_overlapping_pairs: int = 0

    @property
    def overlap_ratio(self) -> float:
        return self.n_overlapping_pairs / self.n_pairs if self.n_pairs else 0.0

    def as_dict(self) -> dict:
        return {
            "n_sentences": self.n_sentences,
            "n_aspects": self.n_aspects,
            "n_opinions": self.n_opinions,
            "n_pairs": self.n_pairs,
            "n_overlapping_pairs": self.n_overlapping_pairs,
            "overlap_ratio": self.overlap_ratio,
        }

    def __str__(self) -> str:
        return (
            f"sentences={self.n_sentences:,} aspects={self.n_aspects:,} "
            f"opinions={self.n_opinions:,} pairs={self.n_pairs:,} "
            f"overlapping={self.n_overlapping_pairs:,} ({100 * self.overlap_ratio:.2f}%)"
        )


# ---------------------------------------------------------------------------
# validation


def validate_sentence(sent: Sentence) -> None:
    T = len(sent.tokens)
    if T < 1:
        raise CorpusError(f"{sent.id}: empty token list")
    for name in ("pos_tags", "dep_heads", "dep_labels"):
        n = len(getattr(sent, name))
        if n != T:
            raise CorpusError(f"{sent.id}: length mismatch, {name} has {n} entries for {T} tokens")
    roots = [i for i, h in enumerate(sent.dep_heads) if h == ROOT]
    if len(roots) != 1:
        raise CorpusError(f"{sent.id}: expected exactly one root token, found {len(roots)}")
    for i, h in enumerate(sent.dep_heads):
        if h != ROOT and not 0 <= h < T:
            raise CorpusError(f"{sent.id}: head of token {i} out of range: {h}")
        if h == i:
            raise CorpusError(f"{sent.id}: token {i} is its own head")
    _check_acyclic(sent)
    seen = set()
    for pair in sent.gold_pairs:
        for role, span in (("aspect", pair.aspect), ("opinion", pair.opinion)):
            if not 0 <= span.start <= span.end < T:
                raise CorpusError(f"{sent.id}: {role} span {list(span)} out of bounds for {T} tokens")
        if pair in seen:
            raise CorpusError(f"{sent.id}: duplicate pair {pair}")
        seen.add(pair)


def _check_acyclic(sent: Sentence) -> None:
    # every token must reach the root by following heads
    T = len(sent.dep_heads)
    state = [0] * T  # 0 unvisited, 1 on current path, 2 reaches root
    for start in range(T):
        path = []
        node = start
        while node != ROOT and state[node] == 0:
            state[node] = 1
            path.append(node)
            node = sent.dep_heads[node]
        if node != ROOT and state[node] == 1:
            raise CorpusError(f"{sent.id}: cyclic dependency tree through token {node}")
        for n in path:
            state[n] = 2


# ---------------------------------------------------------------------------
# canonical JSONL


def sentence_to_record(sent: Sentence) -> dict:
    return {
        "id": sent.id,
        "tokens": list(sent.tokens),
        "pos": list(sent.pos_tags),
        "dep_head": list(sent.dep_heads),
        "dep_label": list(sent.dep_labels),
        "pairs": [{"aspect": list(p.aspect), "opinion": list(p.opinion)} for p in sent.gold_pairs],
    }


def record_to_sentence(rec: dict, where: str = "") -> Sentence:
    def get(key, kind=list):
        if key not in rec:
            raise CorpusError(f"{where}missing field '{key}'")
        value = rec[key]
        if not isinstance(value, kind):
            raise CorpusError(f"{where}field '{key}' must be {kind.__name__}")
        return value

    pairs = []
    for i, p in enumerate(get("pairs")):
        try:
            pairs.append(GoldPair.of(p["aspect"], p["opinion"]))
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise CorpusError(f"{where}field 'pairs[{i}]' malformed: {exc!r}") from None
    heads = get("dep_head")
    if not all(isinstance(h, int) and not isinstance(h, bool) for h in heads):
        raise CorpusError(f"{where}field 'dep_head' must contain integers")
    sent = Sentence(
        id=str(get("id", (str, int))),
        tokens=get("tokens"),
        pos_tags=get("pos"),
        dep_heads=heads,
        dep_labels=get("dep_label"),
        gold_pairs=pairs,
    )
    try:
        validate_sentence(sent)
    except CorpusError as exc:
        raise CorpusError(f"{where}{exc}") from None
    return sent


def canonical_line(rec: dict) -> str:
    return json.dumps(rec, ensure_ascii=False)


def dumps_corpus(corpus: Iterable[Sentence]) -> str:
    return "".join(canonical_line(sentence_to_record(s)) + "\n" for s in corpus)


def save_corpus(corpus: Iterable[Sentence], path: str | Path) -> None:
    Path(path).write_text(dumps_corpus(corpus), encoding="utf-8")


def load_corpus(path: str | Path, format: str = CANONICAL) -> list[Sentence]:
    """Load and validate a corpus file.

    ``format`` is ``"canonical-jsonl"`` or ``"benchmark-source"`` (see
    :func:`convert_benchmark`). Errors name the offending line and field.
    """
    path = Path(path)
    if format == BENCHMARK:
        return convert_benchmark(path)
    if format != CANONICAL:
        raise ValueError(f"unknown corpus format {format!r}, expected one of {FORMATS}")
    sentences = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}: "
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{where}invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise CorpusError(f"{where}record must be a JSON object")
            sentences.append(record_to_sentence(rec, where))
    return sentences


# ---------------------------------------------------------------------------
# benchmark conversion

_ASPECT_TYPES = {"aspect", "target", "at", "asp"}
_OPINION_TYPES = {"opinion", "ot", "opi"}


def _first(rec: dict, keys: Sequence[str]):
    for k in keys:
        if k in rec:
            return rec[k]
    raise KeyError("/".join(keys))


def _tag_spans(tags: str | Sequence[str]) -> list[SpanRef]:
    """Spans from BIO tags, either a list or GTS-style ``"word\\\\B word\\\\O"``."""
    if isinstance(tags, str):
        tags = [t.rsplit("\\", 1)[-1] for t in tags.split()]
    spans, start = [], None
    for i, tag in enumerate(list(tags) + ["O"]):
        tag = tag.upper()
        if tag.startswith("B") or tag.startswith("O") or (tag.startswith("I") and start is None):
            if start is not None:
                spans.append(SpanRef(start, i - 1))
                start = None
            if tag.startswith("B") or tag.startswith("I"):
                start = i
    return spans


def benchmark_record_to_sentence(rec: dict, default_id: str) -> Sentence:
    """Convert one record of the public benchmark release.

    Two layouts are accepted. Span-graph style records carry ``tokens``,
    ``entities`` (``type``, ``start``, exclusive ``end``) and ``relations``
    (``head``/``tail`` entity indices). Grid-tagging style records carry a
    whitespace-tokenized ``sentence`` and ``triples`` (or ``pairs``) with
    ``target_tags``/``opinion_tags`` BIO strings. Both need the parser output:
    ``pos``, 1-based heads with 0 for the root (``head``/``dep_head``) and
    labels (``deprel``/``dep_label``).
    """
    sid = str(rec.get("id", rec.get("orig_id", rec.get("sent_id", default_id))))
    if "tokens" in rec:
        tokens = list(rec["tokens"])
    else:
        tokens = str(rec["sentence"]).split()
    pos = list(_first(rec, ("pos", "pos_tags", "postag")))
    heads = [int(h) - 1 for h in _first(rec, ("dep_head", "head", "heads"))]
    heads = [ROOT if h < 0 else h for h in heads]
    labels = [str(l) for l in _first(rec, ("dep_label", "deprel", "dep"))]

    pairs: list[GoldPair] = []
    if "entities" in rec:
        ents = rec["entities"]
        for rel in rec.get("relations", []):
            a, b = ents[rel["head"]], ents[rel["tail"]]
            if str(a["type"]).lower() in _OPINION_TYPES and str(b["type"]).lower() in _ASPECT_TYPES:
                a, b = b, a
            if str(a["type"]).lower() not in _ASPECT_TYPES or str(b["type"]).lower() not in _OPINION_TYPES:
                raise KeyError(f"relation {rel} does not link an aspect and an opinion")
            pairs.append(GoldPair(SpanRef(a["start"], a["end"] - 1), SpanRef(b["start"], b["end"] - 1)))
    else:
        for item in _first(rec, ("triples", "pairs")):
            for a in _tag_spans(item["target_tags"]):
                for o in _tag_spans(item["opinion_tags"]):
                    pairs.append(GoldPair(a, o))
    unique = list(dict.fromkeys(pairs))
    if len(unique) != len(pairs):
        logger.warning("%s: dropped %d duplicate pair(s)", sid, len(pairs) - len(unique))
    return Sentence(sid, tokens, pos, heads, labels, unique)


def convert_benchmark(path: str | Path) -> list[Sentence]:
    """Read a benchmark source file (JSON array or JSON-lines) into Sentences."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    stripped = text.lstrip()
    if not stripped:
        return []
    if stripped.startswith("["):
        records = [(i + 1, r) for i, r in enumerate(json.loads(text))]
        unit = "record"
    else:
        records = [(n, json.loads(l)) for n, l in enumerate(text.splitlines(), 1) if l.strip()]
        unit = "line"
    out = []
    for n, rec in records:
        where = f"{path}: {unit} {n}: "
        try:
            sent = benchmark_record_to_sentence(rec, f"{path.stem}-{n}")
        except KeyError as exc:
            raise CorpusError(f"{where}missing or malformed field {exc}") from None
        except (TypeError, ValueError, IndexError) as exc:
            raise CorpusError(f"{where}malformed record ({exc})") from None
        try:
            validate_sentence(sent)
        except CorpusError as exc:
            raise CorpusError(f"{where}{exc}") from None
        out.append(sent)
    return out


# ---------------------------------------------------------------------------
# statistics


def overlapping_flags(pairs: Sequence[GoldPair]) -> list[bool]:
    """Per pair: does its aspect or opinion span also occur in another pair."""
    aspect_counts: dict[SpanRef, int] = {}
    opinion_counts: dict[SpanRef, int] = {}
    for p in pairs:
        aspect_counts[p.aspect] = aspect_counts.get(p.aspect, 0) + 1
        opinion_counts[p.opinion] = opinion_counts.get(p.opinion, 0) + 1
    return [aspect_counts[p.aspect] > 1 or opinion_counts[p.opinion] > 1 for p in pairs]


def compute_stats(corpus: Iterable[Sentence]) -> DatasetStats:
    n_sent = n_asp = n_opi = n_pairs = n_ovl = 0
    for sent in corpus:
        n_sent += 1
        n_asp += len(sent.aspects)
        n_opi += len(sent.opinions)
        n_pairs += len(sent.gold_pairs)
        n_ovl += sum(overlapping_flags(sent.gold_pairs))
    return DatasetStats(n_sent, n_asp, n_opi, n_pairs, n_ovl)


# ---------------------------------------------------------------------------
# vocabularies and graph views


@dataclass
class Vocab:
    """Symbol to index map. Reserved symbols come first, then sorted symbols."""

    symbols: list[str]
    reserved: tuple[str, ...] = (UNK,)
    _index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self._index = {s: i for i, s in enumerate(self.symbols)}

    @classmethod
    def build(cls, symbols: Iterable[str], reserved: Sequence[str] = (UNK,)) -> "Vocab":
        body = sorted(set(symbols) - set(reserved))
        return cls(list(reserved) + body, tuple(reserved))

    def __len__(self) -> int:
        return len(self.symbols)

    def __contains__(self, sym: str) -> bool:
        return sym in self._index

    def __getitem__(self, sym: str) -> int:
        return self._index.get(sym, self._index[UNK])

    def encode(self, syms: Iterable[str]) -> list[int]:
        return [self[s] for s in syms]

    def as_dict(self) -> dict[str, int]:
        return dict(self._index)

    def to_state(self) -> dict:
        return {"symbols": list(self.symbols), "reserved": list(self.reserved)}

    @classmethod
    def from_state(cls, state: dict) -> "Vocab":
        return cls(list(state["symbols"]), tuple(state["reserved"]))


def build_vocab(corpus: Iterable[Sentence]) -> tuple[Vocab, Vocab]:
    """POS and dependency-label vocabularies.

    The label vocabulary reserves a synthetic self-loop label used on the
    diagonal of the adjacency matrix.
    """
    corpus = list(corpus)
    pos = Vocab.build((t for s in corpus for t in s.pos_tags))
    dep = Vocab.build((l for s in corpus for l in s.dep_labels), reserved=(UNK, SELF_LOOP))
    return pos, dep


def build_word_vocab(corpus: Iterable[Sentence], lowercase: bool = True) -> Vocab:
    norm = str.lower if lowercase else str
    return Vocab.build(norm(t) for s in corpus for t in s.tokens)


def adjacency(sent: Sentence) -> np.ndarray:
    """Symmetric 0/1 adjacency over dependency arcs with self-loops added."""
    T = len(sent.tokens)
    b = np.eye(T, dtype=bool)
    for dep, head in enumerate(sent.dep_heads):
        if head != ROOT:
            b[dep, head] = b[head, dep] = True
    return b


def label_matrix(sent: Sentence, dep_vocab: Vocab) -> np.ndarray:
    """Label index per token pair: arc label on arcs (both directions),
    the self-loop label on the diagonal and UNK elsewhere."""
    T = len(sent.tokens)
    m = np.full((T, T), dep_vocab[UNK], dtype=np.int64)
    for dep, head in enumerate(sent.dep_heads):
        if head != ROOT:
            m[dep, head] = m[head, dep] = dep_vocab[sent.dep_labels[dep]]
    np.fill_diagonal(m, dep_vocab[SELF_LOOP])
    return m
