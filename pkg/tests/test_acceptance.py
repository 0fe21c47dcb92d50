"""Acceptance gate. Each test carries a ``criterion`` marker and the summary
at the end of the run prints one pass/fail line per criterion."""

import random
import time

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from paote import config as cfgmod
from paote.corpus import GoldPair, Sentence, SpanRef, build_vocab, compute_stats, load_corpus
from paote.encoder import LAGCNLayer, LocalPOSAttention, window_mask
from paote.evaluate import correlation_table, evaluate_model
from paote.model import build_model
from paote.pairing import (
    biaffine_logits,
    cross_attention,
    decode,
    syntactic_scores,
    triaffine_sums,
)
from paote.terms import SpanRepresenter, enumerate_spans, span_count
from paote.trainer import Checkpoint, TrainConfig, batch_loss, pair_loss, prepare_example, train, type_loss
from gradcheck import check_gradients
from synthetic import make_corpus
from test_evaluate import cooccurrence_oracle
from test_pairing import biaffine_oracle, syntactic_oracle, triaffine_sum_oracle
from test_trainer import bce_oracle, nll_oracle

from conftest import DATA_DIR, overfit_configs, tiny_config

pytestmark = pytest.mark.acceptance

# ---------------------------------------------------------------------------
# Dataset fidelity

PUBLISHED_COUNTS = {
    # (sentences, aspects, opinions, pairs, overlapping pairs, overlap %)
    ("14lap", "train"): (1124, 1589, 1583, 1835, 431, 23.49),
    ("14lap", "test"): (332, 467, 478, 547, 147, 26.87),
    ("14res", "train"): (1574, 2551, 2604, 2936, 667, 22.72),
    ("14res", "test"): (493, 851, 866, 1008, 276, 27.38),
    ("15res", "train"): (754, 1076, 1192, 1277, 346, 27.09),
    ("15res", "test"): (325, 436, 469, 493, 98, 19.88),
    ("16res", "train"): (1079, 1511, 1660, 1769, 444, 25.10),
    ("16res", "test"): (328, 456, 485, 525, 120, 22.86),
}


def dataset_path(name, split):
    path = DATA_DIR / name / f"{split}.jsonl"
    if not path.exists():
        pytest.fail(f"benchmark split not available: {path} (set PAOTE_DATA_DIR to the converted data)")
    return path


@pytest.mark.criterion("Dataset fidelity")
@pytest.mark.parametrize("name,split", sorted(PUBLISHED_COUNTS))
def test_dataset_statistics(name, split):
    t0 = time.perf_counter()
    st_ = compute_stats(load_corpus(dataset_path(name, split)))
    n_sent, n_asp, n_opi, n_pairs, n_ovl, pct = PUBLISHED_COUNTS[name, split]
    assert (st_.n_sentences, st_.n_aspects, st_.n_opinions, st_.n_pairs, st_.n_overlapping_pairs) == (
        n_sent, n_asp, n_opi, n_pairs, n_ovl,
    )
    assert round(100 * st_.overlap_ratio, 2) == pct
    assert time.perf_counter() - t0 < 10


# ---------------------------------------------------------------------------
# Gradient suite

def _f64_modules_seeded(seed):
    torch.manual_seed(seed)
    torch.set_default_dtype(torch.float64)
    return torch.Generator().manual_seed(seed)


def _leaf(*shape, g):
    return torch.randn(*shape, generator=g).requires_grad_()


def _case_local_attention():
    g = _f64_modules_seeded(1)
    att = LocalPOSAttention(4, 3, window=1)
    e, x = _leaf(4, 4, g=g), _leaf(4, 3, g=g)
    R1, R2 = torch.randn(4, 4, generator=g), torch.randn(4, 4, generator=g)

    def loss():
        out, gamma = att(e, x)
        return (out * R1).sum() + (gamma * R2).sum()

    return loss, {**dict(att.named_parameters()), "e": e, "x": x}


def _case_lagcn():
    g = _f64_modules_seeded(2)
    layer = LAGCNLayer(4, 3, 3)
    e, x, xr = _leaf(4, 4, g=g), _leaf(4, 3, g=g), _leaf(4, 4, 3, g=g)
    adj = torch.eye(4, dtype=torch.bool)
    for i, j in ((0, 1), (1, 2), (1, 3)):
        adj[i, j] = adj[j, i] = True
    R1, R2, R3 = torch.randn(4, 4, generator=g), torch.randn(4, 4, generator=g), torch.randn(4, 4, 4, generator=g)

    def loss():
        out, alpha, r = layer(e, x, xr, adj)
        return (out * R1).sum() + (alpha * R2).sum() + (r * R3).sum()

    return loss, {**dict(layer.named_parameters()), "e": e, "x": x, "x_label": xr}


def _case_span():
    g = _f64_modules_seeded(3)
    rep = SpanRepresenter(token_dim=4, sentence_dim=3, max_span_width=3, width_dim=2, span_dim=4, dropout=0.0)
    h, sent = _leaf(4, 4, g=g), _leaf(3, g=g)
    spans = enumerate_spans(4, 3)
    labels = [i % 3 for i in range(len(spans))]
    R = torch.randn(len(spans), 4, generator=g)

    def loss():
        reprs, logits = rep(h, sent, spans)
        return (reprs * R).sum() + type_loss(logits, labels)

    return loss, {**dict(rep.named_parameters()), "h": h, "sentence": sent}


def _case_biaffine():
    g = _f64_modules_seeded(4)
    A, O, W6 = _leaf(2, 4, g=g), _leaf(3, 4, g=g), _leaf(5, 4, g=g)
    gold = torch.tensor([[1.0, 0, 0], [0, 1, 1]])

    def loss():
        return pair_loss(torch.sigmoid(biaffine_logits(A, O, W6)).reshape(-1), gold.reshape(-1))

    return loss, {"W6": W6, "aspects": A, "opinions": O}


def _case_triaffine():
    g = _f64_modules_seeded(5)
    A, O, W7 = _leaf(2, 3, g=g), _leaf(3, 3, g=g), _leaf(4, 3, 4, g=g)
    R = torch.randn(2, 3, generator=g)

    def loss():
        return (triaffine_sums(A, O, W7) * R).sum()

    return loss, {"W7": W7, "aspects": A, "opinions": O}


def _case_syntactic(cross):
    def build():
        g = _f64_modules_seeded(6)
        r, W8 = _leaf(4, 4, 3, g=g), _leaf(3, g=g)
        aspects, opinions = [SpanRef(0, 0), SpanRef(1, 2)], [SpanRef(3, 3), SpanRef(1, 1), SpanRef(2, 3)]
        R = torch.randn(2, 3, generator=g)

        def loss():
            return (syntactic_scores(r, aspects, opinions, W8, cross) * R).sum()

        return loss, {"W8": W8, "r_syn": r}

    return build


def _case_end_to_end():
    _f64_modules_seeded(7)
    s = Sentence("g", ["screen", "bright", "and", "fast"], ["NN", "JJ", "CC", "JJ"], [1, -1, 3, 1], ["nsubj", "root", "cc", "conj"],
                 [GoldPair(SpanRef(0, 0), SpanRef(1, 1)), GoldPair(SpanRef(0, 0), SpanRef(3, 3))])
    model = build_model(tiny_config(), [s])
    cfg = TrainConfig(lambda1=1.0, lambda2=1e-3, neg_spans=4)
    ex = prepare_example(s, cfg, 3, random.Random(0))

    def loss():
        return batch_loss(model, [ex], cfg)[0]

    return loss, dict(model.named_parameters())


GRADIENT_CASES = {
    "local_attention": _case_local_attention,
    "lagcn": _case_lagcn,
    "span_ffn_classifier": _case_span,
    "biaffine": _case_biaffine,
    "triaffine": _case_triaffine,
    "syntactic_cross": _case_syntactic(True),
    "syntactic_plain": _case_syntactic(False),
    "end_to_end": _case_end_to_end,
}


def _gradient_errors(name):
    loss, params = GRADIENT_CASES[name]()
    return check_gradients(loss, params, max_entries=12 if name == "end_to_end" else None)


@pytest.mark.criterion("Gradient suite")
@pytest.mark.parametrize("name", list(GRADIENT_CASES))
def test_gradients(name):
    errors = _gradient_errors(name)
    bad = {k: v for k, v in errors.items() if not v < 1e-4}
    assert not bad, bad


@pytest.mark.criterion("Gradient suite")
def test_gradient_suite_runtime():
    t0 = time.perf_counter()
    for name in GRADIENT_CASES:
        _gradient_errors(name)
    assert time.perf_counter() - t0 < 60


# ---------------------------------------------------------------------------
# Normalization suite

_normalization_runs = []


@settings(max_examples=250, deadline=None, database=None)
@given(
    T=st.integers(1, 8), d=st.integers(0, 4), N=st.integers(1, 4), M=st.integers(1, 4),
    scale=st.sampled_from([0.1, 1.0, 10.0, 50.0]), seed=st.integers(0, 2**31 - 1),
)
def _normalization_property(T, d, N, M, scale, seed):
    _normalization_runs.append(1)
    torch.manual_seed(seed)
    rng = random.Random(seed)
    e, x, xr = torch.randn(T, 4) * scale, torch.randn(T, 3) * scale, torch.randn(T, T, 3) * scale
    adj = torch.eye(T, dtype=torch.bool)
    for j in range(1, T):  # random tree
        i = rng.randrange(j)
        adj[i, j] = adj[j, i] = True
    _, gamma = LocalPOSAttention(4, 3, d)(e, x)
    _, alpha, r = LAGCNLayer(4, 3, 3)(e, x, xr, adj)
    row, col, _ = cross_attention(torch.randn(N, M, 4) * scale)
    probs = torch.softmax(torch.randn(10, 3) * scale, dim=-1)
    for w, shape in ((gamma, (T,)), (alpha, (T,)), (row, (N, M)), (col, (N, M)), (probs, (10,))):
        assert torch.allclose(w.sum(-1).double(), torch.ones(shape, dtype=torch.float64), atol=1e-6)
        assert (w >= 0).all()
    assert (gamma[~window_mask(T, d)] == 0).all() and (alpha[~adj] == 0).all()


@pytest.mark.criterion("Normalization suite")
def test_normalization():
    _normalization_runs.clear()
    t0 = time.perf_counter()
    _normalization_property()
    assert len(_normalization_runs) >= 200
    assert time.perf_counter() - t0 < 30


# ---------------------------------------------------------------------------
# Oracle equivalence


@pytest.mark.criterion("Oracle equivalence")
def test_scoring_and_losses_match_loop_oracles():
    t0 = time.perf_counter()
    torch.set_default_dtype(torch.float64)
    worst = 0.0
    for seed in range(3):
        g = torch.Generator().manual_seed(seed)
        for N in range(1, 4):
            for M in range(1, 4):
                d, T = 3, 6
                A, O = torch.randn(N, d, generator=g), torch.randn(M, d, generator=g)
                W6, W7 = torch.randn(d + 1, d, generator=g), torch.randn(d + 1, d, d + 1, generator=g)
                bi = biaffine_logits(A, O, W6).numpy()
                ref_bi = np.array([[biaffine_oracle(A[n].tolist(), O[m].tolist(), W6.tolist()) for m in range(M)] for n in range(N)])
                worst = max(worst, np.abs(bi - ref_bi).max())
                tri = triaffine_sums(A, O, W7).numpy()
                worst = max(worst, np.abs(tri - triaffine_sum_oracle(A.tolist(), O.tolist(), W7.tolist())).max())
                r, W8 = torch.randn(T, T, d, generator=g), torch.randn(d, generator=g)
                spans = [SpanRef(0, 1), SpanRef(2, 2), SpanRef(3, 5), SpanRef(1, 4), SpanRef(5, 5), SpanRef(0, 0)]
                asp, opi = spans[:N], spans[3 : 3 + M]
                for cross in (True, False):
                    syn = syntactic_scores(r, asp, opi, W8, cross).numpy()
                    worst = max(worst, np.abs(syn - syntactic_oracle(r.numpy(), asp, opi, W8.numpy(), cross)).max())
                y = torch.sigmoid(torch.randn(N * M, generator=g))
                gold = [int(v) for v in torch.randint(0, 2, (N * M,), generator=g)]
                worst = max(worst, abs(pair_loss(y, gold).item() - bce_oracle(y.tolist(), gold)))
                logits = torch.randn(N * M, 3, generator=g)
                labels = [i % 3 for i in range(N * M)]
                worst = max(worst, abs(type_loss(logits, labels).item() - nll_oracle(logits, labels)))
    assert worst < 1e-8
    assert time.perf_counter() - t0 < 30


@pytest.mark.criterion("Oracle equivalence")
def test_span_enumeration_exhaustive():
    t0 = time.perf_counter()
    for T in range(1, 13):
        for W in range(1, 13):
            brute = [(s, e) for s in range(T) for e in range(T) if s <= e < s + W]
            assert enumerate_spans(T, W) == brute and span_count(T, W) == len(brute)
            assert len(brute) == sum(T - w + 1 for w in range(1, min(W, T) + 1))
    assert time.perf_counter() - t0 < 30


# ---------------------------------------------------------------------------
# Overfit sanity

def _overfit(corpus):
    t0 = time.perf_counter()
    model_cfg, train_cfg = overfit_configs()
    ck = train(model_cfg, corpus, corpus, train_cfg)
    elapsed = time.perf_counter() - t0
    f1 = evaluate_model(ck.build_model(), corpus).pair_f1
    return f1, len(ck.history), elapsed


@pytest.mark.criterion("Overfit sanity")
@pytest.mark.slow
def test_overfit_14res_subset():
    corpus = load_corpus(dataset_path("14res", "train"))[:50]
    f1, epochs, elapsed = _overfit(corpus)
    assert f1 >= 0.95 and epochs <= 200 and elapsed < 15 * 60, (f1, epochs, elapsed)


@pytest.mark.criterion("Overfit sanity [synthetic 50-sentence substitute, supplementary]")
@pytest.mark.slow
def test_overfit_synthetic_subset():
    corpus = make_corpus(50, seed=7)
    f1, epochs, elapsed = _overfit(corpus)
    assert f1 >= 0.95 and epochs <= 200 and elapsed < 15 * 60, (f1, epochs, elapsed)


# ---------------------------------------------------------------------------
# Ablation consistency


def _pair_grid(model, sentence):
    state = model.encode(sentence)
    a_spans, o_spans = sentence.aspects, sentence.opinions
    spans = [tuple(s) for s in a_spans + o_spans]
    reprs, _ = model.span_scores(state, spans)
    return model.pair_scores(state, reprs[: len(a_spans)], reprs[len(a_spans) :], a_spans, o_spans)


def _model_from_overrides(overrides, corpus):
    model_cfg, _ = cfgmod.build_configs(cfgmod.resolve(None, [
        "encoder.embedding_mode=static+recurrent", "encoder.hidden_dim=4", "encoder.pos_emb_dim=3",
        "encoder.dep_label_emb_dim=3", "encoder.lm_dim=4", "encoder.word_emb_dim=3", "model.span_dim=4",
        "model.width_emb_dim=3", "model.pair_dim=3", "model.dropout=0.0", *overrides,
    ], {}))
    torch.manual_seed(0)
    return build_model(model_cfg, corpus).eval()


@pytest.mark.criterion("Ablation consistency")
@pytest.mark.parametrize(
    "weights,flags",
    [
        (["model.eta1=0", "model.eta2=0"], ["model.use_triaffine=false", "model.use_syntactic=false"]),
        (["model.eta1=0"], ["model.use_triaffine=false"]),
        (["model.eta2=0"], ["model.use_syntactic=false"]),
    ],
)
def test_zero_weight_equals_removed_terms(weights, flags):
    torch.set_default_dtype(torch.float64)
    corpus = make_corpus(20, seed=11)
    a, b = _model_from_overrides(weights, corpus), _model_from_overrides(flags, corpus)
    worst = 0.0
    with torch.no_grad():
        for s in corpus:
            if s.gold_pairs:
                worst = max(worst, (_pair_grid(a, s)["y"] - _pair_grid(b, s)["y"]).abs().max().item())
    assert worst < 1e-12


@pytest.mark.criterion("Ablation consistency")
def test_decoding_monotone_in_delta():
    rng = np.random.default_rng(0)
    spans = [SpanRef(i, i) for i in range(5)]
    for _ in range(1000):
        N, M = rng.integers(1, 6, size=2)
        y = torch.as_tensor(rng.random((N, M)))
        if rng.random() < 0.3:  # exercise ties with the threshold
            y = torch.round(y * 10) / 10
        deltas = np.sort(rng.random(6))
        accepted = [
            {(d.aspect, d.opinion) for d in decode({"y": y}, spans[:N], spans[:M], float(t)) if d.accepted} for t in deltas
        ]
        for lo, hi in zip(accepted, accepted[1:]):
            assert hi <= lo


# ---------------------------------------------------------------------------
# Reproducibility


REPRO_TRAIN = dict(learning_rate=1e-2, batch_size=8, max_epochs=2, lambda2=1e-5, seed=21)


@pytest.mark.criterion("Reproducibility")
def test_same_seed_identical_epoch_one_loss():
    corpus, dev = make_corpus(16, seed=5), make_corpus(6, seed=6, prefix="dev")
    runs = [train(tiny_config(dropout=0.1), corpus, dev, TrainConfig(**REPRO_TRAIN)) for _ in range(2)]
    assert runs[0].history[0]["loss"] == runs[1].history[0]["loss"]
    assert runs[0].history == runs[1].history


@pytest.mark.criterion("Reproducibility")
def test_checkpoint_round_trip_reproduces_dev_metrics(tmp_path):
    corpus, dev = make_corpus(16, seed=5), make_corpus(8, seed=6, prefix="dev")
    ck = train(tiny_config(), corpus, dev, TrainConfig(**REPRO_TRAIN))
    before = evaluate_model(ck.build_model(), dev).as_dict()
    ck.save(tmp_path / "m.pt")
    after = evaluate_model(Checkpoint.load(tmp_path / "m.pt").build_model(), dev).as_dict()
    assert before == after


# ---------------------------------------------------------------------------
# Correlation inspector


def _check_against_counts(table, corpus):
    counts = cooccurrence_oracle(corpus)
    worst = 0.0
    for lab in table.labels:
        total = sum(v for (l, _), v in counts.items() if l == lab)
        for pos in table.pos_tags:
            expected = counts[lab, pos] / total if total else 0.0
            worst = max(worst, abs(table.row(lab)[pos] - expected))
    return worst


@pytest.mark.criterion("Correlation inspector")
def test_uniform_alpha_rows_match_counts():
    corpus = make_corpus(60, seed=12)
    torch.manual_seed(0)
    model = build_model(tiny_config(), corpus)
    for layer in model.encoder.lagcn:
        torch.nn.init.zeros_(layer.u.weight)
    assert _check_against_counts(correlation_table(model, corpus), corpus) < 1e-6


@pytest.mark.criterion("Correlation inspector")
def test_uniform_alpha_via_plain_gcn_config():
    corpus = make_corpus(60, seed=13)
    model = build_model(tiny_config(encoder={"vanilla_gcn": True}), corpus)
    assert _check_against_counts(correlation_table(model, corpus), corpus) < 1e-6
    _, dep = build_vocab(corpus)
    assert set(dep.symbols) - {"<self>"} == set(correlation_table(model, corpus).labels)
