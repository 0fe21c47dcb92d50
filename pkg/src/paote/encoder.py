"""Syntax-fusion encoder.

Token embeddings come from an embedding provider (a pretrained transformer
or static word vectors followed by a BiLSTM). Each of the ``n_layers`` layers
runs two streams over the previous shared state: a windowed attention over POS
embeddings and a label-aware graph convolution over the dependency tree. The
two stream outputs are fused linearly into the next shared state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Optional, Sequence

import torch
from torch import nn

PRETRAINED = "pretrained-lm"
STATIC = "static+recurrent"


class SequenceTooLongError(ValueError):
    pass


@dataclass
class EncoderConfig:
    hidden_dim: int = 200
    pos_emb_dim: int = 100
    dep_label_emb_dim: int = 100
    n_layers: int = 2
    local_window: int = 3
    embedding_mode: str = PRETRAINED
    lm_name: str = "bert-base-cased"
    lm_dim: int = 768
    word_emb_dim: int = 100
    lowercase: bool = True
    # ablation switches
    use_local_attention: bool = True
    use_lagcn: bool = True
    use_dep_labels: bool = True
    use_lagcn_pos: bool = True
    vanilla_gcn: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.local_window < 1:
            raise ValueError("local_window must be >= 1")
        for f in ("hidden_dim", "pos_emb_dim", "dep_label_emb_dim", "lm_dim", "word_emb_dim"):
            if getattr(self, f) <= 0:
                raise ValueError(f"{f} must be positive")
        if self.embedding_mode not in (PRETRAINED, STATIC):
            raise ValueError(f"embedding_mode must be {PRETRAINED!r} or {STATIC!r}")
        if self.embedding_mode == STATIC and self.lm_dim % 2:
            raise ValueError("lm_dim must be even in static+recurrent mode (bidirectional LSTM)")


# ---------------------------------------------------------------------------
# embedding providers


class StaticRecurrentEmbedder(nn.Module):
    """Word embeddings followed by a one-layer BiLSTM.

    The sentence vector is the concatenation of the last forward and the
    first backward hidden state.
    """

    def __init__(self, vocab_size: int, emb_dim: int, out_dim: int):
        super().__init__()
        self.embedding = nn.Embedding(vocab_size, emb_dim)
        self.lstm = nn.LSTM(emb_dim, out_dim // 2, batch_first=True, bidirectional=True)
        self.out_dim = out_dim

    def forward(self, word_ids: torch.Tensor):
        x = self.embedding(word_ids).unsqueeze(0)
        out, _ = self.lstm(x)
        out = out[0]
        half = self.out_dim // 2
        sent = torch.cat([out[-1, :half], out[0, half:]])
        return out, sent

    def load_vectors(self, vectors: dict[int, Sequence[float]]) -> int:
        with torch.no_grad():
            for idx, vec in vectors.items():
                self.embedding.weight[idx] = torch.as_tensor(vec, dtype=self.embedding.weight.dtype)
        return len(vectors)


def read_word_vectors(path, vocab, dim: int, lowercase: bool = True) -> dict[int, list[float]]:
    """Read GloVe-style text vectors for the words present in ``vocab``."""
    found = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.rstrip().split(" ")
            if len(parts) != dim + 1:
                continue
            word = parts[0].lower() if lowercase else parts[0]
            if word in vocab and vocab[word] not in found:
                found[vocab[word]] = [float(x) for x in parts[1:]]
    return found


class PretrainedEmbedder(nn.Module):
    """Transformer encoder with first-subtoken pooling.

    The sentence vector is the output at the leading special token. Inputs
    longer than the model's position limit raise :class:`SequenceTooLongError`.
    """

    def __init__(self, name_or_path: str = "bert-base-cased", model=None, tokenizer=None):
        super().__init__()
        if model is None or tokenizer is None:
            from transformers import AutoModel, AutoTokenizer

            tokenizer = tokenizer or AutoTokenizer.from_pretrained(name_or_path)
            model = model or AutoModel.from_pretrained(name_or_path)
        self.tokenizer = tokenizer
        self.lm = model
        self.out_dim = model.config.hidden_size
        limits = [getattr(model.config, "max_position_embeddings", None), tokenizer.model_max_length]
        self.max_length = min(l for l in limits if l)

    def forward(self, tokens: Sequence[str]):
        unk = self.tokenizer.unk_token
        words = [t if self.tokenizer.tokenize(t) else unk for t in tokens]
        enc = self.tokenizer(words, is_split_into_words=True, return_tensors="pt", truncation=False)
        n = enc["input_ids"].shape[1]
        if n > self.max_length:
            raise SequenceTooLongError(
                f"sentence of {len(tokens)} tokens needs {n} subtokens, model limit is {self.max_length}"
            )
        device = next(self.lm.parameters()).device
        out = self.lm(**{k: v.to(device) for k, v in enc.items()}).last_hidden_state[0]
        first = {}
        for pos, w in enumerate(enc.word_ids(0)):
            if w is not None and w not in first:
                first[w] = pos
        index = torch.tensor([first[i] for i in range(len(tokens))], device=out.device)
        return out.index_select(0, index), out[0]


# ---------------------------------------------------------------------------
# syntax streams


def window_mask(T: int, d: int, device=None) -> torch.Tensor:
    idx = torch.arange(T, device=device)
    return (idx[:, None] - idx[None, :]).abs() <= d


def masked_softmax(scores: torch.Tensor, mask: torch.Tensor, dim: int = -1) -> torch.Tensor:
    scores = scores.masked_fill(~mask, float("-inf"))
    return torch.softmax(scores, dim=dim)


class LocalPOSAttention(nn.Module):
    """Windowed attention over projected POS embeddings.

    Scores ``W1 [e_i; x_i]`` are normalized over the clipped window
    ``[t-d, t+d]`` of each position ``t``.
    """

    def __init__(self, hidden_dim: int, pos_dim: int, window: int):
        super().__init__()
        self.window = window
        self.score = nn.Linear(hidden_dim + pos_dim, 1, bias=False)  # W_1
        self.proj = nn.Linear(pos_dim, hidden_dim)

    def weights(self, shared_prev: torch.Tensor, pos_emb: torch.Tensor) -> torch.Tensor:
        T = shared_prev.shape[0]
        s = self.score(torch.cat([shared_prev, pos_emb], dim=-1)).squeeze(-1)
        mask = window_mask(T, self.window, s.device)
        return masked_softmax(s.unsqueeze(0).expand(T, T), mask)

    def forward(self, shared_prev: torch.Tensor, pos_emb: torch.Tensor):
        gamma = self.weights(shared_prev, pos_emb)
        return gamma @ self.proj(pos_emb), gamma


class LAGCNLayer(nn.Module):
    """Label-aware graph convolution.

    Messages ``W2 e_j + W3 x_tj + W4 x_j + b`` are mixed by connection
    strengths ``alpha``, a softmax over adjacency-masked neighbours of the
    scalar ``u . r_tj`` where ``r_tj = W5 [e_j; x_j; x_tj]``. The relation
    vectors ``r`` are returned for pair scoring.
    """

    def __init__(
        self,
        hidden_dim: int,
        pos_dim: int,
        label_dim: int,
        use_labels: bool = True,
        use_pos: bool = True,
        uniform: bool = False,
    ):
        super().__init__()
        self.W2 = nn.Linear(hidden_dim, hidden_dim, bias=False)
        self.W3 = nn.Linear(label_dim, hidden_dim, bias=False)
        self.W4 = nn.Linear(pos_dim, hidden_dim, bias=False)
        self.bias = nn.Parameter(torch.zeros(hidden_dim))
        self.W5 = nn.Linear(hidden_dim + pos_dim + label_dim, hidden_dim, bias=False)
        self.u = nn.Linear(hidden_dim, 1, bias=False)
        self.use_labels = use_labels
        self.use_pos = use_pos
        self.uniform = uniform

    def forward(self, shared_prev, pos_emb, label_emb, adj):
        T = shared_prev.shape[0]
        if not self.use_pos:
            pos_emb = torch.zeros_like(pos_emb)
        if not self.use_labels:
            label_emb = torch.zeros_like(label_emb)
        e_j = shared_prev.unsqueeze(0).expand(T, T, -1)
        x_j = pos_emb.unsqueeze(0).expand(T, T, -1)
        r = self.W5(torch.cat([e_j, x_j, label_emb], dim=-1))
        if self.uniform:
            scores = torch.zeros(T, T, dtype=r.dtype, device=r.device)
        else:
            scores = self.u(r).squeeze(-1)
        alpha = masked_softmax(scores, adj)
        node = self.W2(shared_prev) + self.W4(pos_emb)  # terms that depend on j only
        msg = node.unsqueeze(0) + self.W3(label_emb) + self.bias
        e_s = torch.relu(torch.einsum("tj,tjh->th", alpha, msg))
        return e_s, alpha, r


# ---------------------------------------------------------------------------
# full encoder


@dataclass
class SynFueState:
    v: torch.Tensor
    sentence: torch.Tensor
    e_p: list = field(default_factory=list)
    e_s: list = field(default_factory=list)
    shared: list = field(default_factory=list)
    alpha: list = field(default_factory=list)
    gamma: list = field(default_factory=list)
    r_syn: Optional[torch.Tensor] = None
    e_final: Optional[torch.Tensor] = None

    @property
    def tokens(self) -> torch.Tensor:
        """Final token representations ``[v_t; e_final_t]``."""
        return torch.cat([self.v, self.e_final], dim=-1)


class SynFueEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig, n_pos: int, n_labels: int, embedder: nn.Module):
        super().__init__()
        self.cfg = cfg
        self.embedder = embedder
        d = cfg.hidden_dim
        self.pos_emb = nn.Embedding(n_pos, cfg.pos_emb_dim)
        self.label_emb = nn.Embedding(n_labels, cfg.dep_label_emb_dim)
        self.input_proj = nn.Linear(cfg.lm_dim, d)  # W_0
        self.local = nn.ModuleList(
            LocalPOSAttention(d, cfg.pos_emb_dim, cfg.local_window) for _ in range(cfg.n_layers)
        )
        labels = cfg.use_dep_labels and not cfg.vanilla_gcn
        pos = cfg.use_lagcn_pos and not cfg.vanilla_gcn
        self.lagcn = nn.ModuleList(
            LAGCNLayer(d, cfg.pos_emb_dim, cfg.dep_label_emb_dim, labels, pos, cfg.vanilla_gcn)
            for _ in range(cfg.n_layers)
        )
        self.fuse = nn.ModuleList(nn.Linear(2 * d, d) for _ in range(cfg.n_layers))  # W_f

    @property
    def out_dim(self) -> int:
        return 2 * self.cfg.hidden_dim

    def embed(self, inputs) -> tuple[torch.Tensor, torch.Tensor]:
        if self.cfg.embedding_mode == PRETRAINED:
            return self.embedder(inputs.tokens)
        return self.embedder(inputs.word_ids)

    def forward(self, inputs, v: torch.Tensor | None = None, sentence: torch.Tensor | None = None) -> SynFueState:
        """Encode one sentence.

        ``inputs`` provides ``tokens``/``word_ids``, ``pos_ids``, ``label_ids``
        (T x T) and ``adj`` (T x T bool). Precomputed embeddings may be passed
        as ``v`` and ``sentence``.
        """
        if v is None:
            v, sentence = self.embed(inputs)
        state = SynFueState(v=v, sentence=sentence)
        x_p = self.pos_emb(inputs.pos_ids)
        x_r = self.label_emb(inputs.label_ids)
        shared = self.input_proj(v)
        state.shared.append(shared)
        T, d = v.shape[0], self.cfg.hidden_dim
        for l in range(self.cfg.n_layers):
            if self.cfg.use_local_attention:
                e_p, gamma = self.local[l](shared, x_p)
            else:
                e_p, gamma = shared.new_zeros(T, d), None
            if self.cfg.use_lagcn:
                e_s, alpha, r = self.lagcn[l](shared, x_p, x_r, inputs.adj)
            else:
                e_s, alpha, r = shared.new_zeros(T, d), None, shared.new_zeros(T, T, d)
            shared = self.fuse[l](torch.cat([e_s, e_p], dim=-1))
            state.e_p.append(e_p)
            state.e_s.append(e_s)
            state.gamma.append(gamma)
            state.alpha.append(alpha)
            state.shared.append(shared)
            state.r_syn = r
        state.e_final = torch.cat([state.e_s[-1], state.e_p[-1]], dim=-1)
        return state


def reset_uniform_(t: torch.Tensor, order: int) -> torch.Tensor:
    """Uniform init scaled so a random multilinear form has unit-order variance."""
    bound = math.sqrt(3.0) / (t.shape[-1] ** (order / 2))
    with torch.no_grad():
        return t.uniform_(-bound, bound)


def config_from_dict(cls, data: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise KeyError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**data)
