"""LSTM decoder: state initialisation, the gated cell, the output layer and decoding loops."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .attention import AttentionMap, AttentionParams, ContextVector, attend, project_features
from .encoder import FeatureMap, glorot, zeros
from .tensor import Tensor

START, END, PAD = "<start>", "<end>", "<pad>"


class LabelVocabulary:
    """Token list ``[START, END, PAD, class_1, ..., class_K]``."""

    def __init__(self, classes: Sequence[str]):
        classes = list(classes)
        if len(set(classes)) != len(classes):
            raise ValueError("duplicate activity classes")
        if {START, END, PAD} & set(classes):
            raise ValueError("activity classes may not reuse the control tokens")
        self.tokens = [START, END, PAD] + classes
        self.index = {tok: i for i, tok in enumerate(self.tokens)}

    start, end, pad = 0, 1, 2

    @property
    def classes(self) -> list[str]:
        return self.tokens[3:]

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, LabelVocabulary) and self.tokens == other.tokens

    def __repr__(self) -> str:
        return f"LabelVocabulary({self.classes!r})"

    def encode(self, token: str) -> int:
        try:
            return self.index[token]
        except KeyError:
            raise ValueError(f"unknown token {token!r}") from None

    def decode(self, idx: int) -> str:
        return self.tokens[idx]

    def strip(self, indices) -> list[str]:
        """Activity labels of a token sequence, cut at the first END."""
        out = []
        for i in indices:
            i = int(i)
            if i == self.end:
                break
            if i not in (self.start, self.pad):
                out.append(self.tokens[i])
        return out


@dataclass
class LSTMState:
    hidden: Tensor
    memory: Tensor


@dataclass
class DecoderParams:
    """Gate weights are stacked along the output axis in the order input, forget, cell, output."""

    label_weight: Tensor  # W: [Emb, 4H]
    hidden_weight: Tensor  # U: [H, 4H]
    context_weight: Tensor  # Z: [D, 4H]
    gate_bias: Tensor  # b: [4H]
    embedding: Tensor  # [|vocab|, Emb]
    init_c_weight: Tensor
    init_c_bias: Tensor
    init_h_weight: Tensor
    init_h_bias: Tensor
    out_hidden: Tensor  # [H, |vocab|]
    out_context: Tensor  # [D, |vocab|]
    out_bias: Tensor

    @property
    def hidden_size(self) -> int:
        return self.hidden_weight.shape[0]

    def named(self, prefix: str = "decoder") -> dict[str, Tensor]:
        return {f"{prefix}.{name}": value for name, value in vars(self).items()}


def init_decoder(
    feature_dim: int, hidden: int, embedding_dim: int, vocab_size: int, rng: np.random.Generator
) -> DecoderParams:
    h4 = 4 * hidden
    return DecoderParams(
        label_weight=glorot(rng, (embedding_dim, h4), embedding_dim, h4),
        hidden_weight=glorot(rng, (hidden, h4), hidden, h4),
        context_weight=glorot(rng, (feature_dim, h4), feature_dim, h4),
        gate_bias=zeros((h4,)),
        embedding=glorot(rng, (vocab_size, embedding_dim), vocab_size, embedding_dim),
        init_c_weight=glorot(rng, (feature_dim, hidden), feature_dim, hidden),
        init_c_bias=zeros((hidden,)),
        init_h_weight=glorot(rng, (feature_dim, hidden), feature_dim, hidden),
        init_h_bias=zeros((hidden,)),
        out_hidden=glorot(rng, (hidden, vocab_size), hidden, vocab_size),
        out_context=glorot(rng, (feature_dim, vocab_size), feature_dim, vocab_size),
        out_bias=zeros((vocab_size,)),
    )


def init_state(features: FeatureMap, params: DecoderParams) -> LSTMState:
    """Memory and hidden state from the mean feature vector, one tanh perceptron each."""
    if features.length == 0:
        raise ValueError("cannot initialise from an empty feature map")
    avg = T.mean(features.vectors, axis=-2)
    c0 = T.tanh(T.dense(avg, params.init_c_weight, params.init_c_bias))
    h0 = T.tanh(T.dense(avg, params.init_h_weight, params.init_h_bias))
    return LSTMState(hidden=h0, memory=c0)


def lstm_step(prev: LSTMState, prev_label, context: ContextVector, params: DecoderParams) -> LSTMState:
    """One LSTM update fed with the previous label (token index) and the context vector."""
    y = T.embedding(params.embedding, prev_label)
    pre = T.add(
        T.add(T.matmul(y, params.label_weight), T.matmul(prev.hidden, params.hidden_weight)),
        T.dense(context.z, params.context_weight, params.gate_bias),
    )
    i_pre, f_pre, g_pre, o_pre = T.split(pre, 4, axis=-1)
    i, f, o = T.sigmoid(i_pre), T.sigmoid(f_pre), T.sigmoid(o_pre)
    c = T.add(T.mul(f, prev.memory), T.mul(i, T.tanh(g_pre)))
    h = T.mul(o, T.tanh(c))
    return LSTMState(hidden=h, memory=c)


def output_logits(state: LSTMState, context: ContextVector, params: DecoderParams) -> Tensor:
    return T.add(T.matmul(state.hidden, params.out_hidden), T.dense(context.z, params.out_context, params.out_bias))


def output_distribution(state: LSTMState, context: ContextVector, params: DecoderParams) -> Tensor:
    """Label distribution from the hidden state and the context, each through its own projection."""
    return T.softmax(output_logits(state, context, params))


@dataclass
class DecodeResult:
    tokens: list[int]  # emitted token indices, including END when reached
    labels: list[str]  # activity labels only
    probabilities: np.ndarray  # [steps, |vocab|]
    attention: AttentionMap
    contexts: list[np.ndarray] = field(default_factory=list)

    @property
    def steps(self) -> int:
        return len(self.tokens)

    @property
    def alphas(self) -> np.ndarray:
        return self.attention.as_array()


def decode_batch(
    features: FeatureMap,
    attention: AttentionParams,
    params: DecoderParams,
    vocab: LabelVocabulary,
    max_steps: int = 10,
) -> list[DecodeResult]:
    """Greedy decoding of a batch ``[B, L, D]``; each sample stops at its first END."""
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    vec = features.vectors
    batch = vec.shape[0]
    projected = project_features(features, attention)
    state = init_state(features, params)
    prev = np.full(batch, vocab.start, dtype=np.int64)
    done = np.zeros(batch, dtype=bool)
    tokens, probs, alphas, contexts = [], [], [], []
    for _ in range(max_steps):
        alpha, _, ctx = attend(features, state.hidden, attention, projected)
        state = lstm_step(state, prev, ctx, params)
        p = output_distribution(state, ctx, params).data
        tok = np.argmax(p, axis=-1)
        tokens.append(tok)
        probs.append(p)
        alphas.append(alpha.data)
        contexts.append(ctx.z.data)
        done = done | (tok == vocab.end)
        prev = tok
        if done.all():
            break
    tokens = np.stack(tokens, axis=1)
    results = []
    for b in range(batch):
        row = tokens[b]
        ends = np.flatnonzero(row == vocab.end)
        n = int(ends[0]) + 1 if ends.size else len(row)
        amap = AttentionMap()
        for t in range(n):
            amap.append(Tensor(alphas[t][b]), Tensor(np.zeros(0)))
        results.append(
            DecodeResult(
                tokens=[int(x) for x in row[:n]],
                labels=vocab.strip(row[:n]),
                probabilities=np.stack([probs[t][b] for t in range(n)]),
                attention=amap,
                contexts=[contexts[t][b] for t in range(n)],
            )
        )
    return results


def decode_greedy(
    features: FeatureMap,
    attention: AttentionParams,
    params: DecoderParams,
    vocab: LabelVocabulary,
    max_steps: int = 10,
) -> DecodeResult:
    """Greedy decoding of one window's feature map ``[L, D]``."""
    single = FeatureMap(T.reshape(features.vectors, (1,) + features.vectors.shape))
    return decode_batch(single, attention, params, vocab, max_steps)[0]


@dataclass
class TeacherForcedOutput:
    probabilities: Tensor  # [B, S, |vocab|]
    attention: Tensor  # [B, S, L]
    mask: np.ndarray  # [B, S] 1 for scored steps (targets up to and including END)
    targets: np.ndarray  # [B, S]


def check_target(row: np.ndarray, vocab: LabelVocabulary) -> int:
    """Validate one encoded target; returns the number of scored steps."""
    row = np.asarray(row)
    if row.size < 2 or row[0] != vocab.start:
        raise ValueError("target must begin with START")
    ends = np.flatnonzero(row == vocab.end)
    if ends.size != 1:
        raise ValueError("target must contain exactly one END")
    e = int(ends[0])
    if np.any(row[1:e] < 3) or np.any(row[e + 1 :] != vocab.pad):
        raise ValueError("target must be START, activities, END, then PAD only")
    return e


def decode_teacher_forced(
    features: FeatureMap,
    targets,
    attention: AttentionParams,
    params: DecoderParams,
    vocab: LabelVocabulary,
) -> TeacherForcedOutput:
    """Run the decoder feeding ground-truth previous tokens.

    ``targets`` is ``[T]`` or ``[B, T]`` of token indices. Only steps up to
    the longest END in the batch are computed; PAD steps are masked.
    """
    tg = np.asarray(targets, dtype=np.int64)
    vec = features.vectors
    if tg.ndim == 1:
        tg = tg[None]
        features = FeatureMap(T.reshape(vec, (1,) + vec.shape))
    scored = np.array([check_target(row, vocab) for row in tg])
    steps = int(scored.max())
    projected = project_features(features, attention)
    state = init_state(features, params)
    probs, alphas = [], []
    for t in range(steps):
        alpha, _, ctx = attend(features, state.hidden, attention, projected)
        state = lstm_step(state, tg[:, t], ctx, params)
        probs.append(output_distribution(state, ctx, params))
        alphas.append(alpha)
    out_targets = tg[:, 1 : steps + 1]
    mask = (np.arange(steps)[None, :] < scored[:, None]).astype(np.float64)
    return TeacherForcedOutput(T.stack(probs, axis=1), T.stack(alphas, axis=1), mask, out_targets)
