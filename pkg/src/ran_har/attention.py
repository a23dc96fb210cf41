"""Additive soft attention over encoder feature positions."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoder import FeatureMap, glorot, zeros
from .tensor import Tensor


@dataclass
class AttentionParams:
    feature_projection: Tensor  # [D, A]
    hidden_projection: Tensor  # [H, A]
    hidden_bias: Tensor  # [A]
    score_vector: Tensor  # [A]

    def named(self, prefix: str = "attention") -> dict[str, Tensor]:
        return {
            f"{prefix}.feature_projection": self.feature_projection,
            f"{prefix}.hidden_projection": self.hidden_projection,
            f"{prefix}.hidden_bias": self.hidden_bias,
            f"{prefix}.score_vector": self.score_vector,
        }


def init_attention(feature_dim: int, hidden: int, width: int, rng: np.random.Generator) -> AttentionParams:
    return AttentionParams(
        feature_projection=glorot(rng, (feature_dim, width), feature_dim, width),
        hidden_projection=glorot(rng, (hidden, width), hidden, width),
        hidden_bias=zeros((width,)),
        score_vector=glorot(rng, (width,), width, 1),
    )


@dataclass
class AttentionMap:
    """Per-step attention weights and raw scores, each ``[L]`` (or ``[batch, L]``)."""

    weights: list[Tensor] = field(default_factory=list)
    scores: list[Tensor] = field(default_factory=list)

    @property
    def steps(self) -> int:
        return len(self.weights)

    def append(self, alpha: Tensor, scores: Tensor) -> None:
        self.weights.append(alpha)
        self.scores.append(scores)

    def as_array(self) -> np.ndarray:
        """Weights stacked to ``[steps, L]`` (``[batch, steps, L]`` when batched)."""
        if not self.weights:
            return np.zeros((0, 0))
        return np.stack([w.data for w in self.weights], axis=-2)


@dataclass
class ContextVector:
    z: Tensor


def project_features(features: FeatureMap, params: AttentionParams) -> Tensor:
    """Step-independent part of the score input, computed once per window."""
    return T.matmul(features.vectors, params.feature_projection)


def attend(
    features: FeatureMap,
    prev_hidden: Tensor,
    params: AttentionParams,
    projected: Tensor | None = None,
) -> tuple[Tensor, Tensor, ContextVector]:
    """One attention step: returns ``(alpha, scores, context)``.

    ``scores[i] = w . tanh(U a_i + W_h h + b_h)``, ``alpha = softmax(scores)``,
    ``context = sum_i alpha[i] a_i``. Pass ``projected`` to reuse
    :func:`project_features` across steps.
    """
    if features.length == 0:
        raise ValueError("attention needs at least one feature position")
    if projected is None:
        projected = project_features(features, params)
    hid = T.dense(prev_hidden, params.hidden_projection, params.hidden_bias)
    # broadcast the hidden term over the L positions
    hid = T.reshape(hid, hid.shape[:-1] + (1, hid.shape[-1]))
    scores = T.matmul(T.tanh(T.add(projected, hid)), params.score_vector)
    alpha = T.softmax(scores, axis=-1)
    z = T.weighted_sum(alpha, features.vectors)
    return alpha, scores, ContextVector(z)


def attention_record(sample_id, alphas: np.ndarray, labels: list[str]) -> dict:
    """JSON-ready record: one entry per decoded step."""
    return {
        "sample_id": sample_id,
        "steps": [
            {"step": t + 1, "predicted_label": label, "alpha": [float(a) for a in alphas[t]]}
            for t, label in enumerate(labels)
        ],
    }


def dump_attention(records: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(records, fh, indent=1)
