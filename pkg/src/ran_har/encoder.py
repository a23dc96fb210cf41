"""Convolutional feature extractor and the baseline CNN classifier."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class EncoderConfig:
    channels_per_stage: tuple[int, ...] = (16, 32, 64, 128)
    kernel_size: int = 5
    pool_size: int = 2

    def __post_init__(self):
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        if self.pool_size < 2:
            raise ValueError("pool_size must be >= 2")
        if len(self.channels_per_stage) < 1:
            raise ValueError("need at least one convolution stage")

    @property
    def pool_count(self) -> int:
        return len(self.channels_per_stage) - 1

    @property
    def stride(self) -> int:
        """Raw samples per feature position (pool_size ** pool_count)."""
        return self.pool_size**self.pool_count

    @property
    def feature_dim(self) -> int:
        return self.channels_per_stage[-1]

    def feature_length(self, window_length: int) -> int:
        return window_length // self.stride


@dataclass
class EncoderParams:
    kernels: list[Tensor]
    biases: list[Tensor]

    def named(self, prefix: str = "encoder") -> dict[str, Tensor]:
        out = {}
        for i, (k, b) in enumerate(zip(self.kernels, self.biases)):
            out[f"{prefix}.conv{i}.kernel"] = k
            out[f"{prefix}.conv{i}.bias"] = b
        return out


@dataclass
class FeatureMap:
    """Encoder output: ``vectors`` is ``[L, D]`` or ``[batch, L, D]``."""

    vectors: Tensor

    @property
    def length(self) -> int:
        return self.vectors.shape[-2]

    @property
    def dim(self) -> int:
        return self.vectors.shape[-1]


def glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def init_encoder(config: EncoderConfig, in_channels: int, rng: np.random.Generator) -> EncoderParams:
    kernels, biases = [], []
    c_in = in_channels
    k = config.kernel_size
    for c_out in config.channels_per_stage:
        kernels.append(glorot(rng, (k, c_in, c_out), k * c_in, k * c_out))
        biases.append(zeros((c_out,)))
        c_in = c_out
    return EncoderParams(kernels, biases)


def encode(window, params: EncoderParams, config: EncoderConfig) -> FeatureMap:
    """Conv-tanh stages with a max-pool between consecutive stages.

    ``window`` is ``[time, modalities]`` or ``[batch, time, modalities]``.
    """
    x = window if isinstance(window, Tensor) else Tensor(window)
    steps = x.shape[-2]
    if steps < config.stride:
        raise ValueError(f"window of {steps} samples is shorter than the feature stride {config.stride}")
    if x.shape[-1] < 1:
        raise ValueError("window needs at least one modality")
    last = len(params.kernels) - 1
    for i, (k, b) in enumerate(zip(params.kernels, params.biases)):
        x = T.tanh(T.conv1d(x, k, b))
        if i < last:
            x = T.maxpool1d(x, config.pool_size)
    return FeatureMap(x)


# baseline ------------------------------------------------------------------


@dataclass(frozen=True)
class BaselineConfig:
    """Plain CNN classifier: conv stages, pools between them, one hidden dense layer."""

    channels_per_stage: tuple[int, ...] = (32, 64, 128)
    kernel_size: int = 5
    pool_size: int = 2
    hidden_units: int = 100

    @property
    def encoder(self) -> EncoderConfig:
        return EncoderConfig(self.channels_per_stage, self.kernel_size, self.pool_size)


@dataclass
class BaselineParams:
    encoder: EncoderParams
    hidden_weight: Tensor
    hidden_bias: Tensor
    out_weight: Tensor
    out_bias: Tensor

    def named(self) -> dict[str, Tensor]:
        out = self.encoder.named("baseline.encoder")
        out.update(
            {
                "baseline.hidden.weight": self.hidden_weight,
                "baseline.hidden.bias": self.hidden_bias,
                "baseline.out.weight": self.out_weight,
                "baseline.out.bias": self.out_bias,
            }
        )
        return out


def init_baseline(
    config: BaselineConfig, window_length: int, in_channels: int, num_classes: int, rng: np.random.Generator
) -> BaselineParams:
    enc = init_encoder(config.encoder, in_channels, rng)
    flat = config.encoder.feature_length(window_length) * config.encoder.feature_dim
    h = config.hidden_units
    return BaselineParams(
        encoder=enc,
        hidden_weight=glorot(rng, (flat, h), flat, h),
        hidden_bias=zeros((h,)),
        # zero classifier: an untrained model predicts the uniform distribution
        out_weight=zeros((h, num_classes)),
        out_bias=zeros((num_classes,)),
    )


def baseline_logits(window, params: BaselineParams, config: BaselineConfig) -> Tensor:
    feats = encode(window, params.encoder, config.encoder).vectors
    batched = feats.ndim == 3
    flat_shape = (feats.shape[0], -1) if batched else (-1,)
    flat = T.reshape(feats, flat_shape)
    hidden = T.tanh(T.dense(flat, params.hidden_weight, params.hidden_bias))
    return T.dense(hidden, params.out_weight, params.out_bias)


def baseline_cnn_forward(window, params: BaselineParams, config: BaselineConfig) -> Tensor:
    """Class probabilities for one window (or a batch of windows)."""
    return T.softmax(baseline_logits(window, params, config))

