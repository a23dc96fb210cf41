"""The full recurrent attention network: encoder, attention and decoder parameters together."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .attention import AttentionParams, init_attention
from .decoder import (
    DecodeResult,
    DecoderParams,
    LabelVocabulary,
    TeacherForcedOutput,
    decode_batch,
    decode_teacher_forced,
    init_decoder,
)
from .encoder import EncoderConfig, EncoderParams, FeatureMap, encode, init_encoder
from .tensor import Tensor


@dataclass(frozen=True)
class RANConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    hidden_size: int = 128
    attention_width: int = 128
    embedding_dim: int = 32
    max_steps: int = 10  # label sequence length, START and END included

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"]["channels_per_stage"] = list(self.encoder.channels_per_stage)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RANConfig":
        d = dict(d)
        enc = dict(d.pop("encoder", {}))
        if "channels_per_stage" in enc:
            enc["channels_per_stage"] = tuple(enc["channels_per_stage"])
        return cls(encoder=EncoderConfig(**enc), **d)


@dataclass
class RANModel:
    config: RANConfig
    vocab: LabelVocabulary
    in_channels: int
    encoder: EncoderParams
    attention: AttentionParams
    decoder: DecoderParams

    @classmethod
    def create(cls, config: RANConfig, vocab: LabelVocabulary, in_channels: int, seed: int = 0) -> "RANModel":
        rng = np.random.default_rng(seed)
        d = config.encoder.feature_dim
        return cls(
            config=config,
            vocab=vocab,
            in_channels=in_channels,
            encoder=init_encoder(config.encoder, in_channels, rng),
            attention=init_attention(d, config.hidden_size, config.attention_width, rng),
            decoder=init_decoder(d, config.hidden_size, config.embedding_dim, len(vocab), rng),
        )

    def parameters(self) -> dict[str, Tensor]:
        out = self.encoder.named()
        out.update(self.attention.named())
        out.update(self.decoder.named())
        return out

    def load_parameters(self, values: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(values)
        if missing:
            raise ValueError(f"missing parameters: {sorted(missing)}")
        for name, tensor in params.items():
            arr = np.asarray(values[name], dtype=np.float64)
            if arr.shape != tensor.shape:
                raise ValueError(f"parameter {name}: shape {arr.shape} != {tensor.shape}")
            tensor.data = arr.copy()

    def features(self, windows) -> FeatureMap:
        return encode(windows, self.encoder, self.config.encoder)

    def teacher_forced(self, windows, targets) -> TeacherForcedOutput:
        return decode_teacher_forced(self.features(windows), targets, self.attention, self.decoder, self.vocab)

    def decode(self, windows, batch_size: int = 64) -> list[DecodeResult]:
        """Greedy decode of ``[N, time, modalities]`` windows."""
        windows = np.asarray(windows, dtype=np.float64)
        steps = self.config.max_steps - 1
        out: list[DecodeResult] = []
        for lo in range(0, len(windows), batch_size):
            feats = self.features(windows[lo : lo + batch_size])
            out.extend(decode_batch(feats, self.attention, self.decoder, self.vocab, steps))
        return out

    def quantized(self) -> "RANModel":
        """Copy with every parameter rounded through float32 (the checkpoint precision)."""
        clone = RANModel.create(self.config, self.vocab, self.in_channels)
        clone.load_parameters({k: v.data.astype(np.float32) for k, v in self.parameters().items()})
        return clone
