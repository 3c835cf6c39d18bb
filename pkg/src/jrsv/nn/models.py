"""The separator and recognizer networks, their configs and the token vocabulary."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from .layers import ConformerBlock, DecoderBlock, LayerNorm, Linear, Module, param, sinusoidal_positions, \
    uniform_init, causal_mask

# log(mag + floor) compresses magnitudes before they enter either network
INPUT_FLOOR = 1e-2


@dataclass(frozen=True)
class ConformerConfig:
    n_blocks: int = 2
    d_model: int = 32
    n_heads: int = 2
    d_ffn: int = 64
    conv_kernel: int = 9
    use_relative_pe: bool = True
    dropout_rate: float = 0.0
    max_rel_dist: int = 32

    def __post_init__(self):
        for name in ("n_blocks", "d_model", "n_heads", "d_ffn", "conv_kernel"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.conv_kernel % 2 != 1:
            raise ValueError("conv_kernel must be odd")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")


@dataclass(frozen=True)
class SeparatorConfig:
    encoder: ConformerConfig = field(default_factory=ConformerConfig)
    n_bins: int = 513
    # "magnitude": ReLU heads regress magnitudes; "mask": sigmoid heads scale the mixture
    output: str = "mask"

    def __post_init__(self):
        if self.output not in ("magnitude", "mask"):
            raise ValueError(f"unknown separator output mode {self.output!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SeparatorConfig":
        d = dict(d)
        d["encoder"] = ConformerConfig(**d.get("encoder", {}))
        return cls(**d)


@dataclass(frozen=True)
class AsrConfig:
    encoder: ConformerConfig = field(default_factory=ConformerConfig)
    input_dim: int = 513
    vocab_size: int = 10  # non-blank ids 1..vocab_size; blank is 0, eos is vocab_size
    subsample_channels: int = 8
    decoder_blocks: int = 2
    decoder_heads: int = 2
    decoder_ffn: int = 64
    log_input: bool = True  # False for features that are already logarithmic (FBANK)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AsrConfig":
        d = dict(d)
        d["encoder"] = ConformerConfig(**d.get("encoder", {}))
        return cls(**d)


# Full-size settings; the toy defaults above are what tests and demos train.
FULL_SCALE_SEPARATOR = SeparatorConfig(ConformerConfig(16, 256, 8, 1024, 33, True))
FULL_SCALE_ASR_ENCODER = ConformerConfig(12, 256, 4, 2048, 15, True, 0.1)


def full_scale_asr_config(vocab_size: int, input_dim: int = 513) -> AsrConfig:
    return AsrConfig(FULL_SCALE_ASR_ENCODER, input_dim, vocab_size, subsample_channels=256, decoder_blocks=6,
                     decoder_heads=4, decoder_ffn=2048)


class Vocab:
    """Character vocabulary: 0 blank, 1 unk, characters, last id is sos/eos."""

    BLANK = 0
    UNK = 1

    def __init__(self, chars):
        self.chars = sorted(set(chars))
        self._ids = {c: i + 2 for i, c in enumerate(self.chars)}

    @property
    def eos(self) -> int:
        return len(self.chars) + 2

    @property
    def size(self) -> int:
        """Number of non-blank ids, i.e. V; CTC emits V + 1 columns."""
        return len(self.chars) + 2

    def encode(self, text: str) -> list[int]:
        return [self._ids.get(c, self.UNK) for c in text if not c.isspace()]

    def decode(self, ids) -> str:
        out = []
        for i in ids:
            if 2 <= i < self.eos:
                out.append(self.chars[i - 2])
        return "".join(out)

    @classmethod
    def from_texts(cls, texts) -> "Vocab":
        return cls(c for t in texts for c in t if not c.isspace())


def _as_input(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def compress(x: Tensor) -> Tensor:
    if np.any(x.value < 0):
        raise ValueError("magnitude input must be non-negative")
    return ad.log(x + INPUT_FLOOR)


class ConformerStack(Module):
    def __init__(self, cfg: ConformerConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.blocks = [
            ConformerBlock(cfg.d_model, cfg.n_heads, cfg.d_ffn, cfg.conv_kernel, rng, cfg.use_relative_pe,
                           cfg.max_rel_dist, cfg.dropout_rate)
            for _ in range(cfg.n_blocks)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        if not self.cfg.use_relative_pe:
            x = x + sinusoidal_positions(x.shape[0], self.cfg.d_model)
        for block in self.blocks:
            x = block(x)
        return x


class SeparatorModel(Module):
    """Mixture magnitude [T, bins] -> (speech magnitude, singing magnitude)."""

    kind = "separator"

    def __init__(self, cfg: SeparatorConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.config = cfg
        d = cfg.encoder.d_model
        self.input_proj = Linear(cfg.n_bins, d, rng)
        self.encoder = ConformerStack(cfg.encoder, rng)
        self.speech_head = Linear(d, cfg.n_bins, rng)
        self.sing_head = Linear(d, cfg.n_bins, rng)

    def __call__(self, mags) -> tuple[Tensor, Tensor]:
        x = _as_input(mags)
        if x.ndim != 2 or x.shape[1] != self.config.n_bins:
            raise ValueError(f"separator expects [frames, {self.config.n_bins}], got {x.shape}")
        h = self.encoder(self.input_proj(compress(x)))
        if self.config.output == "mask":
            return ad.sigmoid(self.speech_head(h)) * x, ad.sigmoid(self.sing_head(h)) * x
        return ad.relu(self.speech_head(h)), ad.relu(self.sing_head(h))


def subsampled_length(n_frames: int) -> int:
    """Frames after two valid 3x3 stride-2 convolutions: ((T - 1)//2 - 1)//2."""
    return ((n_frames - 3) // 2 + 1 - 3) // 2 + 1


MIN_INPUT_FRAMES = 8


class AsrModel(Module):
    """Conv2d x4 subsampler + Conformer encoder, CTC head and transformer rescorer."""

    kind = "asr"

    def __init__(self, cfg: AsrConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.config = cfg
        d = cfg.encoder.d_model
        c = cfg.subsample_channels
        self.conv1_w = param(uniform_init(rng, 9, (c, 1, 3, 3)))
        self.conv1_b = param(np.zeros(c))
        self.conv2_w = param(uniform_init(rng, 9 * c, (c, c, 3, 3)))
        self.conv2_b = param(np.zeros(c))
        f_out = ((cfg.input_dim - 3) // 2 + 1 - 3) // 2 + 1
        self.subsample_proj = Linear(c * f_out, d, rng)
        self.encoder = ConformerStack(cfg.encoder, rng)
        self.ctc_head = Linear(d, cfg.vocab_size + 1, rng)
        self.embed = param(rng.normal(0.0, d ** -0.5, size=(cfg.vocab_size + 1, d)))
        self.decoder = [
            DecoderBlock(d, cfg.decoder_heads, cfg.decoder_ffn, rng, cfg.encoder.dropout_rate)
            for _ in range(cfg.decoder_blocks)
        ]
        self.decoder_norm = LayerNorm(d)
        self.decoder_out = Linear(d, cfg.vocab_size + 1, rng)

    @property
    def eos(self) -> int:
        return self.config.vocab_size

    def encode(self, features) -> Tensor:
        """Features [T, input_dim] -> acoustic representation [subsampled_length(T), d_model]."""
        x = _as_input(features)
        if x.ndim != 2 or x.shape[1] != self.config.input_dim:
            raise ValueError(f"encoder expects [frames, {self.config.input_dim}], got {x.shape}")
        if x.shape[0] < MIN_INPUT_FRAMES:
            raise ValueError(f"encoder needs at least {MIN_INPUT_FRAMES} frames, got {x.shape[0]}")
        if self.config.log_input:
            x = compress(x)
        h = ad.reshape(x, (1,) + x.shape)
        h = ad.relu(ad.conv2d(h, self.conv1_w, self.conv1_b, stride=(2, 2)))
        h = ad.relu(ad.conv2d(h, self.conv2_w, self.conv2_b, stride=(2, 2)))
        c, t, f = h.shape
        h = ad.reshape(ad.transpose(h, (1, 0, 2)), (t, c * f))
        h = ad.scalar_mul(self.subsample_proj(h), np.sqrt(self.config.encoder.d_model))
        return self.encoder(h)

    def ctc_logprobs(self, enc: Tensor) -> Tensor:
        return ad.log_softmax(self.ctc_head(enc), axis=-1)

    def decoder_logprobs(self, enc: Tensor, tokens) -> Tensor:
        """Teacher-forced log-probs [len(tokens) + 1, V + 1] for inputs sos + tokens."""
        tokens = [int(t) for t in tokens]
        if any(t < 1 or t >= self.eos for t in tokens):
            raise ValueError(f"token id out of range [1, {self.eos})")
        ids = np.array([self.eos] + tokens)
        d = self.config.encoder.d_model
        x = ad.scalar_mul(ad.embedding_lookup(self.embed, ids), np.sqrt(d)) + sinusoidal_positions(len(ids), d)
        mask = causal_mask(len(ids))
        for block in self.decoder:
            x = block(x, enc, mask)
        return ad.log_softmax(self.decoder_out(self.decoder_norm(x)), axis=-1)

    def rescorer_logprob(self, enc: Tensor, tokens) -> float:
        """log P(tokens, eos | enc) under the attention decoder."""
        with ad.no_grad():
            lp = self.decoder_logprobs(enc, tokens).value
        targets = list(tokens) + [self.eos]
        return float(lp[np.arange(len(targets)), targets].sum())
