"""Building blocks: linear maps, norms, attention, Conformer and decoder blocks.

All sequence tensors are time-major ``[T, d]`` for a single utterance.
"""

from __future__ import annotations

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor


class Module:
    """Parameter container; parameters are found by walking attributes in definition order."""

    training = False
    _rng: np.random.Generator | None = None

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def modules(self):
        yield self
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True, rng: np.random.Generator | None = None):
        for m in self.modules():
            m.training = mode
            m._rng = rng
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def n_params(self) -> int:
        return sum(p.size for p in self.parameters().values())


def param(value) -> Tensor:
    return Tensor(value, requires_grad=True, op="param")


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = param(uniform_init(rng, d_in, (d_in, d_out)))
        self.bias = param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.weight = param(np.ones(d))
        self.bias = param(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.weight, self.bias, self.eps)


class Dropout(Module):
    def __init__(self, rate: float):
        self.rate = rate

    def __call__(self, x: Tensor) -> Tensor:
        if not self.training or self.rate <= 0.0 or self._rng is None:
            return x
        mask = self._rng.random(x.shape) >= self.rate
        return ad.dropout(x, mask, self.rate)


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(0, d, 2)[None, :]
    angle = pos / (10000.0 ** (i / d))
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d // 2])
    return pe


def causal_mask(n: int) -> np.ndarray:
    """Additive mask: 0 on and below the diagonal, -1e9 above."""
    return np.triu(np.full((n, n), -1e9), k=1)


class MultiHeadAttention(Module):
    """Scaled dot-product attention with an optional learned relative-position bias.

    The bias is a per-head scalar indexed by the clipped offset ``j - i`` in
    ``[-max_rel_dist, max_rel_dist]``.
    """

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator, relative: bool = False,
                 max_rel_dist: int = 32, dropout_rate: float = 0.0):
        if d_model % n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q = Linear(d_model, d_model, rng)
        self.k = Linear(d_model, d_model, rng, bias=False)  # a key bias cancels in the softmax
        self.v = Linear(d_model, d_model, rng)
        self.out = Linear(d_model, d_model, rng)
        self.max_rel_dist = max_rel_dist
        self.rel_bias = param(np.zeros((2 * max_rel_dist + 1, n_heads))) if relative else None
        self.drop = Dropout(dropout_rate)

    def _split(self, x: Tensor) -> Tensor:
        n = x.shape[0]
        return ad.transpose(ad.reshape(x, (n, self.n_heads, self.d_head)), (1, 0, 2))

    def __call__(self, x: Tensor, memory: Tensor | None = None, mask: np.ndarray | None = None) -> Tensor:
        src = x if memory is None else memory
        q = self._split(self.q(x))
        k = self._split(self.k(src))
        v = self._split(self.v(src))
        scores = ad.scalar_mul(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(self.d_head))
        if self.rel_bias is not None:
            tq, tk = x.shape[0], src.shape[0]
            offsets = np.arange(tk)[None, :] - np.arange(tq)[:, None]
            idx = np.clip(offsets, -self.max_rel_dist, self.max_rel_dist) + self.max_rel_dist
            bias = ad.transpose(ad.embedding_lookup(self.rel_bias, idx), (2, 0, 1))
            scores = scores + bias
        if mask is not None:
            scores = scores + mask
        attn = self.drop(ad.softmax(scores, axis=-1))
        ctx = ad.matmul(attn, v)
        n = x.shape[0]
        ctx = ad.reshape(ad.transpose(ctx, (1, 0, 2)), (n, self.n_heads * self.d_head))
        return self.out(ctx)


class FeedForward(Module):
    def __init__(self, d_model: int, d_ffn: int, rng: np.random.Generator, dropout_rate: float = 0.0,
                 activation: str = "swish"):
        self.norm = LayerNorm(d_model)
        self.w1 = Linear(d_model, d_ffn, rng)
        self.w2 = Linear(d_ffn, d_model, rng)
        self.drop = Dropout(dropout_rate)
        self.activation = activation

    def __call__(self, x: Tensor, prenorm: bool = True) -> Tensor:
        h = self.norm(x) if prenorm else x
        h = self.w1(h)
        h = ad.swish(h) if self.activation == "swish" else ad.relu(h)
        return self.w2(self.drop(h))


class ConvModule(Module):
    """LN -> pointwise (2d) -> GLU -> depthwise(k) -> LN -> swish -> pointwise."""

    def __init__(self, d_model: int, kernel: int, rng: np.random.Generator, dropout_rate: float = 0.0):
        if kernel % 2 != 1:
            raise ValueError("conv_kernel must be odd")
        self.norm = LayerNorm(d_model)
        self.pw1 = Linear(d_model, 2 * d_model, rng)
        self.dw_weight = param(uniform_init(rng, kernel, (d_model, kernel)))
        self.dw_bias = param(np.zeros(d_model))
        self.dw_norm = LayerNorm(d_model)
        self.pw2 = Linear(d_model, d_model, rng)
        self.drop = Dropout(dropout_rate)
        self.d_model = d_model

    def __call__(self, x: Tensor) -> Tensor:
        h = self.pw1(self.norm(x))
        d = self.d_model
        h = h[:, :d] * ad.sigmoid(h[:, d:])
        h = ad.depthwise_conv1d(h, self.dw_weight, self.dw_bias)
        h = ad.swish(self.dw_norm(h))
        return self.drop(self.pw2(h))


class ConformerBlock(Module):
    """Half-step FFN, MHSA, convolution, half-step FFN, final LayerNorm."""

    def __init__(self, d_model: int, n_heads: int, d_ffn: int, kernel: int, rng: np.random.Generator,
                 relative: bool = False, max_rel_dist: int = 32, dropout_rate: float = 0.0):
        self.ff1 = FeedForward(d_model, d_ffn, rng, dropout_rate)
        self.attn_norm = LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, n_heads, rng, relative, max_rel_dist, dropout_rate)
        self.attn_drop = Dropout(dropout_rate)
        self.conv = ConvModule(d_model, kernel, rng, dropout_rate)
        self.ff2 = FeedForward(d_model, d_ffn, rng, dropout_rate)
        self.final_norm = LayerNorm(d_model)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + ad.scalar_mul(self.ff1(x), 0.5)
        x = x + self.attn_drop(self.attn(self.attn_norm(x)))
        x = x + self.conv(x)
        x = x + ad.scalar_mul(self.ff2(x), 0.5)
        return self.final_norm(x)


class DecoderBlock(Module):
    """Pre-norm transformer decoder block: causal self-attention, cross-attention, FFN."""

    def __init__(self, d_model: int, n_heads: int, d_ffn: int, rng: np.random.Generator, dropout_rate: float = 0.0):
        self.self_norm = LayerNorm(d_model)
        self.self_attn = MultiHeadAttention(d_model, n_heads, rng, dropout_rate=dropout_rate)
        self.cross_norm = LayerNorm(d_model)
        self.cross_attn = MultiHeadAttention(d_model, n_heads, rng, dropout_rate=dropout_rate)
        self.ff = FeedForward(d_model, d_ffn, rng, dropout_rate, activation="relu")

    def __call__(self, x: Tensor, memory: Tensor, mask: np.ndarray) -> Tensor:
        x = x + self.self_attn(self.self_norm(x), mask=mask)
        x = x + self.cross_attn(self.cross_norm(x), memory=memory)
        return x + self.ff(x)
