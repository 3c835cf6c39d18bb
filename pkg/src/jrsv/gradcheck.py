"""Finite-difference gradient suite over every primitive, both networks and every loss.

Each case builds a scalar function of a few tensors; :func:`run_suite`
compares analytic and central-difference gradients with
:func:`jrsv.autodiff.grad_check`.  Scalar outputs are contracted against a
fixed random weight tensor so that no gradient vanishes by symmetry (a plain
sum of a softmax, for instance, is constant).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .losses import (AsrLossWeights, MtassLossWeights, att_loss, ctc_loss, distill_loss, final_asr_loss,
                     joint_asr_loss, mtass_loss)
from .nn.models import AsrConfig, AsrModel, ConformerConfig, SeparatorConfig, SeparatorModel

TOLERANCE = 1e-4
MODULES = ("autodiff", "nn", "losses")


@dataclass
class Case:
    name: str
    module: str
    build: Callable[[np.random.Generator], tuple]  # -> (f, inputs, exclude)
    eps: float = 1e-5
    max_coords: int | None = None


@dataclass
class CaseResult:
    name: str
    module: str
    error: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < TOLERANCE)


def _t(a) -> Tensor:
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.uniform(margin, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _contract(rng, shape):
    w = rng.normal(size=shape)
    return lambda y: ad.sum_(y * w)


def _unary(op, positive=False, kinked=False):
    def build(rng):
        shape = (3, 4)
        if positive:
            x = rng.uniform(0.2, 2.0, size=shape)
        elif kinked:
            x = _away_from_zero(rng, shape)
        else:
            x = rng.normal(size=shape)
        c = _contract(rng, shape)
        return (lambda a: c(op(a))), [_t(x)], ()
    return build


def _binary(op, b_shape=(3, 4)):
    def build(rng):
        a, b = _t(rng.normal(size=(3, 4))), _t(rng.normal(size=b_shape))
        c = _contract(rng, np.broadcast_shapes((3, 4), b_shape))
        return (lambda x, y: c(op(x, y))), [a, b], ()
    return build


def _matmul(rng):
    a, b = _t(rng.normal(size=(2, 3, 4))), _t(rng.normal(size=(4, 5)))
    c = _contract(rng, (2, 3, 5))
    return (lambda x, y: c(ad.matmul(x, y))), [a, b], ()


def _shape_op(op, in_shape, out_shape):
    def build(rng):
        c = _contract(rng, out_shape)
        return (lambda a: c(op(a))), [_t(rng.normal(size=in_shape))], ()
    return build


def _concat(rng):
    a, b = _t(rng.normal(size=(2, 3))), _t(rng.normal(size=(4, 3)))
    c = _contract(rng, (6, 3))
    return (lambda x, y: c(ad.concat([x, y], axis=0))), [a, b], ()


def _layer_norm(rng):
    x, w, b = _t(rng.normal(size=(4, 6))), _t(rng.normal(size=6)), _t(rng.normal(size=6))
    c = _contract(rng, (4, 6))
    return (lambda a, g, h: c(ad.layer_norm(a, g, h))), [x, w, b], ()


def _embedding(rng):
    ids = np.array([[0, 2], [2, 3]])
    c = _contract(rng, (2, 2, 3))
    return (lambda t: c(ad.embedding_lookup(t, ids))), [_t(rng.normal(size=(5, 3)))], ()


def _dropout(rng):
    mask = rng.random((3, 4)) >= 0.3
    c = _contract(rng, (3, 4))
    return (lambda a: c(ad.dropout(a, mask, 0.3))), [_t(rng.normal(size=(3, 4)))], ()


def _depthwise(rng):
    x, w, b = _t(rng.normal(size=(7, 3))), _t(rng.normal(size=(3, 5))), _t(rng.normal(size=3))
    c = _contract(rng, (7, 3))
    return (lambda a, k, h: c(ad.depthwise_conv1d(a, k, h))), [x, w, b], ()


def _pointwise(rng):
    x, w, b = _t(rng.normal(size=(5, 3))), _t(rng.normal(size=(3, 4))), _t(rng.normal(size=4))
    c = _contract(rng, (5, 4))
    return (lambda a, k, h: c(ad.pointwise_conv1d(a, k, h))), [x, w, b], ()


def _conv2d(rng):
    x, w, b = _t(rng.normal(size=(2, 9, 8))), _t(rng.normal(size=(3, 2, 3, 3))), _t(rng.normal(size=3))
    c = _contract(rng, (3, 4, 3))
    return (lambda a, k, h: c(ad.conv2d(a, k, h, stride=(2, 2)))), [x, w, b], ()


# -- networks ------------------------------------------------------------------------------

_TOY_ENCODER = ConformerConfig(n_blocks=1, d_model=8, n_heads=2, d_ffn=16, conv_kernel=3)


def _separator(output):
    def build(rng):
        model = SeparatorModel(SeparatorConfig(_TOY_ENCODER, n_bins=9, output=output), seed=1)
        mags = _t(rng.uniform(0.1, 1.0, size=(6, 9)))
        c1, c2 = _contract(rng, (6, 9)), _contract(rng, (6, 9))

        def f(x, *params):
            sp, sg = model(x)
            return c1(sp) + c2(sg)

        return f, [mags] + list(model.parameters().values()), ()
    return build


def _asr(rng):
    cfg = AsrConfig(_TOY_ENCODER, input_dim=16, vocab_size=4, subsample_channels=2, decoder_blocks=1,
                    decoder_heads=2, decoder_ffn=16)
    model = AsrModel(cfg, seed=1)
    feats = _t(rng.uniform(0.1, 1.0, size=(12, 16)))

    def f(x, *params):
        enc = model.encode(x)
        return ctc_loss(model.ctc_logprobs(enc), [1, 2]) + att_loss(model.decoder_logprobs(enc, [1, 2]), [1, 2, 4])

    return f, [feats] + list(model.parameters().values()), ()


# -- losses --------------------------------------------------------------------------------------

def _mtass(rng):
    shapes = (5, 4)
    ts = [_t(rng.uniform(0.0, 2.0, size=shapes)) for _ in range(4)]

    def f(es, eg, rs, rg):
        return mtass_loss(es, eg, rs, rg, MtassLossWeights(0.1, 0.3)).total

    return f, ts, ()


def _ctc(target):
    def build(rng):
        logits = rng.normal(size=(6, 4))
        return (lambda z: ctc_loss(ad.log_softmax(z, axis=-1), target)), [_t(logits)], ()
    return build


def _att(smoothing):
    def build(rng):
        return (lambda z: att_loss(ad.log_softmax(z, axis=-1), [1, 3, 2, 4], smoothing)), \
            [_t(rng.normal(size=(4, 5)))], ()
    return build


def _joint(rng):
    return (lambda a, b: joint_asr_loss(a, b, 0.3)), [_t(rng.uniform(1, 3)), _t(rng.uniform(1, 3))], ()


def _distill(rng):
    ts = [_t(rng.normal(size=(3, 4))) for _ in range(4)]
    # clean representations sit behind stop_gradient; only the separated ones are compared
    return (lambda a, b, c, d: distill_loss(a, b, c, d)), ts, (2, 3)


def _final(rng):
    ts = [_t(rng.uniform(1, 3)) for _ in range(3)]
    return (lambda a, b, c: final_asr_loss(a, b, c, AsrLossWeights(0.3, 0.001)).total), ts, ()


CASES: list[Case] = [
    Case("add", "autodiff", _binary(ad.add, (4,))),
    Case("sub", "autodiff", _binary(ad.sub, (3, 1))),
    Case("mul", "autodiff", _binary(ad.mul)),
    Case("scalar_mul", "autodiff", _unary(lambda a: ad.scalar_mul(a, -2.5))),
    Case("reciprocal", "autodiff", _unary(ad.reciprocal, positive=True)),
    Case("square", "autodiff", _unary(ad.square)),
    Case("sqrt", "autodiff", _unary(ad.sqrt, positive=True)),
    Case("matmul", "autodiff", _matmul),
    Case("transpose", "autodiff", _shape_op(lambda a: ad.transpose(a, (2, 0, 1)), (2, 3, 4), (4, 2, 3))),
    Case("reshape", "autodiff", _shape_op(lambda a: ad.reshape(a, (6, 2)), (3, 4), (6, 2))),
    Case("concat", "autodiff", _concat),
    Case("slice_basic", "autodiff", _shape_op(lambda a: a[1:, ::2], (4, 5), (3, 3))),
    Case("slice_fancy", "autodiff", _shape_op(lambda a: ad.slice_(a, np.array([0, 2, 2])), (4, 3), (3, 3))),
    Case("pad", "autodiff", _shape_op(lambda a: ad.pad(a, ((1, 2), (0, 1))), (3, 4), (6, 5))),
    Case("sum_axis", "autodiff", _shape_op(lambda a: ad.sum_(a, axis=1), (3, 4), (3,))),
    Case("mean_axis", "autodiff", _shape_op(lambda a: ad.mean(a, axis=0, keepdims=True), (3, 4), (1, 4))),
    Case("abs", "autodiff", _unary(ad.abs_, kinked=True)),
    Case("relu", "autodiff", _unary(ad.relu, kinked=True)),
    Case("sigmoid", "autodiff", _unary(ad.sigmoid)),
    Case("swish", "autodiff", _unary(ad.swish)),
    Case("tanh", "autodiff", _unary(ad.tanh)),
    Case("exp", "autodiff", _unary(ad.exp)),
    Case("log", "autodiff", _unary(ad.log, positive=True)),
    Case("softmax", "autodiff", _unary(lambda a: ad.softmax(a, axis=-1))),
    Case("log_softmax", "autodiff", _unary(lambda a: ad.log_softmax(a, axis=0))),
    Case("layer_norm", "autodiff", _layer_norm),
    Case("embedding_lookup", "autodiff", _embedding),
    Case("dropout", "autodiff", _dropout),
    Case("depthwise_conv1d", "autodiff", _depthwise),
    Case("pointwise_conv1d", "autodiff", _pointwise),
    Case("conv2d", "autodiff", _conv2d),
    Case("separator_mask", "nn", _separator("mask")),
    Case("separator_magnitude", "nn", _separator("magnitude")),
    Case("asr_model", "nn", _asr),
    Case("mtass_loss", "losses", _mtass),
    Case("ctc_loss", "losses", _ctc([1, 2, 2])),
    Case("ctc_loss_single", "losses", _ctc([3])),
    Case("att_loss", "losses", _att(0.0)),
    Case("att_loss_smoothed", "losses", _att(0.1)),
    Case("joint_asr_loss", "losses", _joint),
    Case("distill_loss", "losses", _distill),
    Case("final_asr_loss", "losses", _final),
]


def cases_for(module: str = "all") -> list[Case]:
    if module != "all" and module not in MODULES:
        raise ValueError(f"unknown gradcheck module {module!r}; choose from {('all',) + MODULES}")
    return [c for c in CASES if module == "all" or c.module == module]


def run_case(case: Case, seed: int = 0) -> CaseResult:
    rng = np.random.default_rng(seed)
    f, inputs, exclude = case.build(rng)
    err = ad.grad_check(f, inputs, eps=case.eps, max_coords=case.max_coords, rng=rng, exclude=exclude)
    return CaseResult(case.name, case.module, err)


def run_suite(module: str = "all", seed: int = 0) -> list[CaseResult]:
    return [run_case(c, seed) for c in cases_for(module)]
