"""Training objectives for the separator and the recognizer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor

BLANK = 0


@dataclass(frozen=True)
class MtassLossWeights:
    lam: float = 0.1
    gamma: float = 0.3

    def __post_init__(self):
        if self.lam < 0 or self.gamma < 0:
            raise ValueError("MTASS loss weights must be non-negative")


@dataclass(frozen=True)
class AsrLossWeights:
    alpha: float = 0.3
    beta: float = 0.001

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")


@dataclass
class LossBreakdown:
    total: Tensor
    parts: dict[str, float] = field(default_factory=dict)

    @property
    def value(self) -> float:
        return self.total.item()


def _check_same_shape(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def l1_utt(a, b) -> Tensor:
    """Utterance-level L1 distance: the mean of |a - b| over every entry."""
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b)
    return ad.mean(ad.abs_(a - b))


def mtass_loss(est_speech, est_sing, ref_speech, ref_sing, w: MtassLossWeights = MtassLossWeights()) -> LossBreakdown:
    """total = L_mag - lam * L_dis + gamma * L_cst."""
    est_speech, est_sing = as_tensor(est_speech), as_tensor(est_sing)
    ref_speech, ref_sing = as_tensor(ref_speech), as_tensor(ref_sing)
    for t in (est_sing, ref_speech, ref_sing):
        _check_same_shape(est_speech, t)
    mag = l1_utt(est_speech, ref_speech) + l1_utt(est_sing, ref_sing)
    dis = l1_utt(est_speech, ref_sing) + l1_utt(est_sing, ref_speech)
    cst = l1_utt(est_speech + est_sing, ref_speech + ref_sing)
    total = mag - ad.scalar_mul(dis, w.lam) + ad.scalar_mul(cst, w.gamma)
    return LossBreakdown(total, {"mag": mag.item(), "dis": dis.item(), "cst": cst.item()})


# -- CTC ---------------------------------------------------------------------------

def ctc_min_frames(target) -> int:
    """Shortest input that admits an alignment: one frame per label plus a blank between repeats."""
    target = list(target)
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _ctc_tables(lp: np.ndarray, target: list[int]):
    T = lp.shape[0]
    ext = np.full(2 * len(target) + 1, BLANK, dtype=np.int64)
    ext[1::2] = target
    S = len(ext)
    skip = np.zeros(S, dtype=bool)
    skip[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])
    emit = lp[:, ext]  # [T, S]

    alpha = np.full((T, S), -np.inf)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + emit[t]

    beta = np.full((T, S), -np.inf)
    beta[T - 1, S - 1] = emit[T - 1, S - 1]
    if S > 1:
        beta[T - 1, S - 2] = emit[T - 1, S - 2]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip[2:], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc + emit[t]

    log_p = alpha[T - 1, S - 1] if S == 1 else np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2])
    return ext, emit, alpha, beta, float(log_p)


def ctc_loss(logprobs, target) -> Tensor:
    """-log sum over alignments of prod_t p(path_t), blank id 0.

    ``logprobs`` is [T, V + 1].  When the target cannot be aligned in T
    frames the loss is +inf with zero gradient; callers test
    ``np.isinf(loss.item())`` (or :func:`ctc_min_frames`) to skip such crops.
    """
    logprobs = as_tensor(logprobs)
    target = [int(t) for t in target]
    if any(t == BLANK for t in target):
        raise ValueError("CTC target must not contain the blank id")
    if any(t < 0 or t >= logprobs.shape[1] for t in target):
        raise ValueError("CTC target id out of range")
    lp = logprobs.value
    T = lp.shape[0]
    if T < ctc_min_frames(target):
        return ad._make(np.array(np.inf), (logprobs,), lambda g: (np.zeros(lp.shape),), "ctc_loss")
    ext, emit, alpha, beta, log_p = _ctc_tables(lp, target)

    def backward(g):
        occ = np.exp(alpha + beta - emit - log_p)  # [T, S]
        grad = np.zeros_like(lp)
        for s, k in enumerate(ext):
            grad[:, k] -= occ[:, s]
        return (g * grad,)

    return ad._make(np.array(-log_p), (logprobs,), backward, "ctc_loss")


# -- attention decoder ------------------------------------------------------------------

def att_loss(logprobs, targets, smoothing: float = 0.0) -> Tensor:
    """Token-wise cross-entropy averaged over steps.

    ``logprobs`` is [steps, K] and ``targets`` holds one gold id per step
    (the final step is the eos).  With smoothing e the reference puts
    1 - e on the gold id and e / (K - 1) on every other id.
    """
    logprobs = as_tensor(logprobs)
    targets = np.asarray(targets, dtype=np.int64)
    n, k = logprobs.shape
    if len(targets) == 0:
        raise ValueError("attention target must be non-empty")
    if len(targets) != n:
        raise ValueError(f"{len(targets)} targets for {n} decoder steps")
    if targets.min() < 0 or targets.max() >= k:
        raise ValueError("attention target id out of range")
    onehot = np.zeros((n, k))
    onehot[np.arange(n), targets] = 1.0
    if smoothing > 0.0:
        q = onehot * (1.0 - smoothing) + (1.0 - onehot) * (smoothing / (k - 1))
    else:
        q = onehot
    return ad.scalar_mul(ad.sum_(logprobs * q), -1.0 / n)


def joint_asr_loss(ctc, att, alpha: float = 0.3):
    """alpha * L_ctc + (1 - alpha) * L_att; works on floats or Tensors."""
    if isinstance(ctc, Tensor) or isinstance(att, Tensor):
        return ad.scalar_mul(as_tensor(ctc), alpha) + ad.scalar_mul(as_tensor(att), 1.0 - alpha)
    return alpha * ctc + (1.0 - alpha) * att


def distill_loss(est_speech_repr, est_sing_repr, clean_speech_repr, clean_sing_repr) -> Tensor:
    """L1 pull of separated-input representations towards frozen clean ones."""
    return (l1_utt(est_speech_repr, ad.stop_gradient(as_tensor(clean_speech_repr)))
            + l1_utt(est_sing_repr, ad.stop_gradient(as_tensor(clean_sing_repr))))


def final_asr_loss(ctc, att, distil, w: AsrLossWeights = AsrLossWeights()) -> LossBreakdown:
    """alpha * L_ctc + (1 - alpha) * L_att + beta * L_distil."""
    ctc, att, distil = as_tensor(ctc), as_tensor(att), as_tensor(distil)
    total = joint_asr_loss(ctc, att, w.alpha) + ad.scalar_mul(distil, w.beta)
    return LossBreakdown(total, {"ctc": ctc.item(), "att": att.item(), "distil": distil.item()})
