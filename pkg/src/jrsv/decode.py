"""Two-pass recognition (CTC prefix beam search, attention rescoring) and the
mixture -> two labeled transcripts pipeline."""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .audio import Waveform
from .dsp import PhaseSpec, Spectrogram, StftParams, fbank, istft, stft
from .nn.models import AsrModel, SeparatorModel, Vocab

NEG_INF = -math.inf
TRACKS = ("speech", "singing")


@dataclass(frozen=True)
class DecodeConfig:
    beam_size: int | None = 10  # None keeps every prefix (exact marginalization)
    n_best: int = 10
    ctc_weight: float = 0.5

    def __post_init__(self):
        if self.beam_size is not None and self.beam_size < 1:
            raise ValueError("beam_size must be positive")
        if self.n_best < 1 or (self.beam_size is not None and self.n_best > self.beam_size):
            raise ValueError("n_best must be in [1, beam_size]")


@dataclass
class Hypothesis:
    tokens: tuple[int, ...]
    ctc_score: float
    att_score: float | None = None
    combined: float | None = None


def _lse(a: float, b: float) -> float:
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    m = max(a, b)
    return m + math.log1p(math.exp(-abs(a - b)))


def _rank_key(item):
    prefix, (pb, pnb) = item
    return (-_lse(pb, pnb), prefix)


def prefix_beam_search(logprobs, cfg: DecodeConfig = DecodeConfig(), blank: int = 0) -> list[Hypothesis]:
    """CTC prefix beam search over a [T, V + 1] log-probability matrix.

    Each prefix carries the log-probabilities of its blank-ending and
    non-blank-ending path sets.  Ties are broken lexicographically on the
    token sequence.  Returns up to ``n_best`` hypotheses by CTC score.
    """
    lp = np.asarray(logprobs.value if isinstance(logprobs, ad.Tensor) else logprobs, dtype=np.float64)
    if lp.ndim != 2 or lp.shape[0] == 0:
        raise ValueError("prefix beam search needs a non-empty [T, V+1] matrix")
    n_sym = lp.shape[1]
    beams: dict[tuple[int, ...], tuple[float, float]] = {(): (0.0, NEG_INF)}
    for t in range(lp.shape[0]):
        row = lp[t].tolist()
        nxt: dict[tuple[int, ...], list[float]] = {}

        def slot(p):
            s = nxt.get(p)
            if s is None:
                s = nxt[p] = [NEG_INF, NEG_INF]
            return s

        for prefix, (pb, pnb) in beams.items():
            total = _lse(pb, pnb)
            s = slot(prefix)
            s[0] = _lse(s[0], total + row[blank])
            last = prefix[-1] if prefix else None
            for c in range(n_sym):
                if c == blank:
                    continue
                p = row[c]
                ext = slot(prefix + (c,))
                if c == last:
                    s[1] = _lse(s[1], pnb + p)
                    ext[1] = _lse(ext[1], pb + p)
                else:
                    ext[1] = _lse(ext[1], total + p)
        # drop prefixes no path can produce (a repeat with no blank in between yet)
        ranked = sorted(((k, (v[0], v[1])) for k, v in nxt.items() if _lse(v[0], v[1]) > NEG_INF), key=_rank_key)
        if cfg.beam_size is not None:
            ranked = ranked[:cfg.beam_size]
        beams = dict(ranked)
    ranked = sorted(beams.items(), key=_rank_key)[:cfg.n_best]
    return [Hypothesis(prefix, _lse(pb, pnb)) for prefix, (pb, pnb) in ranked]


def rescore(cands: list[Hypothesis], enc, model: AsrModel, cfg: DecodeConfig = DecodeConfig()) -> Hypothesis:
    """Fill attention scores and return the best att + ctc_weight * ctc candidate."""
    if not cands:
        raise ValueError("no candidates to rescore")
    best = None
    for h in cands:
        h.att_score = model.rescorer_logprob(enc, h.tokens)
        h.combined = h.att_score + cfg.ctc_weight * h.ctc_score
        if best is None or h.combined > best.combined:
            best = h
    return best


def _threads(threads: int | None) -> int:
    if threads is not None:
        return max(1, int(threads))
    return max(1, int(os.environ.get("JRSV_THREADS", "1")))


@dataclass
class JrsvSystem:
    """Separator + recognizer bundle; ``frontend`` selects the recognizer input.

    ``"magnitude"``: separated magnitudes go straight to the recognizer (JRSV).
    ``"fbank"``: separated magnitudes are resynthesized with the mixture phase
    and converted to 80-dim log-mel features (the cascade system).
    """

    separator: SeparatorModel
    asr: AsrModel
    vocab: Vocab
    frontend: str = "magnitude"
    stft_params: StftParams = field(default_factory=StftParams)
    decode: DecodeConfig = field(default_factory=DecodeConfig)

    def __post_init__(self):
        if self.frontend not in ("magnitude", "fbank"):
            raise ValueError(f"unknown frontend {self.frontend!r}")

    def separate_spectra(self, mixture: Waveform):
        if len(mixture) < self.stft_params.win_length:
            raise ValueError("audio shorter than one analysis frame")
        mag, phase = stft(mixture, self.stft_params)
        self.separator.eval()
        with ad.no_grad():
            sp, sg = self.separator(mag.mags)
        return mag, phase, sp.value, sg.value

    def resynthesize(self, mags: np.ndarray, phase: PhaseSpec, n_samples: int, sr: int) -> Waveform:
        w = istft(Spectrogram(mags, self.stft_params), phase, self.stft_params, sr)
        out = np.zeros(n_samples)
        n = min(n_samples, len(w))
        out[:n] = w.samples[:n]
        return Waveform(out, sr)

    def separate(self, mixture: Waveform) -> tuple[Waveform, Waveform]:
        _, phase, sp, sg = self.separate_spectra(mixture)
        n, sr = len(mixture), mixture.sample_rate_hz
        return self.resynthesize(sp, phase, n, sr), self.resynthesize(sg, phase, n, sr)

    def features(self, mags: np.ndarray, phase: PhaseSpec, n_samples: int, sr: int) -> np.ndarray:
        if self.frontend == "magnitude":
            return mags
        return fbank(self.resynthesize(mags, phase, n_samples, sr))

    def transcribe(self, feats: np.ndarray) -> Hypothesis:
        self.asr.eval()
        with ad.no_grad():
            enc = self.asr.encode(feats)
            # the eos column is never a CTC target; keep it out of the search
            lp = self.asr.ctc_logprobs(enc).value[:, :self.asr.eos]
            cands = prefix_beam_search(lp, self.decode)
            return rescore(cands, enc, self.asr, self.decode)

    def recognize(self, mixture: Waveform, threads: int | None = None) -> dict:
        """Separate and transcribe; returns {"speech": {...}, "singing": {...}}."""
        _, phase, sp, sg = self.separate_spectra(mixture)
        feats = [self.features(m, phase, len(mixture), mixture.sample_rate_hz) for m in (sp, sg)]
        n = _threads(threads)
        if n > 1:
            with ThreadPoolExecutor(max_workers=min(n, 2)) as pool:
                hyps = list(pool.map(self.transcribe, feats))
        else:
            hyps = [self.transcribe(f) for f in feats]
        return {track: {"text": self.vocab.decode(h.tokens), "score": float(h.combined)}
                for track, h in zip(TRACKS, hyps)}


def recognize(mixture: Waveform, sep: SeparatorModel, asr: AsrModel, vocab: Vocab, cfg: DecodeConfig = DecodeConfig(),
              frontend: str = "magnitude", threads: int | None = None) -> dict:
    return JrsvSystem(sep, asr, vocab, frontend, decode=cfg).recognize(mixture, threads)
