"""STFT analysis/synthesis and log-mel filterbank features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio import Waveform

LOG_FLOOR = 1e-10


@dataclass(frozen=True)
class StftParams:
    win_length: int = 1024
    hop_length: int = 256
    n_fft: int = 1024
    window: str = "hann"

    def __post_init__(self):
        if not (0 < self.hop_length <= self.win_length <= self.n_fft):
            raise ValueError("need 0 < hop_length <= win_length <= n_fft")
        if self.window not in ("hann", "rect"):
            raise ValueError(f"unknown window {self.window!r}")

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    def n_frames(self, n_samples: int) -> int:
        return 1 + (n_samples - self.win_length) // self.hop_length

    def synthesis_length(self, n_frames: int) -> int:
        return n_frames * self.hop_length + self.win_length - self.hop_length


@dataclass
class Spectrogram:
    mags: np.ndarray  # [frames, bins]
    params: StftParams

    @property
    def n_frames(self) -> int:
        return self.mags.shape[0]


@dataclass
class PhaseSpec:
    phases: np.ndarray  # [frames, bins], values in (-pi, pi]
    params: StftParams


def make_window(p: StftParams) -> np.ndarray:
    if p.window == "rect":
        return np.ones(p.win_length)
    # periodic Hann
    n = np.arange(p.win_length)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / p.win_length)


def frame_signal(x: np.ndarray, win_length: int, hop_length: int) -> np.ndarray:
    n_frames = 1 + (len(x) - win_length) // hop_length
    idx = hop_length * np.arange(n_frames)[:, None] + np.arange(win_length)[None, :]
    return x[idx]


def _samples(w) -> np.ndarray:
    return np.asarray(w.samples if isinstance(w, Waveform) else w, dtype=np.float64)


def stft(w, p: StftParams | None = None) -> tuple[Spectrogram, PhaseSpec]:
    """Frame, window and DFT a waveform (no centering/padding)."""
    p = p or StftParams()
    x = _samples(w)
    if len(x) < p.win_length:
        raise ValueError(f"input of {len(x)} samples is shorter than one window ({p.win_length})")
    frames = frame_signal(x, p.win_length, p.hop_length) * make_window(p)
    spec = np.fft.rfft(frames, n=p.n_fft, axis=1)
    mags = np.abs(spec)
    phases = np.angle(spec)
    phases[phases <= -np.pi] = np.pi
    return Spectrogram(mags, p), PhaseSpec(phases, p)


def istft(m: Spectrogram, ph: PhaseSpec, p: StftParams | None = None, sample_rate_hz: int = 16000) -> Waveform:
    """Overlap-add resynthesis normalized by the summed squared window."""
    p = p or m.params
    mags = np.asarray(m.mags)
    phases = np.asarray(ph.phases)
    if mags.shape != phases.shape:
        raise ValueError(f"magnitude/phase shape mismatch: {mags.shape} vs {phases.shape}")
    if mags.shape[1] != p.n_bins:
        raise ValueError(f"expected {p.n_bins} bins, got {mags.shape[1]}")
    n_frames = mags.shape[0]
    frames = np.fft.irfft(mags * np.exp(1j * phases), n=p.n_fft, axis=1)[:, :p.win_length]
    win = make_window(p)
    frames = frames * win
    length = p.synthesis_length(n_frames)
    out = np.zeros(length)
    wsum = np.zeros(length)
    for t in range(n_frames):
        start = t * p.hop_length
        out[start:start + p.win_length] += frames[t]
        wsum[start:start + p.win_length] += win * win
    nz = wsum > 1e-10
    out[nz] /= wsum[nz]
    out[~nz] = 0.0
    return Waveform(out, sample_rate_hz)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate_hz: int, fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular HTK-mel filters with unit peaks, shape [n_mels, n_fft//2 + 1].

    Adjacent triangles cross at half height, so the per-bin column sum never
    exceeds 1.
    """
    fmax = sample_rate_hz / 2.0 if fmax is None else fmax
    bin_hz = np.arange(n_fft // 2 + 1) * sample_rate_hz / n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (bin_hz[None, :] - lo) / (mid - lo)
    down = (hi - bin_hz[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def fbank(w, n_mels: int = 80, sample_rate_hz: int | None = None, win_ms: float = 25.0, hop_ms: float = 10.0) -> np.ndarray:
    """Log mel-filterbank energies, [frames, n_mels], floored at log(1e-10)."""
    sr = sample_rate_hz or (w.sample_rate_hz if isinstance(w, Waveform) else 16000)
    x = _samples(w)
    win = int(round(sr * win_ms / 1000.0))
    hop = int(round(sr * hop_ms / 1000.0))
    if len(x) < win:
        raise ValueError(f"input of {len(x)} samples is shorter than one fbank window ({win})")
    n_fft = 1 << (win - 1).bit_length()
    p = StftParams(win_length=win, hop_length=hop, n_fft=n_fft)
    frames = frame_signal(x, win, hop) * make_window(p)
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    energies = power @ mel_filterbank(n_mels, n_fft, sr).T
    return np.log(np.maximum(energies, LOG_FLOOR))
