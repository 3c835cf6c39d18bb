"""Waveforms, the speech/singing/music mixing protocol, WAV and manifest I/O.

The mixing procedure:

1. each source is RMS-normalized to ``target_rms``;
2. each source is gained by ``10 ** (snr_db / 20)`` with its SNR drawn from
   a uniform interval (speech and singing U(-10, 2) dB, music U(-15, 2) dB);
3. singing and music are summed sample-aligned from offset 0 into the
   background, and speech is placed at the tail of the background so that
   ``round(r * min(len_speech, len_background))`` samples overlap, with the
   overlap ratio ``r`` drawn uniformly from {1.0, 0.5, 0.3, 0.1, 0.0}.
"""

from __future__ import annotations

import json
import math
import os
import wave
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

SAMPLE_RATE_HZ = 16000
TRACK_TYPES = ("speech", "singing", "music")


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE_HZ

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz


def rms(x) -> float:
    x = x.samples if isinstance(x, Waveform) else np.asarray(x, dtype=np.float64)
    return float(np.sqrt(np.mean(x * x))) if len(x) else 0.0


@dataclass(frozen=True)
class MixerConfig:
    speech_snr_range_db: tuple[float, float] = (-10.0, 2.0)
    sing_snr_range_db: tuple[float, float] = (-10.0, 2.0)
    music_snr_range_db: tuple[float, float] = (-15.0, 2.0)
    overlap_ratio_set: tuple[float, ...] = (1.0, 0.5, 0.3, 0.1, 0.0)
    target_rms: float = 0.05
    seed: int = 0

    def __post_init__(self):
        for name in ("speech_snr_range_db", "sing_snr_range_db", "music_snr_range_db"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: lower bound {lo} exceeds upper bound {hi}")
            object.__setattr__(self, name, (float(lo), float(hi)))
        ratios = tuple(float(r) for r in self.overlap_ratio_set)
        if not ratios or any(not 0.0 <= r <= 1.0 for r in ratios):
            raise ValueError("overlap ratios must be a non-empty set of values in [0, 1]")
        object.__setattr__(self, "overlap_ratio_set", ratios)
        if self.target_rms <= 0:
            raise ValueError("target_rms must be positive")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(int(self.seed))

    @classmethod
    def from_dict(cls, d: dict) -> "MixerConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass(frozen=True)
class MixtureSpec:
    speech_snr_db: float
    sing_snr_db: float
    music_snr_db: float
    overlap_ratio: float
    speech_offset_samples: int = 0


@dataclass
class MixedExample:
    mixture: Waveform
    target_speech: Waveform
    target_sing: Waveform
    target_music: Waveform
    spec: MixtureSpec
    speech_text: str = ""
    sing_text: str = ""


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    wav_path: str
    text: str
    track_type: str

    def __post_init__(self):
        if self.track_type not in TRACK_TYPES:
            raise ValueError(f"unknown track type {self.track_type!r}")
        if self.track_type == "music" and self.text:
            raise ValueError(f"music entry {self.id!r} must have empty text")


# -- gains and mixing -----------------------------------------------------------

def normalize_rms(w: Waveform, target_rms: float) -> Waveform:
    level = rms(w)
    if level <= 0.0:
        raise ValueError("silent source")
    return Waveform(w.samples * (target_rms / level), w.sample_rate_hz)


def db_to_gain(snr_db: float) -> float:
    return 10.0 ** (snr_db / 20.0)


def apply_snr_gain(w: Waveform, snr_db: float) -> Waveform:
    return Waveform(w.samples * db_to_gain(snr_db), w.sample_rate_hz)


def sample_mixture_spec(cfg: MixerConfig, rng: np.random.Generator) -> MixtureSpec:
    speech = rng.uniform(*cfg.speech_snr_range_db)
    sing = rng.uniform(*cfg.sing_snr_range_db)
    music = rng.uniform(*cfg.music_snr_range_db)
    ratio = cfg.overlap_ratio_set[int(rng.integers(len(cfg.overlap_ratio_set)))]
    return MixtureSpec(float(speech), float(sing), float(music), float(ratio))


def overlap_samples(ratio: float, len_speech: int, len_background: int) -> int:
    # round half up, independent of banker's rounding
    return int(math.floor(ratio * min(len_speech, len_background) + 0.5))


def _pad_to(x: np.ndarray, offset: int, total: int) -> np.ndarray:
    out = np.zeros(total)
    out[offset:offset + len(x)] = x
    return out


def mix(speech: Waveform, sing: Waveform, music: Waveform, spec: MixtureSpec, cfg: MixerConfig,
        speech_text: str = "", sing_text: str = "") -> MixedExample:
    sr = speech.sample_rate_hz
    if sing.sample_rate_hz != sr or music.sample_rate_hz != sr:
        raise ValueError("sample-rate mismatch between sources")
    sp = apply_snr_gain(normalize_rms(speech, cfg.target_rms), spec.speech_snr_db).samples
    sg = apply_snr_gain(normalize_rms(sing, cfg.target_rms), spec.sing_snr_db).samples
    mu = apply_snr_gain(normalize_rms(music, cfg.target_rms), spec.music_snr_db).samples

    len_bg = max(len(sg), len(mu))
    offset = len_bg - overlap_samples(spec.overlap_ratio, len(sp), len_bg)
    total = max(len_bg, offset + len(sp))

    t_speech = _pad_to(sp, offset, total)
    t_sing = _pad_to(sg, 0, total)
    t_music = _pad_to(mu, 0, total)
    mixture = t_speech + t_sing + t_music
    return MixedExample(
        mixture=Waveform(mixture, sr),
        target_speech=Waveform(t_speech, sr),
        target_sing=Waveform(t_sing, sr),
        target_music=Waveform(t_music, sr),
        spec=replace(spec, speech_offset_samples=int(offset)),
        speech_text=speech_text,
        sing_text=sing_text,
    )


# -- WAV I/O ----------------------------------------------------------------------

def resample_linear(w: Waveform, target_hz: int) -> Waveform:
    """Linear-interpolation resampler; output length is round(n * target / source)."""
    if w.sample_rate_hz == target_hz:
        return w
    n_out = int(round(len(w) * target_hz / w.sample_rate_hz))
    t_out = np.arange(n_out) * (w.sample_rate_hz / target_hz)
    t_in = np.arange(len(w))
    return Waveform(np.interp(t_out, t_in, w.samples), target_hz)


def load_wav(path, target_hz: int | None = SAMPLE_RATE_HZ) -> Waveform:
    """Read 16-bit PCM mono; resample to ``target_hz`` unless it is None."""
    with wave.open(os.fspath(path), "rb") as f:
        if f.getnchannels() != 1:
            raise ValueError(f"{path}: mono required, got {f.getnchannels()} channels")
        if f.getsampwidth() != 2 or f.getcomptype() != "NONE":
            raise ValueError(f"{path}: unsupported format, only 16-bit PCM is accepted")
        sr = f.getframerate()
        raw = f.readframes(f.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    w = Waveform(samples, sr)
    return resample_linear(w, target_hz) if target_hz else w


def save_wav(path, w: Waveform) -> int:
    """Write 16-bit PCM mono; returns the number of samples clipped to [-1, 1]."""
    x = w.samples
    clipped = int(np.count_nonzero(np.abs(x) > 1.0))
    if clipped:
        warnings.warn(f"{path}: {clipped} samples clipped on save", RuntimeWarning, stacklevel=2)
    q = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with wave.open(os.fspath(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate_hz)
        f.writeframes(q.tobytes())
    return clipped


# -- manifests ----------------------------------------------------------------------

def write_manifest(path, entries) -> None:
    path = Path(path)
    ids = [e.id for e in entries]
    if len(set(ids)) != len(ids):
        raise ValueError("manifest ids must be unique")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for e in entries:
            rec = {"id": e.id, "wav": e.wav_path, "text": e.text, "type": e.track_type}
            f.write(json.dumps(rec, ensure_ascii=False) + "\n")


def read_manifest(path) -> list[ManifestEntry]:
    """Load a JSONL source manifest; relative wav paths resolve against its folder."""
    path = Path(path)
    entries = []
    seen = set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            missing = {"id", "wav", "text", "type"} - rec.keys()
            if missing:
                raise ValueError(f"{path}:{lineno}: missing keys {sorted(missing)}")
            if rec["id"] in seen:
                raise ValueError(f"{path}:{lineno}: duplicate id {rec['id']!r}")
            seen.add(rec["id"])
            wav_path = rec["wav"]
            if not os.path.isabs(wav_path):
                wav_path = os.fspath(path.parent / wav_path)
            entries.append(ManifestEntry(rec["id"], wav_path, rec["text"], rec["type"]))
    return entries


# -- fixed dev/test mixture sets -------------------------------------------------------

@dataclass
class MixtureRecord:
    """One line of a mixture-set manifest (the evaluation input)."""
    id: str
    mixture: str
    speech: str | None
    singing: str | None
    speech_text: str
    sing_text: str
    sing_id: str
    overlap: float
    spec: dict = field(default_factory=dict)


def make_mixture_set(speech: list[ManifestEntry], sing: list[ManifestEntry], music: list[ManifestEntry],
                     cfg: MixerConfig, out_dir) -> Path:
    """Pair each speech utterance with a random singing voice and music clip.

    SNRs are drawn as in training; overlap ratios cycle through
    ``cfg.overlap_ratio_set`` so every ratio is represented.  Writes mixture and target-track WAVs plus ``mixtures.jsonl``; returns its path.
    """
    if not (speech and sing and music):
        raise ValueError("speech, singing and music manifests must all be non-empty")
    out_dir = Path(out_dir)
    rng = cfg.rng()
    lines = []
    ratios = cfg.overlap_ratio_set
    for i, e in enumerate(speech):
        s = sing[int(rng.integers(len(sing)))]
        m = music[int(rng.integers(len(music)))]
        spec = replace(sample_mixture_spec(cfg, rng), overlap_ratio=ratios[i % len(ratios)])
        ex = mix(load_wav(e.wav_path), load_wav(s.wav_path), load_wav(m.wav_path), spec, cfg, e.text, s.text)
        base = f"{e.id}__{s.id}"
        save_wav(out_dir / "wav" / f"{base}.mix.wav", ex.mixture)
        save_wav(out_dir / "wav" / f"{base}.speech.wav", ex.target_speech)
        save_wav(out_dir / "wav" / f"{base}.singing.wav", ex.target_sing)
        rec = MixtureRecord(base, f"wav/{base}.mix.wav", f"wav/{base}.speech.wav", f"wav/{base}.singing.wav",
                            e.text, s.text, s.id, ex.spec.overlap_ratio, asdict(ex.spec))
        lines.append(json.dumps(asdict(rec), ensure_ascii=False))
    path = out_dir / "mixtures.jsonl"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_mixture_manifest(path) -> list[MixtureRecord]:
    path = Path(path)
    out = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        for key in ("mixture", "speech", "singing"):
            if rec.get(key) and not os.path.isabs(rec[key]):
                rec[key] = os.fspath(path.parent / rec[key])
        rec.setdefault("speech", None)
        rec.setdefault("singing", None)
        rec.setdefault("spec", {})
        out.append(MixtureRecord(**rec))
    return out


# -- synthetic micro-corpus -------------------------------------------------------------

ALPHABET = "abcdefghijklmnopqrstuvwxyz"


@dataclass(frozen=True)
class CorpusConfig:
    n_utterances: int = 20
    vocab_size: int = 8
    seed: int = 0
    sample_rate_hz: int = SAMPLE_RATE_HZ
    min_tokens: int = 3
    max_tokens: int = 5
    speech_token_s: float = 0.2
    sing_token_s: float = 0.3
    gap_s: float = 0.04
    music_s: float = 1.2
    n_music: int | None = None

    def __post_init__(self):
        if not 1 <= self.vocab_size <= len(ALPHABET):
            raise ValueError(f"vocab_size must be in [1, {len(ALPHABET)}]")
        if self.n_utterances < 1:
            raise ValueError("n_utterances must be positive")
        if not 1 <= self.min_tokens <= self.max_tokens:
            raise ValueError("need 1 <= min_tokens <= max_tokens")

    @property
    def alphabet(self) -> str:
        return ALPHABET[:self.vocab_size]


# Disjoint bands keep the toy separation problem well posed: speech
# fundamentals (with one harmonic) stay below 1.5 kHz, singing lives in
# 1.8-3.4 kHz, music is band noise above 4 kHz.
SPEECH_BAND_HZ = (250.0, 700.0)
SING_BAND_HZ = (1800.0, 3200.0)
MUSIC_BAND_HZ = (4200.0, 7000.0)


def _token_freq(k: int, vocab: int, band: tuple[float, float]) -> float:
    lo, hi = band
    return lo if vocab == 1 else lo + (hi - lo) * k / (vocab - 1)


def _envelope(n: int, sr: int, fade_s: float = 0.01) -> np.ndarray:
    env = np.ones(n)
    m = min(n // 2, int(fade_s * sr))
    if m:
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(m) / m)
        env[:m] = ramp
        env[n - m:] = ramp[::-1]
    return env


def render_speech_tokens(tokens, cfg: CorpusConfig) -> np.ndarray:
    """Each token is a short gliding tone plus its second harmonic, followed by a gap."""
    sr = cfg.sample_rate_hz
    n = int(cfg.speech_token_s * sr)
    gap = np.zeros(int(cfg.gap_s * sr))
    t = np.arange(n) / sr
    parts = [gap]
    for k in tokens:
        f0 = _token_freq(k, cfg.vocab_size, SPEECH_BAND_HZ)
        glide = 1.0 + (0.04 if k % 2 == 0 else -0.04) * t / cfg.speech_token_s
        phase = 2 * np.pi * np.cumsum(f0 * glide) / sr
        tone = np.sin(phase) + 0.5 * np.sin(2 * phase)
        parts += [tone * _envelope(n, sr), gap]
    return np.concatenate(parts)


def render_sing_tokens(tokens, cfg: CorpusConfig) -> np.ndarray:
    """Each token is a sustained note with vibrato in the singing band."""
    sr = cfg.sample_rate_hz
    n = int(cfg.sing_token_s * sr)
    gap = np.zeros(int(0.5 * cfg.gap_s * sr))
    t = np.arange(n) / sr
    parts = [gap]
    for k in tokens:
        f0 = _token_freq(k, cfg.vocab_size, SING_BAND_HZ)
        inst = f0 * (1.0 + 0.01 * np.sin(2 * np.pi * 5.5 * t))
        phase = 2 * np.pi * np.cumsum(inst) / sr
        parts += [np.sin(phase) * _envelope(n, sr, 0.02), gap]
    return np.concatenate(parts)


def render_music(rng: np.random.Generator, cfg: CorpusConfig) -> np.ndarray:
    """Band-limited noise with a rhythmic amplitude envelope."""
    sr = cfg.sample_rate_hz
    n = int(cfg.music_s * sr)
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / sr)
    spec[(freqs < MUSIC_BAND_HZ[0]) | (freqs > MUSIC_BAND_HZ[1])] = 0.0
    noise = np.fft.irfft(spec, n=n)
    beat = rng.uniform(1.5, 3.0)
    t = np.arange(n) / sr
    env = 0.6 + 0.4 * np.cos(2 * np.pi * beat * t) ** 2
    return noise * env * _envelope(n, sr)


def _draw_tokens(rng: np.random.Generator, cfg: CorpusConfig) -> list[int]:
    n = int(rng.integers(cfg.min_tokens, cfg.max_tokens + 1))
    toks = [int(rng.integers(cfg.vocab_size))]
    while len(toks) < n:
        k = int(rng.integers(cfg.vocab_size))
        if k != toks[-1] or cfg.vocab_size == 1:
            toks.append(k)
    return toks


def synth_micro_corpus(cfg: CorpusConfig, out_dir) -> dict[str, Path]:
    """Write synthetic speech/singing/music WAVs and one JSONL manifest per track type."""
    out_dir = Path(out_dir)
    rng = np.random.default_rng(cfg.seed)
    alpha = cfg.alphabet
    n_music = cfg.n_music if cfg.n_music is not None else max(1, cfg.n_utterances // 4)
    entries: dict[str, list[ManifestEntry]] = {t: [] for t in TRACK_TYPES}
    for i in range(cfg.n_utterances):
        toks = _draw_tokens(rng, cfg)
        uid = f"sp{cfg.seed}_{i:04d}"
        save_wav(out_dir / "wav" / "speech" / f"{uid}.wav", Waveform(0.3 * render_speech_tokens(toks, cfg), cfg.sample_rate_hz))
        entries["speech"].append(ManifestEntry(uid, f"wav/speech/{uid}.wav", "".join(alpha[k] for k in toks), "speech"))
    for i in range(cfg.n_utterances):
        toks = _draw_tokens(rng, cfg)
        uid = f"sg{cfg.seed}_{i:04d}"
        save_wav(out_dir / "wav" / "singing" / f"{uid}.wav", Waveform(0.3 * render_sing_tokens(toks, cfg), cfg.sample_rate_hz))
        entries["singing"].append(ManifestEntry(uid, f"wav/singing/{uid}.wav", "".join(alpha[k] for k in toks), "singing"))
    for i in range(n_music):
        uid = f"mu{cfg.seed}_{i:04d}"
        save_wav(out_dir / "wav" / "music" / f"{uid}.wav", Waveform(0.3 * render_music(rng, cfg), cfg.sample_rate_hz))
        entries["music"].append(ManifestEntry(uid, f"wav/music/{uid}.wav", "", "music"))
    paths = {}
    for track, items in entries.items():
        paths[track] = out_dir / f"{track}.jsonl"
        write_manifest(paths[track], items)
    return paths
