"""
Building a speech + singing + music mixture
===========================================

Each source is normalized to a common RMS, scaled to a sampled SNR, and the
speech is placed so that it overlaps the song for a chosen fraction of the
shorter signal.
"""

# %%
import numpy as np

from jrsv.audio import MixerConfig, Waveform, mix, overlap_samples, rms, sample_mixture_spec

sr = 16000
rng = np.random.default_rng(0)
speech = Waveform(np.sin(2 * np.pi * 220 * np.arange(sr) / sr), sr)
sing = Waveform(np.sin(2 * np.pi * 440 * np.arange(int(1.5 * sr)) / sr), sr)
music = Waveform(rng.normal(0, 0.3, 2 * sr), sr)

# %%
# Draw a mixture spec: one SNR per source and an overlap ratio.
cfg = MixerConfig()
spec = sample_mixture_spec(cfg, rng)
print(spec)

# %%
# Mix.  The targets are padded to the mixture length, so summing them gives
# the mixture back exactly.
ex = mix(speech, sing, music, spec, cfg)
print("mixture length", len(ex.mixture), "speech starts at", ex.spec.speech_offset_samples)
assert np.array_equal(ex.mixture.samples,
                      ex.target_speech.samples + ex.target_sing.samples + ex.target_music.samples)

# %%
# The measured level of each placed source matches its SNR.
start = ex.spec.speech_offset_samples
seg = ex.target_speech.samples[start:start + len(speech)]
print("speech SNR  sampled %.3f dB, measured %.3f dB" % (spec.speech_snr_db, 20 * np.log10(rms(seg) / cfg.target_rms)))

# %%
# Overlap in samples for every ratio, with a 1 s speech clip against a 2 s song.
for r in cfg.overlap_ratio_set:
    print(f"ratio {r:.1f}: {overlap_samples(r, sr, 2 * sr)} samples of overlap")
