"""
Spectrogram analysis and resynthesis
====================================

The separator works on 513-bin STFT magnitudes.  Resynthesis reuses the
mixture phase; with the original magnitudes it reconstructs the signal.
"""

# %%
import numpy as np

from jrsv.audio import Waveform
from jrsv.dsp import StftParams, fbank, istft, stft

sr = 16000
x = Waveform(np.random.default_rng(0).normal(size=sr), sr)
p = StftParams()
mag, phase = stft(x, p)
print("frames x bins:", mag.mags.shape)

# %%
# Round trip.  Away from the edges, where the window overlap is complete,
# the error is at machine precision.
y = istft(mag, phase, p).samples
inner = slice(p.win_length, len(y) - p.win_length)
print("max interior error: %.2e" % np.max(np.abs(y[inner] - x.samples[inner])))

# %%
# The cascade recognizer reads 80-dim log-mel features instead.
feats = fbank(x)
print("fbank frames x mels:", feats.shape)
