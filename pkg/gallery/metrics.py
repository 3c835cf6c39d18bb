"""
Scoring separation and recognition
==================================

SDR compares an estimate with its reference; SDRi subtracts the score of
the unprocessed mixture.  CER counts character edits against the reference
length, so heavy insertions push it past 100%.
"""

# %%
import numpy as np

from jrsv.metrics import cer, sdr, sdri

rng = np.random.default_rng(0)
ref = rng.normal(size=16000)
noise = rng.normal(size=16000)
noise *= np.linalg.norm(ref) / np.linalg.norm(noise)
mixture = ref + noise
estimate = ref + 0.1 * noise
print("SDR of mixture %.1f dB, estimate %.1f dB, SDRi %.1f dB" % (sdr(ref, mixture), sdr(ref, estimate),
                                                               sdri(ref, estimate, mixture)))

# %%
for r, h in (("abc", "abc"), ("abc", "axc"), ("a", "abc"), ("hello", "")):
    print(f"{r!r} -> {h!r}: CER {cer(r, h):.1f}%")
