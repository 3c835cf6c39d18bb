"""Joint recognition of speech and singing voices from a single-channel mixture.

A multi-task separator splits the mixture magnitude spectrogram into a
speech track and a singing track; a CTC/attention recognizer transcribes
each track.  Everything runs on a small numpy autodiff engine.
"""

__version__ = "0.1.0"
