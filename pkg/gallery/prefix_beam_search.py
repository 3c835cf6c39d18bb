"""
Prefix beam search and attention rescoring
==========================================

The CTC head proposes candidates by prefix beam search; an attention
decoder rescores them.
"""

# %%
import numpy as np

from jrsv.decode import DecodeConfig, prefix_beam_search

rng = np.random.default_rng(3)
logits = rng.normal(size=(6, 4)) * 2
lp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))

for h in prefix_beam_search(lp, DecodeConfig(beam_size=4, n_best=4)):
    print(h.tokens, "%.4f" % h.ctc_score)

# %%
# With no beam limit the search keeps every prefix and its score is the exact
# marginal probability of that label sequence.
exact = prefix_beam_search(lp, DecodeConfig(beam_size=None, n_best=3))
print([(h.tokens, round(h.ctc_score, 4)) for h in exact])

# %%
# Rescoring with an (untrained) attention decoder.
from jrsv.decode import rescore
from jrsv.nn.models import AsrConfig, AsrModel, ConformerConfig

asr = AsrModel(AsrConfig(ConformerConfig(1, 8, 2, 16, 3), input_dim=16, vocab_size=4, subsample_channels=2,
                         decoder_blocks=1, decoder_heads=2, decoder_ffn=16))
enc = asr.encode(rng.uniform(0.1, 1, size=(24, 16)))
cands = prefix_beam_search(asr.ctc_logprobs(enc).value[:, :asr.eos], DecodeConfig(beam_size=3, n_best=3))
best = rescore(cands, enc, asr)
for h in cands:
    print(h.tokens, "ctc %.2f att %.2f combined %.2f" % (h.ctc_score, h.att_score, h.combined))
print("selected", best.tokens)
