"""
CTC and the training losses
===========================

CTC sums the probability of every frame alignment that collapses to the
target.  For a handful of frames we can enumerate them and check.
"""

# %%
import itertools
import math

import numpy as np

from jrsv.losses import AsrLossWeights, MtassLossWeights, ctc_loss, final_asr_loss, mtass_loss

p = np.array([[0.5, 0.3, 0.2], [0.2, 0.5, 0.3], [0.6, 0.2, 0.2]])  # 3 frames, blank + 2 labels
target = [1, 2]


def collapse(path):
    out, prev = [], None
    for s in path:
        if s != prev and s != 0:
            out.append(s)
        prev = s
    return out


total = sum(math.prod(p[t, s] for t, s in enumerate(path))
            for path in itertools.product(range(3), repeat=3) if collapse(path) == target)
print("enumeration %.12f   forward algorithm %.12f" % (-math.log(total), ctc_loss(np.log(p), target).item()))

# %%
# Too few frames for the target (a repeat needs a blank in between) gives +inf.
print("infeasible:", ctc_loss(np.log(p[:2]), [1, 1]).item())

# %%
# The separation loss: reconstruction minus a dissimilarity bonus plus a
# consistency term on the summed tracks.
rng = np.random.default_rng(0)
sp, sg = rng.uniform(size=(4, 5)), rng.uniform(size=(4, 5))
print(mtass_loss(sp, sg, sp, sg, MtassLossWeights()).parts)

# %%
# The recognizer loss mixes CTC, attention and distillation terms.
print(final_asr_loss(10.0, 5.0, 100.0, AsrLossWeights(0.3, 0.001)).value)
