"""
Training the two stages on a synthetic corpus
=============================================

A tone-based micro-corpus stands in for speech and singing.  We train the
separator, then a recognizer on top of the frozen separator, and decode a
held-out mixture into two labeled transcripts.  The step counts are about
half of the presets in ``jrsv.train``; the script takes under a minute on
one core.
"""

# %%
import tempfile
from pathlib import Path

from jrsv.audio import CorpusConfig, MixerConfig, make_mixture_set, read_manifest, read_mixture_manifest, \
    synth_micro_corpus
from jrsv.metrics import evaluate, format_table
from jrsv.nn.models import Vocab
from jrsv.train import SourceBank, TrainConfig, system_for, train_stage1, train_stage2

root = Path(tempfile.mkdtemp())
train = synth_micro_corpus(CorpusConfig(n_utterances=20, seed=0), root / "train")
test = synth_micro_corpus(CorpusConfig(n_utterances=5, seed=1), root / "test")
manifest = make_mixture_set(read_manifest(test["speech"]), read_manifest(test["singing"]),
                            read_manifest(test["music"]), MixerConfig(seed=5), root / "mix")
bank = SourceBank.from_manifests(train["speech"], train["singing"], train["music"])
print(read_manifest(train["speech"])[0])

# %%
# Stage 1: the separator.
sep, report, _ = train_stage1(TrainConfig(lr=3e-3, max_steps=150, batch_size=2), bank)
print("separation loss %.3f -> %.3f" % (report.records[0].total, report.records[-1].total))

# %%
# Stage 2: the recognizer with the separator frozen.
vocab = Vocab.from_texts(bank.texts())
asr, sep, report, _ = train_stage2(TrainConfig(variant="jrsv_f", lr=3e-3, schedule="noam", warmup_steps=20,
                                               max_steps=200, batch_size=2), bank, sep, vocab)
print("recognizer loss %.1f -> %.1f" % (report.records[0].total, report.records[-1].total))

# %%
# Recognize one mixture and score the held-out set.
system = system_for("jrsv_f", sep, asr, vocab)
records = read_mixture_manifest(manifest)
from jrsv.audio import load_wav

print(system.recognize(load_wav(records[0].mixture)), "reference:", records[0].speech_text, "/", records[0].sing_text)
print(format_table({"JRSV-f": evaluate(records, system)}))
