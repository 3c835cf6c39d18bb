"""
The command-line workflow
=========================

The ``jrsv`` command drives the same pipeline from shell: synthesize data,
build a test set, train both stages, then separate, recognize and evaluate.
Every command prints one JSON object.  Here we call it in-process, with
three training steps: the scores at the end only show the report format.
"""

# %%
import json
import tempfile
from pathlib import Path

from jrsv.cli import main

d = Path(tempfile.mkdtemp())
config = {
    "corpus": {"n_utterances": 4},
    "separator": {"encoder": {"n_blocks": 1, "d_model": 8, "n_heads": 2, "d_ffn": 16, "conv_kernel": 3}},
    "train": {"max_steps": 3, "batch_size": 1},
    "data": {"speech": "corpus/speech.jsonl", "singing": "corpus/singing.jsonl", "music": "corpus/music.jsonl"},
}
(d / "config.json").write_text(json.dumps(config))

main(["synth-corpus", "--config", str(d / "config.json"), "--out", str(d / "corpus")])
main(["mix", "--speech", str(d / "corpus/speech.jsonl"), "--sing", str(d / "corpus/singing.jsonl"),
      "--music", str(d / "corpus/music.jsonl"), "--out", str(d / "mix")])
main(["train-mtass", "--config", str(d / "config.json"), "--out", str(d / "sep.ckpt")])

# %%
# The recognizer, two steps.  ``--set`` overrides any config key.
main(["train-asr", "--config", str(d / "config.json"), "--mtass", str(d / "sep.ckpt"),
      "--set", "train.max_steps=2", "--set", 'asr.encoder={"n_blocks": 1, "d_model": 8, "n_heads": 2, '
      '"d_ffn": 16, "conv_kernel": 3}', "--out", str(d / "asr.ckpt")])
main(["evaluate", "--mtass", str(d / "sep.ckpt"), "--asr", str(d / "asr.ckpt"),
      "--manifest", str(d / "mix/mixtures.jsonl"), "--report", str(d / "report.json")])
print((d / "report.txt").read_text())
