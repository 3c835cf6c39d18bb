import json
import subprocess
import sys

import pytest

from jrsv import cli
from jrsv.gradcheck import CaseResult

TINY = {"n_blocks": 1, "d_model": 8, "n_heads": 2, "d_ffn": 16, "conv_kernel": 3}


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    lines = [ln for ln in out.splitlines() if ln.strip()]
    return code, (json.loads(lines[-1]) if lines else None), err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    config = {
        "corpus": {"n_utterances": 4, "max_tokens": 3},
        "separator": {"encoder": TINY},
        "asr": {"encoder": TINY, "subsample_channels": 2, "decoder_blocks": 1, "decoder_heads": 2, "decoder_ffn": 16},
        "train": {"max_steps": 2, "batch_size": 1},
        "decode": {"beam_size": 3, "n_best": 3},
        "data": {"speech": "corpus/speech.jsonl", "singing": "corpus/singing.jsonl", "music": "corpus/music.jsonl"},
    }
    (d / "config.json").write_text(json.dumps(config))
    return d


@pytest.fixture(scope="module")
def trained(workspace):
    """Corpus, mixtures and both checkpoints produced through the CLI itself."""
    cfg = workspace / "config.json"
    c = workspace / "corpus"
    steps = [
        ["synth-corpus", "--config", cfg, "--out", c],
        ["mix", "--config", cfg, "--speech", c / "speech.jsonl", "--sing", c / "singing.jsonl",
         "--music", c / "music.jsonl", "--out", workspace / "mix"],
        ["train-mtass", "--config", cfg, "--out", workspace / "sep.ckpt"],
        ["train-asr", "--config", cfg, "--mtass", workspace / "sep.ckpt", "--out", workspace / "asr.ckpt"],
    ]
    for argv in steps:
        assert cli.main([str(a) for a in argv]) == 0, argv
    return workspace


def test_pipeline_commands(trained, capsys):
    d = trained
    # manifest paths are relative to the manifest's folder
    mixture = d / "mix" / json.loads((d / "mix" / "mixtures.jsonl").read_text().splitlines()[0])["mixture"]
    code, out, _ = run(capsys, "separate", "--mtass", d / "sep.ckpt", "--in", mixture, "--out", d / "sep_out")
    assert code == 0 and set(out["outputs"]) == {"speech", "singing"}
    assert (d / "sep_out" / "speech.wav").is_file()
    code, out, _ = run(capsys, "recognize", "--config", d / "config.json", "--mtass", d / "sep.ckpt",
                       "--asr", d / "asr.ckpt", "--in", mixture, "--out", d / "rec.json")
    assert code == 0 and set(out) == {"speech", "singing"}
    assert json.loads((d / "rec.json").read_text()) == out
    code, out, _ = run(capsys, "evaluate", "--config", d / "config.json", "--mtass", d / "sep.ckpt",
                       "--asr", d / "asr.ckpt", "--manifest", d / "mix" / "mixtures.jsonl", "--report", d / "ev.json")
    assert code == 0 and set(out["avg"]) == {"sdri_speech", "sdri_sing", "cer_speech", "cer_sing"}
    assert (d / "ev.txt").read_text().startswith("SDRi")


def test_training_report_written(trained):
    lines = (trained / "sep.ckpt.report.jsonl").read_text().splitlines()
    assert len(lines) == 2 and json.loads(lines[0])["step"] == 1


def test_same_seed_gives_identical_checkpoint(trained, capsys):
    d = trained
    for name in ("a", "b"):
        code, _, _ = run(capsys, "train-mtass", "--config", d / "config.json", "--seed", 5, "--out", d / f"{name}.ckpt")
        assert code == 0
    assert (d / "a.ckpt").read_bytes() == (d / "b.ckpt").read_bytes()
    run(capsys, "train-mtass", "--config", d / "config.json", "--seed", 6, "--out", d / "c.ckpt")
    assert (d / "c.ckpt").read_bytes() != (d / "a.ckpt").read_bytes()


def test_precedence_flags_over_set_over_file(trained, capsys):
    d = trained
    cfg = d / "config.json"
    _, out, _ = run(capsys, "train-mtass", "--config", cfg, "--out", d / "p.ckpt")
    assert out["steps"] == 2
    _, out, _ = run(capsys, "train-mtass", "--config", cfg, "--set", "train.max_steps=3", "--out", d / "p.ckpt")
    assert out["steps"] == 3
    _, out, _ = run(capsys, "train-mtass", "--config", cfg, "--set", "train.max_steps=3", "--max-steps", 1,
                    "--out", d / "p.ckpt")
    assert out["steps"] == 1


def test_log_file_is_jsonl(trained, capsys):
    d = trained
    log = d / "train.log"
    run(capsys, "train-mtass", "--config", d / "config.json", "--max-steps", 10, "--log-file", log, "--out", d / "l.ckpt")
    records = [json.loads(ln) for ln in log.read_text().splitlines()]
    assert any("stage1 step 10" in r["msg"] for r in records)


def test_train_asr_without_separator_is_usage_error(trained, capsys):
    code, _, err = run(capsys, "train-asr", "--config", trained / "config.json", "--out", trained / "x.ckpt")
    assert code == 1 and "--mtass" in err


def test_unknown_config_key_exit_1(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"learning_rate": 1.0}}))
    code, _, err = run(capsys, "synth-corpus", "--config", bad, "--out", tmp_path / "c")
    assert code == 1 and "learning_rate" in err
    bad.write_text(json.dumps({"training": {}}))
    assert run(capsys, "synth-corpus", "--config", bad, "--out", tmp_path / "c")[0] == 1
    bad.write_text(json.dumps({"separator": {"encoder": {"depth": 2}}}))
    assert run(capsys, "synth-corpus", "--config", bad, "--out", tmp_path / "c")[0] == 1
    bad.write_text("{not json")
    assert run(capsys, "synth-corpus", "--config", bad, "--out", tmp_path / "c")[0] == 1


def test_bad_set_and_bad_arguments_exit_1(tmp_path, capsys):
    assert run(capsys, "synth-corpus", "--set", "nodot=1", "--out", tmp_path)[0] == 1
    assert run(capsys, "synth-corpus", "--set", "corpus.bogus=1", "--out", tmp_path)[0] == 1
    with pytest.raises(SystemExit) as e:
        cli.main(["synth-corpus"])
    assert e.value.code == 1
    with pytest.raises(SystemExit) as e:
        cli.main(["no-such-command"])
    assert e.value.code == 1


def test_missing_files_exit_2(tmp_path, capsys):
    assert run(capsys, "synth-corpus", "--config", tmp_path / "nope.json", "--out", tmp_path)[0] == 2
    code, _, err = run(capsys, "separate", "--mtass", tmp_path / "nope.ckpt", "--in", tmp_path / "x.wav",
                       "--out", tmp_path)
    assert code == 2 and "data error" in err


def test_corrupt_checkpoint_and_wav_exit_2(trained, tmp_path, capsys):
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"not a checkpoint")
    wav = tmp_path / "junk.wav"
    wav.write_bytes(b"RIFF....")
    assert run(capsys, "separate", "--mtass", junk, "--in", wav, "--out", tmp_path)[0] == 2
    assert run(capsys, "separate", "--mtass", trained / "sep.ckpt", "--in", wav, "--out", tmp_path)[0] == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_failure_exit_3(trained, capsys):
    code, _, err = run(capsys, "train-mtass", "--config", trained / "config.json", "--lr", 1e300, "--max-steps", 5,
                       "--out", trained / "nan.ckpt")
    assert code == 3 and "numeric" in err


def test_gradcheck_command(capsys):
    code, out, _ = run(capsys, "gradcheck", "--module", "losses")
    assert code == 0 and out["failed"] == [] and "ctc_loss" in out["cases"]


def test_gradcheck_failure_exit_3(monkeypatch, capsys):
    monkeypatch.setattr(cli, "run_suite", lambda module, seed=0: [CaseResult("broken", "autodiff", 1.0)])
    code, out, _ = run(capsys, "gradcheck")
    assert code == 3 and out["failed"] == ["broken"]


def test_help_lists_every_config_key():
    import dataclasses

    text = cli.build_parser()._subparsers._group_actions[0].choices["train-asr"].format_help()
    for name, (cls, nested) in cli.SECTIONS.items():
        assert f"  {name}:" in text
        for f in dataclasses.fields(cls):
            assert f.name in text
        for sub in nested.values():
            for f in dataclasses.fields(sub):
                assert f.name in text


def test_console_entry_point():
    r = subprocess.run([sys.executable, "-m", "jrsv", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    assert all(c in r.stdout for c in cli.COMMANDS)
