import math
from dataclasses import replace

import numpy as np
import pytest

from jrsv import autodiff as ad
from jrsv.audio import MixerConfig
from jrsv.nn.checkpoint import load_ckpt, model_checkpoint, model_state, save_ckpt
from jrsv.nn.models import SeparatorModel, Vocab
from jrsv.train import (STAGE1_DEFAULTS, STAGE2_DEFAULTS, VARIANTS, AdamState, NumericError, OnTheFlyMixer,
                        SourceBank, TrainConfig, adam_step, asr_checkpoint, clip_grad_norm, embedded_separator,
                        moving_average, noam_lr, run_variant_suite, train_stage1, train_stage2)

from conftest import TINY_ENCODER, tiny_asr_config, tiny_separator_config


def p_(x):
    return ad.Tensor(np.asarray(x, dtype=float), requires_grad=True)


# -- optimizer -----------------------------------------------------------------------------------

def test_adam_zero_gradient_leaves_parameters():
    p = p_([1.0, -2.0])
    p.grad = np.zeros(2)
    adam_step({"p": p}, AdamState(), 0.1)
    np.testing.assert_array_equal(p.value, [1.0, -2.0])


def test_adam_first_step_moves_by_lr():
    p = p_(0.0)
    p.grad = np.array(1.0)
    adam_step({"p": p}, AdamState(), 0.1)
    assert p.value == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-15)


def test_adam_converges_on_quadratic():
    p = p_(0.0)
    state = AdamState()
    for _ in range(200):
        p.grad = 2.0 * (p.value - 3.0)
        adam_step({"p": p}, state, 0.1)
    assert abs(float(p.value) - 3.0) < 1e-2


def test_adam_skips_parameters_without_gradient():
    a, b = p_(1.0), p_(1.0)
    a.grad = np.array(1.0)
    adam_step({"a": a, "b": b}, AdamState(), 0.1)
    assert float(b.value) == 1.0 and float(a.value) < 1.0


def test_non_finite_gradient_names_parameter():
    p = p_([1.0, 2.0])
    p.grad = np.array([0.0, np.nan])
    with pytest.raises(NumericError, match="encoder.w"):
        adam_step({"encoder.w": p}, AdamState(), 0.1)
    np.testing.assert_array_equal(p.value, [1.0, 2.0])


def test_clip_grad_norm():
    a, b = p_(np.zeros(2)), p_(np.zeros(1))
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert clip_grad_norm({"a": a, "b": b}, 1.0) == pytest.approx(5.0)
    assert math.sqrt(float((a.grad ** 2).sum() + (b.grad ** 2).sum())) == pytest.approx(1.0, abs=1e-9)


# -- schedule ------------------------------------------------------------------------------------

def test_noam_examples():
    d, w = 32, 100
    for step in (50, 200):
        hand = d ** -0.5 * min(step ** -0.5, step * w ** -1.5)
        assert abs(noam_lr(step, d, w) - hand) < 1e-12
    assert w ** -0.5 == pytest.approx(w * w ** -1.5, abs=1e-15)
    rates = [noam_lr(s, d, w) for s in range(1, 1000)]
    assert int(np.argmax(rates)) + 1 == w
    with pytest.raises(ValueError):
        noam_lr(0, d, w)


def test_noam_lr_is_peak_rate():
    cfg = TrainConfig(lr=2e-3, schedule="noam", warmup_steps=10)
    assert cfg.lr_at(10, 32) == pytest.approx(2e-3, rel=1e-12)
    assert cfg.lr_at(5, 32) < 2e-3 and cfg.lr_at(40, 32) < 2e-3
    assert TrainConfig(lr=3e-4).lr_at(7, 32) == 3e-4


def test_train_config_validation():
    assert (TrainConfig().lam, TrainConfig().gamma, TrainConfig().alpha, TrainConfig().beta) == (0.1, 0.3, 0.3, 0.001)
    for bad in (dict(variant="jrsv"), dict(schedule="cosine"), dict(lr=0.0), dict(max_steps=0), dict(batch_size=0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_presets():
    assert STAGE1_DEFAULTS.schedule == "constant"
    assert STAGE2_DEFAULTS.schedule == "noam"


def test_moving_average():
    np.testing.assert_allclose(moving_average(np.arange(5.0), 2), [0.5, 1.5, 2.5, 3.5])
    assert moving_average(np.arange(3.0), 10).tolist() == [1.0]


# -- data stream ---------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def bank(corpus_dir):
    return SourceBank.from_dir(corpus_dir)


def test_mixer_stream_is_deterministic_and_fresh(bank):
    a, b = OnTheFlyMixer(bank, MixerConfig(), 0), OnTheFlyMixer(bank, MixerConfig(), 0)
    specs = []
    for _ in range(5):
        x, y = a.draw(), b.draw()
        np.testing.assert_array_equal(x.mixture.samples, y.mixture.samples)
        specs.append(x.spec)
    assert all(s != t for s, t in zip(specs, specs[1:]))
    other = OnTheFlyMixer(bank, MixerConfig(), 1).draw()
    assert other.spec != specs[0]


def test_empty_bank_rejected(bank):
    with pytest.raises(ValueError):
        SourceBank(bank.speech, [], bank.music)


# -- stage 1 -------------------------------------------------------------------------------------

def _s1(**kw):
    return TrainConfig(**{"lr": 3e-3, "max_steps": 3, "batch_size": 1, **kw})


def test_stage1_is_bit_reproducible(bank, tmp_path):
    runs = []
    for i in range(2):
        model, report, _ = train_stage1(_s1(), bank, sep_cfg=tiny_separator_config())
        path = tmp_path / f"s{i}.ckpt"
        save_ckpt(model_checkpoint(model, 3), path)
        runs.append((path.read_bytes(), report.losses().tolist()))
    assert runs[0] == runs[1]
    model, report, _ = train_stage1(_s1(seed=1), bank, sep_cfg=tiny_separator_config())
    assert report.losses().tolist() != runs[0][1]


def test_stage1_loss_decreases(bank):
    _, report, _ = train_stage1(_s1(max_steps=200, lr=3e-3), bank, sep_cfg=tiny_separator_config())
    mag = moving_average(report.losses("mag"), 20)
    assert mag[-1] < mag[0]


# -- stage 2 -------------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def separator(bank):
    model, _, _ = train_stage1(_s1(max_steps=2), bank, sep_cfg=tiny_separator_config())
    return model


def _fresh(separator):
    sep = SeparatorModel(separator.config)
    from jrsv.nn.checkpoint import load_state
    load_state(sep, model_state(separator))
    return sep


def _s2(bank, separator, variant, **kw):
    vocab = Vocab.from_texts(bank.texts())
    cfg = TrainConfig(**{"variant": variant, "lr": 3e-3, "max_steps": 2, "batch_size": 1, **kw})
    asr_cfg = tiny_asr_config(vocab.size, 80 if variant == "cascade" else 513)
    if variant == "cascade":
        asr_cfg = replace(asr_cfg, log_input=False)
    return train_stage2(cfg, bank, None if variant == "cascade" else _fresh(separator), vocab, asr_cfg=asr_cfg)


@pytest.mark.parametrize("variant", ["jrsv_f", "jrsv_f_d"])
def test_frozen_variants_leave_separator_bit_unchanged(bank, separator, variant):
    before = model_state(separator)
    _, sep, report, _ = _s2(bank, separator, variant)
    after = model_state(sep)
    assert before.keys() == after.keys()
    assert all(np.array_equal(before[k], after[k]) for k in before)
    assert all(r.asr_loss_evals == {"clean": 1, "separated": 1} for r in report.records)


def test_joint_variant_updates_separator(bank, separator):
    before = model_state(separator)
    _, sep, report, _ = _s2(bank, separator, "jrsv_t", max_steps=1)
    after = model_state(sep)
    assert any(not np.array_equal(before[k], after[k]) for k in before)
    assert "mtass" in report.records[0].parts


def test_distillation_only_in_distilled_variant(bank, separator):
    _, _, f, _ = _s2(bank, separator, "jrsv_f", max_steps=1)
    _, _, fd, _ = _s2(bank, separator, "jrsv_f_d", max_steps=1)
    assert f.records[0].parts["distil"] == 0.0
    assert fd.records[0].parts["distil"] > 0.0


def test_cascade_trains_on_clean_fbank_only(bank, separator):
    _, sep, report, _ = _s2(bank, separator, "cascade", max_steps=1)
    assert sep is None
    assert report.records[0].asr_loss_evals == {"clean": 1, "separated": 0}


def test_non_cascade_needs_separator(bank):
    vocab = Vocab.from_texts(bank.texts())
    with pytest.raises(ValueError, match="separator"):
        train_stage2(TrainConfig(max_steps=1), bank, None, vocab, asr_cfg=tiny_asr_config(vocab.size))


def test_vocab_mismatch_rejected(bank, separator):
    vocab = Vocab.from_texts(bank.texts())
    with pytest.raises(ValueError, match="vocab_size"):
        train_stage2(TrainConfig(max_steps=1), bank, separator, vocab, asr_cfg=tiny_asr_config(vocab.size + 1))


def test_stage2_is_bit_reproducible(bank, separator, tmp_path):
    blobs = []
    for i in range(2):
        asr, _, report, _ = _s2(bank, separator, "jrsv_f_d")
        vocab = Vocab.from_texts(bank.texts())
        path = tmp_path / f"a{i}.ckpt"
        save_ckpt(asr_checkpoint(asr, vocab, "jrsv_f_d", 2), path)
        blobs.append((path.read_bytes(), report.losses().tolist()))
    assert blobs[0] == blobs[1]


def test_joint_checkpoint_embeds_separator(bank, separator, tmp_path):
    asr, sep, _, _ = _s2(bank, separator, "jrsv_t", max_steps=1)
    vocab = Vocab.from_texts(bank.texts())
    save_ckpt(asr_checkpoint(asr, vocab, "jrsv_t", 1, sep), tmp_path / "t.ckpt")
    restored = embedded_separator(load_ckpt(tmp_path / "t.ckpt"))
    state = model_state(sep)
    assert all(np.array_equal(state[k], v) for k, v in model_state(restored).items())
    save_ckpt(asr_checkpoint(asr, vocab, "jrsv_f", 1, sep), tmp_path / "f.ckpt")
    assert embedded_separator(load_ckpt(tmp_path / "f.ckpt")) is None


def test_stage2_loss_decreases(bank, separator):
    _, _, report, _ = _s2(bank, separator, "jrsv_f", max_steps=200, schedule="noam", warmup_steps=20)
    curve = moving_average(report.losses(), 20)
    assert curve[-1] < curve[0]


# -- variant suite -------------------------------------------------------------------------------

def test_variant_suite_table(bank, separator, mixture_manifest):
    s2 = TrainConfig(lr=3e-3, max_steps=1, batch_size=1)
    vocab = Vocab.from_texts(bank.texts())
    asr_base = tiny_asr_config(vocab.size)
    results, reports, table = run_variant_suite(VARIANTS, bank, mixture_manifest, stage2_cfg=s2,
                                                asr_base=asr_base, separator=separator)
    assert list(results) == ["cascade", "JRSV-t", "JRSV-f", "JRSV-f-d"]
    assert set(reports) == set(VARIANTS)
    cer_block = table.split("\n\n")[1].splitlines()
    assert [c.strip() for c in cer_block[1].split("|")] == ["Overlap Ratios", "0.0", "0.1", "0.3", "0.5", "1.0", "Avg."]
    assert [ln.split("|")[0].strip() for ln in cer_block[3:]] == list(results)
    for rep in results.values():
        for name, avg in rep.averages.items():
            vals = [v for v in getattr(rep, name).values() if v is not None]
            assert abs(avg - float(np.mean(vals))) < 1e-9
