import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jrsv.audio import Waveform
from jrsv.decode import DecodeConfig, Hypothesis, JrsvSystem, prefix_beam_search, recognize, rescore
from jrsv.nn.models import AsrConfig, AsrModel, SeparatorModel, Vocab

from conftest import TINY_ENCODER, tiny_asr_config, tiny_separator_config
from oracles import labeling_marginals, path_table, random_probs

UNBOUNDED = DecodeConfig(beam_size=None, n_best=10**6)


def ranking(marginals):
    return sorted(marginals.items(), key=lambda kv: (-kv[1], kv[0]))


def test_decode_config_validation():
    assert (DecodeConfig().beam_size, DecodeConfig().n_best, DecodeConfig().ctc_weight) == (10, 10, 0.5)
    for bad in (dict(beam_size=0), dict(n_best=0), dict(beam_size=3, n_best=4)):
        with pytest.raises(ValueError):
            DecodeConfig(**bad)


def test_single_frame_example():
    top = prefix_beam_search(np.log([[0.6, 0.4]]))[0]
    assert top.tokens == ()
    assert top.ctc_score == pytest.approx(math.log(0.6), abs=1e-15)


def test_empty_input_rejected():
    with pytest.raises(ValueError):
        prefix_beam_search(np.zeros((0, 3)))


def test_peaked_distribution_gives_collapsed_greedy_path():
    greedy = [1, 1, 0, 2, 2, 0, 0, 1, 3]
    p = np.full((len(greedy), 4), 0.001)
    p[np.arange(len(greedy)), greedy] = 0.997
    assert prefix_beam_search(np.log(p))[0].tokens == (1, 2, 1, 3)


@pytest.mark.parametrize("V", [1, 2, 3])
def test_unbounded_beam_equals_exhaustive_marginalization(V):
    rng = np.random.default_rng(10 + V)
    for T in range(1, 6):
        table = path_table(T, V + 1)
        for _ in range(3):
            p = random_probs(rng, T, V + 1)
            oracle = ranking(labeling_marginals(p, table))
            hyps = prefix_beam_search(np.log(p), UNBOUNDED)
            assert [h.tokens for h in hyps] == [lab for lab, _ in oracle]
            assert max(abs(h.ctc_score - s) for h, (_, s) in zip(hyps, oracle)) < 1e-10


def test_hypotheses_sorted_and_blank_free(rng):
    hyps = prefix_beam_search(np.log(random_probs(rng, 7, 4)), DecodeConfig(beam_size=5, n_best=5))
    assert len(hyps) == 5
    scores = [h.ctc_score for h in hyps]
    assert scores == sorted(scores, reverse=True)
    assert all(0 not in h.tokens for h in hyps)


def test_ties_break_lexicographically():
    # a and b equally likely: (1,) precedes (2,)
    hyps = prefix_beam_search(np.log([[0.2, 0.4, 0.4]]), DecodeConfig(beam_size=3, n_best=3))
    assert [h.tokens for h in hyps] == [(1,), (2,), ()]


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 7), st.integers(1, 3), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_no_finite_beam_beats_the_unbounded_beam(T, V, beam, seed):
    lp = np.log(random_probs(np.random.default_rng(seed), T, V + 1))
    pruned = prefix_beam_search(lp, DecodeConfig(beam_size=beam, n_best=1))[0].ctc_score
    exact = prefix_beam_search(lp, UNBOUNDED)[0].ctc_score
    assert pruned <= exact + 1e-12


def test_finite_beams_are_not_always_monotone():
    # standard prefix beam search: pruning at width 3 drops a sibling that width 2 never
    # produced, so the wider beam's best prefix scores lower here
    p = np.array([[0.6, 0.1, 0.3], [0.2, 0.2, 0.6], [0.4, 0.1, 0.5], [0.1, 0.3, 0.6], [0.5, 0.3, 0.2]])
    top = {b: prefix_beam_search(np.log(p), DecodeConfig(beam_size=b, n_best=1))[0] for b in (1, 2, 3)}
    assert top[1].ctc_score < top[2].ctc_score
    assert top[3].ctc_score < top[2].ctc_score
    assert top[3].ctc_score <= prefix_beam_search(np.log(p), UNBOUNDED)[0].ctc_score


def test_deterministic(rng):
    lp = np.log(random_probs(rng, 6, 4))
    a = prefix_beam_search(lp, DecodeConfig(beam_size=4, n_best=4))
    b = prefix_beam_search(lp.copy(), DecodeConfig(beam_size=4, n_best=4))
    assert [(h.tokens, h.ctc_score) for h in a] == [(h.tokens, h.ctc_score) for h in b]


# -- rescoring -----------------------------------------------------------------------------------

@pytest.fixture
def toy_asr(rng):
    model = AsrModel(tiny_asr_config(vocab_size=5, input_dim=16), seed=3)
    enc = model.encode(rng.uniform(0.1, 1.0, size=(20, 16)))
    return model, enc


def test_rescore_single_candidate(toy_asr):
    model, enc = toy_asr
    h = Hypothesis((1, 2), -1.5)
    best = rescore([h], enc, model)
    assert best.tokens == (1, 2) and best.ctc_score == -1.5
    assert best.att_score == model.rescorer_logprob(enc, (1, 2))
    assert best.combined == best.att_score + 0.5 * best.ctc_score


def test_rescore_empty_candidate_scores_eos_only(toy_asr):
    model, enc = toy_asr
    best = rescore([Hypothesis((), -0.1)], enc, model)
    lp = model.decoder_logprobs(enc, []).value
    assert best.att_score == pytest.approx(lp[0, model.eos], abs=1e-12)


def test_rescore_zero_ctc_weight_is_attention_argmax(toy_asr):
    model, enc = toy_asr
    cands = [Hypothesis(t, s) for t, s in (((1,), -0.1), ((2, 3), -9.0), ((4, 4, 1), -20.0))]
    best = rescore(cands, enc, model, DecodeConfig(ctc_weight=0.0))
    att = {t: model.rescorer_logprob(enc, t) for t in ((1,), (2, 3), (4, 4, 1))}
    assert best.tokens == max(att, key=att.get)


def test_rescore_three_candidates_by_hand(toy_asr):
    model, enc = toy_asr
    spec = (((1, 2), -1.0), ((3,), -0.5), ((2, 4, 1), -3.0))
    cands = [Hypothesis(t, s) for t, s in spec]
    best = rescore(cands, enc, model, DecodeConfig(ctc_weight=0.3))
    combined = {t: model.rescorer_logprob(enc, t) + 0.3 * s for t, s in spec}
    assert best.tokens == max(combined, key=combined.get)
    for h in cands:
        assert h.combined == pytest.approx(combined[h.tokens], abs=1e-12)


def test_rescore_rejects_empty_list(toy_asr):
    model, enc = toy_asr
    with pytest.raises(ValueError):
        rescore([], enc, model)


# -- full pipeline -------------------------------------------------------------------------------

def _system(frontend="magnitude"):
    vocab = Vocab("abc")
    if frontend == "magnitude":
        asr_cfg = tiny_asr_config(vocab.size)
    else:
        asr_cfg = AsrConfig(TINY_ENCODER, input_dim=80, vocab_size=vocab.size, subsample_channels=2,
                            decoder_blocks=1, decoder_heads=2, decoder_ffn=16, log_input=False)
    return JrsvSystem(SeparatorModel(tiny_separator_config(), seed=0), AsrModel(asr_cfg, seed=0), vocab, frontend,
                      decode=DecodeConfig(beam_size=4, n_best=4))


@pytest.fixture(scope="module")
def mixture():
    return Waveform(np.random.default_rng(0).normal(0, 0.05, 16000), 16000)


@pytest.mark.parametrize("frontend", ["magnitude", "fbank"])
def test_recognize_emits_both_labeled_tracks(frontend, mixture):
    out = _system(frontend).recognize(mixture)
    assert set(out) == {"speech", "singing"}
    for track in out.values():
        assert isinstance(track["text"], str) and set(track["text"]) <= set("abc")
        assert np.isfinite(track["score"])


def test_parallel_tracks_match_sequential(mixture):
    system = _system()
    assert system.recognize(mixture, threads=1) == system.recognize(mixture, threads=2)


def test_recognize_function_matches_system(mixture):
    s = _system()
    assert recognize(mixture, s.separator, s.asr, s.vocab, s.decode) == s.recognize(mixture)


def test_separate_preserves_length(mixture):
    sp, sg = _system().separate(mixture)
    assert len(sp) == len(sg) == len(mixture)


def test_too_short_audio_rejected():
    with pytest.raises(ValueError):
        _system().recognize(Waveform(np.zeros(500), 16000))


def test_unknown_frontend_rejected():
    s = _system()
    with pytest.raises(ValueError):
        JrsvSystem(s.separator, s.asr, s.vocab, "mfcc")
