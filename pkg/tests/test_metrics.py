import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from jrsv.audio import load_wav, read_mixture_manifest
from jrsv.metrics import OVERLAPS, SDR_CAP_DB, cer, edit_distance, evaluate, format_table, save_report, sdr, sdri

from oracles import edit_distance_recursive


# -- SDR ---------------------------------------------------------------------------------------

def test_sdr_perfect_estimate_hits_cap(rng):
    x = rng.normal(size=1000)
    assert sdr(x, x) == SDR_CAP_DB == 60.0


def test_sdr_constructed_levels(rng):
    x = rng.normal(size=4000)
    noise = rng.normal(size=4000)
    noise *= np.linalg.norm(x) / np.linalg.norm(noise)
    assert sdr(x, x + noise) == pytest.approx(0.0, abs=1e-12)
    assert sdr(x, x + 0.1 * noise) == pytest.approx(20.0, abs=1e-12)


def test_sdr_is_capped_not_infinite(rng):
    x = rng.normal(size=100)
    assert sdr(x, x + 1e-9 * rng.normal(size=100)) == SDR_CAP_DB


def test_sdr_validation():
    with pytest.raises(ValueError):
        sdr(np.ones(4), np.ones(5))
    with pytest.raises(ValueError):
        sdr(np.zeros(4), np.ones(4))


def test_sdri_of_mixture_is_zero(rng):
    ref, mixture = rng.normal(size=500), rng.normal(size=500)
    assert sdri(ref, mixture, mixture) == 0.0


def test_sdri_constructed(rng):
    x = rng.normal(size=4000)
    noise = rng.normal(size=4000)
    noise *= np.linalg.norm(x) / np.linalg.norm(noise)
    assert sdri(x, x + 0.1 * noise, x + noise) == pytest.approx(20.0, abs=1e-12)


@given(st.floats(0.01, 10.0), st.floats(0.01, 10.0))
def test_sdr_decreases_with_error_energy(a, b):
    x = np.sin(np.arange(256) * 0.3)
    e = np.cos(np.arange(256) * 1.7)
    lo, hi = sorted((a, b))
    assert sdr(x, x + hi * e) <= sdr(x, x + lo * e)


# -- CER -----------------------------------------------------------------------------------------

def test_cer_examples():
    assert cer("a", "abc") == 200.0
    assert cer("abc", "axc") == pytest.approx(100.0 / 3, abs=1e-12)
    assert cer("abc", "abc") == 0.0
    assert cer("abc", "") == 100.0


def test_cer_ignores_whitespace():
    assert cer("a b c", "abc") == 0.0
    assert cer("ab", " a  x ") == 50.0


def test_cer_empty_reference():
    with pytest.raises(ValueError):
        cer(" ", "a")


def test_edit_distance_exhaustive_against_recursive_oracle():
    strings = ["".join(s) for n in range(7) for s in itertools.product("abc", repeat=n)]
    rng = np.random.default_rng(0)
    # every reference paired with a spread of hypotheses of every length
    for ref in strings:
        if not ref:
            continue
        hyps = [strings[i] for i in rng.choice(len(strings), 8, replace=False)] + [ref, ref[::-1], ""]
        for hyp in hyps:
            d = edit_distance_recursive(ref, hyp)
            assert edit_distance(ref, hyp) == d
            assert cer(ref, hyp) == 100.0 * d / len(ref)


def test_edit_distance_exhaustive_short_pairs():
    strings = ["".join(s) for n in range(4) for s in itertools.product("abc", repeat=n)]
    for a, b in itertools.product(strings, repeat=2):
        assert edit_distance(a, b) == edit_distance_recursive(a, b)


@given(st.text("abc", max_size=8), st.text("abc", max_size=8))
def test_edit_distance_is_symmetric_and_bounded(a, b):
    d = edit_distance(a, b)
    assert d == edit_distance(b, a)
    assert abs(len(a) - len(b)) <= d <= max(len(a), len(b))


# -- evaluation protocol -------------------------------------------------------------------------

class OracleSystem:
    """Returns the reference tracks and transcripts for every mixture it has seen."""

    def __init__(self, records, speech_hyp=None):
        self._by_mix = {}
        for r in records:
            key = load_wav(r.mixture).samples.tobytes()
            self._by_mix[key] = (r, load_wav(r.speech), load_wav(r.singing))
        self.speech_hyp = speech_hyp

    def separate(self, mixture):
        _, sp, sg = self._by_mix[mixture.samples.tobytes()]
        return sp, sg

    def recognize(self, mixture):
        r, _, _ = self._by_mix[mixture.samples.tobytes()]
        sp = r.speech_text if self.speech_hyp is None else self.speech_hyp
        return {"speech": {"text": sp, "score": 0.0}, "singing": {"text": r.sing_text, "score": 0.0}}


@pytest.fixture(scope="module")
def records(mixture_manifest):
    return read_mixture_manifest(mixture_manifest)


def test_oracle_system_scores(records):
    report = evaluate(records, OracleSystem(records))
    assert report.overlaps == OVERLAPS
    for o in OVERLAPS:
        assert report.cer_speech[o] == 0.0
        assert report.cer_sing[o] in (0.0, None)
        expected = [SDR_CAP_DB - sdr(load_wav(r.speech), load_wav(r.mixture)) for r in records if r.overlap == o]
        assert report.sdri_speech[o] == pytest.approx(float(np.mean(expected)), abs=1e-9)
        assert report.sdri_speech[o] > 0


def test_averages_are_means_of_columns(records):
    report = evaluate(records, OracleSystem(records, speech_hyp=""))
    for name, avg in report.averages.items():
        vals = [v for v in getattr(report, name).values() if v is not None]
        assert abs(avg - float(np.mean(vals))) < 1e-9
    assert report.averages["cer_speech"] == 100.0


def test_singing_counted_once(records):
    doubled = records + records
    a, b = evaluate(records, OracleSystem(records)), evaluate(doubled, OracleSystem(records, speech_hyp="zz"))
    counted = [d.sing_counted for d in b.details]
    first = {}
    for d, r in zip(b.details, doubled):
        first.setdefault(r.sing_id, d.id)
    assert sum(counted) == len(first)
    assert b.cer_sing == a.cer_sing


def test_table_has_five_columns_plus_average(records, tmp_path):
    report = evaluate(records, OracleSystem(records))
    text = format_table({"oracle": report, "again": report})
    header = text.splitlines()[1]
    cols = [c.strip() for c in header.split("|")]
    assert cols == ["Overlap Ratios", "0.0", "0.1", "0.3", "0.5", "1.0", "Avg."]
    assert "SDRi (dB)" in text and "CER %" in text and "oracle" in text
    save_report(report, tmp_path / "r.json")
    assert (tmp_path / "r.txt").read_text().startswith("SDRi")


def test_bucket_without_data_is_dash(records):
    subset = [r for r in records if r.overlap != 0.0]
    report = evaluate(subset, OracleSystem(records))
    assert report.cer_speech[0.0] is None
    assert math.isfinite(report.averages["cer_speech"])
    assert " - / - " in format_table({"x": report})
