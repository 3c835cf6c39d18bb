import numpy as np
import pytest

from jrsv.audio import CorpusConfig, MixerConfig, make_mixture_set, read_manifest, synth_micro_corpus
from jrsv.nn.models import AsrConfig, ConformerConfig, SeparatorConfig

TINY_ENCODER = ConformerConfig(n_blocks=1, d_model=8, n_heads=2, d_ffn=16, conv_kernel=3)


def tiny_separator_config(n_bins=513, output="mask"):
    return SeparatorConfig(TINY_ENCODER, n_bins=n_bins, output=output)


def tiny_asr_config(vocab_size, input_dim=513):
    return AsrConfig(TINY_ENCODER, input_dim=input_dim, vocab_size=vocab_size, subsample_channels=2,
                     decoder_blocks=1, decoder_heads=2, decoder_ffn=16)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    """Small synthetic training corpus shared by the training and CLI tests."""
    d = tmp_path_factory.mktemp("corpus")
    synth_micro_corpus(CorpusConfig(n_utterances=6, seed=0, max_tokens=4), d)
    return d


@pytest.fixture(scope="session")
def mixture_manifest(tmp_path_factory):
    src = tmp_path_factory.mktemp("heldout")
    paths = synth_micro_corpus(CorpusConfig(n_utterances=5, seed=1, max_tokens=4), src)
    out = tmp_path_factory.mktemp("mixtures")
    return make_mixture_set(read_manifest(paths["speech"]), read_manifest(paths["singing"]),
                            read_manifest(paths["music"]), MixerConfig(seed=3), out)


# -- acceptance reporting -----------------------------------------------------------------------

_ACCEPTANCE: dict[int, tuple[str, str, list[str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): one acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    number, title = marker.args
    notes = [str(v) for k, v in item.user_properties if k == "note"]
    _ACCEPTANCE[number] = ("PASS" if rep.passed else "FAIL", title, notes)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        status, title, notes = _ACCEPTANCE[number]
        terminalreporter.write_line(f"[{status}] criterion {number}: {title}")
        for note in notes:
            for line in note.splitlines():
                terminalreporter.write_line(f"        {line}")
