"""Command-line workflows: corpus synthesis, mixing, both training stages,
separation, recognition, evaluation and the gradient-check suite.

Configuration is one JSON file with the sections listed below; every key is
optional, unknown keys are rejected.  Values resolve as command-line flag >
``--set section.key=JSON`` > config file > built-in default.  ``--seed``
overrides every seed (corpus, mixer, training) at once.  The training
commands start from the stage presets (``STAGE1_DEFAULTS`` and
``STAGE2_DEFAULTS`` in ``jrsv.train``) rather than the plain defaults below.

Results go to stdout as one JSON object; logs go to ``--log-file`` as JSONL
(stderr when no file is given).

Exit codes: 0 ok, 1 usage or config-schema error, 2 data error (missing or
malformed file, checkpoint mismatch), 3 numeric failure (NaN / inf).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import wave
from pathlib import Path

from . import __version__
from .audio import CorpusConfig, MixerConfig, load_wav, make_mixture_set, read_manifest, read_mixture_manifest, \
    save_wav, synth_micro_corpus
from .decode import DecodeConfig, JrsvSystem
from .gradcheck import MODULES, TOLERANCE, run_suite
from .metrics import evaluate, save_report
from .nn.checkpoint import CheckpointError, asr_from_checkpoint, load_ckpt, model_checkpoint, save_ckpt, \
    separator_from_checkpoint
from .nn.models import AsrConfig, ConformerConfig, SeparatorConfig, Vocab
from .train import STAGE1_DEFAULTS, STAGE2_DEFAULTS, VARIANTS, NumericError, SourceBank, TrainConfig, \
    asr_checkpoint, default_asr_config, embedded_separator, system_for, train_stage1, train_stage2

log = logging.getLogger("jrsv")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# -- config schema ------------------------------------------------------------------

# section -> (dataclass, nested dataclass fields)
SECTIONS = {
    "corpus": (CorpusConfig, {}),
    "mixer": (MixerConfig, {}),
    "train": (TrainConfig, {}),
    "separator": (SeparatorConfig, {"encoder": ConformerConfig}),
    "asr": (AsrConfig, {"encoder": ConformerConfig}),
    "decode": (DecodeConfig, {}),
}
# data paths are not dataclass-backed; they resolve against the config file's folder
DATA_KEYS = ("speech", "singing", "music")


def _field_names(cls) -> list[str]:
    return [f.name for f in dataclasses.fields(cls)]


def _check_keys(where: str, given: dict, allowed) -> None:
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise UsageError(f"config: unknown key(s) {unknown} in {where!r}; allowed: {sorted(allowed)}")


def load_config(path: str | None) -> dict:
    """Read and schema-check a config file; returns {section: dict} (no defaults filled)."""
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise DataError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise UsageError(f"config {p}: invalid JSON ({e})") from e
    if not isinstance(raw, dict):
        raise UsageError(f"config {p}: top level must be an object")
    _check_keys("<top level>", raw, list(SECTIONS) + ["data"])
    for name, value in raw.items():
        if not isinstance(value, dict):
            raise UsageError(f"config: section {name!r} must be an object")
        if name == "data":
            _check_keys("data", value, DATA_KEYS)
            raw["data"] = {k: str((p.parent / v).resolve()) for k, v in value.items()}
            continue
        cls, nested = SECTIONS[name]
        _check_keys(name, value, _field_names(cls))
        for key, sub in nested.items():
            if key in value:
                if not isinstance(value[key], dict):
                    raise UsageError(f"config: {name}.{key} must be an object")
                _check_keys(f"{name}.{key}", value[key], _field_names(sub))
    return raw


def _parse_set(items) -> dict:
    """``section.key=value`` (value parsed as JSON, falling back to a string) -> nested dict."""
    out: dict = {}
    for item in items or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        path, text = item.split("=", 1)
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        *parents, leaf = path.split(".")
        node = out
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = value
    return out


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out.get(k, {}), v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def _build(section: str, values: dict, default=None):
    cls, nested = SECTIONS[section]
    base = dataclasses.asdict(default) if default is not None else {}
    values = _merge(base, values)
    kwargs = dict(values)
    for key, sub in nested.items():
        if key in kwargs:
            kwargs[key] = sub(**kwargs[key])
    try:
        if cls is MixerConfig:
            return MixerConfig.from_dict(kwargs)
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise UsageError(f"config section {section!r}: {e}") from e


class Settings:
    """Resolved configuration for one command invocation."""

    def __init__(self, args):
        raw = load_config(getattr(args, "config", None))
        overrides = _parse_set(getattr(args, "set", None))
        _check_keys("--set", overrides, list(SECTIONS) + ["data"])
        raw = _merge(raw, overrides)
        for name in SECTIONS:
            cls, nested = SECTIONS[name]
            _check_keys(name, raw.get(name, {}), _field_names(cls))
        self.raw = raw
        self.seed = getattr(args, "seed", None)

    def section(self, name: str, default=None, **flags):
        values = dict(self.raw.get(name, {}))
        values.update({k: v for k, v in flags.items() if v is not None})
        if self.seed is not None and "seed" in _field_names(SECTIONS[name][0]):
            values["seed"] = self.seed
        return _build(name, values, default)

    def data(self, key: str, flag: str | None) -> str:
        path = flag or self.raw.get("data", {}).get(key)
        if not path:
            raise UsageError(f"no {key} manifest: pass --{'sing' if key == 'singing' else key} or set data.{key}")
        return _existing(path)


def _existing(path) -> str:
    if not Path(path).exists():
        raise DataError(f"file not found: {path}")
    return str(path)


def _schema_help() -> str:
    lines = ["config keys (JSON sections; all optional):"]
    for name, (cls, nested) in SECTIONS.items():
        lines.append(f"  {name}:")
        for f in dataclasses.fields(cls):
            if f.name in nested:
                sub = ", ".join(_field_names(nested[f.name]))
                lines.append(f"    {f.name}: {{{sub}}}")
            else:
                default = f.default if f.default is not dataclasses.MISSING else "(factory)"
                lines.append(f"    {f.name} = {default!r}")
    lines.append("  data:")
    lines.append("    speech, singing, music = manifest paths, relative to the config file")
    return "\n".join(lines)


# -- logging ---------------------------------------------------------------------------

class JsonlFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        return json.dumps({"level": record.levelname, "logger": record.name, "msg": record.getMessage()})


def _setup_logging(path: str | None, verbose: bool) -> None:
    root = logging.getLogger()
    for h in list(root.handlers):
        root.removeHandler(h)
    handler = logging.FileHandler(path, mode="a", encoding="utf-8") if path else logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonlFormatter())
    root.addHandler(handler)
    root.setLevel(logging.INFO if verbose or path else logging.WARNING)
    logging.captureWarnings(True)


def _emit(result: dict) -> None:
    sys.stdout.write(json.dumps(result, sort_keys=True) + "\n")
    sys.stdout.flush()


# -- commands --------------------------------------------------------------------------

def cmd_synth_corpus(args, st: Settings) -> dict:
    cfg = st.section("corpus")
    paths = synth_micro_corpus(cfg, args.out)
    return {"manifests": {k: str(v) for k, v in paths.items()}, "n_utterances": cfg.n_utterances}


def cmd_mix(args, st: Settings) -> dict:
    cfg = st.section("mixer")
    speech = read_manifest(_existing(args.speech))
    sing = read_manifest(_existing(args.sing))
    music = read_manifest(_existing(args.music))
    path = make_mixture_set(speech, sing, music, cfg, args.out)
    return {"manifest": str(path), "n_mixtures": len(read_mixture_manifest(path))}


def _bank(args, st: Settings) -> SourceBank:
    return SourceBank.from_manifests(st.data("speech", args.speech), st.data("singing", args.sing),
                                     st.data("music", args.music))


def _train_settings(args, st: Settings, default: TrainConfig, **extra) -> TrainConfig:
    return st.section("train", default, max_steps=args.max_steps, lr=args.lr, batch_size=args.batch_size, **extra)


def _write_report(report, out: str, explicit: str | None) -> str:
    path = explicit or str(out) + ".report.jsonl"
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    report.write_jsonl(path)
    return path


def cmd_train_mtass(args, st: Settings) -> dict:
    cfg = _train_settings(args, st, STAGE1_DEFAULTS)
    sep_cfg = st.section("separator")
    bank = _bank(args, st)
    model, report, _ = train_stage1(cfg, bank, st.section("mixer"), sep_cfg, log_every=10)
    save_ckpt(model_checkpoint(model, cfg.max_steps, {"seed": cfg.seed}, train=dataclasses.asdict(cfg)), args.out)
    return {"checkpoint": str(args.out), "report": _write_report(report, args.out, args.report),
            "steps": cfg.max_steps, "final_loss": report.records[-1].total}


def _load_separator(path: str | None):
    if path is None:
        return None
    return separator_from_checkpoint(load_ckpt(_existing(path)))


def cmd_train_asr(args, st: Settings) -> dict:
    cfg = _train_settings(args, st, STAGE2_DEFAULTS, variant=args.variant)
    if cfg.variant != "cascade" and args.mtass is None:
        raise UsageError(f"variant {cfg.variant} needs --mtass CKPT")
    separator = _load_separator(args.mtass)
    bank = _bank(args, st)
    vocab = Vocab.from_texts(bank.texts())
    base = st.section("asr", AsrConfig(vocab_size=vocab.size)) if "asr" in st.raw else None
    asr_cfg = default_asr_config(cfg.variant, vocab, base)
    asr, separator, report, _ = train_stage2(cfg, bank, separator, vocab, st.section("mixer"), asr_cfg, log_every=10)
    ckpt = asr_checkpoint(asr, vocab, cfg.variant, cfg.max_steps, separator, {"seed": cfg.seed})
    ckpt.extra["train"] = dataclasses.asdict(cfg)
    save_ckpt(ckpt, args.out)
    return {"checkpoint": str(args.out), "report": _write_report(report, args.out, args.report),
            "variant": cfg.variant, "steps": cfg.max_steps, "final_loss": report.records[-1].total}


def _system(args, st: Settings) -> JrsvSystem:
    asr_ckpt = load_ckpt(_existing(args.asr))
    asr = asr_from_checkpoint(asr_ckpt)
    vocab = Vocab(asr_ckpt.extra["vocab"])
    variant = asr_ckpt.extra.get("variant", "jrsv_f")
    # a jointly trained recognizer carries its own separator
    separator = embedded_separator(asr_ckpt) or _load_separator(args.mtass)
    if separator is None:
        raise UsageError("--mtass CKPT is required for this recognizer checkpoint")
    return system_for(variant, separator, asr, vocab, st.section("decode"))


def _read_wav(path) -> "object":
    try:
        return load_wav(_existing(path))
    except (wave.Error, EOFError) as e:
        raise DataError(f"{path}: unreadable WAV ({e})") from e


def cmd_separate(args, st: Settings) -> dict:
    separator = _load_separator(_existing(args.mtass))
    mixture = _read_wav(args.input)
    system = JrsvSystem(separator, None, None)
    speech, singing = system.separate(mixture)
    out = Path(args.out)
    paths = {"speech": str(out / "speech.wav"), "singing": str(out / "singing.wav")}
    clipped = save_wav(paths["speech"], speech) + save_wav(paths["singing"], singing)
    return {"outputs": paths, "clipped_samples": clipped}


def cmd_recognize(args, st: Settings) -> dict:
    system = _system(args, st)
    result = system.recognize(_read_wav(args.input))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(result, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return result


def cmd_evaluate(args, st: Settings) -> dict:
    system = _system(args, st)
    records = read_mixture_manifest(_existing(args.manifest))
    report = evaluate(records, system)
    save_report(report, args.report)
    return {"report": str(args.report), "avg": report.averages}


def cmd_gradcheck(args, st: Settings) -> dict:
    results = run_suite(args.module, seed=args.seed or 0)
    failed = [r.name for r in results if not r.passed]
    out = {"tolerance": TOLERANCE, "cases": {r.name: r.error for r in results}, "failed": failed}
    if failed:
        raise GradcheckFailure(out)
    return out


class GradcheckFailure(Exception):
    pass


COMMANDS = {
    "synth-corpus": cmd_synth_corpus,
    "mix": cmd_mix,
    "train-mtass": cmd_train_mtass,
    "train-asr": cmd_train_asr,
    "separate": cmd_separate,
    "recognize": cmd_recognize,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
}


# -- parser ------------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    parser = _Parser(prog="jrsv", description=__doc__, formatter_class=fmt, epilog=_schema_help())
    parser.add_argument("--version", action="version", version=f"jrsv {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, epilog=_schema_help(), formatter_class=fmt)
        p.add_argument("--config", help="JSON config file (strict schema, see below)")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override one config value; repeatable; VALUE is parsed as JSON")
        p.add_argument("--seed", type=int, help="seed for every random stream (overrides all config seeds)")
        p.add_argument("--log-file", help="append JSONL logs here (default: stderr)")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
        return p

    p = add("synth-corpus", "generate the synthetic speech/singing/music corpus and its manifests")
    p.add_argument("--out", required=True, help="output directory")

    p = add("mix", "materialize a fixed dev/test mixture set")
    p.add_argument("--speech", required=True, help="speech manifest (JSONL)")
    p.add_argument("--sing", required=True, help="singing manifest (JSONL)")
    p.add_argument("--music", required=True, help="music manifest (JSONL)")
    p.add_argument("--out", required=True, help="output directory (mixtures.jsonl + wav/)")

    def train_flags(p):
        p.add_argument("--speech", help="speech manifest (else data.speech)")
        p.add_argument("--sing", help="singing manifest (else data.singing)")
        p.add_argument("--music", help="music manifest (else data.music)")
        p.add_argument("--max-steps", type=int, help="override train.max_steps")
        p.add_argument("--lr", type=float, help="override train.lr")
        p.add_argument("--batch-size", type=int, help="override train.batch_size")
        p.add_argument("--out", required=True, help="checkpoint path")
        p.add_argument("--report", help="training report JSONL (default: CKPT.report.jsonl)")

    p = add("train-mtass", "stage 1: train the separator on on-the-fly mixtures")
    train_flags(p)

    p = add("train-asr", "stage 2: train the recognizer on top of a separator checkpoint")
    train_flags(p)
    p.add_argument("--mtass", help="separator checkpoint (required except for cascade)")
    p.add_argument("--variant", choices=VARIANTS, help="override train.variant")

    p = add("separate", "split a mixture WAV into speech.wav and singing.wav")
    p.add_argument("--mtass", required=True, help="separator checkpoint")
    p.add_argument("--in", dest="input", required=True, help="mixture WAV")
    p.add_argument("--out", required=True, help="output directory")

    p = add("recognize", "transcribe both tracks of a mixture WAV")
    p.add_argument("--mtass", help="separator checkpoint (optional when the recognizer embeds one)")
    p.add_argument("--asr", required=True, help="recognizer checkpoint")
    p.add_argument("--in", dest="input", required=True, help="mixture WAV")
    p.add_argument("--out", required=True, help="output JSON")

    p = add("evaluate", "score separation (SDRi) and recognition (CER) per overlap ratio")
    p.add_argument("--manifest", required=True, help="mixture manifest from `jrsv mix`")
    p.add_argument("--mtass", help="separator checkpoint (optional when the recognizer embeds one)")
    p.add_argument("--asr", required=True, help="recognizer checkpoint")
    p.add_argument("--report", required=True, help="report path (.json; a .txt table is written beside it)")

    p = add("gradcheck", "run the finite-difference gradient suite")
    p.add_argument("--module", default="all", choices=("all",) + MODULES, help="which group of checks")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.log_file, args.verbose)
    try:
        settings = Settings(args)
        result = COMMANDS[args.command](args, settings)
    except UsageError as e:
        print(f"jrsv {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except GradcheckFailure as e:
        _emit(e.args[0])
        print(f"jrsv gradcheck: failed cases {e.args[0]['failed']}", file=sys.stderr)
        return EXIT_NUMERIC
    except (NumericError, FloatingPointError) as e:
        print(f"jrsv {args.command}: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CheckpointError, FileNotFoundError, KeyError, ValueError, wave.Error) as e:
        print(f"jrsv {args.command}: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    _emit(result)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
