"""SDR / SDRi / CER and the benchmark evaluation protocol."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .audio import MixtureRecord, Waveform, load_wav

OVERLAPS = (0.0, 0.1, 0.3, 0.5, 1.0)
SDR_CAP_DB = 60.0


def _arr(x) -> np.ndarray:
    return np.asarray(x.samples if isinstance(x, Waveform) else x, dtype=np.float64)


def sdr(reference, estimate) -> float:
    """10 log10(|ref|^2 / |ref - est|^2), capped at +60 dB."""
    ref, est = _arr(reference), _arr(estimate)
    if ref.shape != est.shape:
        raise ValueError(f"length mismatch: {ref.shape} vs {est.shape}")
    energy = float(ref @ ref)
    if energy == 0.0:
        raise ValueError("all-zero reference")
    err = ref - est
    distortion = float(err @ err)
    if distortion < 1e-12 * energy:
        return SDR_CAP_DB
    return min(SDR_CAP_DB, 10.0 * np.log10(energy / distortion))


def sdri(reference, estimate, mixture) -> float:
    return sdr(reference, estimate) - sdr(reference, mixture)


def edit_distance(ref, hyp) -> int:
    """Levenshtein distance with unit substitution/insertion/deletion costs."""
    ref, hyp = list(ref), list(hyp)
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def _strip(text: str) -> str:
    return "".join(c for c in text if not c.isspace())


def cer(reference_text: str, hypothesis_text: str) -> float:
    """Character error rate in percent; exceeds 100 when insertions dominate."""
    ref, hyp = _strip(reference_text), _strip(hypothesis_text)
    if not ref:
        raise ValueError("empty reference")
    return 100.0 * edit_distance(ref, hyp) / len(ref)


@dataclass
class UtteranceResult:
    id: str
    overlap: float
    speech_ref: str
    speech_hyp: str
    sing_ref: str
    sing_hyp: str
    sing_counted: bool
    sdri_speech: float | None = None
    sdri_sing: float | None = None


def _row_mean(row: dict) -> float:
    vals = [v for v in row.values() if v is not None and np.isfinite(v)]
    return float(np.mean(vals)) if vals else float("nan")


@dataclass
class EvalReport:
    overlaps: tuple[float, ...] = OVERLAPS
    sdri_speech: dict[float, float | None] = field(default_factory=dict)
    sdri_sing: dict[float, float | None] = field(default_factory=dict)
    cer_speech: dict[float, float | None] = field(default_factory=dict)
    cer_sing: dict[float, float | None] = field(default_factory=dict)
    details: list[UtteranceResult] = field(default_factory=list)

    @property
    def averages(self) -> dict[str, float]:
        return {name: _row_mean(getattr(self, name)) for name in ("sdri_speech", "sdri_sing", "cer_speech", "cer_sing")}

    def to_json(self) -> dict:
        def keyed(d):
            return {f"{k:.1f}": v for k, v in d.items()}

        return {
            "overlaps": list(self.overlaps),
            "sdri": {"speech": keyed(self.sdri_speech), "singing": keyed(self.sdri_sing)},
            "cer": {"speech": keyed(self.cer_speech), "singing": keyed(self.cer_sing)},
            "avg": self.averages,
            "details": [asdict(d) for d in self.details],
        }

    def table(self, name: str = "system") -> str:
        return format_table({name: self}, title="speech / singing")


def _cell(a, b, fmt="{:.1f}") -> str:
    def one(v):
        return "-" if v is None or not np.isfinite(v) else fmt.format(v)
    return f"{one(a)} / {one(b)}"


def format_table(reports: dict[str, EvalReport], title: str = "") -> str:
    """Plain-text tables: SDRi rows and CER rows, one column per overlap ratio plus Avg."""
    if not reports:
        return ""
    overlaps = next(iter(reports.values())).overlaps
    header = ["Overlap Ratios"] + [f"{o:.1f}" for o in overlaps] + ["Avg."]
    blocks = []
    for metric, (ka, kb) in (("SDRi (dB)", ("sdri_speech", "sdri_sing")), ("CER % (Speech / Singing Voices)", ("cer_speech", "cer_sing"))):
        rows = [header]
        for name, rep in reports.items():
            a, b = getattr(rep, ka), getattr(rep, kb)
            avg = rep.averages
            rows.append([name] + [_cell(a.get(o), b.get(o)) for o in overlaps] + [_cell(avg[ka], avg[kb])])
        widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
        lines = [metric + (f" [{title}]" if title else "")]
        for i, r in enumerate(rows):
            lines.append(" | ".join(c.rjust(w) if j else c.ljust(w) for j, (c, w) in enumerate(zip(r, widths))))
            if i == 0:
                lines.append("-+-".join("-" * w for w in widths))
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks)


def _bucket(overlap: float, overlaps) -> float:
    return min(overlaps, key=lambda o: abs(o - overlap))


def evaluate(records: list[MixtureRecord], system, overlaps=OVERLAPS) -> EvalReport:
    """Separate and recognize every mixture, aggregate per overlap ratio.

    ``system`` provides ``separate(mixture) -> (speech, singing)`` and
    ``recognize(mixture) -> {"speech": {"text": ...}, "singing": {"text": ...}}``.
    CER is corpus-level within each bucket (summed edits over summed
    reference characters).  Each singing utterance is counted once, at its
    first appearance in manifest order.
    """
    seen_sing: set[str] = set()
    edits = {("speech", o): [0, 0] for o in overlaps} | {("singing", o): [0, 0] for o in overlaps}
    sdri_acc = {("speech", o): [] for o in overlaps} | {("singing", o): [] for o in overlaps}
    report = EvalReport(tuple(overlaps))
    for rec in records:
        mixture = load_wav(rec.mixture)
        b = _bucket(rec.overlap, overlaps)
        out = system.recognize(mixture)
        sp_hyp, sg_hyp = out["speech"]["text"], out["singing"]["text"]
        counted = rec.sing_id not in seen_sing
        seen_sing.add(rec.sing_id)
        res = UtteranceResult(rec.id, rec.overlap, rec.speech_text, sp_hyp, rec.sing_text, sg_hyp, counted)
        if rec.speech_text:
            e = edits[("speech", b)]
            e[0] += edit_distance(_strip(rec.speech_text), _strip(sp_hyp))
            e[1] += len(_strip(rec.speech_text))
        if counted and rec.sing_text:
            e = edits[("singing", b)]
            e[0] += edit_distance(_strip(rec.sing_text), _strip(sg_hyp))
            e[1] += len(_strip(rec.sing_text))
        if rec.speech and rec.singing:
            est_sp, est_sg = system.separate(mixture)
            ref_sp, ref_sg = load_wav(rec.speech), load_wav(rec.singing)
            res.sdri_speech = sdri(ref_sp, est_sp, mixture)
            res.sdri_sing = sdri(ref_sg, est_sg, mixture)
            sdri_acc[("speech", b)].append(res.sdri_speech)
            sdri_acc[("singing", b)].append(res.sdri_sing)
        report.details.append(res)
    for o in overlaps:
        for track, cer_row, sdri_row in (("speech", report.cer_speech, report.sdri_speech),
                                         ("singing", report.cer_sing, report.sdri_sing)):
            n_err, n_ref = edits[(track, o)]
            cer_row[o] = 100.0 * n_err / n_ref if n_ref else None
            vals = sdri_acc[(track, o)]
            sdri_row[o] = float(np.mean(vals)) if vals else None
    return report


def save_report(report: EvalReport, path, name: str = "system") -> None:
    from pathlib import Path

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.to_json(), indent=2), encoding="utf-8")
    path.with_suffix(".txt").write_text(format_table({name: report}) + "\n", encoding="utf-8")
