"""ASR scoring kit: corpus manifests, text normalisation, edit-distance
metrics, recogniser adapters and with/without front-end comparison reports."""
from __future__ import annotations

import csv
import json
import logging
import re
import shlex
import subprocess
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Protocol, Sequence

log = logging.getLogger(__name__)

DOMAIN_LABELS = ("normal", "laughter", "creaky")
MANIFEST_COLUMNS = ("utterance_id", "wav_path", "transcript", "domain", "speaker_id", "gender")
NO_FE = "no-FE"
DEFAULT_TIMEOUT = 60.0


class ManifestError(ValueError):
    """Malformed corpus manifest."""


# --- manifest ----------------------------------------------------------------

@dataclass(frozen=True)
class ManifestRow:
    utterance_id: str
    wav_path: str
    transcript: str
    domain: str
    speaker_id: str
    gender: str


@dataclass(frozen=True)
class CorpusManifest:
    rows: tuple[ManifestRow, ...]

    def __post_init__(self):
        seen = set()
        for r in self.rows:
            if r.utterance_id in seen:
                raise ManifestError(f"duplicate utterance_id {r.utterance_id!r}")
            seen.add(r.utterance_id)
            if r.domain not in DOMAIN_LABELS:
                raise ManifestError(f"utterance {r.utterance_id!r}: domain {r.domain!r} "
                                    f"not in {DOMAIN_LABELS}")

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def by_id(self) -> dict[str, ManifestRow]:
        return {r.utterance_id: r for r in self.rows}


def read_manifest(path) -> CorpusManifest:
    """Read a UTF-8 TSV manifest with a header row.

    Relative ``wav_path`` entries are resolved against the manifest's
    directory.
    """
    path = Path(path)
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != MANIFEST_COLUMNS:
            raise ManifestError(f"{path}: header must be {' '.join(MANIFEST_COLUMNS)!r}, got {header!r}")
        rows = []
        for lineno, fields in enumerate(reader, start=2):
            if not fields or all(not f.strip() for f in fields):
                continue
            if len(fields) != len(MANIFEST_COLUMNS):
                raise ManifestError(f"{path}:{lineno}: expected {len(MANIFEST_COLUMNS)} columns, "
                                    f"got {len(fields)}")
            uid, wav, text, dom, spk, gender = fields
            wav_path = Path(wav)
            if not wav_path.is_absolute():
                wav_path = path.parent / wav_path
            rows.append(ManifestRow(uid, str(wav_path), text, dom, spk, gender))
    return CorpusManifest(tuple(rows))


def write_manifest(manifest: CorpusManifest, path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", quoting=csv.QUOTE_NONE, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for r in manifest.rows:
            w.writerow([r.utterance_id, r.wav_path, r.transcript, r.domain, r.speaker_id, r.gender])


# --- text and alignment ------------------------------------------------------

_TAG = re.compile(r"\[[^\]]*\]")
_PUNCT = re.compile(r"[^\w\s']|_")
_LOOSE_APOS = re.compile(r"(?<!\w)'|'(?!\w)")


def normalize_text(raw: str, strip_tags: bool = True) -> list[str]:
    """Lower-case, drop bracketed event tags and punctuation, split on whitespace.

    Apostrophes survive only inside words ("don't").
    """
    s = raw.lower()
    if strip_tags:
        s = _TAG.sub(" ", s)
    s = _PUNCT.sub(" ", s)
    s = _LOOSE_APOS.sub(" ", s)
    return s.split()


@dataclass(frozen=True)
class EditCounts:
    substitutions: int
    deletions: int
    insertions: int
    ref_len: int

    def __post_init__(self):
        if min(self.substitutions, self.deletions, self.insertions) < 0:
            raise ValueError(f"edit counts must be non-negative: {self}")
        if self.ref_len <= 0:
            raise ValueError(f"ref_len must be positive, got {self.ref_len}")
        if self.substitutions + self.deletions > self.ref_len:
            raise ValueError(f"S + D exceeds reference length: {self}")

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    def __add__(self, other: "EditCounts") -> "EditCounts":
        return EditCounts(self.substitutions + other.substitutions, self.deletions + other.deletions,
                          self.insertions + other.insertions, self.ref_len + other.ref_len)


def levenshtein_align(ref: Sequence, hyp: Sequence) -> EditCounts:
    """Minimum unit-cost alignment of ``hyp`` against ``ref``.

    Among equally cheap alignments the backtrace prefers a substitution
    (or match), then an insertion, then a deletion.
    """
    n, m = len(ref), len(hyp)
    if n == 0:
        raise ValueError("levenshtein_align: reference must be non-empty")
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        d[i][0] = i
    for j in range(m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        ri = ref[i - 1]
        row, prev = d[i], d[i - 1]
        for j in range(1, m + 1):
            row[j] = min(prev[j - 1] + (ri != hyp[j - 1]), row[j - 1] + 1, prev[j] + 1)
    s = dl = ins = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i][j] == d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif j > 0 and d[i][j] == d[i][j - 1] + 1:
            ins += 1
            j -= 1
        else:
            dl += 1
            i -= 1
    return EditCounts(int(s), dl, ins, n)


def wer(counts: EditCounts) -> float:
    """Word error rate in percent; may exceed 100 with many insertions."""
    return 100.0 * counts.errors / counts.ref_len


def ser(error_flags: Sequence[bool]) -> float:
    """Percentage of utterances containing at least one error."""
    if not error_flags:
        raise ValueError("ser: no utterances")
    return 100.0 * sum(bool(f) for f in error_flags) / len(error_flags)


def cer(ref: str, hyp: str) -> float:
    """Character error rate in percent; spaces count as characters."""
    return wer(levenshtein_align(list(ref), list(hyp)))


# --- recogniser adapters -------------------------------------------------------

@dataclass(frozen=True)
class AsrResult:
    ok: bool
    text: str = ""
    error: str = ""


class AsrAdapter(Protocol):
    def transcribe(self, wav_path: str, utterance_id: str, condition: str = NO_FE) -> AsrResult: ...


@dataclass
class MockAdapter:
    """Deterministic table lookup by utterance id.

    ``per_condition`` entries, keyed ``(condition, utterance_id)``, take
    precedence over ``table``; unknown ids produce a failure record.
    """

    table: Mapping[str, str]
    per_condition: Mapping[tuple[str, str], str] = field(default_factory=dict)

    def transcribe(self, wav_path: str, utterance_id: str, condition: str = NO_FE) -> AsrResult:
        key = (condition, utterance_id)
        if key in self.per_condition:
            return AsrResult(True, self.per_condition[key])
        if utterance_id in self.table:
            return AsrResult(True, self.table[utterance_id])
        return AsrResult(False, error=f"mock adapter has no entry for {utterance_id!r}")


@dataclass
class CommandAdapter:
    """Runs an external transcription command and captures its stdout.

    ``template`` is split shell-style; a ``{wav}`` placeholder is replaced
    by the WAV path, otherwise the path is appended as the final argument.
    """

    template: str
    timeout: float = DEFAULT_TIMEOUT

    def __post_init__(self):
        if not self.template.strip():
            raise ValueError("adapter command template is empty")
        if self.timeout <= 0:
            raise ValueError(f"adapter timeout must be positive, got {self.timeout}")

    def argv(self, wav_path: str) -> list[str]:
        parts = shlex.split(self.template)
        if "{wav}" in self.template:
            return [p.replace("{wav}", str(wav_path)) for p in parts]
        return parts + [str(wav_path)]

    def transcribe(self, wav_path: str, utterance_id: str, condition: str = NO_FE) -> AsrResult:
        argv = self.argv(wav_path)
        try:
            proc = subprocess.run(argv, capture_output=True, text=True, timeout=self.timeout)
        except FileNotFoundError as exc:
            return AsrResult(False, error=f"command not found: {exc}")
        except subprocess.TimeoutExpired:
            return AsrResult(False, error=f"timed out after {self.timeout:g} s")
        except OSError as exc:
            return AsrResult(False, error=f"could not run {argv[0]!r}: {exc}")
        if proc.returncode != 0:
            return AsrResult(False, error=f"exit status {proc.returncode}: {proc.stderr.strip()}")
        return AsrResult(True, proc.stdout)


def run_asr_adapter(wav_path, adapter: AsrAdapter, utterance_id: str = "",
                    condition: str = NO_FE) -> AsrResult:
    return adapter.transcribe(str(wav_path), utterance_id, condition)


# --- evaluation ------------------------------------------------------------------

@dataclass(frozen=True)
class UtteranceScore:
    utterance_id: str
    words: EditCounts
    chars: EditCounts


@dataclass
class ConditionResult:
    condition: str
    wer: float | None
    ser: float | None
    cer: float | None
    n: int
    delta_wer: float | None = None
    delta_ser: float | None = None
    valid: bool = True
    failures: list[dict] = field(default_factory=list)

    def as_json(self) -> dict:
        return {k: getattr(self, k) for k in
                ("condition", "wer", "ser", "cer", "n", "delta_wer", "delta_ser", "valid", "failures")}


@dataclass
class MetricsReport:
    conditions: list[ConditionResult]

    def __getitem__(self, name: str) -> ConditionResult:
        for c in self.conditions:
            if c.condition == name:
                return c
        raise KeyError(name)

    def to_json(self) -> str:
        return json.dumps([c.as_json() for c in self.conditions], indent=2, sort_keys=True) + "\n"

    def format_table(self) -> str:
        def num(v, delta=None):
            if v is None:
                return "n/a"
            s = f"{v:.2f}"
            if delta is not None:
                s += f" (↓{delta:.2f})"
            return s

        lines = [f"{'condition':<16}{'n':>5}  {'WER %':<18}{'SER %':<18}{'CER %':<10}"]
        for c in self.conditions:
            if not c.valid:
                lines.append(f"{c.condition:<16}{c.n:>5}  invalid (all {len(c.failures)} utterances failed)")
                continue
            lines.append(f"{c.condition:<16}{c.n:>5}  {num(c.wer, c.delta_wer):<18}"
                         f"{num(c.ser, c.delta_ser):<18}{num(c.cer):<10}")
        return "\n".join(lines) + "\n"


def score_utterance(utterance_id: str, reference: str, hypothesis: str,
                    strip_tags: bool = True) -> UtteranceScore:
    ref = normalize_text(reference, strip_tags)
    hyp = normalize_text(hypothesis, strip_tags)
    if not ref:
        raise ValueError(f"utterance {utterance_id!r} has an empty normalised reference")
    return UtteranceScore(utterance_id, levenshtein_align(ref, hyp),
                          levenshtein_align(list(" ".join(ref)), list(" ".join(hyp))))


def aggregate(condition: str, scores: Sequence[UtteranceScore], failures: list[dict]) -> ConditionResult:
    """Corpus-level rates: total edits over total reference length."""
    if not scores:
        return ConditionResult(condition, None, None, None, 0, valid=False, failures=failures)
    scores = sorted(scores, key=lambda s: s.utterance_id)
    words = scores[0].words
    chars = scores[0].chars
    for s in scores[1:]:
        words, chars = words + s.words, chars + s.chars
    return ConditionResult(condition, wer(words), ser([s.words.errors > 0 for s in scores]),
                           wer(chars), len(scores), failures=failures)


def _transcribe_all(jobs, adapter: AsrAdapter, condition: str, parallelism: int):
    def one(job):
        row, wav = job
        return row, adapter.transcribe(str(wav), row.utterance_id, condition)

    if parallelism > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            return list(pool.map(one, jobs))
    return [one(j) for j in jobs]


def evaluate(manifest: CorpusManifest, conditions: Mapping[str, object | None], adapter: AsrAdapter,
             work_dir=None, strip_tags: bool = True, parallelism: int = 1, spec=None) -> MetricsReport:
    """Score every condition over the manifest.

    ``conditions`` maps a condition name to a front-end bundle, or to None
    for the unprocessed audio.  Converted audio is written under
    ``work_dir/<condition>``.  Deltas are ``no-FE minus condition`` when a
    ``no-FE`` condition is present.
    """
    rows = sorted(manifest.rows, key=lambda r: r.utterance_id)
    results = []
    for name, bundle in conditions.items():
        failures: list[dict] = []
        if bundle is None:
            jobs = [(r, r.wav_path) for r in rows]
        else:
            from .frontend import batch_convert
            from .vocoderfeat import FrameSpec
            if work_dir is None:
                raise ValueError("evaluate: work_dir is required for front-end conditions")
            out_dir = Path(work_dir) / name
            rep = batch_convert(rows, bundle, out_dir, spec or FrameSpec())
            done = {c["utterance_id"]: c["output"] for c in rep["converted"]}
            failures.extend({"utterance_id": f["utterance_id"], "stage": "convert", "error": f["error"]}
                            for f in rep["failed"])
            jobs = [(r, done[r.utterance_id]) for r in rows if r.utterance_id in done]
        scores = []
        for row, res in _transcribe_all(jobs, adapter, name, parallelism):
            if not res.ok:
                log.warning("%s: transcription failed for %s: %s", name, row.utterance_id, res.error)
                failures.append({"utterance_id": row.utterance_id, "stage": "asr", "error": res.error})
                continue
            scores.append(score_utterance(row.utterance_id, row.transcript, res.text, strip_tags))
        failures.sort(key=lambda f: f["utterance_id"])
        results.append(aggregate(name, scores, failures))
    base = next((c for c in results if c.condition == NO_FE and c.valid), None)
    if base is not None:
        for c in results:
            if c.valid:
                c.delta_wer = base.wer - c.wer
                c.delta_ser = base.ser - c.ser
    return MetricsReport(results)


def write_report(report: MetricsReport, json_path=None, table_path=None) -> None:
    if json_path is not None:
        Path(json_path).write_text(report.to_json(), encoding="utf-8")
    if table_path is not None:
        Path(table_path).write_text(report.format_table(), encoding="utf-8")

