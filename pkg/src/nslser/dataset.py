"""Dataset manifests: the labelled corpus, its splits and label vocabulary.

A manifest is a UTF-8 TSV file with the header

    id  audio_path  label  split  speaker  duration_s

where ``duration_s`` may be left empty.
"""
from __future__ import annotations

import csv
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

log = logging.getLogger(__name__)

COLUMNS = ("id", "audio_path", "label", "split", "speaker", "duration_s")
SPLITS = ("train", "val", "test")


class ManifestFormatError(ValueError):
    """The file is not a well-formed manifest TSV."""


class ManifestValidationError(ValueError):
    """The manifest parses but violates an invariant."""


@dataclass(frozen=True)
class LabelVocab:
    classes: tuple[str, ...]
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.classes:
            raise ManifestValidationError("label vocabulary is empty")
        if len(set(self.classes)) != len(self.classes):
            raise ManifestValidationError("label vocabulary has duplicate names")
        object.__setattr__(self, "index", {c: i for i, c in enumerate(self.classes)})

    @classmethod
    def from_labels(cls, labels) -> "LabelVocab":
        # Lexicographic ids keep models reproducible under record reordering.
        return cls(tuple(sorted(set(labels))))

    def __len__(self) -> int:
        return len(self.classes)

    def id_of(self, name: str) -> int:
        try:
            return self.index[name]
        except KeyError:
            raise ManifestValidationError(f"unknown label {name!r}") from None


@dataclass(frozen=True)
class SampleRecord:
    id: str
    audio_path: str
    label: str
    split: str
    speaker: str
    duration_s: float | None = None


@dataclass(frozen=True)
class Manifest:
    records: tuple[SampleRecord, ...]
    vocab: LabelVocab

    def __post_init__(self):
        if not self.records:
            raise ManifestValidationError("manifest has no records")
        seen = set()
        for r in self.records:
            if r.id in seen:
                raise ManifestValidationError(f"duplicate sample id {r.id!r}")
            seen.add(r.id)
            if r.split not in SPLITS:
                raise ManifestValidationError(
                    f"sample {r.id!r}: unknown split {r.split!r} (expected one of {', '.join(SPLITS)})"
                )
            if r.label not in self.vocab.index:
                raise ManifestValidationError(f"sample {r.id!r}: label {r.label!r} not in vocabulary")

    @classmethod
    def from_records(cls, records) -> "Manifest":
        records = tuple(records)
        return cls(records, LabelVocab.from_labels(r.label for r in records))

    def __len__(self) -> int:
        return len(self.records)

    def split(self, name: str) -> list[SampleRecord]:
        if name not in SPLITS:
            raise ManifestValidationError(f"unknown split {name!r}")
        return [r for r in self.records if r.split == name]

    def require_split(self, name: str) -> list[SampleRecord]:
        recs = self.split(name)
        if not recs:
            raise ManifestValidationError(f"split {name!r} has no records")
        return recs

    def labels(self, records=None):
        records = self.records if records is None else records
        return [self.vocab.id_of(r.label) for r in records]

    def by_id(self) -> dict[str, SampleRecord]:
        return {r.id: r for r in self.records}


def _parse_duration(value: str, sample_id: str) -> float | None:
    value = value.strip()
    if not value:
        return None
    try:
        d = float(value)
    except ValueError:
        raise ManifestFormatError(f"sample {sample_id!r}: bad duration_s {value!r}") from None
    if d < 0:
        raise ManifestValidationError(f"sample {sample_id!r}: negative duration")
    return d


def load_manifest(path) -> Manifest:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestFormatError(f"{path}: empty file") from None
        missing = [c for c in COLUMNS if c not in header]
        if missing:
            raise ManifestFormatError(f"{path}: missing column(s) {', '.join(missing)}")
        col = {name: header.index(name) for name in COLUMNS}
        records = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) < len(header):
                # Trailing empty duration_s may have been stripped by an editor.
                row = row + [""] * (len(header) - len(row))
            if len(row) != len(header):
                raise ManifestFormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            sid = row[col["id"]]
            if not sid:
                raise ManifestFormatError(f"{path}:{lineno}: empty id")
            records.append(
                SampleRecord(
                    id=sid,
                    audio_path=row[col["audio_path"]],
                    label=row[col["label"]],
                    split=row[col["split"]],
                    speaker=row[col["speaker"]],
                    duration_s=_parse_duration(row[col["duration_s"]], sid),
                )
            )
    manifest = Manifest.from_records(records)
    _warn_speaker_overlap(manifest)
    return manifest


def save_manifest(manifest: Manifest, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        fh.write("\t".join(COLUMNS) + "\n")
        for r in manifest.records:
            dur = "" if r.duration_s is None else repr(float(r.duration_s))
            fh.write("\t".join([r.id, r.audio_path, r.label, r.split, r.speaker, dur]) + "\n")


def speaker_overlap(manifest: Manifest) -> dict[str, set[str]]:
    """Speakers that appear in more than one split, mapped to those splits."""
    where = defaultdict(set)
    for r in manifest.records:
        where[r.speaker].add(r.split)
    return {spk: splits for spk, splits in where.items() if len(splits) > 1}


def _warn_speaker_overlap(manifest: Manifest) -> None:
    overlap = speaker_overlap(manifest)
    if overlap:
        names = ", ".join(sorted(overlap)[:5])
        log.warning("splits are not speaker-disjoint: %d speaker(s) shared (%s)", len(overlap), names)


def split_counts(manifest: Manifest) -> dict[tuple[str, str], int]:
    """Count samples per (split, class); every split/class cell is present."""
    counts = {(s, c): 0 for s in SPLITS for c in manifest.vocab.classes}
    for r in manifest.records:
        counts[(r.split, r.label)] += 1
    return counts


def format_split_counts(manifest: Manifest) -> str:
    counts = split_counts(manifest)
    lines = ["class\t" + "\t".join(SPLITS) + "\ttotal"]
    for c in manifest.vocab.classes:
        row = [counts[(s, c)] for s in SPLITS]
        lines.append(c + "\t" + "\t".join(map(str, row)) + f"\t{sum(row)}")
    totals = [sum(counts[(s, c)] for c in manifest.vocab.classes) for s in SPLITS]
    lines.append("total\t" + "\t".join(map(str, totals)) + f"\t{sum(totals)}")
    speakers = [len({r.speaker for r in manifest.records if r.split == s}) for s in SPLITS]
    lines.append("speakers\t" + "\t".join(map(str, speakers)) + f"\t{len({r.speaker for r in manifest.records})}")
    return "\n".join(lines)
