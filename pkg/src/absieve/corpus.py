"""Load, clean, and persist the screening manifest and per-dataset record tables.

The on-disk formats are plain CSV:

* manifest: header ``Dataset Name,Inclusion Criteria,Exclusion Criteria``
  (the misspelling ``Excusion Criteria`` is accepted for the last column,
  since it appears in real manifests in the wild);
* dataset: header ``title,abstract`` with optional ``human_decision``,
  ``decision``, ``explanation`` and ``reflection`` columns;
* results: all six columns, always written, atomically replaced.

All text passes through :func:`clean_text`, so anything we write back out is
single-line printable ASCII regardless of the input encoding.
"""

from __future__ import annotations

import csv
import enum
import os
import re
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence


class CorpusError(Exception):
    """Base class for manifest/dataset loading and persistence failures."""


class MissingColumn(CorpusError):
    def __init__(self, column: str, path: str | Path):
        self.column = column
        super().__init__(f"required column {column!r} not found in {path}")


class DuplicateDatasetName(CorpusError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"dataset name {name!r} appears more than once in the manifest")


class EmptyManifest(CorpusError):
    pass


class EmptyField(CorpusError):
    """A field that must be non-empty after cleaning was empty."""


class UnknownDataset(CorpusError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"dataset {name!r} is not listed in the manifest")


class UnparseableDecisionValue(CorpusError):
    def __init__(self, value: str, row: int, column: str):
        self.value = value
        self.row = row
        self.column = column
        super().__init__(
            f"row {row}: cannot parse {value!r} in column {column!r} as a decision"
        )


class IoFailure(CorpusError):
    pass


class Decision(enum.Enum):
    """Outcome of screening one record.

    ``INCLUDED``/``EXCLUDED`` are the two answers the model is asked for;
    ``UNPARSEABLE`` marks a response that named neither or both; ``ERROR``
    marks a row whose backend calls never succeeded.
    """

    INCLUDED = "included"
    EXCLUDED = "excluded"
    UNPARSEABLE = "unparseable"
    ERROR = "error"


@dataclass(frozen=True)
class CriteriaSet:
    """A dataset's natural-language inclusion and exclusion criteria."""

    inclusion: str
    exclusion: str


@dataclass(frozen=True)
class ManifestEntry:
    dataset_name: str
    criteria: CriteriaSet


@dataclass(frozen=True)
class ScreeningManifest:
    entries: tuple[ManifestEntry, ...]

    def names(self) -> tuple[str, ...]:
        return tuple(e.dataset_name for e in self.entries)

    def __contains__(self, name: str) -> bool:
        return any(e.dataset_name == name for e in self.entries)

    def criteria_for(self, name: str) -> CriteriaSet:
        for entry in self.entries:
            if entry.dataset_name == name:
                return entry.criteria
        raise UnknownDataset(name)


@dataclass
class ScreeningRecord:
    """One title/abstract row, its ground truth, and the model's outputs.

    ``row_index`` is the record's 0-based position in the dataset file and is
    stable across save/load cycles, which is what makes resume safe.
    """

    row_index: int
    title: str
    abstract: str = ""
    human_decision: Decision | None = None
    model_decision: Decision | None = None
    explanation: str | None = None
    reflection: str | None = None


_WHITESPACE_RUN = re.compile(r" +")
# Control characters that mark word boundaries become spaces; every other
# control character, and every code point above tilde, is dropped outright.
_BOUNDARY_CONTROLS = frozenset("\t\n\r\x0b\x0c")

RESULT_COLUMNS = ("title", "abstract", "human_decision", "decision", "explanation", "reflection")

MANIFEST_NAME_COLUMN = "Dataset Name"
MANIFEST_INCLUSION_COLUMN = "Inclusion Criteria"
MANIFEST_EXCLUSION_COLUMN = "Exclusion Criteria"
# Accepted alias: some manifests carry this misspelling in the header row.
MANIFEST_EXCLUSION_ALIAS = "Excusion Criteria"


def clean_text(raw: str) -> str:
    """Normalize arbitrary text to trimmed, single-spaced printable ASCII.

    Code points above U+007E are deleted (not transliterated). Tab, newline
    and friends turn into spaces so that words separated only by them do not
    fuse; other control characters are deleted. Runs of whitespace collapse
    to one space and the result is trimmed. Idempotent by construction.
    """
    chars = []
    for ch in raw:
        code = ord(ch)
        if code > 0x7E:
            continue
        if code < 0x20:
            if ch in _BOUNDARY_CONTROLS:
                chars.append(" ")
            continue
        chars.append(ch)
    return _WHITESPACE_RUN.sub(" ", "".join(chars)).strip()


def _header_index(header: Sequence[str], path: str | Path) -> dict[str, int]:
    """Map lowercased, cleaned header names to their column positions."""
    index: dict[str, int] = {}
    for pos, name in enumerate(header):
        key = clean_text(name).lower()
        if key and key not in index:
            index[key] = pos
    if not index:
        raise EmptyManifest(f"{path}: no header row")
    return index


def _cell(row: Sequence[str], pos: int | None) -> str:
    if pos is None or pos >= len(row):
        return ""
    return row[pos]


def _decision_from_cell(raw: str, row: int, column: str) -> Decision | None:
    value = clean_text(raw).lower()
    if not value:
        return None
    try:
        return Decision(value)
    except ValueError:
        raise UnparseableDecisionValue(raw, row, column) from None


def _read_rows(path: str | Path) -> tuple[list[str], list[list[str]]]:
    try:
        with open(path, newline="", encoding="utf-8-sig") as fh:
            rows = [row for row in csv.reader(fh) if row]
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise EmptyManifest(f"{path}: file is empty")
    return rows[0], rows[1:]


def load_manifest(path: str | Path) -> ScreeningManifest:
    """Read the manifest CSV into a validated :class:`ScreeningManifest`.

    Header names are matched case-insensitively, and the exclusion column is
    found under either its correct spelling or the known misspelled alias.
    """
    header, rows = _read_rows(path)
    index = _header_index(header, path)

    name_pos = index.get(MANIFEST_NAME_COLUMN.lower())
    if name_pos is None:
        raise MissingColumn(MANIFEST_NAME_COLUMN, path)
    incl_pos = index.get(MANIFEST_INCLUSION_COLUMN.lower())
    if incl_pos is None:
        raise MissingColumn(MANIFEST_INCLUSION_COLUMN, path)
    excl_pos = index.get(MANIFEST_EXCLUSION_COLUMN.lower())
    if excl_pos is None:
        excl_pos = index.get(MANIFEST_EXCLUSION_ALIAS.lower())
    if excl_pos is None:
        raise MissingColumn(MANIFEST_EXCLUSION_COLUMN, path)

    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    for n, row in enumerate(rows, start=1):
        name = clean_text(_cell(row, name_pos))
        if not name:
            raise EmptyField(f"{path} row {n}: empty dataset name")
        if name in seen:
            raise DuplicateDatasetName(name)
        seen.add(name)
        inclusion = clean_text(_cell(row, incl_pos))
        exclusion = clean_text(_cell(row, excl_pos))
        if not inclusion:
            raise EmptyField(f"{path} row {n} ({name}): empty inclusion criteria")
        if not exclusion:
            raise EmptyField(f"{path} row {n} ({name}): empty exclusion criteria")
        entries.append(ManifestEntry(name, CriteriaSet(inclusion, exclusion)))

    if not entries:
        raise EmptyManifest(f"{path}: manifest has a header but no datasets")
    return ScreeningManifest(tuple(entries))


def load_dataset(
    path: str | Path, name: str, manifest: ScreeningManifest
) -> list[ScreeningRecord]:
    """Read a dataset (or results) CSV into records, in file order.

    ``name`` must appear in the manifest. Rows with an empty abstract are
    kept; a pre-existing ``decision`` column is parsed into
    ``model_decision`` so a partially screened file can be resumed.
    """
    if name not in manifest:
        raise UnknownDataset(name)

    header, rows = _read_rows(path)
    index = _header_index(header, path)
    for required in ("title", "abstract"):
        if required not in index:
            raise MissingColumn(required, path)

    records: list[ScreeningRecord] = []
    for n, row in enumerate(rows):
        title = clean_text(_cell(row, index.get("title")))
        if not title:
            raise EmptyField(f"{path} row {n}: empty title")
        explanation = clean_text(_cell(row, index.get("explanation")))
        reflection = clean_text(_cell(row, index.get("reflection")))
        records.append(
            ScreeningRecord(
                row_index=n,
                title=title,
                abstract=clean_text(_cell(row, index.get("abstract"))),
                human_decision=_decision_from_cell(
                    _cell(row, index.get("human_decision")), n, "human_decision"
                ),
                model_decision=_decision_from_cell(
                    _cell(row, index.get("decision")), n, "decision"
                ),
                explanation=explanation or None,
                reflection=reflection or None,
            )
        )
    return records


def write_results(records: Iterable[ScreeningRecord], path: str | Path) -> None:
    """Write records as a results CSV, atomically replacing ``path``.

    Rows are emitted in ``row_index`` order with all six columns. Missing
    decisions and annotations become empty cells. The write goes to a
    temporary file in the destination directory followed by a rename, so a
    crash mid-write can never leave a truncated results file behind.
    """
    ordered = sorted(records, key=lambda r: r.row_index)
    path = Path(path)
    try:
        fd, tmp_name = tempfile.mkstemp(
            dir=path.parent, prefix=path.name + ".", suffix=".tmp"
        )
        try:
            with os.fdopen(fd, "w", newline="", encoding="ascii") as fh:
                writer = csv.writer(fh)
                writer.writerow(RESULT_COLUMNS)
                for record in ordered:
                    writer.writerow(
                        [
                            clean_text(record.title),
                            clean_text(record.abstract),
                            record.human_decision.value if record.human_decision else "",
                            record.model_decision.value if record.model_decision else "",
                            clean_text(record.explanation or ""),
                            clean_text(record.reflection or ""),
                        ]
                    )
            os.replace(tmp_name, path)
        except BaseException:
            try:
                os.unlink(tmp_name)
            except OSError:
                pass
            raise
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
