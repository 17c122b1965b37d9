"""Event-stream EHR records: parsing, per-patient histories and code grouping.

The interchange format is a headered CSV with one medical event per row::

    patient_id,sex,birth_date,event_date,event_type,code
    id854,Female,1973-05-27,2020-01-27,Diagnose,I11.9

JSON lines with the same keys are accepted as an alternative.
"""
from __future__ import annotations

import csv
import enum
import io
import json
import re
from dataclasses import dataclass
from datetime import date
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

from .errors import AttributeConflictError, ParseError, SchemaError

CSV_HEADER = ("patient_id", "sex", "birth_date", "event_date", "event_type", "code")

ICD10_PATTERN = re.compile(r"^([A-Z])(\d{2})(?:\.(\d{1,2}))?$")


class Sex(enum.IntEnum):
    FEMALE = 0
    MALE = 1

    @property
    def label(self) -> str:
        return "Male" if self is Sex.MALE else "Female"


class EventType(enum.Enum):
    DIAGNOSIS = "Diagnose"
    SERVICE = "Medical Service"


_SEX_ALIASES = {
    "female": Sex.FEMALE, "f": Sex.FEMALE, "0": Sex.FEMALE,
    "male": Sex.MALE, "m": Sex.MALE, "1": Sex.MALE,
}
_TYPE_ALIASES = {
    "diagnose": EventType.DIAGNOSIS, "diagnosis": EventType.DIAGNOSIS,
    "medical service": EventType.SERVICE, "medicalservice": EventType.SERVICE,
    "service": EventType.SERVICE,
}


@dataclass(frozen=True)
class EventRecord:
    patient_id: str
    event_date: date
    event_type: EventType
    code: str

    @property
    def is_diagnosis(self) -> bool:
        return self.event_type is EventType.DIAGNOSIS


@dataclass(frozen=True)
class PatientHistory:
    patient_id: str
    sex: Sex
    birth_date: date
    events: tuple[EventRecord, ...]

    def __post_init__(self):
        prev = None
        for ev in self.events:
            if ev.event_date < self.birth_date:
                raise SchemaError(f"{self.patient_id}: event on {ev.event_date} precedes birth")
            if prev is not None and ev.event_date < prev:
                raise SchemaError(f"{self.patient_id}: events are not in date order")
            prev = ev.event_date

    @property
    def last_event_date(self) -> date:
        return self.events[-1].event_date

    def age_at(self, when: date) -> float:
        return age_years(self.birth_date, when)


class ParsedRow(NamedTuple):
    record: EventRecord
    sex: Sex
    birth_date: date


@dataclass(frozen=True)
class CodeGroup:
    kind: str  # "icd" or "service"
    label: str


def age_years(birth: date, when: date) -> float:
    """Age in fractional years (day count / 365.25)."""
    return (when - birth).days / 365.25


def is_valid_icd10(code: str) -> bool:
    return ICD10_PATTERN.match(code) is not None


def _parse_date(field: str, value: str) -> date:
    try:
        return date.fromisoformat(value.strip())
    except (ValueError, AttributeError) as exc:
        raise ParseError(field, value, "expected ISO-8601 date") from exc


def parse_event_record(row: str | Sequence[str] | Mapping[str, str]) -> ParsedRow:
    """Parse one delimited row (or a pre-split sequence / dict) into a validated record."""
    if isinstance(row, str):
        fields = next(csv.reader([row]))
    elif isinstance(row, Mapping):
        try:
            fields = [row[k] for k in CSV_HEADER]
        except KeyError as exc:
            raise SchemaError(f"missing column {exc.args[0]!r}") from None
    else:
        fields = list(row)
    if len(fields) != len(CSV_HEADER):
        raise SchemaError(f"expected {len(CSV_HEADER)} fields, got {len(fields)}")
    pid, sex_s, birth_s, date_s, type_s, code = (str(f).strip() for f in fields)
    if not pid:
        raise SchemaError("empty patient_id")
    try:
        sex = _SEX_ALIASES[sex_s.lower()]
    except KeyError:
        raise SchemaError(f"unknown sex {sex_s!r}") from None
    birth = _parse_date("birth_date", birth_s)
    when = _parse_date("event_date", date_s)
    try:
        etype = _TYPE_ALIASES[type_s.lower()]
    except KeyError:
        raise SchemaError(f"unknown event_type {type_s!r}") from None
    if not code:
        raise SchemaError(f"{pid}: empty code")
    if etype is EventType.DIAGNOSIS and not is_valid_icd10(code):
        raise SchemaError(f"{pid}: {code!r} is not a valid ICD-10 code")
    if when < birth:
        raise SchemaError(f"{pid}: event on {when} precedes birth on {birth}")
    return ParsedRow(EventRecord(pid, when, etype, code), sex, birth)


def serialize_row(parsed: ParsedRow) -> str:
    rec = parsed.record
    buf = io.StringIO()
    csv.writer(buf, lineterminator="").writerow([
        rec.patient_id, parsed.sex.label, parsed.birth_date.isoformat(),
        rec.event_date.isoformat(), rec.event_type.value, rec.code,
    ])
    return buf.getvalue()


def build_histories(rows: Iterable[ParsedRow]) -> dict[str, PatientHistory]:
    """Group parsed rows by patient, sorting events by date (stable on ties).

    Duplicate identical events are kept. Patients keep first-appearance order.
    """
    attrs: dict[str, tuple[Sex, date]] = {}
    events: dict[str, list[EventRecord]] = {}
    conflicts = []
    for parsed in rows:
        pid = parsed.record.patient_id
        seen = attrs.setdefault(pid, (parsed.sex, parsed.birth_date))
        if seen != (parsed.sex, parsed.birth_date) and pid not in conflicts:
            conflicts.append(pid)
        events.setdefault(pid, []).append(parsed.record)
    if conflicts:
        raise AttributeConflictError(conflicts)
    return {
        pid: PatientHistory(pid, attrs[pid][0], attrs[pid][1],
                            tuple(sorted(evs, key=lambda e: e.event_date)))
        for pid, evs in events.items()
    }


def flatten(histories: Mapping[str, PatientHistory] | Iterable[PatientHistory]) -> list[ParsedRow]:
    items = histories.values() if isinstance(histories, Mapping) else histories
    return [ParsedRow(ev, h.sex, h.birth_date) for h in items for ev in h.events]


def read_ehr(path: str | Path) -> dict[str, PatientHistory]:
    """Read a CSV (exact header required) or JSONL corpus into histories."""
    path = Path(path)
    if path.suffix in (".jsonl", ".ndjson"):
        with path.open() as fh:
            rows = [parse_event_record(json.loads(line)) for line in fh if line.strip()]
        return build_histories(rows)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(h.strip() for h in next(reader, ()))
        if header != CSV_HEADER:
            raise SchemaError(f"bad header {header}; expected {','.join(CSV_HEADER)}")
        return build_histories(parse_event_record(r) for r in reader if r)


def write_ehr(histories: Mapping[str, PatientHistory] | Iterable[PatientHistory], path: str | Path):
    with Path(path).open("w", newline="") as fh:
        fh.write(",".join(CSV_HEADER) + "\n")
        for parsed in flatten(histories):
            fh.write(serialize_row(parsed) + "\n")


# --- code grouping -------------------------------------------------------------------------


def _icd_key(code: str) -> tuple[str, int]:
    m = ICD10_PATTERN.match(code)
    if m is None:
        raise SchemaError(f"{code!r} is not a valid ICD-10 code")
    return m.group(1), int(m.group(2))


@dataclass(frozen=True)
class IcdBlock:
    label: str
    start_code: str
    end_code: str
    chapter: bool = False

    def __contains__(self, code: str) -> bool:
        return _icd_key(self.start_code) <= _icd_key(code) <= _icd_key(self.end_code)


def load_icd_blocks(path: str | Path | None = None) -> list[IcdBlock]:
    """Load the block table: a JSON list of {label, start_code, end_code[, chapter]}."""
    if path is None:
        text = resources.files("riskscreen.data").joinpath("icd_blocks.json").read_text()
    else:
        text = Path(path).read_text()
    blocks = [IcdBlock(b["label"], b["start_code"], b["end_code"], bool(b.get("chapter", False)))
              for b in json.loads(text)]
    for b in blocks:
        if _icd_key(b.start_code) > _icd_key(b.end_code):
            raise SchemaError(f"block {b.label}: start after end")
    return blocks


DEFAULT_BLOCKS = load_icd_blocks()
CHAPTERS = [b for b in DEFAULT_BLOCKS if b.chapter]


def icd10_group(code: str, blocks: Sequence[IcdBlock] | None = None) -> list[str]:
    """All configured block labels containing ``code`` (nested blocks included), deduplicated."""
    _icd_key(code)
    blocks = DEFAULT_BLOCKS if blocks is None else blocks
    out = []
    for b in blocks:
        if code in b and b.label not in out:
            out.append(b.label)
    return out


def icd10_chapter(code: str) -> str:
    for b in CHAPTERS:
        if code in b:
            return b.label
    raise SchemaError(f"{code!r} falls in no chapter")  # unreachable for valid codes


IMMUNE_SYSTEM = "system-06"
OTHER_SERVICE = "other"
_SERVICE_PATTERN = re.compile(r"^[A-Z]\d{2}\.(\d{2,3})(?:\.|$)")


def service_group(code: str) -> str:
    """Anatomical-system group of a service code, e.g. A09.05.023 -> "system-05".

    The system field is the token after the first dot; "Axx.06.*" codes land in the
    immune-system group. Unrecognised codes go to "other".
    """
    m = _SERVICE_PATTERN.match(code.strip())
    if m is None:
        return OTHER_SERVICE
    return f"system-{m.group(1)}"
