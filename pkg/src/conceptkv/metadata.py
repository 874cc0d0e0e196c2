"""Four-field concept records: parsing, normalization, serialization.

Records arrive as raw model responses (possibly fenced, possibly noisy) and
leave as a strict schema: concept, category, caption, fingerprint_attributes,
always in that key order. Normalization never fails given a concept hint;
everything it changes is logged in a ValidationReport.
"""

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

__all__ = [
    "ConceptRecord",
    "ValidationReport",
    "Repair",
    "MetadataParseError",
    "parse_model_response",
    "normalize_record",
    "attribute_parts",
    "record_to_dict",
    "record_from_dict",
    "write_metadata_file",
    "read_metadata_file",
]

RECORD_KEYS = ("concept", "category", "caption", "fingerprint_attributes")
MAX_ATTRIBUTES = 16
CAPTION_WORDS = (24, 30)
# Attribute parts whose descriptors keep their exact casing (verbatim text).
VERBATIM_PARTS = {"wordmark", "logo"}

_FENCE_RE = re.compile(r"```[a-zA-Z0-9_-]*")


class MetadataParseError(ValueError):
    pass


@dataclass(frozen=True)
class ConceptRecord:
    concept: str
    category: str
    caption: str
    fingerprint_attributes: tuple

    def __post_init__(self):
        object.__setattr__(
            self, "fingerprint_attributes", tuple(self.fingerprint_attributes)
        )


@dataclass
class Repair:
    fieldname: str
    rule: str
    before: object
    after: object


@dataclass
class ValidationReport:
    repairs: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    fatal: str | None = None

    def repair(self, fieldname, rule, before, after):
        self.repairs.append(Repair(fieldname, rule, before, after))

    def to_dict(self) -> dict:
        return {
            "repairs": [
                {"field": r.fieldname, "rule": r.rule, "before": r.before, "after": r.after}
                for r in self.repairs
            ],
            "warnings": list(self.warnings),
            "fatal": self.fatal,
        }


def parse_model_response(text: str) -> dict:
    """Strip code fences, then return the outermost well-formed JSON object."""
    cleaned = _FENCE_RE.sub("", text)
    decoder = json.JSONDecoder()
    idx = cleaned.find("{")
    while idx != -1:
        try:
            obj, _ = decoder.raw_decode(cleaned, idx)
        except json.JSONDecodeError:
            idx = cleaned.find("{", idx + 1)
            continue
        if isinstance(obj, dict):
            return obj
        idx = cleaned.find("{", idx + 1)
    raise MetadataParseError("no well-formed JSON object found in response")


def _lower_field(report, name, value):
    lowered = value.lower()
    if lowered != value:
        report.repair(name, "lowercase", value, lowered)
    return lowered


def _normalize_attribute(entry: str, report: ValidationReport) -> str:
    stripped = entry.strip()
    if stripped != entry:
        report.repair("fingerprint_attributes", "strip", entry, stripped)
    part, sep, descriptor = stripped.partition(": ")
    if not sep:
        return _lower_field(report, "fingerprint_attributes", stripped)
    part_lower = part.lower()
    if part_lower != part:
        report.repair("fingerprint_attributes", "lowercase", part, part_lower)
    bare_part = part_lower.removeprefix("often:").strip()
    if bare_part in VERBATIM_PARTS:
        return f"{part_lower}: {descriptor}"
    descriptor_lower = descriptor.lower()
    if descriptor_lower != descriptor:
        report.repair("fingerprint_attributes", "lowercase", descriptor, descriptor_lower)
    return f"{part_lower}: {descriptor_lower}"


def normalize_record(raw: dict, concept_hint: str) -> tuple[ConceptRecord, ValidationReport]:
    """Coerce a raw record into the strict four-field schema.

    Missing concept falls back to the hint (the source folder name); missing
    category/caption become "unknown"; attributes are stripped, lowercased
    (wordmark/logo descriptors kept verbatim), deduplicated in order, capped
    at 16, and replaced by ["unknown"] when empty. Extra keys are dropped.
    """
    if not concept_hint:
        raise ValueError("concept_hint must be non-empty")
    report = ValidationReport()
    raw = dict(raw) if isinstance(raw, dict) else {}

    concept = raw.get("concept")
    if not isinstance(concept, str) or not concept.strip():
        report.repair("concept", "default_from_hint", concept, concept_hint)
        concept = concept_hint
    concept = _lower_field(report, "concept", concept.strip())

    category = raw.get("category")
    if not isinstance(category, str) or not category.strip():
        report.repair("category", "default_unknown", category, "unknown")
        category = "unknown"
    category = _lower_field(report, "category", category.strip())

    caption = raw.get("caption")
    if not isinstance(caption, str) or not caption.strip():
        report.repair("caption", "default_unknown", caption, "unknown")
        caption = "unknown"
    caption = _lower_field(report, "caption", caption.strip())
    words = len(caption.split())
    if not CAPTION_WORDS[0] <= words <= CAPTION_WORDS[1]:
        report.warnings.append(
            f"caption word count {words} outside [{CAPTION_WORDS[0]}, {CAPTION_WORDS[1]}]"
        )

    attrs_raw = raw.get("fingerprint_attributes")
    if not isinstance(attrs_raw, (list, tuple)):
        if attrs_raw is not None:
            report.repair("fingerprint_attributes", "drop_non_list", attrs_raw, [])
        attrs_raw = []
    attrs = []
    seen = set()
    for entry in attrs_raw:
        if not isinstance(entry, str) or not entry.strip():
            report.repair("fingerprint_attributes", "drop_invalid_entry", entry, None)
            continue
        normalized = _normalize_attribute(entry, report)
        if normalized in seen:
            report.repair("fingerprint_attributes", "dedup", normalized, None)
            continue
        seen.add(normalized)
        attrs.append(normalized)
    if len(attrs) > MAX_ATTRIBUTES:
        report.repair(
            "fingerprint_attributes", "cap", f"{len(attrs)} entries", f"{MAX_ATTRIBUTES} entries"
        )
        attrs = attrs[:MAX_ATTRIBUTES]
    if not attrs:
        report.repair("fingerprint_attributes", "placeholder", [], ["unknown"])
        attrs = ["unknown"]

    extra = [k for k in raw if k not in RECORD_KEYS]
    for key in extra:
        report.repair(key, "drop_extra_field", raw[key], None)

    record = ConceptRecord(
        concept=concept,
        category=category,
        caption=caption,
        fingerprint_attributes=tuple(attrs),
    )
    return record, report


def attribute_parts(record: ConceptRecord) -> tuple[list, list]:
    """Split attributes at the first ": " into (part, descriptor) pairs.

    Entries without the separator yield (entry, "") plus a warning message.
    """
    pairs = []
    warnings = []
    for entry in record.fingerprint_attributes:
        part, sep, descriptor = entry.partition(": ")
        if not sep:
            warnings.append(f"attribute without 'part: descriptor' separator: {entry!r}")
            pairs.append((entry, ""))
        else:
            pairs.append((part, descriptor))
    return pairs, warnings


def record_to_dict(record: ConceptRecord) -> dict:
    # Insertion order fixes the serialized key order.
    return {
        "concept": record.concept,
        "category": record.category,
        "caption": record.caption,
        "fingerprint_attributes": list(record.fingerprint_attributes),
    }


def record_from_dict(data: dict) -> ConceptRecord:
    return ConceptRecord(
        concept=data["concept"],
        category=data["category"],
        caption=data["caption"],
        fingerprint_attributes=tuple(data["fingerprint_attributes"]),
    )


def write_metadata_file(records: dict, path) -> None:
    """Serialize concept_id -> record as indented UTF-8 JSON, non-ASCII kept."""
    payload = {cid: record_to_dict(records[cid]) for cid in sorted(records)}
    Path(path).write_text(
        json.dumps(payload, indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
    )


def read_metadata_file(path) -> dict:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    return {cid: record_from_dict(data) for cid, data in payload.items()}
