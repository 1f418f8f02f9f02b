#!/usr/bin/env python3
"""
Test the clipmodel module.

Usage:
    python -m pytest -v --log-level=DEBUG --log-file=tests/test_output.txt tests/test_clipmodel.py
    python -m pytest -v tests/test_clipmodel.py::test_normalize_idempotent
    pytest tests/test_clipmodel.py

Anatomy of a test is broken down into four steps:
- Arrange: prepare everything for our test
- Act: the singular, state-changing action that kicks off the behavior we want to test
- Assert: inspect the resulting state and check if it matches expectations
- Cleanup: remove artifacts so additional tests are not affected or influenced

"""
__license__ = "MIT - https://mit-license.org/"

import datetime
import json
import random

import pytest
from pydantic import ValidationError

from clipmodel import (
    EPOCH,
    Attribute,
    AttributeDefinition,
    CanonicalCatalog,
    ClipManifestEntry,
    DropRecord,
    EntityDefinition,
    EntityRecord,
    EntitySchema,
    FailureRecord,
    GenericEntity,
    ManifestError,
    ModelError,
    RawCategorization,
    format_timestamp,
    load_manifest,
    normalize_category_name,
    normalize_entity_value,
    schema_slug,
    to_json_document,
    to_json_line,
    validate_schema,
)
from conftest import MANIFEST

NORMALIZED = [
    # raw, normalized
    ("History", "history"),
    ("  Travel & Events!! ", "travel and events"),
    ("How-To", "how to"),
    ("how to", "how to"),
    ("DIY & Home Improvement", "diy and home improvement"),
    ("Science\tand\n  Technology", "science and technology"),
    ("ＨＩＳＴＯＲＹ", "history"),  # full-width
    ("snake_case_name", "snake case name"),
    ("PRESIDENT LINCOLN", "president lincoln"),
    ("", ""),
    ("!!!", ""),
]

# characters that stress the folding rules
ALPHABET = list("abcXYZ &_-.,!?'\"()/ \t\n") + ["İ", "ß", "ﬁ", "Ⅻ", "é", "é", "Ａ", "½", "⁵", "ㄱ", "Σ", "ς", " ", "　"]

SCHEMA = EntitySchema(
    category="History",
    schema_version=1,
    entities=(
        EntityDefinition(
            name="Historical Event",
            attributes=(
                AttributeDefinition(name="Description", description="What happened.", examples=("Moon landing",)),
                AttributeDefinition(name="Date", description="When it happened.", examples=("April 9, 1865",)),
            ),
        ),
        EntityDefinition(
            name="Historical Figure",
            attributes=(AttributeDefinition(name="Name", description="The person's name.", examples=("Abraham Lincoln",)),),
        ),
    ),
)


# -----------------------------------------------------------------------------
# Normalization
# -----------------------------------------------------------------------------


def test_normalize_category_name():
    for raw, expected in NORMALIZED:
        assert normalize_category_name(raw) == expected, f"normalize_category_name({raw!r}) is {expected!r}"
    assert normalize_category_name(None) == "", "None normalizes to ''"


def test_normalize_entity_value():
    assert normalize_entity_value("PRESIDENT LINCOLN") == normalize_entity_value("President Lincoln"), "case is folded"
    assert normalize_entity_value("Washington, D. C.") == "washington d c", "punctuation is stripped"


def test_normalize_idempotent():
    for idx in range(1, 1000):
        raw = "".join(random.choices(ALPHABET, k=random.randint(0, 24)))
        once = normalize_category_name(raw)
        assert normalize_category_name(once) == once, f"normalize is idempotent for {raw!r}"
        assert once == once.strip(), f"{once!r} is trimmed"
        assert "  " not in once, f"{once!r} has no whitespace runs"


def test_schema_slug():
    assert schema_slug("How-To") == "how-to", "How-To -> how-to"
    assert schema_slug("Science & Technology") == "science-and-technology", "'&' is spelled out"
    with pytest.raises(ModelError) as excinfo:
        schema_slug("!!!")
    assert "no usable characters" in str(excinfo.value)


def test_format_timestamp():
    assert format_timestamp(EPOCH) == "1970-01-01T00:00:00Z", "UTC with a Z suffix"
    cet = datetime.timezone(datetime.timedelta(hours=1))
    assert format_timestamp(datetime.datetime(2024, 1, 1, 1, 0, tzinfo=cet)) == "2024-01-01T00:00:00Z", "converted to UTC"


# -----------------------------------------------------------------------------
# Records
# -----------------------------------------------------------------------------


def test_generic_entity():
    entity = GenericEntity(entity_type="Person", attributes=(Attribute(name="Role", value="President"),))
    assert entity.get("role") == "President", "attribute lookup is normalized"
    assert entity.get("Gender") is None, "missing attribute is None"

    with pytest.raises(ValidationError):
        GenericEntity(entity_type="Person", attributes=(Attribute(name="Role", value="a"), Attribute(name=" role ", value="b")))
    with pytest.raises(ValidationError):
        GenericEntity(entity_type="   ")


def test_records_frozen():
    entity = GenericEntity(entity_type="Person")
    with pytest.raises(ValidationError):
        entity.entity_type = "Object"


def test_raw_categorization_timestamps():
    with pytest.raises(ValidationError):
        RawCategorization(clip_id="c", raw_category="History", model_id="m", created_at=datetime.datetime(2024, 1, 1))
    with pytest.raises(ValidationError):
        RawCategorization(clip_id="c", raw_category="  ", model_id="m", created_at=EPOCH)

    record = RawCategorization(clip_id="c", raw_category="History", model_id="m", created_at=EPOCH)
    assert json.loads(to_json_line(record))["created_at"] == "1970-01-01T00:00:00Z", "timestamps serialize as RFC 3339 UTC"


def test_record_json_lines():
    records = [
        ClipManifestEntry(clip_id="c", media_uri="media://c.mp4", duration_s=1.5, transcript_text="Hello\nworld"),
        RawCategorization(
            clip_id="c",
            raw_category="History",
            generic_entities=(GenericEntity(entity_type="Person", attributes=(Attribute(name="Name", value="Abraham Lincoln"),)),),
            model_id="stub-vlm",
            created_at=EPOCH,
        ),
        EntityRecord(
            clip_id="c",
            raw_category="history",
            canonical_category="History",
            retrieval_similarity=1.0,
            retrieval_path="exact",
            schema_version=1,
            model_id="stub-vlm",
            created_at=EPOCH,
        ),
        FailureRecord.from_exception("extract", ValueError("boom"), EPOCH, clip_id="c"),
        DropRecord(clip_id="c", member="Battle", reason="not in schema"),
    ]
    for record in records:
        line = to_json_line(record)
        assert "\n" not in line, f"{type(record).__name__} serializes to a single line"
        assert type(record).model_validate_json(line) == record, f"{type(record).__name__} reads back equal"


def test_failure_record_from_exception():
    failure = FailureRecord.from_exception("genschema", KeyError("x"), EPOCH, category="Music")
    assert failure.kind == "KeyError", "kind is the exception class"
    assert failure.category == "Music" and failure.clip_id is None


def test_canonical_catalog():
    catalog = CanonicalCatalog(
        version=1, canonical_categories=("History", "How-To & DIY"), mapping={"history": "History", "How-To": "How-To & DIY"}, model_id="m"
    )
    assert catalog.lookup("history") == "History", "exact lookup"
    assert catalog.lookup("HOW TO") == "How-To & DIY", "normalized lookup"
    assert catalog.lookup("Cooking") is None, "unknown raw name"

    with pytest.raises(ValidationError):  # duplicate under normalization
        CanonicalCatalog(version=1, canonical_categories=("How-To", "how to"), mapping={}, model_id="m")
    with pytest.raises(ValidationError):  # unknown target
        CanonicalCatalog(version=1, canonical_categories=("History",), mapping={"x": "Music"}, model_id="m")


# -----------------------------------------------------------------------------
# Schema validation
# -----------------------------------------------------------------------------


def test_validate_schema_ok():
    report = validate_schema(SCHEMA)
    assert report.ok, f"valid schema: {report.violations}"
    assert SCHEMA.entity("historical event").name == "Historical Event", "entity lookup is normalized"


def test_validate_schema_violations():
    assert validate_schema(EntitySchema(category="Empty", schema_version=1)).violations == ("entities empty",)

    schema = EntitySchema(
        category="Bad",
        schema_version=1,
        entities=(
            EntityDefinition(
                name="Tool",
                attributes=(
                    AttributeDefinition(name="Name", description="", examples=("knife",)),
                    AttributeDefinition(name="name", description="Duplicate.", examples=("  ",)),
                ),
            ),
            EntityDefinition(name="TOOL"),
            EntityDefinition(name=" "),
        ),
    )
    report = validate_schema(schema)
    assert not report.ok
    assert "Tool.Name: description empty" in report.violations
    assert "Tool.name: duplicate attribute name (same as Tool.Name)" in report.violations
    assert "Tool.name: examples empty" in report.violations
    assert "TOOL: duplicate entity name (same as Tool)" in report.violations
    assert "entities[2]: name empty" in report.violations


# -----------------------------------------------------------------------------
# Manifests
# -----------------------------------------------------------------------------


def test_load_manifest():
    clips = load_manifest(MANIFEST)
    assert len(clips) == 12, "12 fixture clips"
    assert clips[0].clip_id == "lincoln-001", "manifest order is kept"
    assert len({clip.clip_id for clip in clips}) == 12, "clip ids are unique"


def test_load_manifest_errors(tmp_path):
    line = to_json_line(ClipManifestEntry(clip_id="a", media_uri="media://a", duration_s=1))
    path = tmp_path / "dup.jsonl"
    path.write_text(f"{line}\n\n{line}\n", encoding="utf-8")
    with pytest.raises(ManifestError) as excinfo:
        load_manifest(str(path))
    assert ":3:" in str(excinfo.value) and "first on line 1" in str(excinfo.value), f"{excinfo.value}"

    path = tmp_path / "bad.jsonl"
    path.write_text('{"clip_id": "a", "media_uri": "m", "duration_s": -1}\n', encoding="utf-8")
    with pytest.raises(ManifestError) as excinfo:
        load_manifest(str(path))
    assert ":1:" in str(excinfo.value)


def test_to_json_document():
    text = to_json_document({"b": "Ä", "a": [1]})
    assert text.endswith("\n"), "trailing newline"
    assert "Ä" in text, "non-ASCII is kept verbatim"
    assert to_json_document(SCHEMA) == to_json_document(SCHEMA.model_dump(mode="json")), "models and dicts render alike"
