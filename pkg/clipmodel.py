#!/usr/bin/env python3
"""
Domain types shared by every pipeline stage, the canonical name normalization rules and schema validation.

All record types are immutable pydantic models. Their serialized form is one JSON object with snake_case
field names, so every record can be written as a single JSONL line and read back with field equality.

Usage:
  from clipmodel import ClipManifestEntry, normalize_category_name, validate_schema

  normalize_category_name("  Travel & Events!! ")  # 'travel and events'
  normalize_entity_value("PRESIDENT LINCOLN")        # 'president lincoln'
  clips = load_manifest("data/manifests/fixture-12.jsonl")

"""
__license__ = "MIT - https://mit-license.org/"

import datetime
import json
import logging
import re
import unicodedata
from typing import Annotated, Literal

from pydantic import (
    AfterValidator,
    AwareDatetime,
    BaseModel,
    ConfigDict,
    Field,
    PlainSerializer,
    ValidationError,
    model_validator,
)

log = logging.getLogger(__name__)

NON_WORD = re.compile(r"[\W_]+")  # punctuation, symbols, underscores and whitespace runs
NORMALIZE_MAX_PASSES = 16
EPOCH = datetime.datetime(1970, 1, 1, tzinfo=datetime.timezone.utc)


class ModelError(Exception):
    """Base class for domain model errors."""


class ManifestError(ModelError):
    """A clip manifest line is invalid or repeats a clip_id."""


def _normalize_pass(text: str) -> str:
    text = unicodedata.normalize("NFKC", text).lower()
    text = unicodedata.normalize("NFKC", text)  # lowercasing may denormalize (e.g. 'İ')
    text = text.replace("&", " and ")
    text = NON_WORD.sub(" ", text)
    return " ".join(text.split())


def normalize_category_name(raw: str) -> str:
    """
    Returns the canonical comparison form of a category name:
    NFKC folded, lowercased, '&' spelled 'and', punctuation stripped to single spaces, whitespace collapsed, trimmed.

    The rules are applied until the text stops changing, so `f(f(x)) == f(x)` for every string.

    :param raw (str): any string. None and "" map to "".
    """
    text = raw or ""
    for _ in range(NORMALIZE_MAX_PASSES):
        folded = _normalize_pass(text)
        if folded == text:
            break
        text = folded
    return text


def normalize_entity_value(value: str) -> str:
    """Returns the comparison form of an entity attribute value (same rules as category names)."""
    return normalize_category_name(value)


def schema_slug(category: str) -> str:
    """
    Returns the file name stem for a category: its normalized name with hyphens for spaces.
    "How-To" -> "how-to"
    """
    slug = normalize_category_name(category).replace(" ", "-")
    if not slug:
        raise ModelError(f"category '{category}' has no usable characters for a file name")
    return slug


def format_timestamp(dt: datetime.datetime) -> str:
    """RFC 3339 UTC timestamp with a 'Z' suffix."""
    return dt.astimezone(datetime.timezone.utc).isoformat().replace("+00:00", "Z")


def utc_now() -> datetime.datetime:
    return datetime.datetime.now(datetime.timezone.utc)


UtcTimestamp = Annotated[
    AwareDatetime,
    AfterValidator(lambda dt: dt.astimezone(datetime.timezone.utc)),
    PlainSerializer(format_timestamp, return_type=str),
]


def _not_blank(value: str) -> str:
    value = value.strip()
    if not value:
        raise ValueError("must not be empty after trimming")
    return value


class Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class ClipManifestEntry(Frozen):
    """One video clip: identity, opaque media reference and optional text side-channels."""

    clip_id: str = Field(min_length=1)
    media_uri: str
    duration_s: float = Field(ge=0)
    transcript_text: str | None = None
    caption_text: str | None = None
    steering_hint: str | None = None


class Attribute(Frozen):
    name: str
    value: str


class GenericEntity(Frozen):
    """An entity instance with an open-vocabulary type and (name, value) attributes."""

    entity_type: Annotated[str, AfterValidator(_not_blank)]
    attributes: tuple[Attribute, ...] = ()

    @model_validator(mode="after")
    def unique_attribute_names(self):
        seen = set()
        for attribute in self.attributes:
            key = normalize_category_name(attribute.name)
            if key in seen:
                raise ValueError(f"duplicate attribute name '{attribute.name}' in {self.entity_type}")
            seen.add(key)
        return self

    def get(self, name: str, default: str | None = None) -> str | None:
        """Returns the value of the attribute with the given name (compared normalized)."""
        key = normalize_category_name(name)
        for attribute in self.attributes:
            if normalize_category_name(attribute.name) == key:
                return attribute.value
        return default


class RawCategorization(Frozen):
    clip_id: str = Field(min_length=1)
    raw_category: Annotated[str, AfterValidator(_not_blank)]
    generic_entities: tuple[GenericEntity, ...] = ()
    model_id: str
    created_at: UtcTimestamp


class CanonicalCatalog(Frozen):
    """
    Canonical category list with the raw -> canonical mapping it was built from.
    Every mapping target is a canonical category and no two canonical categories are equal once normalized.
    """

    version: int = Field(ge=1)
    canonical_categories: tuple[str, ...]
    mapping: dict[str, str]
    model_id: str

    @model_validator(mode="after")
    def consistent(self):
        seen = {}
        for category in self.canonical_categories:
            key = normalize_category_name(category)
            if key in seen:
                raise ValueError(f"canonical categories '{seen[key]}' and '{category}' are duplicates")
            seen[key] = category
        known = set(self.canonical_categories)
        for raw, target in self.mapping.items():
            if target not in known:
                raise ValueError(f"mapping '{raw}' -> '{target}' targets an unknown canonical category")
        return self

    def lookup(self, raw_category: str) -> str | None:
        """Returns the mapped canonical category for a raw name, matched exactly or normalized."""
        if raw_category in self.mapping:
            return self.mapping[raw_category]
        key = normalize_category_name(raw_category)
        for raw, target in self.mapping.items():
            if normalize_category_name(raw) == key:
                return target
        return None


class AttributeDefinition(Frozen):
    name: str
    description: str
    examples: tuple[str, ...] = ()


class EntityDefinition(Frozen):
    name: str
    attributes: tuple[AttributeDefinition, ...] = ()


class EntitySchema(Frozen):
    """
    Entities typical for one canonical category. Shape rules are checked by `validate_schema()`,
    not on construction, so that generated schemas can be judged and reported.
    """

    category: str
    schema_version: int = Field(ge=1)
    entities: tuple[EntityDefinition, ...] = ()

    def entity(self, name: str) -> EntityDefinition | None:
        key = normalize_category_name(name)
        for entity in self.entities:
            if normalize_category_name(entity.name) == key:
                return entity
        return None


class EntityRecord(Frozen):
    clip_id: str = Field(min_length=1)
    raw_category: str
    canonical_category: str
    retrieval_similarity: float = Field(ge=-1.0, le=1.0)
    retrieval_path: Literal["catalog", "exact", "embedding"]
    low_confidence: bool = False
    schema_version: int = Field(ge=1)
    entities: tuple[GenericEntity, ...] = ()
    model_id: str
    created_at: UtcTimestamp


class ValidationReport(Frozen):
    ok: bool
    violations: tuple[str, ...] = ()


class FailureRecord(Frozen):
    """A batch item that failed without aborting its batch."""

    stage: Literal["categorize", "genschema", "extract"]
    clip_id: str | None = None
    category: str | None = None
    kind: str
    message: str
    created_at: UtcTimestamp

    @classmethod
    def from_exception(cls, stage: str, error: Exception, created_at: datetime.datetime, clip_id: str = None, category: str = None):
        return cls(stage=stage, clip_id=clip_id, category=category, kind=error.__class__.__name__, message=str(error), created_at=created_at)


class DropRecord(Frozen):
    """An extracted member removed by conformance repair."""

    clip_id: str
    member: str
    reason: str


def validate_schema(schema: EntitySchema) -> ValidationReport:
    """
    Checks the schema shape rules and returns every violation with the path of the offending member.

    - entities non-empty
    - entity names non-empty and unique (normalized)
    - attribute names non-empty and unique within their entity (normalized)
    - every attribute has a description and at least one example value
    """
    violations = []
    if not schema.entities:
        violations.append("entities empty")

    entity_names = {}
    for i, entity in enumerate(schema.entities):
        entity_path = entity.name.strip() or f"entities[{i}]"
        entity_key = normalize_category_name(entity.name)
        if not entity_key:
            violations.append(f"{entity_path}: name empty")
        elif entity_key in entity_names:
            violations.append(f"{entity_path}: duplicate entity name (same as {entity_names[entity_key]})")
        else:
            entity_names[entity_key] = entity_path

        attribute_names = {}
        for j, attribute in enumerate(entity.attributes):
            path = f"{entity_path}.{attribute.name.strip() or f'attributes[{j}]'}"
            attribute_key = normalize_category_name(attribute.name)
            if not attribute_key:
                violations.append(f"{path}: name empty")
            elif attribute_key in attribute_names:
                violations.append(f"{path}: duplicate attribute name (same as {attribute_names[attribute_key]})")
            else:
                attribute_names[attribute_key] = path
            if not attribute.description.strip():
                violations.append(f"{path}: description empty")
            if not any(example.strip() for example in attribute.examples):
                violations.append(f"{path}: examples empty")

    return ValidationReport(ok=not violations, violations=tuple(violations))


def load_manifest(path: str) -> list[ClipManifestEntry]:
    """
    Loads a clip manifest (one ClipManifestEntry JSON object per line, blank lines ignored).

    :param path (str): the manifest JSONL file
    :raises ManifestError: on an invalid line or a repeated clip_id, naming the line number
    """
    clips = []
    first_line = {}  # clip_id : line number
    with open(path, mode="r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                clip = ClipManifestEntry.model_validate_json(line)
            except ValidationError as e:
                raise ManifestError(f"{path}:{lineno}: invalid manifest entry: {e.errors()[0]['msg']}") from e
            if clip.clip_id in first_line:
                raise ManifestError(f"{path}:{lineno}: duplicate clip_id '{clip.clip_id}' (first on line {first_line[clip.clip_id]})")
            first_line[clip.clip_id] = lineno
            clips.append(clip)
    log.info(f"{path}: {len(clips)} clips")
    return clips


def to_json_line(record: BaseModel) -> str:
    """Returns the single-line JSON form of a record (no trailing newline)."""
    return record.model_dump_json()


def to_json_document(data) -> str:
    """Returns a pretty-printed JSON document with a trailing newline; used for every persisted artifact file."""
    if isinstance(data, BaseModel):
        data = data.model_dump(mode="json")
    return json.dumps(data, indent=2, ensure_ascii=False) + "\n"
