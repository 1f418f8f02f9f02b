#!/usr/bin/env python3
"""
Stage 1b: canonicalize the most frequent raw category names into a catalog with the text model, then
generate one entity schema per canonical category. Catalogs and schemas are versioned files:

  {catalog_dir}/catalog.v{N}.json
  {catalog_dir}/schemas/{slug}.v{N}.json
  {catalog_dir}/schemas/manifest.json     current schema file per canonical category

Files are never rewritten with different content: changed output gets the next version number and
identical output keeps the current one, so re-runs are byte-identical.

Usage:
  catalog = await canonicalize(top_k(tally, 50), gateway, load_template("canonicalize"))
  schema = await generate_schema("History", gateway, load_template("schema"))
  persist_catalog(catalog, catalog_dir)
  persist_schemas([schema], catalog_dir, catalog.version)

"""
__license__ = "MIT - https://mit-license.org/"

import json
import logging
import os
import re
from typing import Callable

from clipmodel import (
    AttributeDefinition,
    CanonicalCatalog,
    EntityDefinition,
    EntitySchema,
    FailureRecord,
    normalize_category_name,
    schema_slug,
    to_json_document,
    utc_now,
    validate_schema,
)
from gateway import Gateway, PromptRequest, ResponseModel, RetryPolicy, Role
from prompts import PromptTemplate
from schemaindex import nearest
from store import write_atomic
from workers import MAX_IN_FLIGHT, BatchCounts, Outcome, run_bounded

log = logging.getLogger(__name__)

MAX_SCHEMA_ENTITIES = 12
MAX_SCHEMA_ATTRIBUTES = 8
CATALOG_FILE = re.compile(r"^catalog\.v(\d+)\.json$")
SCHEMA_FILE = re.compile(r"^(?P<slug>.+)\.v(?P<version>\d+)\.json$")
MANIFEST_FILE = "manifest.json"


class SchemaGenError(Exception):
    """Base class for canonicalization and schema generation errors."""


class CatalogEmpty(SchemaGenError):
    pass


class MissingArtifact(SchemaGenError):
    """An upstream catalog or schema file does not exist yet."""


class CanonicalizationResponse(ResponseModel):
    """Canonical category names and the raw -> canonical mapping."""

    canonical_categories: list[str]
    mapping: dict[str, str] = {}


class AttributeDefinitionReply(ResponseModel):
    name: str
    description: str
    examples: list[str] = []


class EntityDefinitionReply(ResponseModel):
    name: str
    attributes: list[AttributeDefinitionReply] = []


class SchemaResponse(ResponseModel):
    """Typical entities of a video category, each attribute with a description and example values."""

    entities: list[EntityDefinitionReply]

    def to_schema(self, category: str, schema_version: int = 1) -> EntitySchema:
        return EntitySchema(
            category=category,
            schema_version=schema_version,
            entities=tuple(
                EntityDefinition(
                    name=entity.name.strip(),
                    attributes=tuple(
                        AttributeDefinition(
                            name=attribute.name.strip(),
                            description=attribute.description.strip(),
                            examples=tuple(e.strip() for e in attribute.examples if e.strip()),
                        )
                        for attribute in entity.attributes
                    ),
                )
                for entity in self.entities
            ),
        )

    def violations(self) -> list[str]:
        return list(validate_schema(self.to_schema("-")).violations)


def schema_from_response(parsed: dict, category: str, schema_version: int = 1) -> EntitySchema:
    return SchemaResponse.model_validate(parsed).to_schema(category, schema_version)


def build_canonicalize_prompt(top_raw: list[tuple[str, int]], template: str) -> PromptRequest:
    """The llm request listing each raw name with its count at `{categories}`."""
    prompt = PromptTemplate(template, required=("categories",), name="canonicalize")
    lines = "\n".join(f"- {name} ({count})" for name, count in top_raw)
    return PromptRequest(role=Role.LLM, parts=prompt.parts(categories=lines), response_schema=CanonicalizationResponse)


async def repair_catalog(
    top_raw: list[tuple[str, int]], parsed: dict, gateway: Gateway, version: int = 1, model_id: str = ""
) -> CanonicalCatalog:
    """
    Makes a catalog out of a canonicalization reply, deterministically:
      1. canonical names are trimmed; blanks and duplicates under normalization are dropped (first kept)
      2. mapping keys match raw names exactly, else by normalized name; targets are resolved by normalized name
      3. raw names left unmapped go to the canonical category with the most similar embedding (catalog order on ties)

    :raises CatalogEmpty: no canonical category survives step 1
    """
    canonical = []
    by_key = {}  # normalized : canonical spelling
    for name in parsed.get("canonical_categories", []):
        name = name.strip()
        key = normalize_category_name(name)
        if not key or key in by_key:
            continue
        by_key[key] = name
        canonical.append(name)
    if not canonical:
        raise CatalogEmpty("canonicalization returned no usable canonical categories")

    raw_names = [name for name, _ in top_raw]
    raw_by_key = {}
    for raw in raw_names:
        raw_by_key.setdefault(normalize_category_name(raw), []).append(raw)

    mapping = {}
    llm_mapping = parsed.get("mapping", {})
    resolved = {raw: by_key.get(normalize_category_name(target)) for raw, target in llm_mapping.items()}
    for raw, target in resolved.items():  # exact keys first
        if target is not None and raw in raw_names:
            mapping.setdefault(raw, target)
    for raw, target in resolved.items():
        if target is None:
            log.info(f"⚠ mapping '{raw}' -> '{llm_mapping[raw]}' targets no canonical category")
            continue
        for match in raw_by_key.get(normalize_category_name(raw), []):
            mapping.setdefault(match, target)

    unresolved = [raw for raw in raw_names if raw not in mapping]
    embeddable = [raw for raw in unresolved if normalize_category_name(raw)]
    for raw in unresolved:
        if raw not in embeddable:
            log.warning(f"⚠ raw category '{raw}' has no comparable text; mapped to '{canonical[0]}'")
            mapping[raw] = canonical[0]
    if embeddable:
        vectors = await gateway.embed(canonical + embeddable)
        category_vectors = vectors[: len(canonical)]
        for raw, vector in zip(embeddable, vectors[len(canonical) :]):
            best, similarity = nearest(vector, category_vectors)
            mapping[raw] = canonical[best]
            log.info(f"repaired mapping '{raw}' -> '{canonical[best]}' (cosine {similarity:.3f})")

    return CanonicalCatalog(
        version=version,
        canonical_categories=tuple(canonical),
        mapping={raw: mapping[raw] for raw in raw_names},
        model_id=model_id,
    )


async def canonicalize(
    top_raw: list[tuple[str, int]], gateway: Gateway, template: str, version: int = 1, policy: RetryPolicy = None
) -> CanonicalCatalog:
    """
    Consolidates raw category names into a canonical catalog whose mapping covers every input name.

    :param top_raw ([(str, int)]): raw names with their counts, e.g. from `top_k()`
    :raises CatalogEmpty: no input names, or no usable canonical names in the reply
    """
    if not top_raw:
        raise CatalogEmpty("no raw categories to canonicalize")
    response = await gateway.complete_structured(build_canonicalize_prompt(top_raw, template), policy)
    return await repair_catalog(top_raw, response.parsed, gateway, version, response.model_id)


def build_schema_prompt(
    category: str, template: str, max_entities: int = MAX_SCHEMA_ENTITIES, max_attributes: int = MAX_SCHEMA_ATTRIBUTES
) -> PromptRequest:
    prompt = PromptTemplate(template, required=("category",), name="schema")
    parts = prompt.parts(category=category, max_entities=max_entities, max_attributes=max_attributes)
    return PromptRequest(role=Role.LLM, parts=parts, response_schema=SchemaResponse, max_output_tokens=4096)


async def generate_schema(
    category: str,
    gateway: Gateway,
    template: str,
    schema_version: int = 1,
    policy: RetryPolicy = None,
    max_entities: int = MAX_SCHEMA_ENTITIES,
    max_attributes: int = MAX_SCHEMA_ATTRIBUTES,
) -> EntitySchema:
    """
    Generates the entity schema of a canonical category. The reply must pass `validate_schema()`;
    invalid replies are re-prompted by the gateway.

    :raises MalformedOutput: no valid schema within the retry policy
    """
    request = build_schema_prompt(category, template, max_entities, max_attributes)
    response = await gateway.complete_structured(request, policy)
    return schema_from_response(response.parsed, category, schema_version)


def settle_version(schema: EntitySchema, current: EntitySchema | None) -> EntitySchema:
    """Keeps the current version for identical content, otherwise takes the next version."""
    if current is None:
        return schema.model_copy(update={"schema_version": 1})
    if current.entities == schema.entities:
        return current
    return schema.model_copy(update={"schema_version": current.schema_version + 1})


async def generate_schemas(
    categories: list[str],
    gateway: Gateway,
    template: str,
    on_failure: Callable[[FailureRecord], None],
    catalog_dir: str = None,
    max_in_flight: int = MAX_IN_FLIGHT,
    policy: RetryPolicy = None,
    max_entities: int = MAX_SCHEMA_ENTITIES,
    max_attributes: int = MAX_SCHEMA_ATTRIBUTES,
    clock: Callable = utc_now,
    progress: bool = False,
) -> tuple[list[EntitySchema], BatchCounts]:
    """
    Generates schemas for the categories with bounded parallelism, in category order.
    Versions are settled against the latest schema files in `catalog_dir`.
    A category without a valid schema is reported through `on_failure` and skipped.
    """
    schemas = []
    counts = BatchCounts()

    async def work(category: str) -> EntitySchema:
        return await generate_schema(category, gateway, template, 1, policy, max_entities, max_attributes)

    def deliver(outcome: Outcome) -> None:
        if outcome.ok:
            counts.succeeded += 1
            current = latest_schema(catalog_dir, outcome.item) if catalog_dir else None
            schemas.append(settle_version(outcome.result, current))
        else:
            counts.failed += 1
            log.warning(f"✖ schema for '{outcome.item}' {outcome.error.__class__.__name__}: {outcome.error}")
            on_failure(FailureRecord.from_exception("genschema", outcome.error, clock(), category=outcome.item))

    await run_bounded(categories, work, deliver, max_in_flight=max_in_flight, progress=progress, desc="genschema")
    return schemas, counts


def _read_text(path: str) -> str | None:
    if not os.path.exists(path):
        return None
    with open(path, mode="r", encoding="utf-8") as fh:
        return fh.read()


def _write_immutable(path: str, text: str) -> str:
    existing = _read_text(path)
    if existing is None:
        return write_atomic(path, text)
    if existing != text:
        raise SchemaGenError(f"{path} exists with different content; versioned files are never rewritten")
    return path


def catalog_path(catalog_dir: str, version: int) -> str:
    return os.path.join(catalog_dir, f"catalog.v{version}.json")


def catalog_versions(catalog_dir: str) -> list[int]:
    if not os.path.isdir(catalog_dir):
        return []
    return sorted(int(m.group(1)) for m in map(CATALOG_FILE.match, os.listdir(catalog_dir)) if m)


def load_catalog(catalog_dir: str, version: int = None) -> CanonicalCatalog | None:
    """Loads a catalog version (default: the highest on disk), or None when there is none."""
    versions = catalog_versions(catalog_dir)
    if version is None:
        if not versions:
            return None
        version = versions[-1]
    text = _read_text(catalog_path(catalog_dir, version))
    return None if text is None else CanonicalCatalog.model_validate_json(text)


def settle_catalog_version(catalog: CanonicalCatalog, current: CanonicalCatalog | None) -> CanonicalCatalog:
    """Keeps the current version for an identical catalog, otherwise takes the next version."""
    if current is None:
        return catalog.model_copy(update={"version": 1})
    if current.model_copy(update={"version": catalog.version}) == catalog:
        return current
    return catalog.model_copy(update={"version": current.version + 1})


def persist_catalog(catalog: CanonicalCatalog, catalog_dir: str) -> str:
    """Writes `catalog.v{version}.json`; an existing file must hold identical bytes."""
    return _write_immutable(catalog_path(catalog_dir, catalog.version), to_json_document(catalog))


def schema_file(schema: EntitySchema) -> str:
    return f"{schema_slug(schema.category)}.v{schema.schema_version}.json"


def persist_schemas(schemas: list[EntitySchema], catalog_dir: str, catalog_version: int) -> list[str]:
    """
    Writes every schema to `schemas/{slug}.v{version}.json` and the schemas manifest listing them in order.

    - returns ([str]): the schema file paths
    """
    schemas_dir = os.path.join(catalog_dir, "schemas")
    os.makedirs(schemas_dir, exist_ok=True)
    paths = []
    entries = []
    for schema in schemas:
        file = schema_file(schema)
        paths.append(_write_immutable(os.path.join(schemas_dir, file), to_json_document(schema)))
        entries.append({"category": schema.category, "schema_version": schema.schema_version, "file": file})
    manifest = {"catalog_version": catalog_version, "schemas": entries}
    write_atomic(os.path.join(schemas_dir, MANIFEST_FILE), to_json_document(manifest))
    log.info(f"{len(paths)} schemas for catalog v{catalog_version} in {schemas_dir}")
    return paths


def load_schema_manifest(catalog_dir: str) -> dict:
    """:raises MissingArtifact: no schemas have been generated"""
    text = _read_text(os.path.join(catalog_dir, "schemas", MANIFEST_FILE))
    if text is None:
        raise MissingArtifact(f"no schemas manifest in {catalog_dir}; run genschema first")
    return json.loads(text)


def load_schema(catalog_dir: str, file: str) -> EntitySchema:
    text = _read_text(os.path.join(catalog_dir, "schemas", file))
    if text is None:
        raise MissingArtifact(f"schema file {file} not found in {catalog_dir}/schemas")
    return EntitySchema.model_validate_json(text)


def load_schemas(catalog_dir: str) -> dict[str, EntitySchema]:
    """The current schema of every category in the manifest, keyed by canonical category."""
    return {entry["category"]: load_schema(catalog_dir, entry["file"]) for entry in load_schema_manifest(catalog_dir)["schemas"]}


def latest_schema(catalog_dir: str, category: str) -> EntitySchema | None:
    """The highest schema version on disk for a category, or None."""
    schemas_dir = os.path.join(catalog_dir, "schemas")
    if not os.path.isdir(schemas_dir):
        return None
    slug = schema_slug(category)
    versions = [int(m.group("version")) for m in map(SCHEMA_FILE.match, os.listdir(schemas_dir)) if m and m.group("slug") == slug]
    if not versions:
        return None
    return load_schema(catalog_dir, f"{slug}.v{max(versions)}.json")
