#!/usr/bin/env python3
"""
Stage 2: schema-guided entity extraction.

The retrieved schema is rendered into the prompt with up to `max_examples_inline` example values per
attribute for in-context learning, the vision-language model extracts entities for one clip per request,
and conformance repair keeps only the entity types and attribute names the schema defines. Every dropped
member is counted and reported.

Usage:
  text = render_schema_prompt(schema, load_template("extract"))
  record, drops = await extract_entities(clip, schema, retrieval, gateway, template, raw_category="History")
  entities, dropped, reasons = repair_conformance(response.parsed, schema)

"""
__license__ = "MIT - https://mit-license.org/"

import dataclasses
import functools
import logging
from typing import Callable

from pydantic import create_model

from categorize import EntityReply
from clipmodel import (
    Attribute,
    CanonicalCatalog,
    ClipManifestEntry,
    DropRecord,
    EntityRecord,
    EntitySchema,
    FailureRecord,
    GenericEntity,
    normalize_category_name,
    utc_now,
)
from gateway import Gateway, Part, PromptRequest, ResponseModel, RetryPolicy, Role
from prompts import PromptTemplate
from schemaindex import MIN_SIMILARITY, Retrieval, SchemaIndex, resolve
from workers import MAX_IN_FLIGHT, BatchCounts, Outcome, run_bounded

log = logging.getLogger(__name__)

MAX_EXAMPLES_INLINE = 3


class ExtractError(Exception):
    """Base class for extraction errors."""


class MissingSchema(ExtractError):
    pass


class ExtractionResponse(ResponseModel):
    entities: list[EntityReply] = []


def render_schema_block(schema: EntitySchema, max_examples_inline: int = MAX_EXAMPLES_INLINE) -> str:
    lines = []
    for entity in schema.entities:
        lines.append(f"Entity: {entity.name}")
        for attribute in entity.attributes:
            examples = ", ".join(f'"{example}"' for example in attribute.examples[:max_examples_inline])
            lines.append(f"- {entity.name}.{attribute.name}: {attribute.description} (examples: {examples})")
    return "\n".join(lines)


def render_schema_prompt(schema: EntitySchema, template: str, max_examples_inline: int = MAX_EXAMPLES_INLINE) -> str:
    """
    Returns the template with the schema block at `{schema_block}` and the category at `{category}`.
    Other placeholders (e.g. `{media}`) are left for the request builder.

    :raises TemplateError: the template lacks `{schema_block}`
    """
    prompt = PromptTemplate(template, required=("schema_block",), name="extract")
    return prompt.fill(schema_block=render_schema_block(schema, max_examples_inline), category=schema.category)


@functools.lru_cache(maxsize=256)
def response_model_for(schema: EntitySchema) -> type[ExtractionResponse]:
    """
    The response model for a schema: the generic entity shape, with the schema's entity and attribute
    names in its description. Names are not enforced here so that conformance repair can count drops.
    """
    allowed = "; ".join(f"{entity.name} ({', '.join(a.name for a in entity.attributes)})" for entity in schema.entities)
    return create_model(
        f"{schema_slug_name(schema.category)}Extraction",
        __base__=ExtractionResponse,
        __doc__=f"Entities found in a {schema.category} clip. Allowed entity types and attributes: {allowed}",
    )


def schema_slug_name(category: str) -> str:
    return "".join(word.capitalize() for word in normalize_category_name(category).split()) or "Category"


def build_extraction_prompt(
    clip: ClipManifestEntry,
    schema: EntitySchema,
    template: str,
    max_examples_inline: int = MAX_EXAMPLES_INLINE,
    text_sidechannel: bool = True,
) -> PromptRequest:
    """
    The vlm request for one clip: media, rendered schema prompt and, unless disabled,
    the clip's transcript and caption as extra text parts.
    """
    prompt = PromptTemplate(template, required=("schema_block",), name="extract")
    parts = prompt.parts(
        media_uri=clip.media_uri,
        schema_block=render_schema_block(schema, max_examples_inline),
        category=schema.category,
    )
    if text_sidechannel:
        if clip.transcript_text:
            parts += (Part.text(f"Transcript:\n{clip.transcript_text}"),)
        if clip.caption_text:
            parts += (Part.text(f"Caption:\n{clip.caption_text}"),)
    return PromptRequest(role=Role.VLM, parts=parts, response_schema=response_model_for(schema), max_output_tokens=4096)


def repair_conformance(parsed: dict, schema: EntitySchema) -> tuple[tuple[GenericEntity, ...], int, list[tuple[str, str]]]:
    """
    Keeps the entities and attributes whose names match the schema after normalization, spelled as in the schema.
    Values are trimmed, otherwise verbatim. Repeated attributes within an entity keep the first.

    - returns (entities, dropped_count, [(member, reason)])
    """
    entities = []
    reasons = []
    for i, item in enumerate((parsed or {}).get("entities") or []):
        entity_type = str(item.get("entity_type", "")).strip()
        definition = schema.entity(entity_type)
        if definition is None:
            reasons.append((entity_type or f"entities[{i}]", f"entity type '{entity_type}' is not in the {schema.category} schema"))
            continue
        allowed = {normalize_category_name(a.name): a.name for a in definition.attributes}
        attributes = []
        seen = set()
        for attribute in item.get("attributes") or []:
            name = str(attribute.get("name", "")).strip()
            key = normalize_category_name(name)
            member = f"{definition.name}.{name}"
            if key not in allowed:
                reasons.append((member, f"attribute '{name}' is not defined for {definition.name}"))
            elif key in seen:
                reasons.append((member, f"repeated attribute '{name}'"))
            else:
                seen.add(key)
                attributes.append(Attribute(name=allowed[key], value=str(attribute.get("value", "")).strip()))
        entities.append(GenericEntity(entity_type=definition.name, attributes=tuple(attributes)))
    return tuple(entities), len(reasons), reasons


def check_conformance(record: EntityRecord, schema: EntitySchema) -> list[str]:
    """Violations of a stored record against the schema version it cites; empty when conformant."""
    violations = []
    if normalize_category_name(record.canonical_category) != normalize_category_name(schema.category):
        violations.append(f"{record.clip_id}: category '{record.canonical_category}' is not the schema's '{schema.category}'")
    if record.schema_version != schema.schema_version:
        violations.append(f"{record.clip_id}: schema_version {record.schema_version} is not {schema.schema_version}")
    names = {entity.name: {a.name for a in entity.attributes} for entity in schema.entities}
    for entity in record.entities:
        if entity.entity_type not in names:
            violations.append(f"{record.clip_id}: entity type '{entity.entity_type}' not in schema")
            continue
        for attribute in entity.attributes:
            if attribute.name not in names[entity.entity_type]:
                violations.append(f"{record.clip_id}: attribute '{entity.entity_type}.{attribute.name}' not in schema")
    return violations


async def extract_entities(
    clip: ClipManifestEntry,
    schema: EntitySchema,
    retrieval: Retrieval,
    gateway: Gateway,
    template: str,
    raw_category: str,
    policy: RetryPolicy = None,
    max_examples_inline: int = MAX_EXAMPLES_INLINE,
    text_sidechannel: bool = True,
    clock: Callable = utc_now,
) -> tuple[EntityRecord, list[DropRecord]]:
    """
    Extracts schema-conformant entities from one clip.

    - returns (EntityRecord, [DropRecord]): the record and one drop per removed member
    :raises GatewayError: from the gateway
    """
    request = build_extraction_prompt(clip, schema, template, max_examples_inline, text_sidechannel)
    response = await gateway.complete_structured(request, policy)
    entities, dropped, reasons = repair_conformance(response.parsed, schema)
    if dropped:
        log.info(f"{clip.clip_id}: dropped {dropped} non-conforming members")
    record = EntityRecord(
        clip_id=clip.clip_id,
        raw_category=raw_category,
        canonical_category=retrieval.canonical_category,
        retrieval_similarity=retrieval.similarity,
        retrieval_path=retrieval.path,
        low_confidence=retrieval.low_confidence,
        schema_version=schema.schema_version,
        entities=entities,
        model_id=response.model_id,
        created_at=clock(),
    )
    return record, [DropRecord(clip_id=clip.clip_id, member=member, reason=reason) for member, reason in reasons]


@dataclasses.dataclass(frozen=True)
class ExtractionJob:
    clip: ClipManifestEntry
    raw_category: str
    use_catalog: bool = True  # False for clips never seen by canonicalization


async def extract_batch(
    jobs: list[ExtractionJob],
    catalog: CanonicalCatalog,
    index: SchemaIndex,
    schemas: dict[str, EntitySchema],
    gateway: Gateway,
    template: str,
    on_record: Callable[[EntityRecord], None],
    on_drops: Callable[[list[DropRecord]], None],
    on_failure: Callable[[FailureRecord], None],
    max_in_flight: int = MAX_IN_FLIGHT,
    policy: RetryPolicy = None,
    min_similarity: float = MIN_SIMILARITY,
    max_examples_inline: int = MAX_EXAMPLES_INLINE,
    text_sidechannel: bool = True,
    clock: Callable = utc_now,
    progress: bool = False,
) -> BatchCounts:
    """
    Resolves each job's schema and extracts its entities with bounded parallelism.
    Outputs are delivered in job order; records + failures equals the number of jobs.
    """
    counts = BatchCounts()

    async def work(job: ExtractionJob) -> tuple[EntityRecord, list[DropRecord]]:
        retrieval = await resolve(job.raw_category, catalog if job.use_catalog else None, index, gateway, min_similarity)
        schema = schemas.get(retrieval.canonical_category)
        if schema is None:
            raise MissingSchema(f"no schema loaded for '{retrieval.canonical_category}'")
        return await extract_entities(
            job.clip, schema, retrieval, gateway, template, job.raw_category, policy, max_examples_inline, text_sidechannel, clock
        )

    def deliver(outcome: Outcome) -> None:
        clip_id = outcome.item.clip.clip_id
        if outcome.ok:
            counts.succeeded += 1
            record, drops = outcome.result
            on_record(record)
            if drops:
                on_drops(drops)
        else:
            counts.failed += 1
            log.warning(f"✖ {clip_id} {outcome.error.__class__.__name__}: {outcome.error}")
            on_failure(FailureRecord.from_exception("extract", outcome.error, clock(), clip_id=clip_id))

    await run_bounded(jobs, work, deliver, max_in_flight=max_in_flight, progress=progress, desc="extract")
    log.info(f"extracted {counts.succeeded} clips, {counts.failed} failed")
    return counts
