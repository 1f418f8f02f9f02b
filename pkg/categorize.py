#!/usr/bin/env python3
"""
Stage 1a: per-clip category inference and generic entity extraction with the vision-language model,
then the frequency tally of raw category names that feeds canonicalization.

One prompt per clip asks for a free-form category and, when enabled, the general-purpose entities
(people, objects, locations, backgrounds) seen or heard in the clip. An optional steering hint from the
manifest biases the categorization towards the application's goals.

Usage:
  record = await categorize_clip(clip, gateway, load_template("categorize"))
  tally = tally_raw_categories(records)
  top_k(tally, 50)  # [('History', 4), ('How-To', 3), ...]

"""
__license__ = "MIT - https://mit-license.org/"

import collections
import dataclasses
import logging
from typing import Callable, Iterable

from clipmodel import (
    Attribute,
    ClipManifestEntry,
    FailureRecord,
    GenericEntity,
    RawCategorization,
    normalize_category_name,
    utc_now,
)
from gateway import Gateway, PromptRequest, ResponseModel, RetryPolicy, Role
from prompts import PromptTemplate
from workers import MAX_IN_FLIGHT, BatchCounts, Outcome, run_bounded

log = logging.getLogger(__name__)

K_TOP_CATEGORIES = 50
GENERIC_ENTITIES_INSTRUCTION = (
    "Also list the general-purpose entities in the clip (people, objects, locations and backgrounds) as "
    "generic_entities. Give each an entity_type such as Person, Object, Location or Background and "
    "descriptive attributes such as Role, Gender, Age, Appearance, Mood, Type, Color, Size or Setting."
)


class AttributeReply(ResponseModel):
    name: str
    value: str


class EntityReply(ResponseModel):
    entity_type: str
    attributes: list[AttributeReply] = []


class CategorizationResponse(ResponseModel):
    """A clip's free-form category and the generic entities seen or heard in it."""

    raw_category: str
    generic_entities: list[EntityReply] = []

    def violations(self) -> list[str]:
        return [] if self.raw_category.strip() else ["raw_category: empty"]


def build_categorization_prompt(clip: ClipManifestEntry, template: str, generic_entities: bool = True) -> PromptRequest:
    """
    Returns the vlm request for one clip: the template text with the clip's media where `{media}` is,
    the steering hint (or nothing) at `{steering}` and the generic entity instruction at `{entities}`.

    :raises TemplateError: the template lacks `{media}` or `{steering}`
    """
    prompt = PromptTemplate(template, required=("media", "steering"), name="categorize")
    parts = prompt.parts(
        media_uri=clip.media_uri,
        steering=clip.steering_hint or "",
        entities=GENERIC_ENTITIES_INSTRUCTION if generic_entities else "",
    )
    return PromptRequest(role=Role.VLM, parts=parts, response_schema=CategorizationResponse, max_output_tokens=1024)


def to_generic_entities(replies: list[dict]) -> tuple[GenericEntity, ...]:
    """Builds GenericEntity values from parsed replies: blank types are skipped, repeated attribute names keep the first."""
    entities = []
    for reply in replies:
        entity_type = reply["entity_type"].strip()
        if not entity_type:
            log.debug("skipping generic entity without a type")
            continue
        attributes = []
        seen = set()
        for attribute in reply.get("attributes", []):
            name = attribute["name"].strip()
            key = normalize_category_name(name)
            if not key or key in seen:
                continue
            seen.add(key)
            attributes.append(Attribute(name=name, value=attribute["value"].strip()))
        entities.append(GenericEntity(entity_type=entity_type, attributes=tuple(attributes)))
    return tuple(entities)


async def categorize_clip(
    clip: ClipManifestEntry,
    gateway: Gateway,
    template: str,
    policy: RetryPolicy = None,
    generic_entities: bool = True,
    clock: Callable = utc_now,
) -> RawCategorization:
    """
    Infers the raw category (and generic entities) of one clip.

    :raises GatewayError: from the gateway, e.g. MalformedOutput once the retries are spent
    """
    request = build_categorization_prompt(clip, template, generic_entities)
    response = await gateway.complete_structured(request, policy)
    parsed = response.parsed
    return RawCategorization(
        clip_id=clip.clip_id,
        raw_category=parsed["raw_category"],
        generic_entities=to_generic_entities(parsed["generic_entities"]) if generic_entities else (),
        model_id=response.model_id,
        created_at=clock(),
    )


async def categorize_batch(
    clips: list[ClipManifestEntry],
    gateway: Gateway,
    template: str,
    on_record: Callable[[RawCategorization], None],
    on_failure: Callable[[FailureRecord], None],
    max_in_flight: int = MAX_IN_FLIGHT,
    policy: RetryPolicy = None,
    generic_entities: bool = True,
    clock: Callable = utc_now,
    progress: bool = False,
) -> BatchCounts:
    """
    Categorizes clips with bounded parallelism. Records and failures are delivered in manifest order;
    a failed clip is reported through `on_failure` and the batch continues.
    """
    counts = BatchCounts()

    async def work(clip: ClipManifestEntry) -> RawCategorization:
        return await categorize_clip(clip, gateway, template, policy, generic_entities, clock)

    def deliver(outcome: Outcome) -> None:
        if outcome.ok:
            counts.succeeded += 1
            on_record(outcome.result)
        else:
            counts.failed += 1
            log.warning(f"✖ {outcome.item.clip_id} {outcome.error.__class__.__name__}: {outcome.error}")
            on_failure(FailureRecord.from_exception("categorize", outcome.error, clock(), clip_id=outcome.item.clip_id))

    await run_bounded(clips, work, deliver, max_in_flight=max_in_flight, progress=progress, desc="categorize")
    log.info(f"categorized {counts.succeeded} clips, {counts.failed} failed")
    return counts


@dataclasses.dataclass
class CategoryTally:
    """Raw category frequencies keyed by normalized name, with the original spellings seen for each key."""

    counts: dict[str, int] = dataclasses.field(default_factory=dict)
    spellings: dict[str, collections.Counter] = dataclasses.field(default_factory=dict)

    def add(self, raw_category: str) -> None:
        key = normalize_category_name(raw_category)
        self.counts[key] = self.counts.get(key, 0) + 1
        self.spellings.setdefault(key, collections.Counter())[raw_category] += 1

    def representative(self, key: str) -> str:
        """The most frequent original spelling of a key; ties go to the lexicographically smallest."""
        return min(self.spellings[key].items(), key=lambda item: (-item[1], item[0]))[0]

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def __len__(self) -> int:
        return len(self.counts)


def tally_raw_categories(records: Iterable[RawCategorization]) -> CategoryTally:
    tally = CategoryTally()
    for record in records:
        tally.add(record.raw_category)
    return tally


def top_k(tally: CategoryTally, k: int = K_TOP_CATEGORIES) -> list[tuple[str, int]]:
    """
    Returns up to k (representative spelling, count) pairs, descending by count, ties by normalized name.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, not {k}")
    keys = sorted(tally.counts, key=lambda key: (-tally.counts[key], key))[:k]
    return [(tally.representative(key), tally.counts[key]) for key in keys]
