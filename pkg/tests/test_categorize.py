#!/usr/bin/env python3
"""
Test the categorize module: per-clip categorization, generic entities and the raw category tally.

Usage:
    python -m pytest -v --log-level=DEBUG --log-file=tests/test_output.txt tests/test_categorize.py
    pytest tests/test_categorize.py

Anatomy of a test is broken down into four steps:
- Arrange: prepare everything for our test
- Act: the singular, state-changing action that kicks off the behavior we want to test
- Assert: inspect the resulting state and check if it matches expectations
- Cleanup: remove artifacts so additional tests are not affected or influenced

"""
__license__ = "MIT - https://mit-license.org/"

import asyncio
import json
import random

import pytest
from faker import Faker

from categorize import (
    GENERIC_ENTITIES_INSTRUCTION,
    K_TOP_CATEGORIES,
    CategoryTally,
    build_categorization_prompt,
    categorize_batch,
    categorize_clip,
    tally_raw_categories,
    top_k,
)
from clipmodel import EPOCH, RawCategorization, load_manifest
from conftest import MANIFEST
from gateway import Gateway, MalformedOutput, Part, RetryPolicy, Role, StubProvider
from prompts import load_template

fake = Faker()
TEMPLATE = load_template("categorize")


def categorization(raw: str, clip_id: str = "c") -> RawCategorization:
    return RawCategorization(clip_id=clip_id, raw_category=raw, model_id="stub-vlm", created_at=EPOCH)


def test_categorize_constants():
    assert K_TOP_CATEGORIES == 50, "50 raw names are canonicalized by default"


# -----------------------------------------------------------------------------
# Prompts
# -----------------------------------------------------------------------------


def test_build_categorization_prompt(make_clip):
    clip = make_clip("c", steering_hint="Prefer educational categories.")
    request = build_categorization_prompt(clip, TEMPLATE)
    text = " ".join(part.value for part in request.parts if part.kind == "text")
    assert request.role is Role.VLM
    assert Part.media(clip.media_uri) in request.parts, "the clip's media is a request part"
    assert "Prefer educational categories." in text, "the steering hint is in the prompt"
    assert GENERIC_ENTITIES_INSTRUCTION in text, "generic entities are requested by default"

    request = build_categorization_prompt(make_clip("c"), TEMPLATE, generic_entities=False)
    assert GENERIC_ENTITIES_INSTRUCTION not in " ".join(part.value for part in request.parts), "the flag turns them off"


# -----------------------------------------------------------------------------
# Categorization
# -----------------------------------------------------------------------------


def test_categorize_clip(make_clip, scripted_gateway):
    reply = {
        "raw_category": "Cooking",
        "generic_entities": [
            {"entity_type": "Person", "attributes": [{"name": "Role", "value": " Chef "}, {"name": "role", "value": "Cook"}]},
            {"entity_type": "  ", "attributes": []},
            {"entity_type": "Background", "attributes": [{"name": "Setting", "value": "kitchen"}]},
        ],
    }
    gateway = scripted_gateway(json.dumps(reply))
    record = asyncio.run(categorize_clip(make_clip("c"), gateway, TEMPLATE, clock=lambda: EPOCH))
    assert record.raw_category == "Cooking" and record.model_id == "stub-vlm" and record.created_at == EPOCH
    assert [e.entity_type for e in record.generic_entities] == ["Person", "Background"], "untyped entities are skipped"
    assert record.generic_entities[0].get("Role") == "Chef", "values are trimmed; repeated names keep the first"
    assert record.generic_entities[1].get("Setting") == "kitchen"

    gateway = scripted_gateway(json.dumps(reply))
    record = asyncio.run(categorize_clip(make_clip("c"), gateway, TEMPLATE, generic_entities=False))
    assert record.generic_entities == (), "no generic entities when disabled"


def test_categorize_clip_blank_category(make_clip, scripted_gateway):
    gateway = scripted_gateway('{"raw_category": "  "}', policy=RetryPolicy(max_attempts=2))
    with pytest.raises(MalformedOutput):
        asyncio.run(categorize_clip(make_clip("c"), gateway, TEMPLATE))


def test_categorize_scenario(scenario_fixture):
    clips = {clip.clip_id: clip for clip in load_manifest(MANIFEST)}

    async def categorize(clip_id):
        async with Gateway(StubProvider(scenario_fixture), models=StubProvider.MODEL_IDS) as gateway:
            return await categorize_clip(clips[clip_id], gateway, TEMPLATE)

    lincoln = asyncio.run(categorize("lincoln-001"))
    assert lincoln.raw_category == "History"
    person = lincoln.generic_entities[0]
    assert person.entity_type == "Person" and person.get("Name") == "Abraham Lincoln" and person.get("Role") == "President"

    cooking = asyncio.run(categorize("howto-005"))
    background = [e for e in cooking.generic_entities if e.entity_type == "Background"]
    assert background and background[0].get("Setting").lower() == "kitchen", "a cooking clip has a kitchen background"


def test_categorize_corrective_retry(scenario_fixture):
    clip = {clip.clip_id: clip for clip in load_manifest(MANIFEST)}["howto-006"]

    async def complete():
        async with Gateway(StubProvider(scenario_fixture), models=StubProvider.MODEL_IDS) as gateway:
            return await gateway.complete_structured(build_categorization_prompt(clip, TEMPLATE), RetryPolicy())

    response = asyncio.run(complete())
    assert response.attempt_count == 2, "malformed on attempt 1, valid on attempt 2"
    assert response.parsed["raw_category"] == "how to"


def test_categorize_batch(make_clip, scripted_gateway):
    clips = [make_clip(f"clip-{idx:02d}") for idx in range(1, 30)]

    def reply(request):
        uri = next(part.value for part in request.parts if part.kind == "media_ref")
        if uri.endswith(("-07.mp4", "-13.mp4")):
            return "not JSON"
        return json.dumps({"raw_category": uri.split("/")[-1]})

    gateway = scripted_gateway(reply, policy=RetryPolicy(max_attempts=2))
    records, failures = [], []
    counts = asyncio.run(categorize_batch(clips, gateway, TEMPLATE, records.append, failures.append, max_in_flight=4, clock=lambda: EPOCH))
    assert counts.succeeded == 27 and counts.failed == 2 and counts.total == len(clips)
    assert [r.clip_id for r in records] == [c.clip_id for c in clips if c.clip_id not in ("clip-07", "clip-13")], "manifest order"
    assert [(f.stage, f.clip_id, f.kind) for f in failures] == [
        ("categorize", "clip-07", "MalformedOutput"),
        ("categorize", "clip-13", "MalformedOutput"),
    ], "failed clips are reported, the batch continues"


# -----------------------------------------------------------------------------
# Tally
# -----------------------------------------------------------------------------


def test_tally_raw_categories():
    tally = tally_raw_categories([categorization(raw) for raw in ["History", "history", "How-To"]])
    assert tally.counts == {"history": 2, "how to": 1}
    assert tally.total == 3 and len(tally) == 2
    assert len(tally_raw_categories([])) == 0, "empty stream, empty table"

    single = tally_raw_categories([categorization("Music")])
    assert single.counts == {"music": 1}


def test_top_k():
    tally = tally_raw_categories([categorization(raw) for raw in ["History", "history", "How-To"]])
    assert top_k(tally, 1) == [("History", 2)], "ties between spellings go to the lexicographically smallest"
    assert top_k(tally, 10) == [("History", 2), ("How-To", 1)], "k larger than the table returns the whole table"

    ties = tally_raw_categories([categorization("b"), categorization("a")])
    assert top_k(ties, 2) == [("a", 1), ("b", 1)], "count ties break on normalized name"
    with pytest.raises(ValueError):
        top_k(tally, 0)


def test_representative_spelling():
    tally = CategoryTally()
    for raw in ["travel", "Travel", "Travel", "TRAVEL"]:
        tally.add(raw)
    assert tally.representative("travel") == "Travel", "the most frequent spelling represents the key"


def test_tally_permutation_invariant():
    for idx in range(1, 50):
        raws = [random.choice(["History", "history", "How-To", "how to", "Travel", fake.word(), fake.word().upper()]) for _ in range(40)]
        records = [categorization(raw) for raw in raws]
        expected = tally_raw_categories(records)
        random.shuffle(records)
        shuffled = tally_raw_categories(records)
        assert shuffled.counts == expected.counts, "counts do not depend on input order"
        assert top_k(shuffled, 5) == top_k(expected, 5), "top_k does not depend on input order"
        assert sum(shuffled.counts.values()) == len(records), "counts sum to the records tallied"
