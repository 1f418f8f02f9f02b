#!/usr/bin/env python3
"""
Builds a stub provider fixture from a readable YAML scenario.

A scenario gives the model replies per clip and per category; this script renders the same prompts the pipeline
will send (same templates, same config) and keys each reply by its request key. Canonicalization repair, schema
indexing and retrieval are run for real on the stub embedder, so each clip's extraction reply is keyed by the
schema the pipeline will actually retrieve for it.

Scenario:
  manifest: ../manifests/fixture-12.jsonl      # relative to the scenario file
  extra_manifest: ../manifests/extra-13.jsonl   # optional, clips that bypass canonicalization
  canonicalization: {canonical_categories: [...], mapping: {raw: canonical}}
  schemas: {Category: {entities: [{name, attributes: [{name, description, examples}]}]}}
  clips:
    clip-001:
      raw_category: History
      generic_entities: [{entity_type: Person, attributes: {Role: President}}]
      entities: [{entity_type: Historical Figure, attributes: {Name: Abraham Lincoln}}]
  schema_failures:                               # optional: the first n replies are not JSON
    - {stage: categorize, clip_id: clip-003, attempts: 1}
    - {stage: genschema, category: Music, attempts: 3}

Usage:
  stubfixture.py data/YAML/lincoln-scenario.yaml
  stubfixture.py data/YAML/lincoln-scenario.yaml -c data/config/stub.yaml -o fixture.json

"""
__license__ = "MIT - https://mit-license.org/"

import argparse
import asyncio
import logging
import os
import sys

import yaml

from categorize import CategoryTally, build_categorization_prompt, top_k
from clipmodel import load_manifest, to_json_document
from extract import build_extraction_prompt
from gateway import Gateway, Role, StubProvider
from prompts import load_template
from schemagen import build_canonicalize_prompt, build_schema_prompt, repair_catalog, schema_file, schema_from_response
from schemaindex import build_index, resolve

log = logging.getLogger(__name__)


class ScenarioError(Exception):
    pass


def load_scenario(path: str) -> dict:
    """Reads a scenario and loads its manifests (paths relative to the scenario file)."""
    with open(path, mode="r", encoding="utf-8") as fh:
        scenario = yaml.safe_load(fh) or {}
    base = os.path.dirname(os.path.abspath(path))
    for key in ("manifest", "extra_manifest"):
        if scenario.get(key):
            scenario[key] = os.path.normpath(os.path.join(base, scenario[key]))
    if not scenario.get("manifest"):
        raise ScenarioError(f"{path}: scenario has no manifest")
    scenario["clips"] = scenario.get("clips") or {}
    scenario["schemas"] = scenario.get("schemas") or {}
    return scenario


def entity_replies(entities: list[dict]) -> list[dict]:
    """Accepts attributes as a {name: value} mapping or a [{name, value}] list; returns the reply shape."""
    replies = []
    for entity in entities or []:
        attributes = entity.get("attributes") or []
        if isinstance(attributes, dict):
            attributes = [{"name": name, "value": str(value)} for name, value in attributes.items()]
        replies.append({"entity_type": entity["entity_type"], "attributes": attributes})
    return replies


class FixtureBuilder:
    """Collects replies by request key, plus forced schema failures."""

    def __init__(self, max_attempts: int):
        assert max_attempts >= 1, "max_attempts < 1"
        self.max_attempts = max_attempts
        self.responses = {}
        self.failures = []

    def add(self, request, reply: dict | str) -> None:
        if request.key in self.responses:
            log.debug(f"request key {request.key} repeats; keeping the first reply")
            return
        self.responses[request.key] = reply

    def fail(self, request, attempts: int) -> bool:
        """Registers forced failures; returns True when they outlast the retry policy."""
        self.failures.append({"key": request.key, "attempts": attempts})
        return attempts >= self.max_attempts

    def fixture(self) -> dict:
        fixture = dict(sorted(self.responses.items()))
        if self.failures:
            fixture["schema_failures"] = sorted(self.failures, key=lambda f: f["key"])
        return fixture


def _failures(scenario: dict, stage: str) -> dict:
    key = "category" if stage == "genschema" else "clip_id"
    return {f[key]: int(f.get("attempts", 1)) for f in scenario.get("schema_failures") or [] if f.get("stage") == stage}


async def build_fixture(scenario: dict, config) -> dict:
    """
    Returns the fixture for a loaded scenario under a PipelineConfig.

    :raises ScenarioError: the scenario has no canonicalization reply
    """
    templates = {name: load_template(config.templates.path(name)) for name in ("categorize", "canonicalize", "schema", "extract")}
    builder = FixtureBuilder(config.retry.max_attempts)
    clips = scenario["clips"]
    manifest = load_manifest(scenario["manifest"])
    extra = load_manifest(scenario["extra_manifest"]) if scenario.get("extra_manifest") else []

    # categorization, for both manifests
    categorize_failures = _failures(scenario, "categorize")
    categorized = {}  # clip_id : raw category, for clips that will categorize successfully
    for clip in manifest + extra:
        reply = clips.get(clip.clip_id)
        if reply is None:
            log.warning(f"⚠ scenario has no reply for clip {clip.clip_id}")
            continue
        request = build_categorization_prompt(clip, templates["categorize"], config.generic_entities)
        builder.add(request, {"raw_category": reply["raw_category"], "generic_entities": entity_replies(reply.get("generic_entities"))})
        if clip.clip_id in categorize_failures and builder.fail(request, categorize_failures[clip.clip_id]):
            continue
        categorized[clip.clip_id] = reply["raw_category"]

    # canonicalization over the tally of the main manifest
    tally = CategoryTally()
    for clip in manifest:
        if clip.clip_id in categorized:
            tally.add(categorized[clip.clip_id])
    if not scenario.get("canonicalization"):
        raise ScenarioError("scenario has no canonicalization reply")
    top_raw = top_k(tally, config.k_top_categories)
    builder.add(build_canonicalize_prompt(top_raw, templates["canonicalize"]), scenario["canonicalization"])

    async with Gateway(StubProvider({}), models=StubProvider.MODEL_IDS, policy=config.retry) as gateway:
        catalog = await repair_catalog(top_raw, scenario["canonicalization"], gateway, model_id=StubProvider.MODEL_IDS[Role.LLM])

        # schemas
        genschema_failures = _failures(scenario, "genschema")
        schemas = {}
        for category in catalog.canonical_categories:
            reply = scenario["schemas"].get(category)
            if reply is None:
                log.warning(f"⚠ scenario has no schema for '{category}'")
                continue
            request = build_schema_prompt(category, templates["schema"], config.max_schema_entities, config.max_schema_attributes)
            builder.add(request, reply)
            if category in genschema_failures and builder.fail(request, genschema_failures[category]):
                continue
            schemas[category] = schema_from_response(reply, category)

        # extraction, resolved the way the extract stage resolves
        manifest_refs = {"schemas": [{"category": c, "file": schema_file(s)} for c, s in schemas.items()]}
        index, _ = await build_index(catalog, manifest_refs, gateway)
        extract_failures = _failures(scenario, "extract")
        in_catalog = {clip.clip_id for clip in manifest}
        for clip in manifest + extra:
            if clip.clip_id not in categorized:
                continue
            raw = categorized[clip.clip_id]
            retrieval = await resolve(raw, catalog if clip.clip_id in in_catalog else None, index, gateway, config.min_similarity)
            schema = schemas[retrieval.canonical_category]
            request = build_extraction_prompt(clip, schema, templates["extract"], config.max_examples_inline, config.text_sidechannel)
            builder.add(request, {"entities": entity_replies(clips[clip.clip_id].get("entities"))})
            if clip.clip_id in extract_failures:
                builder.fail(request, extract_failures[clip.clip_id])
            log.debug(f"{clip.clip_id}: '{raw}' -> '{retrieval.canonical_category}' ({retrieval.path})")

    fixture = builder.fixture()
    log.info(f"✔ built {len(builder.responses)} stub replies, {len(builder.failures)} forced failures")
    return fixture


if __name__ == "__main__":
    """
    Command line script invocation.
    """
    from config import load_config

    argp = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawTextHelpFormatter)
    argp.add_argument("scenario", help="YAML scenario file")
    argp.add_argument("-c", "--config", default=None, help="pipeline config whose templates and limits shape the prompts")
    argp.add_argument("-o", "--out", default="-", help="fixture JSON file. Default: stdout")
    argp.add_argument("-l", "--level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"], help="log threshold")
    args = argp.parse_args()

    logging.basicConfig(
        stream=sys.stderr,
        format="%(asctime)s.%(msecs)03d | %(levelname)s | %(module)s | %(funcName)s | %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
        level=args.level,
    )
    document = to_json_document(asyncio.run(build_fixture(load_scenario(args.scenario), load_config(args.config))))
    if args.out == "-":
        sys.stdout.write(document)
    else:
        with open(args.out, mode="w", encoding="utf-8") as fh:
            fh.write(document)
        print(f"✔ {args.out}", file=sys.stderr)
