#!/usr/bin/env python3
"""
clipmine: categorize video clips, build a canonical category catalog with entity schemas,
extract schema-guided entities and evaluate them.

Commands, in pipeline order:
  categorize    infer a raw category and generic entities for every manifest clip
  canonicalize  consolidate the most frequent raw categories into a canonical catalog
  genschema     generate an entity schema per canonical category and index the schemas
  extract       retrieve each clip's schema and extract conforming entities
  eval          entity recall per method against ground truth
  report        distributions, top values, case studies and plots
  verify        re-parse every stream and re-check every entity record against its schema
  validate      check schema files

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 provider failures over budget.

Examples:
  clipmine.py categorize --manifest data/manifests/fixture-12.jsonl --store run
  clipmine.py canonicalize --store run
  clipmine.py genschema --store run -v
  clipmine.py extract --store run --extra-manifest data/manifests/extra-13.jsonl
  clipmine.py eval --store run --truth data/eval/lincoln-truth.jsonl --baselines data/eval/lincoln-baselines.jsonl
  clipmine.py report --store run --baselines data/eval/lincoln-baselines.jsonl --case-study lincoln-001 --plots
  clipmine.py verify --store run -f grid
  clipmine.py validate run/catalog/schemas/history.v1.json

Configuration is read from --config or $CLIPMINE_CONFIG (see config.py); the default is the offline stub provider.
For a live provider, export the API key in the variable named by `provider.api_key_env`:
  source clipmine-env.sh

"""
__license__ = "MIT - https://mit-license.org/"

import argparse
import asyncio
import csv
import json
import logging
import os
import signal
import sys
import time

import yaml
from pydantic import ValidationError
from tabulate import tabulate

from categorize import categorize_batch, tally_raw_categories, top_k
from clipmodel import EntitySchema, ModelError, load_manifest, schema_slug, validate_schema
from config import ConfigError, PipelineConfig, apply_overrides, build_clock, build_gateway, load_config
from evalreport import (
    EvalError,
    MatchCriteria,
    attribute_distribution,
    case_study,
    category_attribute_distribution,
    category_distribution,
    category_entity_distribution,
    entity_distribution,
    evaluate,
    load_outputs,
    load_report_json,
    load_truth,
    observed_entity_types,
    ours_outputs,
    plot_distribution,
    recall_table,
    render_table,
    top_values,
    write_csv,
    write_report_json,
)
from extract import ExtractError, ExtractionJob, check_conformance, extract_batch
from gateway import GatewayError
from prompts import TemplateError, load_template
from schemagen import (
    MissingArtifact,
    SchemaGenError,
    canonicalize,
    generate_schemas,
    load_catalog,
    load_schema,
    load_schema_manifest,
    load_schemas,
    persist_catalog,
    persist_schemas,
    settle_catalog_version,
)
from schemaindex import SchemaIndexError, build_index, index_path, load_index, persist_index
from store import INDEX_KEYS, STREAMS, RecordStore, StoreError
from stubfixture import ScenarioError
from workers import BatchCounts

log = logging.getLogger(__name__)

FORMATS = ["csv", "grid", "json", "line", "markdown", "pretty", "table", "text", "yaml"]
LEVELS = ["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]
EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_PROVIDER = 3
REPORT_FILE = "report.json"
REPORT_FILES = (
    "category_distribution.csv",
    "entity_distribution.csv",
    "attribute_distribution.csv",
    "category_entities.csv",
    "category_attributes.csv",
)


class UsageError(Exception):
    """Bad flag combinations or refusing to clobber existing outputs."""


class ArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with 1 like every other usage or config error."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"✖ {self.prog}: {message}\n")


def show(table: list, headers: list, format: str = "table", name: str = "table", file=None) -> None:
    """
    Prints rows in the given format:
      - `csv`     : Comma-Separated Values
      - `grid`    : a table grid with borders
      - `json`    : a single, unformatted JSON string
      - `line`    : one JSON object per line
      - `markdown`: Markdown table
      - `pretty`  : indented JSON
      - `table`   : a text-based table
      - `text`    : a text-based table without the header separator
      - `yaml`    : YAML
    """
    fh = file or sys.stdout
    if not table:
        log.info(f"No {name} rows to show")
        return
    objects = [dict(zip(headers, row)) for row in table]
    if format == "csv":
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(headers)
        writer.writerows(table)
    elif format == "grid":
        print(tabulate(table, headers=headers, tablefmt="simple_grid"), file=fh)
    elif format == "json":
        print(json.dumps({name: objects}, default=str, ensure_ascii=False), file=fh)
    elif format == "line":
        print("\n".join(json.dumps(o, default=str, ensure_ascii=False) for o in objects), file=fh)
    elif format == "markdown":
        print(tabulate(table, headers=headers, tablefmt="github"), file=fh)
    elif format == "pretty":
        print(json.dumps({name: objects}, default=str, indent=2, ensure_ascii=False), file=fh)
    elif format == "yaml":
        print(yaml.dump({name: objects}, indent=2, default_flow_style=False, allow_unicode=True, sort_keys=False), file=fh, end="")
    elif format == "text":
        print(tabulate(table, headers=headers, tablefmt="plain"), file=fh)
    else:
        print(tabulate(table, headers=headers, tablefmt="simple"), file=fh)


def show_counts(args, stage: str, counts: BatchCounts, **columns) -> None:
    show(
        [[stage, counts.succeeded, counts.failed, counts.total, *columns.values()]],
        ["stage", "succeeded", "failed", "total", *columns],
        args.format,
        name="stages",
    )


def within_budget(stage: str, counts: BatchCounts, config: PipelineConfig) -> int:
    """Exit code for a batch: failures are tolerated while their rate stays below the cap."""
    if counts.failed and counts.failure_rate >= config.max_failure_rate:
        print(
            f"✖ {stage}: {counts.failed} of {counts.total} failed ({counts.failure_rate:.1%} >= {config.max_failure_rate:.1%})",
            file=sys.stderr,
        )
        return EXIT_PROVIDER
    return EXIT_OK


def prepare_streams(store: RecordStore, streams: tuple, overwrite: bool, resume: bool) -> None:
    """
    Refuses to append to streams holding records unless --overwrite (empty them) or --resume (keep them).
    Failure streams are always emptied so that a resumed run retries its failed items.
    """
    filled = [stream for stream in streams if store.line_count(stream)]
    if filled and not (overwrite or resume):
        raise UsageError(f"{', '.join(filled)} already hold records in {store.root}; use --overwrite to replace or --resume to continue")
    for stream in streams:
        if overwrite or stream.startswith("failures-"):
            store.reset(stream)


def refuse_clobber(paths: list[str], overwrite: bool) -> None:
    existing = [path for path in paths if os.path.exists(path)]
    if existing and not overwrite:
        raise UsageError(f"{', '.join(existing)} already exist; use --overwrite to replace")


def require_stream(store: RecordStore, stream: str, stage: str) -> list:
    if not store.line_count(stream):
        raise MissingArtifact(f"no {stream} records in {store.root}; run {stage} first")
    return store.read(stream)


def require_catalog(store: RecordStore):
    catalog = load_catalog(store.catalog_dir)
    if catalog is None:
        raise MissingArtifact(f"no catalog in {store.catalog_dir}; run canonicalize first")
    return catalog


def settings(args) -> PipelineConfig:
    """Merges 1) CLI flags, 2) environment variables, 3) the config file, 4) static defaults."""
    config = load_config(args.config)
    match = None
    if getattr(args, "match_jaccard", None) is not None or getattr(args, "match_levenshtein", None) is not None:
        match = {
            "jaccard": args.match_jaccard if args.match_jaccard is not None else config.match.jaccard,
            "levenshtein": args.match_levenshtein if args.match_levenshtein is not None else config.match.levenshtein,
        }
    methods = getattr(args, "methods", None)
    return apply_overrides(
        config,
        store_root=args.store,
        max_failure_rate=getattr(args, "max_failure_rate", None),
        k_top_categories=getattr(args, "k", None),
        min_similarity=getattr(args, "min_similarity", None),
        generic_entities=getattr(args, "generic_entities", None),
        text_sidechannel=getattr(args, "text_sidechannel", None),
        methods=tuple(m.strip() for m in methods.split(",") if m.strip()) if methods else None,
        match=match,
    )


def cmd_categorize(args, config: PipelineConfig) -> int:
    store = RecordStore(config.store_root)
    clips = load_manifest(args.manifest)
    prepare_streams(store, ("categorization", "failures-categorize"), args.overwrite, args.resume)
    done = {r.clip_id for r in store.scan("categorization")} if args.resume and store.exists("categorization") else set()
    store.reset("manifest")
    with store.writer("manifest") as writer:
        for clip in clips:
            writer.append(clip)
    todo = [clip for clip in clips if clip.clip_id not in done]
    if done:
        log.info(f"resuming: {len(done)} clips already categorized, {len(todo)} to go")

    gateway = build_gateway(config)
    template = load_template(config.templates.categorize)

    async def run() -> BatchCounts:
        async with gateway:
            with store.writer("categorization") as records, store.writer("failures-categorize") as failures:
                return await categorize_batch(
                    todo,
                    gateway,
                    template,
                    on_record=records.append,
                    on_failure=failures.append,
                    max_in_flight=config.max_in_flight,
                    policy=config.retry,
                    generic_entities=config.generic_entities,
                    clock=build_clock(config),
                    progress=args.verbosity > 0,
                )

    counts = asyncio.run(run())
    show_counts(args, "categorize", counts, categories=len(tally_raw_categories(store.scan("categorization"))))
    return within_budget("categorize", counts, config)


def cmd_canonicalize(args, config: PipelineConfig) -> int:
    store = RecordStore(config.store_root)
    records = require_stream(store, "categorization", "categorize")
    top_raw = top_k(tally_raw_categories(records), config.k_top_categories)
    gateway = build_gateway(config)
    template = load_template(config.templates.canonicalize)

    async def run():
        async with gateway:
            return await canonicalize(top_raw, gateway, template, policy=config.retry)

    catalog = settle_catalog_version(asyncio.run(run()), load_catalog(store.catalog_dir))
    path = persist_catalog(catalog, store.catalog_dir)
    mapped = {category: 0 for category in catalog.canonical_categories}
    for target in catalog.mapping.values():
        mapped[target] += 1
    show([[c, n] for c, n in mapped.items()], ["canonical_category", "raw_names"], args.format, name="catalog")
    print(f"✔ catalog v{catalog.version}: {len(catalog.canonical_categories)} categories from {len(top_raw)} raw names in {path}", file=sys.stderr)
    return EXIT_OK


def cmd_genschema(args, config: PipelineConfig) -> int:
    store = RecordStore(config.store_root)
    catalog = require_catalog(store)
    refuse_clobber([index_path(store.catalog_dir, catalog.version)], args.overwrite)
    store.reset("failures-genschema")
    gateway = build_gateway(config)
    template = load_template(config.templates.path("schema"))

    async def run():
        async with gateway:
            with store.writer("failures-genschema") as failures:
                schemas, counts = await generate_schemas(
                    list(catalog.canonical_categories),
                    gateway,
                    template,
                    on_failure=failures.append,
                    catalog_dir=store.catalog_dir,
                    max_in_flight=config.max_in_flight,
                    policy=config.retry,
                    max_entities=config.max_schema_entities,
                    max_attributes=config.max_schema_attributes,
                    clock=build_clock(config),
                    progress=args.verbosity > 0,
                )
            if schemas:
                persist_schemas(schemas, store.catalog_dir, catalog.version)
                index, warnings = await build_index(catalog, load_schema_manifest(store.catalog_dir), gateway)
                persist_index(index, store.catalog_dir)
            return schemas, counts

    schemas, counts = asyncio.run(run())
    show(
        [[s.category, s.schema_version, len(s.entities), sum(len(e.attributes) for e in s.entities)] for s in schemas],
        ["category", "schema_version", "entities", "attributes"],
        args.format,
        name="schemas",
    )
    if args.verbosity:
        show_counts(args, "genschema", counts)
    return within_budget("genschema", counts, config)


def cmd_extract(args, config: PipelineConfig) -> int:
    store = RecordStore(config.store_root)
    categorizations = require_stream(store, "categorization", "categorize")
    catalog = require_catalog(store)
    schemas = {schema.category: schema for schema in load_schemas(store.catalog_dir).values()}
    index = load_index(store.catalog_dir, catalog.version)
    if index is None:
        raise MissingArtifact(f"no schema index for catalog v{catalog.version}; run genschema first")
    clips = {clip.clip_id: clip for clip in store.scan("manifest")}
    extras = load_manifest(args.extra_manifest) if args.extra_manifest else []
    repeated = sorted(clip.clip_id for clip in extras if clip.clip_id in clips)
    if repeated:
        raise ModelError(f"{args.extra_manifest}: clips already in the main manifest: {', '.join(repeated)}")

    clips_extra = {clip.clip_id: clip for clip in extras}
    unknown = sorted(r.clip_id for r in categorizations if r.clip_id not in clips)
    if unknown:
        raise ModelError(f"categorized clips missing from the manifest stream: {', '.join(unknown)}; run categorize --overwrite")

    prepare_streams(store, ("entities", "drops", "failures-extract", "categorization-extra"), args.overwrite, args.resume)
    done = {r.clip_id for r in store.scan("entities")} if args.resume and store.exists("entities") else set()
    known_extra = {r.clip_id: r for r in store.scan("categorization-extra")} if args.resume and store.exists("categorization-extra") else {}
    jobs = [ExtractionJob(clips[r.clip_id], r.raw_category) for r in categorizations if r.clip_id not in done]
    clock = build_clock(config)
    gateway = build_gateway(config)
    templates = {name: load_template(config.templates.path(name)) for name in ("categorize", "extract")}

    async def run() -> BatchCounts:
        counts = BatchCounts()
        async with gateway:
            with (
                store.writer("entities") as records,
                store.writer("drops") as drops,
                store.writer("failures-extract") as failures,
                store.writer("categorization-extra") as extra_records,
            ):
                extra_jobs = [ExtractionJob(clips_extra[r.clip_id], r.raw_category, use_catalog=False) for r in known_extra.values() if r.clip_id in clips_extra]

                def categorized(record) -> None:
                    extra_records.append(record)
                    extra_jobs.append(ExtractionJob(clips_extra[record.clip_id], record.raw_category, use_catalog=False))

                todo = [clip for clip in extras if clip.clip_id not in known_extra]
                if todo:
                    extra_counts = await categorize_batch(
                        todo,
                        gateway,
                        templates["categorize"],
                        on_record=categorized,
                        on_failure=failures.append,
                        max_in_flight=config.max_in_flight,
                        policy=config.retry,
                        generic_entities=config.generic_entities,
                        clock=clock,
                        progress=args.verbosity > 0,
                    )
                    counts.failed += extra_counts.failed
                extract_counts = await extract_batch(
                    jobs + [job for job in extra_jobs if job.clip.clip_id not in done],
                    catalog,
                    index,
                    schemas,
                    gateway,
                    templates["extract"],
                    on_record=records.append,
                    on_drops=lambda items: [drops.append(item) for item in items],
                    on_failure=failures.append,
                    max_in_flight=config.max_in_flight,
                    policy=config.retry,
                    min_similarity=config.min_similarity,
                    max_examples_inline=config.max_examples_inline,
                    text_sidechannel=config.text_sidechannel,
                    clock=clock,
                    progress=args.verbosity > 0,
                )
        counts.succeeded += extract_counts.succeeded
        counts.failed += extract_counts.failed
        return counts

    counts = asyncio.run(run())
    for key in INDEX_KEYS:
        store.build_inverted_index(key)
    low = sum(1 for record in store.scan("entities") if record.low_confidence)
    if low:
        print(f"⚠ {low} clips matched their schema below similarity {config.min_similarity}", file=sys.stderr)
    show_counts(args, "extract", counts)
    return within_budget("extract", counts, config)


def categorizations_of(store: RecordStore) -> list:
    records = store.read("categorization") if store.exists("categorization") else []
    return records + (store.read("categorization-extra") if store.exists("categorization-extra") else [])


def pipeline_outputs(args, config: PipelineConfig, store: RecordStore) -> tuple[list, list, list]:
    """(categorizations, entity records, all method outputs) for eval and report."""
    records = require_stream(store, "entities", "extract")
    categorizations = categorizations_of(store)
    outputs = ours_outputs(categorizations, records, config.type_aliases)
    for path in args.baselines or []:
        outputs += load_outputs(path, config.methods)
    return categorizations, records, outputs


def reports_dir(args, config: PipelineConfig) -> str:
    return args.out or os.path.join(config.store_root, "reports")


def cmd_eval(args, config: PipelineConfig) -> int:
    store = RecordStore(config.store_root)
    truth = load_truth(args.truth)
    _, _, outputs = pipeline_outputs(args, config, store)
    criteria = MatchCriteria(jaccard=config.match.jaccard, levenshtein=config.match.levenshtein)
    report = evaluate(outputs, truth, config.methods, config.entity_types, criteria)
    out = reports_dir(args, config)
    refuse_clobber([os.path.join(out, REPORT_FILE), os.path.join(out, "recall.csv")], args.overwrite)
    write_report_json(report, os.path.join(out, REPORT_FILE))
    headers, rows = recall_table(report)
    write_csv(os.path.join(out, "recall.csv"), headers, rows)
    show(rows, headers, args.format, name="recall")
    print(f"✔ {len(truth)} truth entries, {len(outputs)} outputs; report in {out}", file=sys.stderr)
    return EXIT_OK


def cmd_report(args, config: PipelineConfig) -> int:
    store = RecordStore(config.store_root)
    out = reports_dir(args, config)
    path = os.path.join(out, REPORT_FILE)
    if not os.path.exists(path):
        raise MissingArtifact(f"{path} does not exist; run eval first")
    report = load_report_json(path)
    categorizations, records, outputs = pipeline_outputs(args, config, store)
    refuse_clobber([os.path.join(out, name) for name in REPORT_FILES], args.overwrite)

    headers, rows = recall_table(report)
    show(rows, headers, args.format, name="recall")

    categories = category_distribution(records)
    entities = entity_distribution(records)
    write_csv(os.path.join(out, "category_distribution.csv"), ["canonical_category", "clips"], categories)
    write_csv(os.path.join(out, "entity_distribution.csv"), ["entity_type", "count"], entities)
    attributes = [
        [entity_type, name, count]
        for entity_type in observed_entity_types(categorizations, config.entity_types)
        for name, count in attribute_distribution([*categorizations, *records], entity_type)
    ]
    write_csv(os.path.join(out, "attribute_distribution.csv"), ["entity_type", "attribute", "count"], attributes)
    write_csv(os.path.join(out, "category_entities.csv"), ["canonical_category", "entity_type", "count"], category_entity_distribution(records))
    write_csv(
        os.path.join(out, "category_attributes.csv"),
        ["canonical_category", "entity_type", "attribute", "count"],
        category_attribute_distribution(records),
    )
    show([list(pair) for pair in categories[: args.top]], ["canonical_category", "clips"], args.format, name="categories")

    values = []
    for spec in args.values or []:
        entity_type, _, attribute = spec.partition(".")
        if not attribute:
            raise UsageError(f"--values expects ENTITY.ATTRIBUTE, not '{spec}'")
        pool = [*categorizations, *records] if args.category is None else records
        for value, count in top_values(pool, args.category, entity_type, attribute, args.top):
            values.append([entity_type, attribute, value, count])
    if values:
        write_csv(os.path.join(out, "top_values.csv"), ["entity_type", "attribute", "value", "count"], values)
        show(values, ["entity_type", "attribute", "value", "count"], args.format, name="values")

    by_clip = {r.clip_id: r for r in records}
    categorization_by_clip = {c.clip_id: c for c in categorizations}
    for clip_id in args.case_study or []:
        record = by_clip.get(clip_id)
        schema = load_schema(store.catalog_dir, f"{schema_slug(record.canonical_category)}.v{record.schema_version}.json") if record else None
        study = case_study(clip_id, outputs, record, categorization_by_clip.get(clip_id), schema, config.methods)
        headers, rows = study.table()
        write_csv(os.path.join(out, f"case-study-{clip_id}.csv"), headers, rows)
        with open(os.path.join(out, f"case-study-{clip_id}.txt"), mode="w", encoding="utf-8") as fh:
            fh.write(render_table(headers, rows, format="grid") + "\n")
        show(rows, headers, args.format, name="case_study")

    if args.plots:
        plot_distribution(categories, "Canonical categories", os.path.join(out, "category_distribution.png"), top=args.top)
        plot_distribution(entities, "Entity types", os.path.join(out, "entity_distribution.png"), top=args.top)
    print(f"✔ reports in {out}", file=sys.stderr)
    return EXIT_OK


def cmd_verify(args, config: PipelineConfig) -> int:
    store = RecordStore(config.store_root)
    rows = [[stream, store.verify(stream)] for stream in STREAMS if store.exists(stream)]
    violations = []
    if store.exists("entities"):
        schemas = {}
        for record in store.scan("entities"):
            file = f"{schema_slug(record.canonical_category)}.v{record.schema_version}.json"
            if file not in schemas:
                schemas[file] = load_schema(store.catalog_dir, file)
            violations += check_conformance(record, schemas[file])
    show(rows, ["stream", "records"], args.format, name="streams")
    for violation in violations:
        print(f"✖ {violation}", file=sys.stderr)
    return EXIT_DATA if violations else EXIT_OK


def cmd_validate(args, config: PipelineConfig) -> int:
    rows = []
    invalid = 0
    for path in args.files:
        try:
            with open(path, mode="r", encoding="utf-8") as fh:
                schema = EntitySchema.model_validate_json(fh.read())
            violations = list(validate_schema(schema).violations)
        except (OSError, ValidationError) as e:
            violations = [f"not a readable schema: {str(e).splitlines()[0]}"]
        invalid += bool(violations)
        rows.append([path, "✔" if not violations else "✖", len(violations)])
        for violation in violations:
            print(f"✖ {path}: {violation}", file=sys.stderr)
    show(rows, ["file", "valid", "violations"], args.format, name="schemas")
    return EXIT_DATA if invalid else EXIT_OK


COMMANDS = {
    "categorize": cmd_categorize,
    "canonicalize": cmd_canonicalize,
    "genschema": cmd_genschema,
    "extract": cmd_extract,
    "eval": cmd_eval,
    "report": cmd_report,
    "verify": cmd_verify,
    "validate": cmd_validate,
}


def build_parser() -> ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="pipeline config file (JSON or YAML). Default: $CLIPMINE_CONFIG or built-in defaults")
    common.add_argument("--store", default=None, help="store root directory. Default: $CLIPMINE_STORE or the config's store_root")
    common.add_argument("-f", "--format", choices=FORMATS, default="table", help="summary output format")
    common.add_argument("-l", "--level", default="WARNING", choices=LEVELS, help="log threshold")
    common.add_argument("-t", "--timer", action="store_true", default=False, help="show total runtime, in seconds")
    common.add_argument("-v", "--verbosity", action="count", default=0, help="verbosity (progress bars); multiple allowed")

    rerun = argparse.ArgumentParser(add_help=False)
    group = rerun.add_mutually_exclusive_group()
    group.add_argument("--overwrite", action="store_true", default=False, help="replace existing records")
    group.add_argument("--resume", action="store_true", default=False, help="skip clips that already have records")
    clobber = argparse.ArgumentParser(add_help=False)
    clobber.add_argument("--overwrite", action="store_true", default=False, help="replace existing outputs")
    budget = argparse.ArgumentParser(add_help=False)
    budget.add_argument("--max-failure-rate", type=float, default=None, help="fail (exit 3) when this share of items or more fails")

    outputs = argparse.ArgumentParser(add_help=False)
    outputs.add_argument("--baselines", action="append", default=None, help="baseline method outputs (JSONL); multiple allowed")
    outputs.add_argument("--methods", default=None, help="comma-separated methods to evaluate, e.g. ours,speech,ocr")
    outputs.add_argument("--out", default=None, help="reports directory. Default: {store}/reports")

    argp = ArgumentParser(description=__doc__, formatter_class=argparse.RawTextHelpFormatter)
    commands = argp.add_subparsers(dest="command", required=True, metavar="command", parser_class=ArgumentParser)

    p = commands.add_parser("categorize", parents=[common, rerun, budget], help="infer raw categories and generic entities")
    p.add_argument("--manifest", required=True, help="clip manifest (JSONL)")
    p.add_argument("--generic-entities", action=argparse.BooleanOptionalAction, default=None, help="also extract generic entities")

    p = commands.add_parser("canonicalize", parents=[common], help="build the canonical category catalog")
    p.add_argument("--k", type=int, default=None, help="number of most frequent raw categories to canonicalize. Default: 50")

    commands.add_parser("genschema", parents=[common, clobber, budget], help="generate and index entity schemas")

    p = commands.add_parser("extract", parents=[common, rerun, budget], help="schema-guided entity extraction")
    p.add_argument("--extra-manifest", default=None, help="clips not seen by canonicalization (JSONL)")
    p.add_argument("--min-similarity", type=float, default=None, help="retrieval similarity below which matches are low confidence")
    p.add_argument("--generic-entities", action=argparse.BooleanOptionalAction, default=None, help="generic entities for extra clips")
    p.add_argument("--text-sidechannel", action=argparse.BooleanOptionalAction, default=None, help="send transcript and caption text")

    p = commands.add_parser("eval", parents=[common, clobber, outputs], help="entity recall against ground truth")
    p.add_argument("--truth", required=True, help="ground truth (JSONL)")
    p.add_argument("--match-jaccard", type=float, default=None, help="token Jaccard threshold. Default: 0.5")
    p.add_argument("--match-levenshtein", type=float, default=None, help="Levenshtein similarity threshold. Default: 0.85")

    p = commands.add_parser("report", parents=[common, clobber, outputs], help="distributions, top values and case studies")
    p.add_argument("--case-study", action="append", default=None, metavar="CLIP_ID", help="compare methods on a clip; multiple allowed")
    p.add_argument("--values", action="append", default=None, metavar="ENTITY.ATTRIBUTE", help="most frequent values, e.g. Person.Role")
    p.add_argument("--category", default=None, help="restrict --values to one canonical category")
    p.add_argument("--top", type=int, default=10, help="rows per distribution or value list. Default: 10")
    p.add_argument("--plots", action="store_true", default=False, help="save distribution bar charts (PNG)")

    commands.add_parser("verify", parents=[common], help="re-parse streams and re-check entity records")

    p = commands.add_parser("validate", parents=[common], help="check schema files")
    p.add_argument("files", nargs="+", help="schema JSON files")
    return argp


def main(argv: list = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        format="%(asctime)s.%(msecs)03d | %(levelname)s | %(module)s | %(funcName)s | %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )
    logging.getLogger().setLevel(args.level)
    if args.timer:
        start_time = time.time()

    try:
        config = settings(args)
        code = COMMANDS[args.command](args, config)
    except (UsageError, ConfigError, TemplateError) as e:
        print(f"✖ {e}", file=sys.stderr)
        code = EXIT_USAGE
    except (ModelError, StoreError, SchemaGenError, SchemaIndexError, ExtractError, EvalError, ScenarioError, OSError) as e:
        print(f"✖ {e.__class__.__name__}: {e}", file=sys.stderr)
        code = EXIT_DATA
    except GatewayError as e:
        print(f"✖ provider {e.__class__.__name__}: {e}", file=sys.stderr)
        code = EXIT_PROVIDER

    if args.timer:
        print(f"⏱ {'{0:.3f}'.format(time.time() - start_time)} seconds", file=sys.stderr)
    return code


if __name__ == "__main__":
    signal.signal(signal.SIGINT, lambda signum, frame: sys.exit(1))  # Handle CTRL+C interrupts gracefully
    sys.exit(main())
