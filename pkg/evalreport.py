#!/usr/bin/env python3
"""
Evaluation and reporting: entity recall per method against ground truth, category / entity / attribute
distributions, the most frequent attribute values, and per-clip case studies comparing methods.

Baseline methods (speech NER, scene-text OCR, caption keywords, object detection) are not run here;
their outputs are read from MethodOutput JSONL files. The pipeline's own outputs form the `ours` method.

A prediction matches a ground truth value when, after normalization, the two are equal, their token sets
have Jaccard similarity >= 0.5, or their Levenshtein similarity is >= 0.85 (both thresholds configurable).

Usage:
  truth = load_truth("data/eval/lincoln-truth.jsonl")
  outputs = load_outputs("data/eval/lincoln-baselines.jsonl", METHODS) + ours_outputs(categorizations, records)
  report = evaluate(outputs, truth, METHODS, ENTITY_TYPES)
  print(render_table(*recall_table(report), format="table"))

"""
__license__ = "MIT - https://mit-license.org/"

import collections
import csv
import io
import json
import logging
import os
from typing import Iterable

from pydantic import Field, ValidationError
from tabulate import tabulate

from clipmodel import (
    Attribute,
    EntityRecord,
    EntitySchema,
    Frozen,
    GenericEntity,
    RawCategorization,
    normalize_category_name,
    normalize_entity_value,
)
from store import write_atomic

log = logging.getLogger(__name__)

METHODS = ("ours", "speech", "ocr", "caption", "yolo")
ENTITY_TYPES = ("Person", "Location", "Object")
NAME_ATTRIBUTE = "Name"
EMPTY_CELL = "-"
ARROW = " → "


class EvalError(Exception):
    """Base class for evaluation errors."""


class UnknownClip(EvalError):
    pass


class GroundTruthEntry(Frozen):
    clip_id: str = Field(min_length=1)
    entity_type: str = Field(min_length=1)
    value: str = Field(min_length=1)


class MethodOutput(Frozen):
    method: str = Field(min_length=1)
    clip_id: str = Field(min_length=1)
    entity_type: str
    value: str
    attributes: tuple[Attribute, ...] = ()


class MatchCriteria(Frozen):
    jaccard: float = Field(default=0.5, ge=0.0, le=1.0)
    levenshtein: float = Field(default=0.85, ge=0.0, le=1.0)


class RecallRow(Frozen):
    method: str
    entity_type: str
    recall: float | None
    matched: int
    total: int


class EvalReport(Frozen):
    rows: tuple[RecallRow, ...]
    metadata: dict = {}


def _read_jsonl(path: str, model) -> list:
    items = []
    with open(path, mode="r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                items.append(model.model_validate_json(line))
            except ValidationError as e:
                raise EvalError(f"{path}:{lineno}: {e.errors()[0]['msg']}") from e
    return items


def load_truth(path: str) -> list[GroundTruthEntry]:
    """:raises EvalError: an invalid line, or a (clip_id, entity_type, value) repeated after normalization"""
    truth = _read_jsonl(path, GroundTruthEntry)
    seen = set()
    for entry in truth:
        key = (entry.clip_id, normalize_category_name(entry.entity_type), normalize_entity_value(entry.value))
        if key in seen:
            raise EvalError(f"{path}: ground truth repeats {entry.clip_id} {entry.entity_type} '{entry.value}'")
        seen.add(key)
    return truth


def load_outputs(path: str, methods: Iterable[str] = METHODS) -> list[MethodOutput]:
    """:raises EvalError: an output names a method outside `methods`"""
    methods = set(methods)
    outputs = _read_jsonl(path, MethodOutput)
    for output in outputs:
        if output.method not in methods:
            raise EvalError(f"{path}: method '{output.method}' is not one of {', '.join(sorted(methods))}")
    return outputs


def levenshtein(a: str, b: str) -> int:
    """Edit distance (insertions, deletions, substitutions)."""
    if len(a) < len(b):
        a, b = b, a
    previous = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        current = [i]
        for j, cb in enumerate(b, start=1):
            current.append(min(previous[j] + 1, current[j - 1] + 1, previous[j - 1] + (ca != cb)))
        previous = current
    return previous[-1]


def levenshtein_similarity(a: str, b: str) -> float:
    longest = max(len(a), len(b))
    return 1.0 if longest == 0 else 1.0 - levenshtein(a, b) / longest


def jaccard(a: str, b: str) -> float:
    """Token-set Jaccard similarity; 0.0 when both are empty."""
    ta, tb = set(a.split()), set(b.split())
    union = ta | tb
    return len(ta & tb) / len(union) if union else 0.0


def match_entity(predicted: str, truth: str, criteria: MatchCriteria = MatchCriteria()) -> bool:
    p, t = normalize_entity_value(predicted), normalize_entity_value(truth)
    if p == t:
        return True
    if jaccard(p, t) >= criteria.jaccard:
        return True
    return levenshtein_similarity(p, t) >= criteria.levenshtein


def entity_recall(
    outputs: list[MethodOutput], truth: list[GroundTruthEntry], method: str, entity_type: str, criteria: MatchCriteria = MatchCriteria()
) -> tuple[float | None, int, int]:
    """
    Micro-averaged recall of one method for one entity type. A truth entry is matched (once) when any output of
    the method for the same clip and entity type matches it.

    - returns (recall, matched, total); recall is None when there is no truth of that type
    """
    wanted = normalize_category_name(entity_type)
    candidates = collections.defaultdict(list)  # clip_id : predicted values
    for output in outputs:
        if output.method == method and normalize_category_name(output.entity_type) == wanted:
            candidates[output.clip_id].append(output.value)
    relevant = [entry for entry in truth if normalize_category_name(entry.entity_type) == wanted]
    matched = sum(1 for entry in relevant if any(match_entity(value, entry.value, criteria) for value in candidates[entry.clip_id]))
    total = len(relevant)
    return (matched / total if total else None), matched, total


def display_value(entity: GenericEntity) -> str:
    """The entity's Name attribute when present, else its first attribute value."""
    name = entity.get(NAME_ATTRIBUTE)
    if name:
        return name
    return entity.attributes[0].value if entity.attributes else ""


def entities_of(record) -> tuple[GenericEntity, ...]:
    return record.entities if isinstance(record, EntityRecord) else record.generic_entities


def category_of(record) -> str:
    return record.canonical_category if isinstance(record, EntityRecord) else record.raw_category


def ours_outputs(
    categorizations: Iterable[RawCategorization], records: Iterable[EntityRecord], type_aliases: dict[str, str] = None
) -> list[MethodOutput]:
    """
    The pipeline's own outputs as MethodOutput rows: generic entities from categorization plus schema-guided
    entities, with entity types folded through `type_aliases` (e.g. Figure -> Person).
    """
    aliases = {normalize_category_name(k): v for k, v in (type_aliases or {}).items()}
    outputs = []
    for record in [*categorizations, *records]:
        for entity in entities_of(record):
            value = display_value(entity)
            if not value.strip():
                continue
            entity_type = aliases.get(normalize_category_name(entity.entity_type), entity.entity_type)
            outputs.append(
                MethodOutput(method="ours", clip_id=record.clip_id, entity_type=entity_type, value=value, attributes=entity.attributes)
            )
    return outputs


def evaluate(
    outputs: list[MethodOutput],
    truth: list[GroundTruthEntry],
    methods: Iterable[str] = METHODS,
    entity_types: Iterable[str] = ENTITY_TYPES,
    criteria: MatchCriteria = MatchCriteria(),
) -> EvalReport:
    rows = []
    for method in methods:
        for entity_type in entity_types:
            recall, matched, total = entity_recall(outputs, truth, method, entity_type, criteria)
            rows.append(RecallRow(method=method, entity_type=entity_type, recall=recall, matched=matched, total=total))
    metadata = {
        "criteria": criteria.model_dump(),
        "truth_entries": len(truth),
        "truth_clips": len({entry.clip_id for entry in truth}),
        "outputs": dict(sorted(collections.Counter(output.method for output in outputs).items())),
    }
    return EvalReport(rows=tuple(rows), metadata=metadata)


def _sorted_counts(counter: collections.Counter) -> list[tuple[str, int]]:
    return sorted(counter.items(), key=lambda item: (-item[1], item[0]))


def category_distribution(records: Iterable[EntityRecord]) -> list[tuple[str, int]]:
    """(canonical category, count) descending by count, ties lexicographic."""
    return _sorted_counts(collections.Counter(record.canonical_category for record in records))


def entity_distribution(records: Iterable) -> list[tuple[str, int]]:
    """(entity type, count) over every entity of the records."""
    return _sorted_counts(collections.Counter(entity.entity_type for record in records for entity in entities_of(record)))


def attribute_distribution(records: Iterable, entity_type: str) -> list[tuple[str, int]]:
    """(attribute name, count) over the entities of one type; works on entity records and categorizations."""
    wanted = normalize_category_name(entity_type)
    counter = collections.Counter(
        attribute.name
        for record in records
        for entity in entities_of(record)
        if normalize_category_name(entity.entity_type) == wanted
        for attribute in entity.attributes
    )
    return _sorted_counts(counter)


def observed_entity_types(records: Iterable, entity_types: Iterable[str] = ()) -> list[str]:
    """The given entity types, then every other type found in the records by frequency; one spelling per normalized name."""
    names = {}
    for name in [*entity_types, *(entity_type for entity_type, _ in entity_distribution(records))]:
        names.setdefault(normalize_category_name(name), name)
    return list(names.values())


def category_entity_distribution(records: Iterable) -> list[tuple[str, str, int]]:
    """(category, entity type, count) by category name, then count descending, then entity type."""
    counter = collections.Counter((category_of(record), entity.entity_type) for record in records for entity in entities_of(record))
    return [
        (category, entity_type, count)
        for (category, entity_type), count in sorted(counter.items(), key=lambda item: (item[0][0], -item[1], item[0][1]))
    ]


def category_attribute_distribution(records: Iterable) -> list[tuple[str, str, str, int]]:
    """(category, entity type, attribute name, count) by category and entity type, then count descending, then attribute."""
    counter = collections.Counter(
        (category_of(record), entity.entity_type, attribute.name)
        for record in records
        for entity in entities_of(record)
        for attribute in entity.attributes
    )
    return [
        (category, entity_type, name, count)
        for (category, entity_type, name), count in sorted(counter.items(), key=lambda item: (item[0][0], item[0][1], -item[1], item[0][2]))
    ]


def top_values(records: Iterable, category: str | None, entity_type: str, attribute: str, n: int) -> list[tuple[str, int]]:
    """
    The n most frequent normalized values of one attribute, descending by count, ties lexicographic.
    A category of None takes every record.
    """
    if n <= 0:
        return []
    wanted_category = normalize_category_name(category) if category is not None else None
    wanted_type = normalize_category_name(entity_type)
    counter = collections.Counter()
    for record in records:
        if wanted_category is not None and normalize_category_name(category_of(record)) != wanted_category:
            continue
        for entity in entities_of(record):
            if normalize_category_name(entity.entity_type) != wanted_type:
                continue
            value = entity.get(attribute)
            if value is not None and normalize_entity_value(value):
                counter[normalize_entity_value(value)] += 1
    return _sorted_counts(counter)[:n]


class CaseStudy(Frozen):
    clip_id: str
    methods: tuple[str, ...]
    rows: tuple[tuple[str, tuple[str, ...]], ...]  # (Entity → Attribute, cells in method order)

    def table(self) -> tuple[list[str], list[list[str]]]:
        return ["Entity → Attribute", *self.methods], [[label, *cells] for label, cells in self.rows]


def _join(values: list[str]) -> str:
    values = [v for v in dict.fromkeys(v.strip() for v in values) if v]
    return "; ".join(values) if values else EMPTY_CELL


def case_study(
    clip_id: str,
    outputs: list[MethodOutput],
    our_record: EntityRecord | None,
    categorization: RawCategorization | None,
    schema: EntitySchema | None = None,
    methods: Iterable[str] = METHODS,
) -> CaseStudy:
    """
    Compares methods on one clip. Rows are our generic entities' attributes, then the schema-guided entities'
    attributes in schema order. Each entity's first non-Name attribute is its headline row: our cell reads
    `Name → value` when the entity has a name, and baseline outputs without a matching attribute land there.
    Cells where a method produced nothing are "-".

    :raises UnknownClip: the pipeline has no categorization or entity record for the clip
    """
    if our_record is None and categorization is None:
        raise UnknownClip(f"no categorization or entity record for clip '{clip_id}'")
    methods = tuple(methods)

    entities = list(categorization.generic_entities if categorization else ())
    domain = list(our_record.entities if our_record else ())
    if schema is not None:
        order = {normalize_category_name(e.name): i for i, e in enumerate(schema.entities)}
        domain.sort(key=lambda e: order.get(normalize_category_name(e.entity_type), len(order)))
    entities += domain

    rows = {}  # (entity key, attribute key) : {"label", "ours", "headline"}
    name_key = normalize_category_name(NAME_ATTRIBUTE)
    for entity in entities:
        attributes = list(entity.attributes)
        definition = schema.entity(entity.entity_type) if schema is not None and entity in domain else None
        if definition is not None:
            order = {normalize_category_name(a.name): i for i, a in enumerate(definition.attributes)}
            attributes.sort(key=lambda a: order.get(normalize_category_name(a.name), len(order)))
        name = entity.get(NAME_ATTRIBUTE)
        shown = [a for a in attributes if normalize_category_name(a.name) != name_key]
        if not shown:
            shown, name = attributes, None
        for i, attribute in enumerate(shown):
            key = (normalize_category_name(entity.entity_type), normalize_category_name(attribute.name))
            row = rows.setdefault(key, {"label": f"{entity.entity_type}{ARROW}{attribute.name}", "ours": [], "headline": False})
            row["headline"] = row["headline"] or i == 0
            row["ours"].append(f"{name}{ARROW}{attribute.value}" if i == 0 and name else attribute.value)

    clip_outputs = [output for output in outputs if output.clip_id == clip_id]
    table_rows = []
    for (entity_key, attribute_key), row in rows.items():
        cells = []
        for method in methods:
            if method == "ours":
                cells.append(_join(row["ours"]))
                continue
            values = []
            for output in clip_outputs:
                if output.method != method or normalize_category_name(output.entity_type) != entity_key:
                    continue
                matching = [a.value for a in output.attributes if normalize_category_name(a.name) == attribute_key]
                if matching:
                    values += matching
                elif row["headline"]:
                    values.append(output.value)
            cells.append(_join(values))
        table_rows.append((row["label"], tuple(cells)))
    return CaseStudy(clip_id=clip_id, methods=methods, rows=tuple(table_rows))


def csv_text(headers: list[str], rows: list[list]) -> str:
    """RFC 4180 CSV (CRLF line endings, minimal quoting)."""
    buffer = io.StringIO(newline="")
    writer = csv.writer(buffer, quoting=csv.QUOTE_MINIMAL, lineterminator="\r\n")
    writer.writerow(headers)
    writer.writerows(rows)
    return buffer.getvalue()


def write_csv(path: str, headers: list[str], rows: list[list]) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, mode="w", encoding="utf-8", newline="") as fh:
        fh.write(csv_text(headers, rows))
    return path


def render_table(headers: list[str], rows: list[list], format: str = "table") -> str:
    """Aligned text via tabulate: `table` (simple), `grid`, `markdown`, or `csv`."""
    if format == "csv":
        return csv_text(headers, rows)
    tablefmt = {"table": "simple", "grid": "simple_grid", "markdown": "github"}.get(format, format)
    return tabulate(rows, headers=headers, tablefmt=tablefmt)


def recall_table(report: EvalReport) -> tuple[list[str], list[list]]:
    headers = ["method", "entity_type", "recall", "matched", "total"]
    rows = [[r.method, r.entity_type, "" if r.recall is None else f"{r.recall:.4f}", r.matched, r.total] for r in report.rows]
    return headers, rows


def write_report_json(report: EvalReport, path: str) -> str:
    return write_atomic(path, json.dumps(report.model_dump(mode="json"), indent=2, ensure_ascii=False) + "\n")


def load_report_json(path: str) -> EvalReport:
    with open(path, mode="r", encoding="utf-8") as fh:
        return EvalReport.model_validate_json(fh.read())


def plot_distribution(pairs: list[tuple[str, int]], title: str, path: str, top: int = 20) -> str:
    """Horizontal bar chart of the first `top` (label, count) pairs, saved as PNG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    pairs = pairs[:top]
    fig, ax = plt.subplots(figsize=(8, max(2.0, 0.35 * len(pairs) + 1)))
    ax.barh([label for label, _ in reversed(pairs)], [count for _, count in reversed(pairs)], color="tab:blue")
    ax.set_title(title)
    ax.set_xlabel("count")
    fig.tight_layout()
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
