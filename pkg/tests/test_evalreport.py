#!/usr/bin/env python3
"""
Test the evalreport module: value matching, entity recall, distributions, case studies and report files.

Usage:
    python -m pytest -v --log-level=DEBUG --log-file=tests/test_output.txt tests/test_evalreport.py
    python -m pytest -v tests/test_evalreport.py::test_lincoln_case_study
    pytest tests/test_evalreport.py

Anatomy of a test is broken down into four steps:
- Arrange: prepare everything for our test
- Act: the singular, state-changing action that kicks off the behavior we want to test
- Assert: inspect the resulting state and check if it matches expectations
- Cleanup: remove artifacts so additional tests are not affected or influenced

"""
__license__ = "MIT - https://mit-license.org/"

import random

import pytest
from faker import Faker

from clipmodel import EPOCH, EntityRecord, GenericEntity, RawCategorization
from config import load_config
from conftest import BASELINES, SCENARIO, STUB_CONFIG, TRUTH
from evalreport import (
    EMPTY_CELL,
    ENTITY_TYPES,
    METHODS,
    EvalError,
    MatchCriteria,
    MethodOutput,
    UnknownClip,
    attribute_distribution,
    case_study,
    category_attribute_distribution,
    category_distribution,
    category_entity_distribution,
    csv_text,
    entity_distribution,
    entity_recall,
    evaluate,
    jaccard,
    levenshtein,
    levenshtein_similarity,
    load_outputs,
    load_report_json,
    load_truth,
    match_entity,
    observed_entity_types,
    ours_outputs,
    plot_distribution,
    recall_table,
    render_table,
    top_values,
    write_csv,
    write_report_json,
)
from extract import repair_conformance
from schemagen import schema_from_response
from stubfixture import entity_replies, load_scenario

fake = Faker()
Faker.seed(11)
random.seed(11)

SCENARIO_DATA = load_scenario(SCENARIO)
HISTORY = schema_from_response(SCENARIO_DATA["schemas"]["History"], "History")
TYPE_ALIASES = load_config(STUB_CONFIG).type_aliases

LEVENSHTEIN = [
    # a, b, distance
    ("", "", 0),
    ("kitten", "sitting", 3),
    ("flaw", "lawn", 2),
    ("abc", "", 3),
    ("lincoln", "lincoln", 0),
]

MATCHES = [
    # predicted, truth, match
    ("Lincoln Memorial", "lincoln memorial", True),
    ("Appomattox Court House", "appomattox courthouse", True),
    ("Train", "train car", True),
    ("President Lincoln", "abraham lincoln", False),
    ("Person", "abraham lincoln", False),
    ("", "abraham lincoln", False),
]

# Entity → Attribute, then cells for ours, speech, ocr, caption, yolo
LINCOLN_CASE_STUDY = [
    ("Person → Role", ("Abraham Lincoln → President", "Abraham Lincoln; President Lincoln", "PRESIDENT LINCOLN", "Abraham Lincoln", "Person")),
    ("Person → Gender", ("Male", "-", "-", "Man", "-")),
    ("Person → Age", ("Mid 50s", "-", "-", "-", "-")),
    ("Person → Appearance", ("Wearing a Dark Suit", "-", "-", "-", "-")),
    ("Person → Mood", ("Sad Reflective", "-", "-", "-", "-")),
    ("Object → Type", ("Train Car", "Train", "-", "Train Car", "Train")),
    ("Object → Color", ("Black & White", "-", "-", "-", "-")),
    ("Object → Size", ("Large", "-", "-", "-", "-")),
    ("Historical Event → Description", ("Surrender of the Army of Northern Virginia", "Battle of Appomattox courthouse", "-", "-", "-")),
    ("Historical Event → Date", ("April 9, 1865", "-", "-", "-", "-")),
    ("Historical Event → Location", ("Appomattox Courthouse, Virginia", "-", "-", "-", "-")),
    ("Historical Event → Key Figures", ("Robert E. Lee, Ulysses S. Grant", "-", "-", "-", "-")),
    ("Historical Site → Location", ("Lincoln Memorial → Washington, D. C.", "Lincoln Memorial", "-", "-", "-")),
    ("Historical Site → Era", ("Early 20th Century", "-", "-", "-", "-")),
    ("Historical Site → Architectural Features", ("Marble structure, neoclassical design", "-", "-", "-", "-")),
    ("Historical Figure → Role", ("Abraham Lincoln → 16th President of the United States", "-", "-", "-", "-")),
    ("Historical Figure → Era", ("American Civil War", "-", "-", "-", "-")),
]


def scenario_categorizations() -> list[RawCategorization]:
    """Categorizations as the stub would return them for every clip in the scenario."""
    return [
        RawCategorization(
            clip_id=clip_id,
            raw_category=reply["raw_category"],
            generic_entities=tuple(GenericEntity.model_validate(e) for e in entity_replies(reply.get("generic_entities"))),
            model_id="stub-vlm",
            created_at=EPOCH,
        )
        for clip_id, reply in SCENARIO_DATA["clips"].items()
    ]


def scenario_record(clip_id: str, category: str) -> EntityRecord:
    """The entity record the pipeline keeps for a scenario clip, repaired against its category's schema."""
    clip = SCENARIO_DATA["clips"][clip_id]
    schema = schema_from_response(SCENARIO_DATA["schemas"][category], category)
    entities, _, _ = repair_conformance({"entities": entity_replies(clip["entities"])}, schema)
    return EntityRecord(
        clip_id=clip_id,
        raw_category=clip["raw_category"],
        canonical_category=category,
        retrieval_similarity=1.0,
        retrieval_path="catalog",
        schema_version=1,
        entities=entities,
        model_id="stub-vlm",
        created_at=EPOCH,
    )


def lincoln_record() -> EntityRecord:
    return scenario_record("lincoln-001", "History")


def oracle_recall(outputs, truth, method, entity_type, criteria=MatchCriteria()):
    """Nested-loop recall: every truth entry against every output."""
    matched = total = 0
    for entry in truth:
        if entry.entity_type.lower() != entity_type.lower():
            continue
        total += 1
        for output in outputs:
            if (
                output.method == method
                and output.clip_id == entry.clip_id
                and output.entity_type.lower() == entity_type.lower()
                and match_entity(output.value, entry.value, criteria)
            ):
                matched += 1
                break
    return (matched / total if total else None), matched, total


# -----------------------------------------------------------------------------
# Matching
# -----------------------------------------------------------------------------


def test_evalreport_constants():
    assert METHODS == ("ours", "speech", "ocr", "caption", "yolo")
    assert ENTITY_TYPES == ("Person", "Location", "Object")
    assert EMPTY_CELL == "-"
    criteria = MatchCriteria()
    assert criteria.jaccard == 0.5 and criteria.levenshtein == 0.85


def test_levenshtein():
    for a, b, distance in LEVENSHTEIN:
        assert levenshtein(a, b) == distance, f"levenshtein({a!r}, {b!r})"
        assert levenshtein(b, a) == distance, "symmetric"
    assert levenshtein_similarity("", "") == 1.0
    assert abs(levenshtein_similarity("kitten", "sitting") - (1 - 3 / 7)) <= 1e-9


def test_jaccard():
    assert jaccard("a b", "b c") == 1 / 3
    assert jaccard("", "") == 0.0
    assert jaccard("train", "train car") == 0.5


def test_match_entity():
    for predicted, truth, expected in MATCHES:
        assert match_entity(predicted, truth) is expected, f"match_entity({predicted!r}, {truth!r})"
    assert not match_entity("Train", "train car", MatchCriteria(jaccard=0.6, levenshtein=0.9)), "thresholds are configurable"


# -----------------------------------------------------------------------------
# Recall
# -----------------------------------------------------------------------------


def test_load_truth_and_outputs():
    truth = load_truth(TRUTH)
    outputs = load_outputs(BASELINES)
    assert len(truth) == 57 and len({entry.clip_id for entry in truth}) == 25
    assert len(outputs) == 66
    assert {output.method for output in outputs} <= set(METHODS) - {"ours"}, "baselines only"


def test_load_truth_errors(tmp_path):
    path = tmp_path / "truth.jsonl"
    path.write_text('{"clip_id": "a", "entity_type": "Person", "value": "Abraham Lincoln"}\n{"clip_id": "a", "entity_type": "person", "value": "abraham  LINCOLN"}\n')
    with pytest.raises(EvalError) as excinfo:
        load_truth(str(path))
    assert "repeats" in str(excinfo.value)

    path.write_text('{"clip_id": "a", "entity_type": "Person"}\n')
    with pytest.raises(EvalError) as excinfo:
        load_truth(str(path))
    assert ":1:" in str(excinfo.value)

    path.write_text('{"method": "whisper", "clip_id": "a", "entity_type": "Person", "value": "x"}\n')
    with pytest.raises(EvalError):
        load_outputs(str(path))


def test_ours_outputs():
    outputs = ours_outputs(scenario_categorizations(), [lincoln_record()], TYPE_ALIASES)
    lincoln = [(o.entity_type, o.value) for o in outputs if o.clip_id == "lincoln-001"]
    assert ("Person", "Abraham Lincoln") in lincoln, "generic entities use their Name"
    assert ("Object", "Train Car") in lincoln, "without a Name, the first attribute"
    assert ("Location", "Lincoln Memorial") in lincoln, "Historical Site folds into Location"
    assert ("Historical Event", "Surrender of the Army of Northern Virginia") in lincoln, "unaliased types are kept"
    assert all(o.method == "ours" for o in outputs)


def test_entity_recall_matches_nested_loop():
    truth = load_truth(TRUTH)
    outputs = load_outputs(BASELINES) + ours_outputs(scenario_categorizations(), [lincoln_record()], TYPE_ALIASES)
    for method in METHODS:
        for entity_type in ENTITY_TYPES:
            assert entity_recall(outputs, truth, method, entity_type) == oracle_recall(outputs, truth, method, entity_type), (
                f"{method} / {entity_type}"
            )
    assert entity_recall(outputs, truth, "ours", "Vehicle") == (None, 0, 0), "no truth of that type"


def test_entity_recall_monotone():
    truth = load_truth(TRUTH)
    outputs = load_outputs(BASELINES)
    clips = sorted({entry.clip_id for entry in truth})
    for idx in range(1, 101):
        entity_type = random.choice(ENTITY_TYPES)
        method = random.choice(METHODS[1:])
        before = entity_recall(outputs, truth, method, entity_type)
        value = random.choice([random.choice(truth).value, fake.word(), fake.name()])
        outputs = outputs + [MethodOutput(method=method, clip_id=random.choice(clips), entity_type=entity_type, value=value)]
        after = entity_recall(outputs, truth, method, entity_type)
        assert after[1] >= before[1], f"adding {value!r} lowered {method} / {entity_type} recall"
        assert after[2] == before[2], "the truth total does not depend on outputs"


def test_evaluate():
    truth = load_truth(TRUTH)
    outputs = load_outputs(BASELINES) + ours_outputs(scenario_categorizations(), [], TYPE_ALIASES)
    report = evaluate(outputs, truth)
    assert [(r.method, r.entity_type) for r in report.rows] == [(m, t) for m in METHODS for t in ENTITY_TYPES], "row order"
    for row in report.rows:
        assert row.recall is None or 0.0 <= row.recall <= 1.0
        assert row.matched <= row.total
    assert report.metadata["truth_entries"] == 57 and report.metadata["truth_clips"] == 25

    headers, rows = recall_table(report)
    assert headers == ["method", "entity_type", "recall", "matched", "total"]
    assert all(len(row[2]) == 6 or row[2] == "" for row in rows), "recall to four decimals"


# -----------------------------------------------------------------------------
# Distributions
# -----------------------------------------------------------------------------


def test_distributions():
    categorizations = scenario_categorizations()
    records = [lincoln_record(), lincoln_record().model_copy(update={"clip_id": "x", "canonical_category": "Music", "entities": ()})]
    assert category_distribution(records) == [("History", 1), ("Music", 1)], "count ties are lexicographic"

    entities = entity_distribution(categorizations)
    assert sum(count for _, count in entities) == sum(len(c.generic_entities) for c in categorizations), "counts sum to the entities"
    assert entities == sorted(entities, key=lambda pair: (-pair[1], pair[0]))

    attributes = dict(attribute_distribution(categorizations, "person"))
    assert attributes["Role"] >= attributes.get("Age", 0) and "Gender" in attributes


def test_distributions_permutation_invariant():
    categorizations = scenario_categorizations()
    expected = (entity_distribution(categorizations), attribute_distribution(categorizations, "Person"), top_values(categorizations, None, "Person", "Role", 5))
    for idx in range(1, 20):
        random.shuffle(categorizations)
        shuffled = (entity_distribution(categorizations), attribute_distribution(categorizations, "Person"), top_values(categorizations, None, "Person", "Role", 5))
        assert shuffled == expected, "distributions do not depend on record order"


def test_generic_entity_types():
    categorizations = scenario_categorizations()
    types = observed_entity_types(categorizations, ENTITY_TYPES)
    assert types[:3] == list(ENTITY_TYPES), "configured types come first"
    assert "Background" in types[3:], "generic types outside the configured ones are reported too"
    assert attribute_distribution(categorizations, "Background") == [("Setting", 4)]
    assert observed_entity_types(categorizations, ("person",)).count("Person") == 0, "one spelling per normalized name"


def test_category_distributions():
    records = [scenario_record(clip_id, "History") for clip_id in ("lincoln-001", "hist-002", "hist-003", "hist-004")]
    records.append(scenario_record("howto-005", "How-To & DIY"))

    assert category_entity_distribution(records) == [
        ("History", "Historical Event", 3),
        ("History", "Historical Figure", 3),
        ("History", "Historical Site", 2),
        ("How-To & DIY", "Tool", 2),
        ("How-To & DIY", "Setting", 1),
        ("How-To & DIY", "Step", 1),
    ], "by category, then count descending, then entity type"

    rows = category_attribute_distribution(records)
    counts = {(category, entity_type, name): count for category, entity_type, name, count in rows}
    assert counts[("History", "Historical Event", "Date")] == 3
    assert counts[("History", "Historical Site", "Architectural Features")] == 2
    assert counts[("How-To & DIY", "Tool", "Purpose")] == 2 and counts[("How-To & DIY", "Setting", "Room")] == 1
    assert ("History", "Historical Figure", "Nickname") not in counts, "dropped attributes are not counted"
    assert [row[0] for row in rows] == sorted(row[0] for row in rows), "grouped by category"
    assert sum(row[3] for row in rows) == sum(len(e.attributes) for r in records for e in r.entities), "every attribute is counted once"

    for idx in range(1, 10):
        random.shuffle(records)
        assert category_attribute_distribution(records) == rows, "independent of record order"


def test_top_values():
    categorizations = scenario_categorizations()
    roles = top_values(categorizations, None, "Person", "Role", 3)
    assert len(roles) <= 3 and roles == sorted(roles, key=lambda pair: (-pair[1], pair[0]))
    assert all(value == value.lower() for value, _ in roles), "values are normalized"
    assert ("chef", 2) in top_values(categorizations, None, "Person", "Role", 100), "two chefs in the how-to clips"
    assert top_values(categorizations, "How-To", "Person", "Role", 5) == [("chef", 2)], "'How-To' and 'how to' are one category"
    assert top_values(categorizations, "how to and diy", "Person", "Role", 5) == [("painter", 1)]
    assert top_values(categorizations, None, "Person", "Role", 0) == []
    assert top_values([lincoln_record()], "History", "Historical Figure", "Role", 5) == [("16th president of the united states", 1)]


# -----------------------------------------------------------------------------
# Case study
# -----------------------------------------------------------------------------


def test_lincoln_case_study():
    categorization = next(c for c in scenario_categorizations() if c.clip_id == "lincoln-001")
    study = case_study("lincoln-001", load_outputs(BASELINES), lincoln_record(), categorization, HISTORY)
    assert study.methods == METHODS
    assert [label for label, _ in study.rows] == [label for label, _ in LINCOLN_CASE_STUDY], "row order"
    for (label, cells), (_, expected) in zip(study.rows, LINCOLN_CASE_STUDY):
        assert cells == expected, f"{label}: {cells}"

    headers, rows = study.table()
    assert headers == ["Entity → Attribute", *METHODS] and len(rows) == 17


def test_case_study_unknown_clip():
    with pytest.raises(UnknownClip):
        case_study("nope", load_outputs(BASELINES), None, None)


# -----------------------------------------------------------------------------
# Files
# -----------------------------------------------------------------------------


def test_csv_text():
    assert csv_text(["a", "b"], [["x, y", 1], ["z", ""]]) == 'a,b\r\n"x, y",1\r\nz,\r\n', "RFC 4180: CRLF, minimal quoting"


def test_write_csv(tmp_path):
    path = write_csv(str(tmp_path / "eval" / "recall.csv"), ["a"], [["1"]])
    with open(path, mode="rb") as fh:
        assert fh.read() == b"a\r\n1\r\n"


def test_render_table():
    headers, rows = ["method", "recall"], [["ours", "0.9000"], ["yolo", "0.1000"]]
    text = render_table(headers, rows)
    assert text.splitlines()[0].split() == ["method", "recall"]
    assert len(text.splitlines()) == 4, "header, rule, two rows"
    assert render_table(headers, rows, format="markdown").startswith("| method")
    assert render_table(headers, rows, format="csv") == csv_text(headers, rows)


def test_report_json(tmp_path):
    report = evaluate(load_outputs(BASELINES), load_truth(TRUTH))
    path = write_report_json(report, str(tmp_path / "recall.json"))
    assert load_report_json(path) == report


def test_plot_distribution(tmp_path):
    path = plot_distribution([("History", 4), ("Travel", 2), ("Music", 1)], "Categories", str(tmp_path / "plots" / "categories.png"))
    with open(path, mode="rb") as fh:
        assert fh.read(8) == b"\x89PNG\r\n\x1a\n"
