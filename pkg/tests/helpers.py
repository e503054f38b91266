"""Small hand-built ontologies and corpora shared by the unit tests."""

from __future__ import annotations

import json
from pathlib import Path

from cedar.corpus import EventMention, Sentence
from cedar.ontology import EventType, Ontology, RolesetMapping
from cedar.pipeline import PipelineConfig

ROOT = Path(__file__).resolve().parents[1]
FIXTURE_CONFIG = ROOT / "configs" / "fixture.yaml"

# fast settings for plumbing tests that only need trained artifacts to exist
TINY_TRAINING = (
    ("trigger.train.epochs", 2), ("ranker.train.epochs", 1), ("classifier.train.epochs", 2),
    ("backend.h", 16),
)


def fixture_config(data_paths, work_dir, extra=()) -> PipelineConfig:
    return PipelineConfig.load(FIXTURE_CONFIG, [
        ("paths.ontology", str(data_paths["ontology"])),
        ("paths.corpus", str(data_paths["corpus"])),
        ("paths.work_dir", str(work_dir)),
        *extra,
    ])


def type_record(tid, name, definition, parent=None):
    rec = {"kind": "type", "type_id": tid, "name": name, "definition": definition}
    if parent is not None:
        rec["parent_id"] = parent
    return rec


def mapping_record(rid, cands):
    return {"kind": "mapping", "roleset_id": rid, "candidate_type_ids": list(cands)}


def jsonl(records) -> list[str]:
    return [json.dumps(r) + "\n" for r in records]


def small_ontology() -> Ontology:
    """Eight types with a two-level hierarchy and rolesets sharing predicates.

    conflict(Q1) -> social_conflict(Q2), armed_conflict(Q3)
    work(Q4) -> work_econ(Q5)
    research(Q6) -> research_method(Q7)
    wish(Q241625) is a root
    """
    types = [
        EventType("Q1", "conflict", "a disagreement between parties"),
        EventType("Q2", "social_conflict", "conflict between social groups", "Q1"),
        EventType("Q3", "armed_conflict", "conflict fought with weapons", "Q1"),
        EventType("Q4", "work", "activity done by a person"),
        EventType("Q5", "work_econ", "activity done by a person for economic gain", "Q4"),
        EventType("Q6", "research", "systematic study"),
        EventType("Q7", "research_method", "technique used in systematic study", "Q6"),
        EventType("Q241625", "wish", "a desire for something"),
    ]
    mappings = [
        RolesetMapping("fight.01", ("Q2", "Q3")),
        RolesetMapping("fight.02", ("Q1",)),
        RolesetMapping("work.01", ("Q5",)),
        RolesetMapping("work.02", ("Q4",)),
        RolesetMapping("research.01", ("Q6", "Q7")),
        RolesetMapping("wish.01", ("Q241625",)),
        RolesetMapping("want.01", ("Q241625", "Q4")),
    ]
    return Ontology({t.type_id: t for t in types}, {m.roleset_id: m for m in mappings})


def mention(mid, sid, start, end, roleset, gold=None, pos=None, cands=()):
    return EventMention(mid, sid, start, end, roleset, tuple(cands), gold, pos)


def sentence(sid, doc, tokens, mentions=(), genre=None, source=None):
    return Sentence(sid, doc, tuple(tokens), tuple(mentions), genre, source)
