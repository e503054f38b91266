"""Metrics: trigger identification/classification F1, Hit@K, per-stage Hit@K,
frequency-group breakdowns and the error taxonomy.

All scoring uses exact token-interval span match.  Predicted spans repeated
within one sentence are scored once (first occurrence wins), and every gold
span can absorb at most one prediction.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from cedar.corpus import Sentence
from cedar.io import atomic_write_text, dumps_json
from cedar.ontology import Ontology, hierarchy_relation, predicate_of

logger = logging.getLogger(__name__)

Span = tuple[int, int]

CATEGORIES = ("candidate_set", "extended_roleset", "child", "parent", "sibling", "other")
HIERARCHY = ("child", "parent", "sibling")


@dataclass(frozen=True)
class PredictionRecord:
    """One predicted event.

    ``ranked_types`` is the final ordering (after classification re-ordering),
    so ``chosen_type`` is its head unless ``flagged`` says otherwise.
    ``ranker_types`` optionally keeps the stage-2 ordering for diagnostics.
    """

    sent_id: str
    span: Span
    ranked_types: tuple[tuple[str, float], ...] = ()
    chosen_type: str | None = None
    flagged: bool = False
    ranker_types: tuple[tuple[str, float], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "span", tuple(self.span))
        object.__setattr__(self, "ranked_types", tuple((t, float(s)) for t, s in self.ranked_types))
        object.__setattr__(self, "ranker_types", tuple((t, float(s)) for t, s in self.ranker_types))
        if self.chosen_type is None and self.ranked_types:
            object.__setattr__(self, "chosen_type", self.ranked_types[0][0])
        if (self.ranked_types and self.chosen_type != self.ranked_types[0][0] and not self.flagged):
            raise ValueError(f"chosen_type {self.chosen_type} is not the head of ranked_types "
                             f"for {self.sent_id} {self.span}; set flagged=True")

    @property
    def type_order(self) -> list[str]:
        return [t for t, _ in self.ranked_types]

    def to_record(self) -> dict:
        rec = {"start": self.span[0], "end": self.span[1], "chosen_type": self.chosen_type,
               "ranked_types": [{"type_id": t, "score": s} for t, s in self.ranked_types]}
        if self.flagged:
            rec["flagged"] = True
        if self.ranker_types:
            rec["ranker_types"] = [{"type_id": t, "score": s} for t, s in self.ranker_types]
        return rec

    @classmethod
    def from_record(cls, sent_id: str, rec: dict) -> "PredictionRecord":
        return cls(sent_id, (rec["start"], rec["end"]),
                   tuple((r["type_id"], r["score"]) for r in rec.get("ranked_types", ())),
                   rec.get("chosen_type"), rec.get("flagged", False),
                   tuple((r["type_id"], r["score"]) for r in rec.get("ranker_types", ())))


@dataclass(frozen=True)
class GoldMention:
    sent_id: str
    span: Span
    type_id: str
    mention_id: str | None = None
    roleset_id: str | None = None
    candidate_type_ids: tuple[str, ...] = ()

    @property
    def is_clean(self) -> bool:
        return len(self.candidate_type_ids) == 1


def gold_from_sentences(sentences: Iterable[Sentence]) -> list[GoldMention]:
    out = []
    for s in sentences:
        for m in s.mentions:
            if m.gold_type_id is None:
                raise ValueError(f"mention {m.mention_id} has no gold type")
            out.append(GoldMention(s.sent_id, m.span, m.gold_type_id, m.mention_id, m.roleset_id,
                                   tuple(m.candidate_type_ids)))
    return out


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float
    true_positives: int
    n_predicted: int
    n_gold: int


def _prf(tp: int, n_pred: int, n_gold: int) -> PRF:
    p = tp / n_pred if n_pred else 0.0
    r = tp / n_gold if n_gold else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return PRF(p, r, f, tp, n_pred, n_gold)


def _dedup(predictions: Sequence[PredictionRecord]) -> list[PredictionRecord]:
    seen, out, dups = set(), [], 0
    for p in predictions:
        key = (p.sent_id, p.span)
        if key in seen:
            dups += 1
            continue
        seen.add(key)
        out.append(p)
    if dups:
        logger.warning("%d duplicate predicted spans scored once", dups)
    return out


def match_spans(predictions: Sequence[PredictionRecord],
                gold: Sequence[GoldMention]) -> tuple[list[PredictionRecord], list[tuple[PredictionRecord, GoldMention]]]:
    """Deduplicate predictions and pair each with at most one identical gold span.

    Greedy in prediction order.  Returns the deduplicated predictions and the
    matched (prediction, gold) pairs.
    """
    preds = _dedup(predictions)
    free: dict[tuple[str, Span], list[GoldMention]] = defaultdict(list)
    for g in gold:
        free[(g.sent_id, tuple(g.span))].append(g)
    pairs = []
    for p in preds:
        slot = free.get((p.sent_id, p.span))
        if slot:
            pairs.append((p, slot.pop(0)))
    return preds, pairs


def score_ti(predictions: Sequence[PredictionRecord], gold: Sequence[GoldMention]) -> PRF:
    preds, pairs = match_spans(predictions, gold)
    return _prf(len(pairs), len(preds), len(gold))


def score_tc(predictions: Sequence[PredictionRecord], gold: Sequence[GoldMention]) -> PRF:
    preds, pairs = match_spans(predictions, gold)
    tp = sum(1 for p, g in pairs if p.chosen_type == g.type_id)
    return _prf(tp, len(preds), len(gold))


def _hits(orderings: Sequence[tuple[Sequence[str] | None, str]], ks: Sequence[int]) -> dict[int, float]:
    """Fraction of (ordering, gold) items with gold in the first K; ``None`` ordering is a miss."""
    out = {}
    n = len(orderings)
    for k in ks:
        if k < 1:
            raise ValueError(f"K must be positive, got {k}")
        hit = sum(1 for order, g in orderings if order is not None and g in order[:k])
        out[int(k)] = hit / n if n else 0.0
    return out


def score_hit_at_k(predictions: Sequence[PredictionRecord], gold: Sequence[GoldMention],
                   ks: Sequence[int] = (1, 2, 5, 10, 20, 50)) -> dict[int, float]:
    """Hit@K over all gold mentions; a gold mention whose span was not predicted is a miss.

    K beyond the ranking length uses the whole list.
    """
    _, pairs = match_spans(predictions, gold)
    matched = {id(g): p for p, g in pairs}
    return _hits([(matched[id(g)].type_order if id(g) in matched else None, g.type_id) for g in gold], ks)


@dataclass
class MetricReport:
    ti_precision: float
    ti_recall: float
    ti_f1: float
    tc_precision: float
    tc_recall: float
    tc_f1: float
    hit_at: dict[int, float]
    support: dict[str, int]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hit_at"] = {str(k): v for k, v in sorted(self.hit_at.items())}
        return d


def evaluate(predictions: Sequence[PredictionRecord], gold: Sequence[GoldMention],
             ks: Sequence[int] = (1, 2, 5, 10, 20, 50)) -> MetricReport:
    ti, tc = score_ti(predictions, gold), score_tc(predictions, gold)
    return MetricReport(ti.precision, ti.recall, ti.f1, tc.precision, tc.recall, tc.f1,
                        score_hit_at_k(predictions, gold, ks),
                        {"n_predicted": ti.n_predicted, "n_gold": ti.n_gold,
                         "ti_true_positives": ti.true_positives, "tc_true_positives": tc.true_positives})


@dataclass
class StageReport:
    ranking_hit: dict[int, float]
    classification_hit: dict[int, float] | None
    n_mentions: int
    n_covered: int
    cover_k: int

    @property
    def classification_defined(self) -> bool:
        return self.classification_hit is not None

    def to_dict(self) -> dict:
        return {
            "ranking_hit": {str(k): v for k, v in sorted(self.ranking_hit.items())},
            "classification_hit": (None if self.classification_hit is None else
                                   {str(k): v for k, v in sorted(self.classification_hit.items())}),
            "classification_defined": self.classification_defined,
            "n_mentions": self.n_mentions,
            "n_covered": self.n_covered,
            "cover_k": self.cover_k,
        }


def per_stage_report(ranked: Mapping[str, Sequence[str]], classified: Mapping[str, Sequence[str]],
                     gold: Mapping[str, str], ranking_ks: Sequence[int] = (10, 20, 50),
                     classification_ks: Sequence[int] = (1, 2, 5), cover_k: int = 10) -> StageReport:
    """Stage-wise Hit@K on gold spans.

    ``ranked`` maps mention_id to the ranker's type order, ``classified`` to the
    classifier's re-ordering of the ranker top-``cover_k``, ``gold`` to the gold
    type.  Classification Hit@K only counts mentions whose gold type is in the
    ranker top-``cover_k``; with none covered it is reported as undefined.
    """
    ids = sorted(gold)
    missing = [m for m in ids if m not in ranked]
    if missing:
        raise KeyError(f"no ranking for mentions {missing[:5]}")
    ranking_hit = _hits([(list(ranked[m]), gold[m]) for m in ids], ranking_ks)
    covered = [m for m in ids if gold[m] in list(ranked[m])[:cover_k]]
    if not covered:
        logger.warning("no mention has its gold type in the ranker top-%d; classification Hit@K undefined",
                       cover_k)
        return StageReport(ranking_hit, None, len(ids), 0, cover_k)
    cls_hit = _hits([(list(classified[m]) if m in classified else None, gold[m]) for m in covered],
                    classification_ks)
    return StageReport(ranking_hit, cls_hit, len(ids), len(covered), cover_k)


@dataclass
class QuartileReport:
    groups: list[list[str]]
    boundaries: list[float]
    f1: list[float]
    unseen_types: int

    def to_dict(self) -> dict:
        return {"groups": [len(g) for g in self.groups], "max_frequency": self.boundaries,
                "tc_f1": self.f1, "unseen_types": self.unseen_types}


def frequency_groups(freq: Mapping[str, float], type_ids: Iterable[str],
                     n_groups: int = 4) -> tuple[list[list[str]], int]:
    """Split types into ``n_groups`` frequency groups, least frequent first.

    Types seen in training are ordered by (frequency, type_id) and cut into
    near-equal consecutive runs; unseen types all join the lowest group.
    Returns the groups and the number of unseen types.
    """
    universe = sorted(set(type_ids) | set(freq))
    seen = [t for t in universe if freq.get(t, 0.0) > 0]
    unseen = [t for t in universe if freq.get(t, 0.0) <= 0]
    seen.sort(key=lambda t: (freq[t], t))
    groups = [list(g) for g in np.array_split(np.array(seen, dtype=object), n_groups)]
    groups[0] = sorted(unseen) + groups[0]
    if unseen:
        logger.info("%d types absent from training assigned to the lowest frequency group", len(unseen))
    return groups, len(unseen)


def frequency_quartile_analysis(predictions: Sequence[PredictionRecord], gold: Sequence[GoldMention],
                                freq: Mapping[str, float], type_ids: Iterable[str] = ()) -> QuartileReport:
    """TC F1 within each training-frequency quartile of event types.

    A prediction counts toward the group of its chosen type, a gold mention
    toward the group of its gold type.
    """
    universe = set(type_ids) | {g.type_id for g in gold}
    groups, unseen = frequency_groups(freq, universe)
    f1s, bounds = [], []
    for g in groups:
        members = set(g)
        preds = [p for p in predictions if p.chosen_type in members]
        golds = [x for x in gold if x.type_id in members]
        f1s.append(score_tc(preds, golds).f1)
        bounds.append(max((freq.get(t, 0.0) for t in g), default=math.nan))
    return QuartileReport(groups, bounds, f1s, unseen)


@dataclass(frozen=True)
class ErrorCase:
    mention_id: str
    predicted: str
    gold: str
    gold_roleset: str | None


def categorize_error(err: ErrorCase, ont: Ontology, prioritize_hierarchy: bool = False) -> str:
    if err.predicted == err.gold:
        raise ValueError(f"mention {err.mention_id} is not an error")
    if err.gold_roleset is None or err.gold_roleset not in ont.mappings:
        logger.warning("unknown gold roleset %r for %s; categorized as other", err.gold_roleset, err.mention_id)
        return "other"
    if err.predicted in ont.candidates(err.gold_roleset):
        return "candidate_set"
    extended = any(err.predicted in ont.candidates(r)
                   for r in ont.rolesets_with_predicate(predicate_of(err.gold_roleset))
                   if r != err.gold_roleset)
    relation = "unrelated"
    if err.predicted in ont.types and err.gold in ont.types:
        # relation of the prediction as seen from the gold type
        relation = hierarchy_relation(ont, err.gold, err.predicted)
    hier = relation if relation in HIERARCHY else None
    if prioritize_hierarchy and hier:
        return hier
    if extended:
        return "extended_roleset"
    return hier or "other"


def categorize_errors(errors: Sequence[ErrorCase], ont: Ontology,
                      prioritize_hierarchy: bool = False) -> list[tuple[ErrorCase, str]]:
    return [(e, categorize_error(e, ont, prioritize_hierarchy)) for e in errors]


def classification_errors(predictions: Sequence[PredictionRecord], gold: Sequence[GoldMention]) -> list[ErrorCase]:
    """Span-correct predictions with the wrong type, ordered by mention_id."""
    _, pairs = match_spans(predictions, gold)
    errs = [ErrorCase(g.mention_id or f"{g.sent_id}:{g.span[0]}-{g.span[1]}", p.chosen_type, g.type_id,
                      g.roleset_id)
            for p, g in pairs if p.chosen_type is not None and p.chosen_type != g.type_id]
    return sorted(errs, key=lambda e: e.mention_id)


def dumps_error_csv(categorized: Sequence[tuple[ErrorCase, str]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["mention_id", "predicted", "gold", "category"])
    for e, cat in categorized:
        w.writerow([e.mention_id, e.predicted, e.gold, cat])
    return buf.getvalue()


def write_error_csv(path: str | Path, categorized: Sequence[tuple[ErrorCase, str]]) -> None:
    atomic_write_text(path, dumps_error_csv(categorized))


def category_counts(categorized: Sequence[tuple[ErrorCase, str]]) -> dict[str, int]:
    c = Counter(cat for _, cat in categorized)
    return {k: c.get(k, 0) for k in CATEGORIES}


def dumps_report(obj) -> str:
    return dumps_json(obj.to_dict() if hasattr(obj, "to_dict") else obj)

