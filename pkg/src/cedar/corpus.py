"""Distant-supervision corpus: schema, candidate attachment, cleaning, splits."""

from __future__ import annotations

import logging
import math
import random
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

from cedar.io import dumps_jsonl, atomic_write_text, iter_jsonl
from cedar.ontology import Ontology

logger = logging.getLogger(__name__)

BRACKET_TOKENS = frozenset({"-LRB-", "-RRB-", "(", ")", "[", "]"})
AMR_FILTERED_POS = frozenset({"MD", "TO"})


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class EventMention:
    mention_id: str
    sent_id: str
    start: int
    end: int
    roleset_id: str
    candidate_type_ids: tuple[str, ...] = ()
    gold_type_id: str | None = None
    pos_tag: str | None = None
    adjudicated: bool = False

    @property
    def span(self) -> tuple[int, int]:
        return (self.start, self.end)

    @property
    def is_clean(self) -> bool:
        return len(self.candidate_type_ids) == 1

    def overlaps(self, other: "EventMention") -> bool:
        return self.start <= other.end and other.start <= self.end

    def to_record(self, include_gold: bool = True) -> dict:
        rec = {"mention_id": self.mention_id, "start": self.start, "end": self.end,
               "roleset_id": self.roleset_id}
        if self.candidate_type_ids:
            rec["candidate_type_ids"] = list(self.candidate_type_ids)
        if include_gold and self.gold_type_id is not None:
            rec["gold_type_id"] = self.gold_type_id
            if self.adjudicated:
                rec["adjudicated"] = True
        if self.pos_tag is not None:
            rec["pos_tag"] = self.pos_tag
        return rec


@dataclass(frozen=True)
class Sentence:
    sent_id: str
    doc_id: str
    tokens: tuple[str, ...]
    mentions: tuple[EventMention, ...] = ()
    genre: str | None = None
    source: str | None = None

    @property
    def text(self) -> str:
        return " ".join(self.tokens)

    def to_record(self, include_gold: bool = True) -> dict:
        rec = {"sent_id": self.sent_id, "doc_id": self.doc_id, "tokens": list(self.tokens),
               "mentions": [m.to_record(include_gold) for m in self.mentions]}
        if self.genre is not None:
            rec["genre"] = self.genre
        if self.source is not None:
            rec["source"] = self.source
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "Sentence":
        sent_id = str(rec["sent_id"])
        tokens = tuple(str(t) for t in rec["tokens"])
        if not tokens:
            raise CorpusError(f"sentence {sent_id} has no tokens")
        mentions = []
        for m in rec.get("mentions", ()):
            start, end = int(m["start"]), int(m["end"])
            if not 0 <= start <= end < len(tokens):
                raise CorpusError(f"mention {m['mention_id']} span [{start}, {end}] "
                                  f"outside sentence {sent_id} ({len(tokens)} tokens)")
            mentions.append(EventMention(
                mention_id=str(m["mention_id"]), sent_id=sent_id, start=start, end=end,
                roleset_id=str(m["roleset_id"]),
                candidate_type_ids=tuple(m.get("candidate_type_ids", ())),
                gold_type_id=m.get("gold_type_id"), pos_tag=m.get("pos_tag"),
                adjudicated=bool(m.get("adjudicated", False)),
            ))
        return cls(sent_id=sent_id, doc_id=str(rec["doc_id"]), tokens=tokens,
                   mentions=tuple(mentions), genre=rec.get("genre"), source=rec.get("source"))


@dataclass
class CorpusSplit:
    train: list[Sentence]
    dev: list[Sentence]
    test: list[Sentence]

    def items(self):
        return (("train", self.train), ("dev", self.dev), ("test", self.test))


@dataclass
class AttachReport:
    dropped_unmapped: int = 0
    dropped_unknown_gold: int = 0
    adjudicated: int = 0
    per_roleset_dropped: Counter = field(default_factory=Counter)


def read_corpus(path: str | Path) -> list[Sentence]:
    sentences = [Sentence.from_record(r) for r in iter_jsonl(path)]
    seen: set[str] = set()
    for s in sentences:
        if s.sent_id in seen:
            raise CorpusError(f"duplicate sent_id {s.sent_id}")
        seen.add(s.sent_id)
    return sentences


def dumps_corpus(sentences: Iterable[Sentence], include_gold: bool = True) -> str:
    return dumps_jsonl(s.to_record(include_gold) for s in sentences)


def write_corpus(path: str | Path, sentences: Iterable[Sentence], include_gold: bool = True) -> None:
    atomic_write_text(path, dumps_corpus(sentences, include_gold))


def iter_mentions(sentences: Iterable[Sentence]):
    for s in sentences:
        yield from s.mentions


def roleset_counts(sentences: Iterable[Sentence]) -> Counter:
    return Counter(m.roleset_id for m in iter_mentions(sentences))


def attach_candidates(sentences: Sequence[Sentence], ont: Ontology) -> tuple[list[Sentence], AttachReport]:
    """Populate each mention's candidate set from its roleset mapping.

    Mentions whose roleset is not in the ontology are dropped, as are mentions
    whose gold type was filtered out of the ontology.
    """
    report = AttachReport()
    out = []
    for s in sentences:
        kept = []
        for m in s.mentions:
            mapping = ont.mappings.get(m.roleset_id)
            if mapping is None:
                report.dropped_unmapped += 1
                report.per_roleset_dropped[m.roleset_id] += 1
                continue
            if m.gold_type_id is not None and m.gold_type_id not in ont.types:
                report.dropped_unknown_gold += 1
                continue
            adjudicated = m.gold_type_id is not None and m.gold_type_id not in mapping.candidate_type_ids
            report.adjudicated += adjudicated
            kept.append(replace(m, candidate_type_ids=mapping.candidate_type_ids,
                                adjudicated=adjudicated or m.adjudicated))
        out.append(replace(s, mentions=tuple(kept)))
    if report.dropped_unmapped:
        logger.info("dropped %d mentions with unmapped rolesets", report.dropped_unmapped)
    return out, report


def is_special_token(token: str) -> bool:
    return "*" in token or token in BRACKET_TOKENS


def _strip_special(s: Sentence) -> Sentence:
    keep = [i for i, t in enumerate(s.tokens) if not is_special_token(t)]
    if len(keep) == len(s.tokens):
        return s
    new_index = {old: new for new, old in enumerate(keep)}
    mentions = []
    for m in s.mentions:
        inside = [i for i in range(m.start, m.end + 1) if i in new_index]
        if inside:
            mentions.append(replace(m, start=new_index[inside[0]], end=new_index[inside[-1]]))
    return replace(s, tokens=tuple(s.tokens[i] for i in keep), mentions=tuple(mentions))


def _drop_overlaps(mentions: Sequence[EventMention]) -> tuple[EventMention, ...]:
    bad = set()
    for i, a in enumerate(mentions):
        for j in range(i + 1, len(mentions)):
            if a.overlaps(mentions[j]):
                bad.update((i, j))
    return tuple(m for i, m in enumerate(mentions) if i not in bad)


def clean_corpus(sentences: Sequence[Sentence], min_tokens: int = 3) -> list[Sentence]:
    """Remove special tokens, short and duplicate sentences, overlapping and modal mentions.

    Deduplication is corpus-global on the token sequence after special-token
    removal; the first occurrence wins.
    """
    out = []
    seen: set[tuple[str, ...]] = set()
    for s in sentences:
        s = _strip_special(s)
        if len(s.tokens) < min_tokens or s.tokens in seen:
            continue
        seen.add(s.tokens)
        mentions = _drop_overlaps(s.mentions)
        if (s.source or "").lower() == "amr":
            mentions = tuple(m for m in mentions if m.pos_tag not in AMR_FILTERED_POS)
        out.append(replace(s, mentions=mentions) if mentions != s.mentions else s)
    return out


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_corpus(sentences: Sequence[Sentence], ratios: Sequence[float] = (0.90, 0.05, 0.05),
                 seed: int = 0, allow_empty: bool = False) -> CorpusSplit:
    """Document-level split, stratified by genre.

    Per genre, dev and test receive ``round(n * ratio)`` documents and train the
    rest, so each split is within one document of its target.
    """
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    docs_by_genre: dict[str, list[str]] = defaultdict(list)
    doc_genre: dict[str, str] = {}
    for s in sentences:
        if not s.doc_id:
            raise CorpusError(f"sentence {s.sent_id} has no doc_id")
        genre = s.genre or ""
        if s.doc_id not in doc_genre:
            doc_genre[s.doc_id] = genre
            docs_by_genre[genre].append(s.doc_id)
    n_docs = len(doc_genre)
    if n_docs < 3 and not allow_empty:
        raise CorpusError(f"need at least 3 documents to split, got {n_docs}")

    assignment: dict[str, int] = {}
    per_genre: dict[str, list[list[str]]] = {}
    for genre in sorted(docs_by_genre):
        docs = sorted(docs_by_genre[genre])
        random.Random(f"{seed}:{genre}").shuffle(docs)
        n = len(docs)
        n_dev = _round_half_up(n * ratios[1])
        n_test = min(_round_half_up(n * ratios[2]), n - n_dev)
        parts = [docs[n_dev + n_test:], docs[:n_dev], docs[n_dev:n_dev + n_test]]
        per_genre[genre] = parts

    if not allow_empty:
        # borrow a training document from the largest genre for any empty split
        for k in (1, 2):
            if not any(parts[k] for parts in per_genre.values()):
                donor = max(per_genre, key=lambda g: (len(per_genre[g][0]), g))
                if not per_genre[donor][0]:
                    raise CorpusError("not enough documents to fill every split")
                per_genre[donor][k].append(per_genre[donor][0].pop())
        if not any(parts[0] for parts in per_genre.values()):
            raise CorpusError("training split would be empty")

    for parts in per_genre.values():
        for k, docs in enumerate(parts):
            for d in docs:
                assignment[d] = k
    out: list[list[Sentence]] = [[], [], []]
    for s in sentences:
        out[assignment[s.doc_id]].append(s)
    return CorpusSplit(*out)


def mention_counts_by_type(sentences: Iterable[Sentence]) -> dict[str, float]:
    """Training frequency per type, an instance with N candidates adding 1/N to each."""
    freq: dict[str, float] = defaultdict(float)
    for m in iter_mentions(sentences):
        if not m.candidate_type_ids:
            continue
        w = 1.0 / len(m.candidate_type_ids)
        for t in m.candidate_type_ids:
            freq[t] += w
    return dict(freq)
