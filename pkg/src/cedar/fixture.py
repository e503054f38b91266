"""Synthetic planted-signal ontology and corpus for end-to-end checks.

Every type owns a few trigger words and a pool of context words.  Its
definition mentions one trigger word and part of the context pool, so a
definition-aware model has a lexical signal to find but cannot read every
context word off the definition.  Each mention's sentence mixes the trigger,
context words of its type, an occasional "confuser" context word of another
type, and filler.

Rolesets: every type has a clean roleset ``<pred>.01`` mapping to it alone;
types are also grouped in twos and threes, each group sharing a noisy roleset
``<pred>.02`` whose candidate set is the whole group.  A mention carries the
noisy roleset with probability ``noise_rate``, except for the first
``hard_types`` types of the shuffled group order, whose mentions carry it with
probability ``hard_noise_rate``; these types are mostly seen through partial
labels.  At ``hard_noise_rate = 1`` they get no clean roleset at all.
"""

from __future__ import annotations

import random
from dataclasses import asdict, dataclass, field
from pathlib import Path

from cedar.corpus import EventMention, Sentence, write_corpus
from cedar.io import write_json
from cedar.ontology import EventType, Ontology, RolesetMapping

FILLER = ("the", "a", "was", "of", "in", "to", "and", "by", "for", "on", "with", "at",
          "from", "that", "it", "this", "then", "they", "there", "after", "before", "had")
_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


@dataclass
class FixtureSpec:
    n_types: int = 20
    sentences_per_type: int = 50
    trigger_words_per_type: int = 3
    context_words_per_type: int = 8
    context_in_definition: int = 3
    context_per_sentence: tuple[int, int] = (2, 3)
    confuser_rate: float = 0.3
    filler_per_sentence: tuple[int, int] = (5, 9)
    noise_rate: float = 0.3
    sentences_per_doc: int = 10
    genres: tuple[str, ...] = ("nw", "bc")
    parent_rate: float = 0.6
    hard_types: int = 0
    hard_noise_rate: float = 0.9

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FixtureSpec":
        d = dict(d)
        for key in ("context_per_sentence", "filler_per_sentence", "genres"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class Fixture:
    ontology: Ontology
    sentences: list[Sentence]
    truth: dict[str, str]  # mention_id -> planted type
    trigger_words: dict[str, list[str]] = field(default_factory=dict)
    context_words: dict[str, list[str]] = field(default_factory=dict)

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        out_dir = Path(out_dir)
        paths = {"ontology": out_dir / "ontology.jsonl", "corpus": out_dir / "corpus.jsonl",
                 "truth": out_dir / "truth.json"}
        self.ontology.save(paths["ontology"])
        write_corpus(paths["corpus"], self.sentences)
        write_json(paths["truth"], {"mention_type": self.truth, "trigger_words": self.trigger_words,
                                    "context_words": self.context_words})
        return paths


def _word_factory(rng: random.Random):
    used = set(FILLER)

    def new_word(syllables: int) -> str:
        while True:
            w = "".join(rng.choice(_CONSONANTS) + rng.choice(_VOWELS) for _ in range(syllables))
            if w not in used:
                used.add(w)
                return w

    return new_word


def generate_fixture(spec: FixtureSpec, seed: int = 0) -> Fixture:
    if spec.n_types < 2:
        raise ValueError("need at least two types")
    if not 0 <= spec.hard_types < spec.n_types:
        raise ValueError("hard_types must leave at least one ordinary type")
    rng = random.Random(seed)
    new_word = _word_factory(rng)
    type_ids = [f"Q{1000 + k}" for k in range(spec.n_types)]
    triggers = {t: [new_word(3) for _ in range(spec.trigger_words_per_type)] for t in type_ids}
    context = {t: [new_word(2) for _ in range(spec.context_words_per_type)] for t in type_ids}

    types = {}
    for k, t in enumerate(type_ids):
        parent = None
        if k >= 3 and rng.random() < spec.parent_rate:
            parent = type_ids[rng.randrange(k)]
        shown = context[t][: spec.context_in_definition]
        definition = f"event in which {triggers[t][0]} happens involving {' '.join(shown)}"
        types[t] = EventType(t, new_word(2) + "_" + triggers[t][0], definition, parent)

    order = type_ids[:]
    rng.shuffle(order)
    hard = set(order[: spec.hard_types])
    mappings = {}
    clean_roleset = {}
    for t in type_ids:
        rid = f"{triggers[t][0]}.01"
        clean_roleset[t] = rid
        if not (t in hard and spec.hard_noise_rate >= 1.0):
            mappings[rid] = RolesetMapping(rid, (t,))
    groups, i = [], 0
    while i < len(order):
        left = len(order) - i
        size = {2: 2, 3: 3, 4: 2, 5: 3}.get(left) or rng.choice((2, 3))
        groups.append(order[i: i + size])
        i += size
    noisy_roleset = {}
    for g in groups:
        rid = f"{triggers[g[0]][0]}.02"
        mappings[rid] = RolesetMapping(rid, tuple(sorted(g)))
        for t in g:
            noisy_roleset[t] = rid
    ontology = Ontology(types, mappings)
    ontology.validate()

    raw = []
    for t in type_ids:
        for _ in range(spec.sentences_per_type):
            words = [rng.choice(FILLER) for _ in range(rng.randint(*spec.filler_per_sentence))]
            words += rng.sample(context[t], rng.randint(*spec.context_per_sentence))
            if rng.random() < spec.confuser_rate:
                other = rng.choice([u for u in type_ids if u != t])
                words.append(rng.choice(context[other]))
            rng.shuffle(words)
            pos = rng.randrange(len(words) + 1)
            words.insert(pos, rng.choice(triggers[t]))
            noisy = rng.random() < (spec.hard_noise_rate if t in hard else spec.noise_rate)
            roleset = noisy_roleset[t] if noisy else clean_roleset[t]
            raw.append((t, words, pos, roleset))
    rng.shuffle(raw)

    sentences, truth = [], {}
    for n, (t, words, pos, roleset) in enumerate(raw):
        doc = n // spec.sentences_per_doc
        sent_id, mention_id = f"s{n:05d}", f"m{n:05d}"
        genre = spec.genres[doc % len(spec.genres)] if spec.genres else None
        mention = EventMention(mention_id, sent_id, pos, pos, roleset, gold_type_id=t, pos_tag="VB")
        sentences.append(Sentence(sent_id, f"d{doc:04d}", tuple(words), (mention,), genre))
        truth[mention_id] = t
    return Fixture(ontology, sentences, truth, triggers, context)
