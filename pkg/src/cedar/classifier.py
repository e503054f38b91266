"""Stage 3: definition-conditioned yes/no type classification and self-labeling."""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from cedar.encoder import MASK, EncoderBackend
from cedar.ontology import EventType, Ontology
from cedar.ranker import tokenize_text
from cedar.training import TrainConfig, batches, classifier_defaults, make_optimizer, n_batches

logger = logging.getLogger(__name__)

YES_NO = ("yes", "no")


@dataclass(frozen=True)
class QAPrompt:
    """Rendered question; ``segment_start`` is where the sentence part begins in ``tokens``."""

    text: str
    tokens: tuple[str, ...]
    mask_index: int
    segment_start: int
    type_id: str | None = None
    mention_id: str | None = None


@dataclass(frozen=True)
class PairScore:
    mention_id: str | None
    type_id: str | None
    p_yes: float

    @property
    def p_no(self) -> float:
        return 1.0 - self.p_yes


@dataclass(frozen=True)
class SelfLabelConfig:
    confidence_margin_threshold: float = 0.9
    rounds: int = 1

    def __post_init__(self):
        if not 0.0 < self.confidence_margin_threshold <= 1.0:
            # threshold sweeps call select_pseudo_labels directly, which also accepts 0
            raise ValueError("confidence_margin_threshold must lie in (0, 1]")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")


@dataclass(frozen=True)
class CandidateMention:
    """A training or evaluation mention as the classifier sees it."""

    mention_id: str
    tokens: tuple[str, ...]
    span: tuple[int, int]
    candidate_type_ids: tuple[str, ...]
    negative_pool: tuple[str, ...] = ()
    roleset_id: str | None = None


@dataclass(frozen=True)
class LabeledMention:
    mention_id: str
    tokens: tuple[str, ...]
    span: tuple[int, int]
    type_id: str
    negative_pool: tuple[str, ...] = ()


def _prompt_tokens(name: Sequence[str], definition: Sequence[str], sentence: Sequence[str],
                   trigger: Sequence[str]) -> list[str]:
    return ([*name, "is", "defined", "as", *definition, ".", *sentence, ".", "Does", *trigger,
             "indicate", "a", *name, "event", "?", MASK])


def render_prompt(t: EventType, tokens: Sequence[str], span: tuple[int, int],
                  max_length: int | None = 512,
                  count: Callable[[Sequence[str]], int] | None = None,
                  mention_id: str | None = None) -> QAPrompt:
    """Fill the yes/no question template for one (trigger, type) pair.

    When the prompt exceeds ``max_length`` (two positions reserved for the
    classification and separator tokens) sentence tokens farthest from the
    trigger are dropped first; template words and the trigger are never dropped.
    """
    start, end = span
    if not 0 <= start <= end < len(tokens):
        raise ValueError(f"span {span} outside sentence of {len(tokens)} tokens")
    if not t.definition.strip():
        logger.warning("event type %s has an empty definition", t.type_id)
    count = count or len
    name = t.name.split() or [t.name]
    definition = tokenize_text(t.definition)
    trigger = list(tokens[start: end + 1])
    kept = list(range(len(tokens)))

    def build():
        return _prompt_tokens(name, definition, [tokens[i] for i in kept], trigger)

    words = build()
    if max_length is not None and count(words) + 2 > max_length:
        sizes = {i: count([tokens[i]]) for i in kept}
        overflow = count(words) + 2 - max_length
        by_distance = sorted((i for i in kept if not start <= i <= end),
                             key=lambda i: (-max(start - i, i - end), -i))
        drop = set()
        for i in by_distance:
            if overflow <= 0:
                break
            drop.add(i)
            overflow -= sizes[i]
        kept = [i for i in kept if i not in drop]
        while overflow > 0 and definition:
            overflow -= count([definition.pop()])
        logger.warning("prompt for %s truncated to %d positions", t.type_id, max_length)
        words = build()
    sentence_text = " ".join(tokens[i] for i in kept)
    text = (f"{t.name} is defined as {t.definition}. {sentence_text}. "
            f"Does {' '.join(trigger)} indicate a {t.name} event? {MASK}")
    segment_start = len(name) + 3 + len(definition) + 1
    return QAPrompt(text, tuple(words), len(words) - 1, segment_start, t.type_id, mention_id)


def yes_probability(logits: torch.Tensor) -> torch.Tensor:
    """``exp(l_yes) / (exp(l_yes) + exp(l_no))`` for logits ``(..., 2)``."""
    return torch.sigmoid(logits[..., 0] - logits[..., 1])


class ClassifierModel(nn.Module):
    def __init__(self, backend: EncoderBackend, max_length: int = 512):
        super().__init__()
        self.backend = backend
        self.max_length = max_length

    def config(self) -> dict:
        return {"stage": "classifier", "max_length": self.max_length, "backend": self.backend.config()}

    def forward(self, prompts: Sequence[QAPrompt]) -> torch.Tensor:
        return self.backend.mask_fill_logits([p.tokens for p in prompts], YES_NO, self.max_length,
                                             [p.segment_start for p in prompts])

    def prompt(self, t: EventType, tokens, span, mention_id=None) -> QAPrompt:
        return render_prompt(t, tokens, span, self.max_length, self.backend.count_subwords, mention_id)


def score_pair(model: ClassifierModel, prompt: QAPrompt) -> PairScore:
    return score_prompts(model, [prompt])[0]


def score_prompts(model: ClassifierModel, prompts: Sequence[QAPrompt],
                  batch_size: int = 256) -> list[PairScore]:
    model.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(prompts), batch_size):
            chunk = prompts[i: i + batch_size]
            p = yes_probability(model(chunk)).double().tolist()
            out.extend(PairScore(pr.mention_id, pr.type_id, v) for pr, v in zip(chunk, p))
    return out


def choose_type(scores: Sequence[PairScore], ranker_scores: dict[str, float] | None = None) -> str:
    """Highest p_yes; ties by higher ranker score, then type_id."""
    if not scores:
        raise ValueError("candidate list is empty")
    ranker_scores = ranker_scores or {}
    best = min(scores, key=lambda s: (-s.p_yes, -ranker_scores.get(s.type_id, 0.0), s.type_id))
    return best.type_id


def classify_mention(model: ClassifierModel, ont: Ontology, tokens: Sequence[str],
                     span: tuple[int, int], candidates: Sequence[tuple[str, float]],
                     mention_id: str | None = None) -> tuple[str, list[PairScore]]:
    """Score each (type_id, ranker_score) candidate and return the chosen type with all scores."""
    if not candidates:
        raise ValueError("candidate list is empty")
    prompts = [model.prompt(ont.types[t], tokens, span, mention_id) for t, _ in candidates]
    scores = score_prompts(model, prompts)
    return choose_type(scores, dict(candidates)), scores


def classify_many(model: ClassifierModel, ont: Ontology,
                  items: Sequence[tuple[Sequence[str], tuple[int, int], Sequence[tuple[str, float]]]],
                  batch_size: int = 256) -> list[tuple[str, list[PairScore]]]:
    """Batched ``classify_mention`` over ``(tokens, span, candidates)`` items."""
    prompts, owners = [], []
    for k, (tokens, span, cands) in enumerate(items):
        if not cands:
            raise ValueError("candidate list is empty")
        for t, _ in cands:
            prompts.append(model.prompt(ont.types[t], tokens, span))
            owners.append(k)
    flat = score_prompts(model, prompts, batch_size)
    grouped: list[list[PairScore]] = [[] for _ in items]
    for k, s in zip(owners, flat):
        grouped[k].append(s)
    return [(choose_type(g, dict(items[k][2])), g) for k, g in enumerate(grouped)]


def pair_loss(p_yes: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy of p_yes against 1 (positive pair) or 0 (negative pair)."""
    eps = torch.finfo(p_yes.dtype).tiny
    return -(target * torch.log(p_yes.clamp_min(eps)) + (1 - target) * torch.log((1 - p_yes).clamp_min(eps)))


def build_pairs(mentions: Sequence[LabeledMention], n_negatives: int,
                rng: random.Random) -> list[tuple[LabeledMention, str, float]]:
    pairs = []
    for m in mentions:
        pairs.append((m, m.type_id, 1.0))
        pool = [t for t in m.negative_pool if t != m.type_id]
        for t in rng.sample(pool, min(n_negatives, len(pool))):
            pairs.append((m, t, 0.0))
    return pairs


def classifier_loss(model: ClassifierModel, ont: Ontology,
                    pairs: Sequence[tuple[LabeledMention, str, float]]) -> torch.Tensor:
    prompts = [model.prompt(ont.types[t], m.tokens, m.span) for m, t, _ in pairs]
    logits = model(prompts)
    target = torch.tensor([y for _, _, y in pairs], dtype=logits.dtype)
    return F.binary_cross_entropy_with_logits(logits[:, 0] - logits[:, 1], target)


def train_classifier(model: ClassifierModel, mentions: Sequence[LabeledMention], ont: Ontology,
                     cfg: TrainConfig | None = None, n_negatives: int = 5) -> tuple[ClassifierModel, list[float]]:
    """BCE over (mention, type) pairs; negatives are resampled from each mention's pool every epoch."""
    cfg = cfg or classifier_defaults()
    if not mentions:
        raise ValueError("no training mentions for the classifier")
    torch.manual_seed(cfg.seed)
    rng = random.Random(cfg.seed)
    per_epoch = sum(1 + min(n_negatives, len([t for t in m.negative_pool if t != m.type_id]))
                    for m in mentions)
    total = cfg.epochs * n_batches(per_epoch, cfg.batch_size)
    opt, sched = make_optimizer(model, cfg, total)
    curve = []
    model.train()
    for epoch in range(cfg.epochs):
        losses = []
        for batch in batches(build_pairs(mentions, n_negatives, rng), cfg.batch_size, rng):
            loss = classifier_loss(model, ont, batch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            losses.append(loss.item())
        curve.append(float(np.mean(losses)))
        logger.info("classifier epoch %d loss %.4f", epoch + 1, curve[-1])
    model.eval()
    return model, curve


def clean_training_set(mentions: Sequence[CandidateMention]) -> list[LabeledMention]:
    bad = [m.mention_id for m in mentions if len(m.candidate_type_ids) != 1]
    if bad:
        raise ValueError(f"base classifier takes clean mentions only; {len(bad)} have several candidates")
    return [LabeledMention(m.mention_id, m.tokens, m.span, m.candidate_type_ids[0], m.negative_pool)
            for m in mentions]


def train_base_classifier(model: ClassifierModel, clean: Sequence[CandidateMention], ont: Ontology,
                          cfg: TrainConfig | None = None, n_negatives: int = 5):
    """Train on mentions whose roleset maps to exactly one type."""
    labeled = clean_training_set(clean)
    if not labeled:
        raise ValueError("clean training subset is empty")
    return train_classifier(model, labeled, ont, cfg, n_negatives)


@dataclass
class PseudoLabel:
    mention: CandidateMention
    scores: list[PairScore]
    margin: float
    selected: bool
    label: str | None

    def audit_record(self) -> dict:
        return {
            "mention_id": self.mention.mention_id,
            "candidates": [{"type_id": s.type_id, "p_yes": s.p_yes} for s in self.scores],
            "margin": self.margin,
            "selected": self.selected,
            "pseudo_label": self.label,
        }


def select_pseudo_labels(model: ClassifierModel, ont: Ontology, noisy: Sequence[CandidateMention],
                         threshold: float, batch_size: int = 256) -> list[PseudoLabel]:
    """Score each noisy mention against its own candidate set and keep confident top-1 labels.

    The margin is p_yes(top-1) - p_yes(runner-up within the candidate set).
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    for m in noisy:
        if len(m.candidate_type_ids) < 2:
            raise ValueError(f"mention {m.mention_id} is not noisy (|C_y| < 2)")
    items = [(m.tokens, m.span, [(t, 0.0) for t in m.candidate_type_ids]) for m in noisy]
    results = classify_many(model, ont, items, batch_size)
    out = []
    for m, (_, scores) in zip(noisy, results):
        ordered = sorted(scores, key=lambda s: (-s.p_yes, s.type_id))
        margin = ordered[0].p_yes - ordered[1].p_yes
        selected = margin >= threshold
        scores = [PairScore(m.mention_id, s.type_id, s.p_yes) for s in scores]
        out.append(PseudoLabel(m, scores, margin, selected, ordered[0].type_id if selected else None))
    return out


@dataclass
class SelfLabelResult:
    model: ClassifierModel
    pseudo_labels: list[PseudoLabel]
    selected: list[LabeledMention] = field(default_factory=list)
    history: list[int] = field(default_factory=list)

    def audit_records(self) -> list[dict]:
        return [p.audit_record() for p in self.pseudo_labels]


def self_label(base_model: ClassifierModel, clean: Sequence[CandidateMention],
               noisy: Sequence[CandidateMention], ont: Ontology, make_model: Callable[[], ClassifierModel],
               config: SelfLabelConfig = SelfLabelConfig(), cfg: TrainConfig | None = None,
               n_negatives: int = 5) -> SelfLabelResult:
    """Pseudo-label confident noisy mentions, then train a fresh classifier on clean + selected.

    Each round labels the full noisy pool with the previous round's model.
    """
    clean_labeled = clean_training_set(clean)
    model = base_model
    history = []
    labels: list[PseudoLabel] = []
    selected: list[LabeledMention] = []
    for round_no in range(config.rounds):
        labels = select_pseudo_labels(model, ont, noisy, config.confidence_margin_threshold)
        selected = [LabeledMention(p.mention.mention_id, p.mention.tokens, p.mention.span, p.label,
                                   p.mention.negative_pool)
                    for p in labels if p.selected]
        history.append(len(selected))
        if not selected:
            logger.warning("self-labeling round %d selected no mentions; training on clean data only",
                           round_no + 1)
        model, _ = train_classifier(make_model(), clean_labeled + selected, ont, cfg, n_negatives)
    return SelfLabelResult(model, labels, selected, history)
