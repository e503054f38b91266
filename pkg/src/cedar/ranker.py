"""Stage 2: sentence-level event-type ranking with late interaction.

Sentences and type definitions are encoded separately into bags of unit
vectors (1-d convolution over token rows, then row-wise L2 normalisation);
a (type, sentence) pair scores the sum over sentence vectors of the best dot
product against the type's vectors.
"""

from __future__ import annotations

import logging
import random
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from cedar.encoder import EVENT_MARKER, SENT_MARKER, EncoderBackend, parameter_hash
from cedar.io import atomic_write_bytes, read_json, write_json
from cedar.ontology import EventType, Ontology
from cedar.training import TrainConfig, batches, make_optimizer, n_batches, ranker_defaults

logger = logging.getLogger(__name__)

KINDS = {"sentence": SENT_MARKER, "event": EVENT_MARKER}
_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


class StaleIndexError(RuntimeError):
    pass


def tokenize_text(text: str) -> list[str]:
    return _TOKEN_RE.findall(text)


def event_tokens(t: EventType) -> list[str]:
    """Type name (underscores split) followed by its definition."""
    return t.name.replace("_", " ").split() + tokenize_text(t.definition)


@dataclass(frozen=True)
class EmbeddingBag:
    vectors: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1:
            raise ValueError(f"bag must be a non-empty matrix, got shape {v.shape}")
        norms = np.linalg.norm(v, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-5):
            raise ValueError("bag rows must have unit L2 norm")
        object.__setattr__(self, "vectors", v)

    @property
    def m(self) -> int:
        return self.vectors.shape[0]

    @property
    def h(self) -> int:
        return self.vectors.shape[1]


def maxsim(bag_e, bag_s) -> float:
    """Sum over sentence rows of the maximum dot product with any event row."""
    e = bag_e.vectors if isinstance(bag_e, EmbeddingBag) else np.asarray(bag_e)
    s = bag_s.vectors if isinstance(bag_s, EmbeddingBag) else np.asarray(bag_s)
    if e.ndim != 2 or s.ndim != 2 or e.shape[1] != s.shape[1]:
        raise ValueError(f"dimension mismatch: {e.shape} vs {s.shape}")
    return float((s @ e.T).max(axis=1).sum())


def maxsim_matrix(event_bags: torch.Tensor, event_mask: torch.Tensor,
                  sent_bags: torch.Tensor, sent_mask: torch.Tensor) -> torch.Tensor:
    """Scores ``(B, T)`` for sentence bags ``(B, m_s, h)`` against event bags ``(T, m_e, h)``."""
    sim = torch.einsum("bsh,tmh->btsm", sent_bags, event_bags)
    sim = sim.masked_fill(~event_mask[None, :, None, :], float("-inf"))
    best = sim.amax(dim=-1)  # (B, T, m_s)
    best = best.masked_fill(~sent_mask[:, None, :], 0.0)
    return best.sum(-1)


def margin_loss(positive: torch.Tensor, negatives: torch.Tensor, valid: torch.Tensor | None = None,
                tau: float = 1.0) -> torch.Tensor:
    """Hinge ``max(0, tau - positive + negative)`` averaged over valid (sentence, negative) pairs."""
    pair = torch.clamp(tau - positive.unsqueeze(-1) + negatives, min=0.0)
    if valid is None:
        return pair.mean()
    n = valid.sum()
    if n == 0:
        return pair.sum() * 0.0
    return pair[valid].sum() / n


class RankerModel(nn.Module):
    def __init__(self, backend: EncoderBackend, conv_width: int = 4, conv_stride: int = 2,
                 max_rows: int = 32):
        super().__init__()
        if conv_width < 1 or conv_stride < 1 or max_rows < 1:
            raise ValueError("convolution width, stride and row count must be positive")
        self.backend = backend
        self.conv_width = conv_width
        self.conv_stride = conv_stride
        self.max_rows = max_rows
        h = backend.h
        dtype = next(backend.parameters()).dtype
        self.conv = nn.Conv1d(h, h, conv_width, stride=conv_stride, dtype=dtype)
        with torch.no_grad():
            # start as a moving average of token rows
            self.conv.weight.zero_()
            for k in range(conv_width):
                self.conv.weight[:, :, k] = torch.eye(h, dtype=dtype) / conv_width
            self.conv.bias.zero_()

    def config(self) -> dict:
        return {"stage": "ranker", "conv_width": self.conv_width, "conv_stride": self.conv_stride,
                "max_rows": self.max_rows, "backend": self.backend.config()}

    def encode_bags(self, kind: str, batch: Sequence[Sequence[str]],
                    max_length: int | None = 128) -> tuple[torch.Tensor, torch.Tensor]:
        """Normalised bags ``(B, m, h)`` and their row mask for a batch of token lists."""
        if kind not in KINDS:
            raise ValueError(f"kind must be one of {sorted(KINDS)}, got {kind!r}")
        for tokens in batch:
            if not tokens:
                raise ValueError("cannot encode empty text")
        rows, mask = self.backend.encode_batch([[KINDS[kind]] + list(t) for t in batch], max_length)
        lengths = mask.sum(1).tolist()
        w, s = self.conv_width, self.conv_stride
        n_out = [-(-max(n - w, 0) // s) + 1 for n in lengths]
        needed = w + (max(n_out) - 1) * s
        if needed > rows.shape[1]:
            rows = F.pad(rows, (0, 0, 0, needed - rows.shape[1]))
        out = self.conv(rows.transpose(1, 2)).transpose(1, 2)
        m = min(max(n_out), self.max_rows)
        out = F.normalize(out[:, :m], dim=-1, eps=1e-12)
        out_mask = torch.arange(m).unsqueeze(0) < torch.tensor([min(k, m) for k in n_out]).unsqueeze(1)
        return out * out_mask.unsqueeze(-1), out_mask


def encode_text(model: RankerModel, kind: str, tokens: Sequence[str],
                max_length: int | None = 128) -> EmbeddingBag:
    with torch.no_grad():
        bags, mask = model.encode_bags(kind, [tokens], max_length)
    return EmbeddingBag(bags[0, : int(mask[0].sum())].double().numpy())


@dataclass
class TypeIndex:
    """Precomputed event bags for every ontology type, tagged with the ranker's parameter hash."""

    type_ids: list[str]
    bags: torch.Tensor  # (T, m, h)
    mask: torch.Tensor  # (T, m)
    parameter_hash: str

    @property
    def h(self) -> int:
        return self.bags.shape[2]

    @property
    def m(self) -> int:
        return self.bags.shape[1]

    def bag(self, type_id: str) -> EmbeddingBag:
        k = self.type_ids.index(type_id)
        return EmbeddingBag(self.bags[k, : int(self.mask[k].sum())].double().numpy())

    def save(self, path: str | Path) -> None:
        """Binary blob at ``path`` (``.npy``) plus a JSON manifest next to it."""
        import io

        path = Path(path)
        buf = io.BytesIO()
        np.save(buf, self.bags.detach().cpu().numpy().astype(np.float32))
        atomic_write_bytes(path, buf.getvalue())
        write_json(path.with_suffix(".json"), {
            "type_ids": self.type_ids, "h": self.h, "m": self.m,
            "row_counts": self.mask.sum(1).tolist(), "parameter_hash": self.parameter_hash,
        })

    @classmethod
    def load(cls, path: str | Path) -> "TypeIndex":
        path = Path(path)
        manifest = read_json(path.with_suffix(".json"))
        bags = torch.from_numpy(np.load(path))
        counts = torch.tensor(manifest["row_counts"])
        mask = torch.arange(bags.shape[1]).unsqueeze(0) < counts.unsqueeze(1)
        if bags.shape[0] != len(manifest["type_ids"]) or bags.shape[2] != manifest["h"]:
            raise ValueError(f"index blob shape {tuple(bags.shape)} disagrees with manifest")
        return cls(list(manifest["type_ids"]), bags, mask, manifest["parameter_hash"])


def build_type_index(model: RankerModel, ont: Ontology, batch_size: int = 256,
                     max_length: int | None = 128) -> TypeIndex:
    type_ids = ont.type_ids
    bags, masks = [], []
    model.eval()
    with torch.no_grad():
        for i in range(0, len(type_ids), batch_size):
            chunk = [event_tokens(ont.types[t]) for t in type_ids[i: i + batch_size]]
            b, m = model.encode_bags("event", chunk, max_length)
            bags.append(b.float())
            masks.append(m)
    width = max(b.shape[1] for b in bags)
    bags = torch.cat([F.pad(b, (0, 0, 0, width - b.shape[1])) for b in bags])
    masks = torch.cat([F.pad(m, (0, width - m.shape[1])) for m in masks])
    return TypeIndex(type_ids, bags, masks, parameter_hash(model))


def check_index(model: RankerModel, index: TypeIndex) -> None:
    current = parameter_hash(model)
    if current != index.parameter_hash:
        raise StaleIndexError(f"type index built for parameters {index.parameter_hash[:12]}, "
                              f"ranker now has {current[:12]}; rebuild the index")


def _sorted_ranking(type_ids: Sequence[str], scores: Sequence[float], topk: int | None):
    order = sorted(range(len(type_ids)), key=lambda k: (-scores[k], type_ids[k]))
    if topk is not None:
        order = order[:topk]
    return [(type_ids[k], float(scores[k])) for k in order]


def rank_types_batch(model: RankerModel, index: TypeIndex, batch: Sequence[Sequence[str]],
                     topk: int | None = None, max_length: int | None = 128,
                     chunk_types: int = 512) -> list[list[tuple[str, float]]]:
    """Rank every indexed type for each sentence, best first; ties by ``type_id``."""
    check_index(model, index)
    model.eval()
    with torch.no_grad():
        sent, smask = model.encode_bags("sentence", batch, max_length)
        sent = sent.float()
        scores = torch.cat([
            maxsim_matrix(index.bags[i: i + chunk_types], index.mask[i: i + chunk_types], sent, smask)
            for i in range(0, len(index.type_ids), chunk_types)
        ], dim=1)
    rows = scores.double().numpy()
    return [_sorted_ranking(index.type_ids, row.tolist(), topk) for row in rows]


def rank_types(model: RankerModel, index: TypeIndex, tokens: Sequence[str],
               topk: int | None = None, max_length: int | None = 128) -> list[tuple[str, float]]:
    return rank_types_batch(model, index, [tokens], topk, max_length)[0]


@dataclass
class RankerExample:
    tokens: Sequence[str]
    candidate_type_ids: Sequence[str]


NegativeSampler = Callable[[RankerExample, int, random.Random], list[str]]


def uniform_negative_sampler(type_ids: Sequence[str]) -> NegativeSampler:
    """Sample ``k`` distinct types uniformly from the ontology, excluding the candidate set."""
    type_ids = sorted(type_ids)

    def sample(example: RankerExample, k: int, rng: random.Random) -> list[str]:
        excluded = set(example.candidate_type_ids)
        pool = [t for t in type_ids if t not in excluded]
        return rng.sample(pool, min(k, len(pool)))

    return sample


@dataclass
class RankerTrainResult:
    curve: list[float]
    skipped_negatives: int


def ranker_batch_loss(model: RankerModel, ont: Ontology, examples: Sequence[RankerExample],
                      negatives: Sequence[Sequence[str]], tau: float = 1.0,
                      max_length: int | None = 128) -> torch.Tensor:
    """Margin loss for a batch where the positive score is the best over each candidate set."""
    needed = sorted({t for ex in examples for t in ex.candidate_type_ids}
                    | {t for negs in negatives for t in negs})
    col = {t: k for k, t in enumerate(needed)}
    ebags, emask = model.encode_bags("event", [event_tokens(ont.types[t]) for t in needed], max_length)
    sbags, smask = model.encode_bags("sentence", [ex.tokens for ex in examples], max_length)
    scores = maxsim_matrix(ebags, emask, sbags, smask)  # (B, U)
    k = max((len(n) for n in negatives), default=0)
    if k == 0:
        return scores.sum() * 0.0
    pos = torch.stack([scores[b, [col[t] for t in ex.candidate_type_ids]].max()
                       for b, ex in enumerate(examples)])
    neg_idx = torch.zeros((len(examples), k), dtype=torch.long)
    valid = torch.zeros((len(examples), k), dtype=torch.bool)
    for b, negs in enumerate(negatives):
        for j, t in enumerate(negs):
            neg_idx[b, j] = col[t]
            valid[b, j] = True
    neg = torch.gather(scores, 1, neg_idx)
    return margin_loss(pos, neg, valid, tau)


def train_ranker(model: RankerModel, examples: Sequence[RankerExample], ont: Ontology,
                 cfg: TrainConfig | None = None, tau: float = 1.0, n_negatives: int = 5,
                 sampler: NegativeSampler | None = None) -> tuple[RankerModel, RankerTrainResult]:
    cfg = cfg or ranker_defaults()
    for ex in examples:
        if not ex.candidate_type_ids:
            raise ValueError("every ranker training sentence needs a non-empty candidate set")
    sampler = sampler or uniform_negative_sampler(ont.type_ids)
    torch.manual_seed(cfg.seed)
    rng = random.Random(cfg.seed)
    total = cfg.epochs * n_batches(len(examples), cfg.batch_size)
    opt, sched = make_optimizer(model, cfg, total)
    curve, skipped = [], 0
    model.train()
    for epoch in range(cfg.epochs):
        losses = []
        for batch in batches(examples, cfg.batch_size, rng):
            negatives = []
            for ex in batch:
                drawn = sampler(ex, n_negatives, rng)
                kept = [t for t in drawn if t not in set(ex.candidate_type_ids)]
                skipped += len(drawn) - len(kept)
                negatives.append(kept)
            loss = ranker_batch_loss(model, ont, batch, negatives, tau, cfg.max_length)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            losses.append(loss.item())
        curve.append(float(np.mean(losses)) if losses else float("nan"))
        logger.info("ranker epoch %d loss %.4f", epoch + 1, curve[-1])
    if skipped:
        logger.warning("skipped %d sampled negatives that were in the candidate set", skipped)
    model.eval()
    return model, RankerTrainResult(curve, skipped)
