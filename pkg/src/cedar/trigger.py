"""Stage 1: span-level trigger identification.

A span ``[i, j]`` scores ``w_start . s_i + w_end . s_j + sum_k w_part . s_k``
and its trigger probability is the sigmoid of that sum.
"""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from cedar.encoder import EncoderBackend
from cedar.training import TrainConfig, batches, make_optimizer, n_batches, ti_defaults

logger = logging.getLogger(__name__)

Span = tuple[int, int]


@dataclass(frozen=True)
class SpanScore:
    span: Span
    logit: float
    probability: float

    @property
    def start(self) -> int:
        return self.span[0]

    @property
    def end(self) -> int:
        return self.span[1]


@dataclass
class TriggerExample:
    tokens: Sequence[str]
    spans: Sequence[Span]


class TriggerModel(nn.Module):
    def __init__(self, backend: EncoderBackend, max_span_len: int = 10):
        super().__init__()
        if max_span_len < 1:
            raise ValueError("max_span_len must be positive")
        self.backend = backend
        self.max_span_len = max_span_len
        dtype = next(backend.parameters()).dtype
        # rows: start, end, part
        self.weights = nn.Parameter(torch.zeros(3, backend.h, dtype=dtype))

    @property
    def w_start(self) -> torch.Tensor:
        return self.weights[0]

    @property
    def w_end(self) -> torch.Tensor:
        return self.weights[1]

    @property
    def w_part(self) -> torch.Tensor:
        return self.weights[2]

    def config(self) -> dict:
        return {"stage": "trigger", "max_span_len": self.max_span_len,
                "backend": self.backend.config()}

    def span_logits_from_rows(self, token_rows: torch.Tensor, lengths: Sequence[int]):
        """Span logits for padded token rows ``(B, n, h)`` (classification row removed).

        Returns ``(spans, logits, valid)`` where ``spans`` is the enumeration for
        the longest sentence and ``valid[b, k]`` marks spans inside sentence ``b``.
        """
        n = token_rows.shape[1]
        starts, ends, member = _span_tables(n, self.max_span_len)
        f = token_rows @ self.weights.T  # (B, n, 3)
        member_t = torch.as_tensor(member, dtype=f.dtype)
        logits = (f[:, starts, 0] + f[:, ends, 1] + f[..., 2] @ member_t.T)
        lengths_t = torch.as_tensor(list(lengths)).unsqueeze(1)
        valid = torch.as_tensor(ends).unsqueeze(0) < lengths_t
        spans = list(zip(starts.tolist(), ends.tolist()))
        return spans, logits, valid

    def forward(self, batch: Sequence[Sequence[str]], max_length: int | None = 128):
        rows, mask = self.backend.encode_batch(batch, max_length=max_length)
        lengths = (mask.sum(1) - 1).tolist()
        return self.span_logits_from_rows(rows[:, 1:], lengths)


@lru_cache(maxsize=64)
def _span_tables(n: int, max_span_len: int):
    starts, ends = [], []
    for i in range(n):
        for j in range(i, min(n, i + max_span_len)):
            starts.append(i)
            ends.append(j)
    starts_a, ends_a = np.array(starts, dtype=np.int64), np.array(ends, dtype=np.int64)
    member = np.zeros((len(starts), n))
    for k, (i, j) in enumerate(zip(starts, ends)):
        member[k, i: j + 1] = 1.0
    return starts_a, ends_a, member


def count_spans(n: int, max_span_len: int) -> int:
    return sum(n - length + 1 for length in range(1, min(max_span_len, n) + 1))


def score_spans_batch(model: TriggerModel, batch: Sequence[Sequence[str]],
                      max_length: int | None = 128) -> list[list[SpanScore]]:
    with torch.no_grad():
        spans, logits, valid = model(batch, max_length=max_length)
        probs = torch.sigmoid(logits)
    out = []
    for b in range(len(batch)):
        keep = valid[b].nonzero().flatten().tolist()
        out.append([SpanScore(spans[k], float(logits[b, k]), float(probs[b, k])) for k in keep])
    return out


def score_spans(model: TriggerModel, tokens: Sequence[str], max_length: int | None = 128) -> list[SpanScore]:
    """Every span of length <= ``model.max_span_len`` with its logit and probability."""
    return score_spans_batch(model, [tokens], max_length)[0]


def decode_triggers(scored: Iterable[SpanScore], threshold: float = 0.5) -> list[SpanScore]:
    """Greedy non-overlapping selection in descending probability.

    Ties go to the earlier start, then the shorter span.  Output is sorted by start.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    kept: list[SpanScore] = []
    ordered = sorted((s for s in scored if s.probability >= threshold),
                     key=lambda s: (-s.probability, s.start, s.end - s.start))
    for cand in ordered:
        if all(cand.end < k.start or k.end < cand.start for k in kept):
            kept.append(cand)
    return sorted(kept, key=lambda s: s.span)


def trigger_loss(model: TriggerModel, examples: Sequence[TriggerExample],
                 max_length: int | None = 128) -> torch.Tensor:
    """Mean binary cross-entropy over every enumerated span of every sentence."""
    spans, logits, valid = model([e.tokens for e in examples], max_length=max_length)
    index = {s: k for k, s in enumerate(spans)}
    target = torch.zeros_like(logits)
    for b, ex in enumerate(examples):
        for span in ex.spans:
            k = index.get(tuple(span))
            if k is not None and valid[b, k]:
                target[b, k] = 1.0
    return F.binary_cross_entropy_with_logits(logits[valid], target[valid])


def train_trigger_model(model: TriggerModel, examples: Sequence[TriggerExample],
                        cfg: TrainConfig | None = None) -> tuple[TriggerModel, list[float]]:
    """Train with span-level BCE; returns the model and the per-epoch mean loss."""
    cfg = cfg or ti_defaults()
    if not any(e.spans for e in examples):
        logger.warning("no positive trigger spans in training data; training is degenerate")
    examples = [e for e in examples if len(e.tokens) > 0]
    torch.manual_seed(cfg.seed)
    rng = random.Random(cfg.seed)
    total = cfg.epochs * n_batches(len(examples), cfg.batch_size)
    opt, sched = make_optimizer(model, cfg, total)
    curve = []
    model.train()
    for epoch in range(cfg.epochs):
        losses = []
        for batch in batches(examples, cfg.batch_size, rng):
            loss = trigger_loss(model, batch, cfg.max_length)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            losses.append(loss.item())
        curve.append(float(np.mean(losses)) if losses else float("nan"))
        logger.info("trigger epoch %d loss %.4f", epoch + 1, curve[-1])
    model.eval()
    return model, curve


def predict_triggers(model: TriggerModel, batch: Sequence[Sequence[str]], threshold: float = 0.5,
                     max_length: int | None = 128, batch_size: int = 256) -> list[list[SpanScore]]:
    model.eval()
    out = []
    for i in range(0, len(batch), batch_size):
        chunk = batch[i: i + batch_size]
        for scored in score_spans_batch(model, chunk, max_length):
            out.append(decode_triggers(scored, threshold))
    return out
