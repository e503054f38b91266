"""Optimizer/schedule plumbing shared by the three trainers."""

from __future__ import annotations

import random
from dataclasses import asdict, dataclass, fields
from typing import Iterator, Sequence, TypeVar

import torch
from torch import nn

T = TypeVar("T")


@dataclass
class TrainConfig:
    """Per-stage optimisation settings; defaults are the trigger-identification column."""

    epochs: int = 5
    batch_size: int = 128
    lr: float = 1e-5
    weight_decay: float = 0.01
    warmup_steps: int = 50
    max_length: int = 128
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict | None) -> "TrainConfig":
        d = d or {}
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def ti_defaults() -> TrainConfig:
    return TrainConfig(epochs=5, batch_size=128, max_length=128)


def ranker_defaults() -> TrainConfig:
    return TrainConfig(epochs=5, batch_size=64, max_length=128)


def classifier_defaults() -> TrainConfig:
    return TrainConfig(epochs=2, batch_size=32, max_length=512)


def make_optimizer(model: nn.Module, cfg: TrainConfig, total_steps: int):
    """AdamW plus a linear decay schedule with linear warmup."""
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        (no_decay if name.endswith("bias") else decay).append(p)
    opt = torch.optim.AdamW(
        [{"params": decay, "weight_decay": cfg.weight_decay},
         {"params": no_decay, "weight_decay": 0.0}],
        lr=cfg.lr,
    )
    warmup = max(cfg.warmup_steps, 0)
    total = max(total_steps, 1)

    def factor(step: int) -> float:
        if step < warmup:
            return (step + 1) / (warmup + 1)
        return max(0.0, (total - step) / max(1, total - warmup))

    return opt, torch.optim.lr_scheduler.LambdaLR(opt, factor)


def batches(items: Sequence[T], batch_size: int, rng: random.Random | None = None) -> Iterator[list[T]]:
    order = list(range(len(items)))
    if rng is not None:
        rng.shuffle(order)
    for i in range(0, len(order), batch_size):
        yield [items[j] for j in order[i: i + batch_size]]


def n_batches(n: int, batch_size: int) -> int:
    return (n + batch_size - 1) // batch_size
