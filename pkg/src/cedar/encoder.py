"""Text encoders shared by the three stages.

Two backends implement the same small contract:

* ``ReferenceEncoder`` -- words hash to fixed random base vectors, followed by a
  trainable linear layer and ``tanh``.  Cheap, deterministic, and trainable at
  desk scale; used by the tests and the synthetic fixture.
* ``TransformersBackend`` -- wraps a Hugging Face masked language model
  such as ``bert-base-uncased``, with first-subword pooling.

Every backend maps a batch of word sequences to token matrices whose row 0 is
the classification token and row ``i`` (``i >= 1``) is word ``i - 1``.
"""

from __future__ import annotations

import hashlib
import logging
from pathlib import Path
from typing import Protocol, Sequence, runtime_checkable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from cedar import __version__
from cedar.io import atomic_write_bytes, write_json, read_json

logger = logging.getLogger(__name__)

CLS, SEP, MASK = "[CLS]", "[SEP]", "[MASK]"
SENT_MARKER, EVENT_MARKER = "[SENT]", "[EVENT]"
SPECIAL_TOKENS = (CLS, SEP, MASK, SENT_MARKER, EVENT_MARKER)


@runtime_checkable
class EncoderBackend(Protocol):
    kind: str
    h: int
    trainable: bool

    def encode_batch(self, batch: Sequence[Sequence[str]],
                     max_length: int | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        """Return ``(rows, mask)`` of shapes ``(B, L, h)`` and ``(B, L)``."""

    def mask_fill_logits(self, batch: Sequence[Sequence[str]], words: Sequence[str],
                         max_length: int | None = None,
                         segment_starts: Sequence[int] | None = None) -> torch.Tensor:
        """Scores ``(B, len(words))`` for filling the single mask slot of each input.

        ``segment_starts[b]`` is the index of the first word of the second
        segment of input ``b`` (sentence-pair encoding); ``None`` means one segment.
        """

    def count_subwords(self, words: Sequence[str]) -> int:
        ...

    def config(self) -> dict:
        ...


def _truncate(words: Sequence[str], max_length: int | None) -> list[str]:
    words = list(words)
    if max_length is not None and len(words) + 2 > max_length:
        logger.warning("input of %d tokens truncated to max length %d", len(words), max_length)
        words = words[: max(max_length - 2, 0)]
    return words


def encode_sentence(backend: EncoderBackend, tokens: Sequence[str],
                    max_length: int | None = 128) -> torch.Tensor:
    """Token matrix with ``len(tokens) + 1`` rows (fewer if truncated)."""
    if not tokens:
        raise ValueError("cannot encode an empty token sequence")
    rows, mask = backend.encode_batch([list(tokens)], max_length=max_length)
    return rows[0, : int(mask[0].sum())]


class ReferenceEncoder(nn.Module):
    """Hashed-vocabulary encoder with a trainable ``tanh(W x + b)`` layer.

    Tokens are context-free: each row depends only on its own word.  The
    yes/no mask head pools, over all tokens, how strongly each token matches
    some token of the *other* segment (max cosine similarity), weighted by a
    learned token attention -- a crude stand-in for the cross-segment attention
    a pretrained masked LM brings to the yes/no question.  Without segment
    information every other token counts as a match partner.
    """

    kind = "reference"
    trainable = True
    head_words = ("yes", "no")

    def __init__(self, h: int = 64, seed: int = 0, dtype: torch.dtype = torch.float32):
        super().__init__()
        if h < 4:
            raise ValueError(f"embedding width must be >= 4, got {h}")
        self.h = h
        self.seed = seed
        self.linear = nn.Linear(h, h, dtype=dtype)
        with torch.no_grad():
            self.linear.weight.copy_(torch.eye(h, dtype=dtype))
            self.linear.bias.zero_()
        self.token_attention = nn.Linear(h, 1, dtype=dtype)
        self.yes_no_head = nn.Linear(h + 1, 2, dtype=dtype)
        with torch.no_grad():
            self.token_attention.weight.zero_()
            self.token_attention.bias.zero_()
            self.yes_no_head.weight.zero_()
            self.yes_no_head.bias.zero_()
            # initial yes-score increases with the pooled match strength
            self.yes_no_head.weight[0, 0] = 4.0
            self.yes_no_head.weight[1, 0] = -4.0
        self._cache: dict[str, np.ndarray] = {}

    def config(self) -> dict:
        return {"backend_kind": self.kind, "h": self.h, "seed": self.seed}

    def normalize_word(self, word: str) -> str:
        return word if word in SPECIAL_TOKENS else word.lower()

    def base_vector(self, word: str) -> np.ndarray:
        word = self.normalize_word(word)
        vec = self._cache.get(word)
        if vec is None:
            digest = hashlib.blake2b(f"{self.seed}\x00{word}".encode("utf-8"), digest_size=8).digest()
            rng = np.random.default_rng(int.from_bytes(digest, "little"))
            vec = rng.standard_normal(self.h)
            self._cache[word] = vec
        return vec

    def count_subwords(self, words: Sequence[str]) -> int:
        return len(words)

    def _base_batch(self, batch: Sequence[Sequence[str]], max_length: int | None):
        seqs = [[CLS] + _truncate(words, max_length) for words in batch]
        length = max(len(s) for s in seqs)
        base = np.zeros((len(seqs), length, self.h))
        mask = torch.zeros((len(seqs), length), dtype=torch.bool)
        for b, seq in enumerate(seqs):
            for i, w in enumerate(seq):
                base[b, i] = self.base_vector(w)
            mask[b, : len(seq)] = True
        dtype = self.linear.weight.dtype
        return torch.as_tensor(base, dtype=dtype), mask

    def encode_batch(self, batch, max_length=None):
        base, mask = self._base_batch(batch, max_length)
        rows = torch.tanh(self.linear(base)) * mask.unsqueeze(-1)
        return rows, mask

    def mask_fill_logits(self, batch, words=("yes", "no"), max_length=None, segment_starts=None):
        words = tuple(words)
        if words != self.head_words:
            raise ValueError(f"reference head only scores {self.head_words}, got {words}")
        for seq in batch:
            if sum(1 for w in seq if w == MASK) != 1:
                raise ValueError("input must contain exactly one mask slot")
        rows, mask = self.encode_batch(batch, max_length)
        unit = F.normalize(rows, dim=-1, eps=1e-12)
        sim = unit @ unit.transpose(1, 2)
        length = rows.shape[1]
        invalid = ~(mask.unsqueeze(1) & mask.unsqueeze(2)) | torch.eye(length, dtype=torch.bool)
        if segment_starts is not None:
            # row 0 is the classification token, so word k sits at row k + 1
            segment = torch.arange(length).unsqueeze(0) > torch.tensor(list(segment_starts)).unsqueeze(1)
            invalid = invalid | (segment.unsqueeze(1) == segment.unsqueeze(2))
        best_match = sim.masked_fill(invalid, -1.0).amax(dim=-1)
        att = self.token_attention(rows).squeeze(-1).masked_fill(~mask, float("-inf"))
        weights = torch.softmax(att, dim=-1)
        pooled_match = (weights * best_match).sum(-1, keepdim=True)
        pooled_rows = (weights.unsqueeze(-1) * rows).sum(1)
        return self.yes_no_head(torch.cat([pooled_match, pooled_rows], dim=-1))


class TransformersBackend(nn.Module):
    """Adapter around a Hugging Face ``*ForMaskedLM`` model and its tokenizer."""

    kind = "transformers"
    trainable = True

    def __init__(self, model, tokenizer, name: str | None = None):
        super().__init__()
        self.model = model
        self.tokenizer = tokenizer
        self.name = name
        missing = [t for t in (SENT_MARKER, EVENT_MARKER) if t not in tokenizer.get_vocab()]
        if missing:
            tokenizer.add_special_tokens({"additional_special_tokens": missing})
            model.resize_token_embeddings(len(tokenizer))
        self.h = model.config.hidden_size

    @classmethod
    def from_pretrained(cls, name: str) -> "TransformersBackend":
        from transformers import AutoModelForMaskedLM, AutoTokenizer

        return cls(AutoModelForMaskedLM.from_pretrained(name), AutoTokenizer.from_pretrained(name), name)

    def config(self) -> dict:
        return {"backend_kind": self.kind, "h": self.h, "model_name": self.name}

    def _words(self, words: Sequence[str]) -> list[str]:
        return [self.tokenizer.mask_token if w == MASK else w for w in words]

    def count_subwords(self, words: Sequence[str]) -> int:
        return sum(len(self.tokenizer.tokenize(w)) or 1 for w in self._words(words))

    def _tokenize(self, batch, max_length, segment_starts=None):
        enc = self.tokenizer([self._words(w) for w in batch], is_split_into_words=True,
                             truncation=max_length is not None, max_length=max_length,
                             padding=True, return_tensors="pt")
        if segment_starts is not None and "token_type_ids" in enc:
            types = torch.zeros_like(enc["input_ids"])
            for b, start in enumerate(segment_starts):
                for pos, wid in enumerate(enc.word_ids(b)):
                    if wid is not None and wid >= start:
                        types[b, pos] = 1
            enc["token_type_ids"] = types
        return enc

    def _hidden(self, enc) -> torch.Tensor:
        out = self.model(**enc, output_hidden_states=True)
        return out, out.hidden_states[-1]

    def encode_batch(self, batch, max_length=None):
        enc = self._tokenize(batch, max_length)
        _, hidden = self._hidden(enc)
        n_rows = [1 + len(words) for words in batch]
        length = max(n_rows)
        rows = hidden.new_zeros((len(batch), length, self.h))
        mask = torch.zeros((len(batch), length), dtype=torch.bool)
        for b, words in enumerate(batch):
            word_ids = enc.word_ids(b)
            first: dict[int, int] = {}
            for pos, wid in enumerate(word_ids):
                if wid is not None and wid not in first:
                    first[wid] = pos
            kept = len(first)
            if kept < len(words):
                logger.warning("input of %d words truncated to %d by max length %s",
                               len(words), kept, max_length)
            index = torch.tensor([0] + [first[i] for i in range(kept)])
            rows[b, : kept + 1] = hidden[b, index]
            mask[b, : kept + 1] = True
        return rows, mask

    def mask_fill_logits(self, batch, words=("yes", "no"), max_length=None, segment_starts=None):
        word_ids = []
        for w in words:
            ids = self.tokenizer.convert_tokens_to_ids(self.tokenizer.tokenize(w))
            if len(ids) != 1:
                raise ValueError(f"verbalizer word {w!r} is not a single vocabulary item")
            word_ids.append(ids[0])
        enc = self._tokenize(batch, max_length, segment_starts)
        out, _ = self._hidden(enc)
        positions = (enc["input_ids"] == self.tokenizer.mask_token_id).nonzero()
        if positions.shape[0] != len(batch):
            raise ValueError("each input must contain exactly one mask slot after truncation")
        logits = out.logits[positions[:, 0], positions[:, 1]]
        return logits[:, word_ids]


def build_backend(cfg: dict) -> EncoderBackend:
    """Construct a backend from a configuration mapping (``backend_kind`` or ``kind`` key)."""
    kind = cfg.get("backend_kind", cfg.get("kind", "reference"))
    if kind == "reference":
        return ReferenceEncoder(h=int(cfg.get("h", 64)), seed=int(cfg.get("seed", 0)))
    if kind == "transformers":
        return TransformersBackend.from_pretrained(cfg["model_name"])
    raise ValueError(f"unknown backend kind {kind!r}")


def parameter_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode("utf-8"))
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(module: nn.Module, path: str | Path, sidecar: dict) -> None:
    """Write ``state_dict`` as an opaque blob plus a ``.json`` sidecar."""
    import io

    path = Path(path)
    buf = io.BytesIO()
    torch.save(module.state_dict(), buf)
    atomic_write_bytes(path, buf.getvalue())
    write_json(path.with_suffix(".json"), {**sidecar, "version": __version__})


def load_checkpoint(path: str | Path) -> tuple[dict, dict]:
    path = Path(path)
    sidecar = read_json(path.with_suffix(".json"))
    state = torch.load(path, map_location="cpu", weights_only=True)
    return state, sidecar
