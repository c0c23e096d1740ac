"""Corpus ingestion, batching, perplexity and Monte-Carlo evaluation."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .masks import MaskSet
from .model import LmModel, forward

EOS = "<eos>"
UNK = "<unk>"
SPLITS = ("train", "valid", "test")
MC_STREAM = 0x3C3C


class CorpusError(ValueError):
    pass


def tokenize(line: str, mode: str) -> list[str]:
    line = line.rstrip("\n")
    if mode == "word":
        return line.split() + [EOS]
    if mode == "char":
        return list(line) + [EOS]
    raise CorpusError(f"unknown corpus mode {mode!r}")


@dataclass
class Corpus:
    vocab: list[str]
    splits: dict[str, np.ndarray]
    mode: str = "word"
    index: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.index = {tok: i for i, tok in enumerate(self.vocab)}

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def encode(self, tokens: Sequence[str]) -> np.ndarray:
        unk = self.index[UNK]
        return np.array([self.index.get(t, unk) for t in tokens], dtype=np.int64)

    def decode(self, ids) -> list[str]:
        return [self.vocab[int(i)] for i in ids]

    def split(self, name: str) -> np.ndarray:
        try:
            return self.splits[name]
        except KeyError:
            raise CorpusError(f"corpus has no {name!r} split") from None


def build_vocab(tokens: Sequence[str]) -> list[str]:
    """Most frequent first, ties broken lexicographically; specials always present."""
    counts = Counter(tokens)
    counts.setdefault(EOS, 0)
    counts.setdefault(UNK, 0)
    return sorted(counts, key=lambda tok: (-counts[tok], tok))


def _read_tokens(path: Path, mode: str) -> list[str]:
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise CorpusError(f"cannot read {path}: {exc}") from exc
    tokens: list[str] = []
    for line in text.splitlines():
        tokens.extend(tokenize(line, mode))
    return tokens


def load_corpus(path, mode: str = "word") -> Corpus:
    """Load ``train.txt`` (required) plus ``valid.txt``/``test.txt`` if present.

    ``path`` may also point straight at a single training file.
    """
    path = Path(path)
    if mode not in ("word", "char"):
        raise CorpusError(f"unknown corpus mode {mode!r}")
    files = {name: path / f"{name}.txt" for name in SPLITS} if path.is_dir() else {"train": path}
    if not files["train"].exists():
        raise CorpusError(f"missing training split {files['train']}")
    train_tokens = _read_tokens(files["train"], mode)
    if not train_tokens:
        raise CorpusError(f"training split {files['train']} is empty")
    vocab = build_vocab(train_tokens)
    corpus = Corpus(vocab=vocab, splits={}, mode=mode)
    corpus.splits["train"] = corpus.encode(train_tokens)
    for name in ("valid", "test"):
        f = files.get(name)
        if f is not None and f.exists():
            corpus.splits[name] = corpus.encode(_read_tokens(f, mode))
    return corpus


def batchify(ids: np.ndarray, batch_size: int) -> np.ndarray:
    """Lay the stream out as ``batch_size`` contiguous columns.

    Trailing tokens that do not fill a full row are dropped.
    """
    if batch_size < 1:
        raise ValueError("batch size must be positive")
    rows = len(ids) // batch_size
    return np.ascontiguousarray(np.asarray(ids[: rows * batch_size]).reshape(batch_size, rows).T)


def unbatchify(batched: np.ndarray) -> np.ndarray:
    return batched.T.reshape(-1)


def windows(batched: np.ndarray, bptt: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Consecutive ``(inputs, targets)`` windows of at most ``bptt`` rows."""
    for start in range(0, len(batched) - 1, bptt):
        n = min(bptt, len(batched) - 1 - start)
        yield batched[start:start + n], batched[start + 1:start + 1 + n]


@dataclass
class EvalResult:
    loss: float  # mean token cross-entropy
    act_norm: float  # mean of (1/d)||h||^2 on the final layer
    tokens: int

    @property
    def ppl(self) -> float:
        return math.exp(self.loss)


def evaluate(model: LmModel, ids: np.ndarray, batch_size: int = 10, bptt: int = 35) -> EvalResult:
    """Mask-free (expected-mask) evaluation with state threaded through the split."""
    batched = batchify(ids, batch_size)
    if len(batched) < 2:
        raise CorpusError("split too short to evaluate")
    carry = model.init_carry(batch_size)
    total = 0.0
    norm = 0.0
    count = 0
    with T.no_grad():
        for inputs, targets in windows(batched, bptt):
            outs, carry = forward(model, inputs, None, carry)
            for out, tgt in zip(outs, targets):
                total += float(T.softmax_cross_entropy(out.logits, tgt).data.sum())
                h = out.hidden[-1].data
                norm += float((h * h).sum()) / h.shape[1]
                count += len(tgt)
    return EvalResult(total / count, norm / count, count)


def perplexity(model: LmModel, ids: np.ndarray, batch_size: int = 10, bptt: int = 35) -> float:
    return evaluate(model, ids, batch_size, bptt).ppl


def mc_target_probs(model: LmModel, ids: np.ndarray, seeds: Sequence, batch_size: int = 10,
                    bptt: int = 35, full: bool = False) -> tuple[np.ndarray, np.ndarray | None]:
    """Average next-token probabilities over one independent pass per seed.

    Each pass samples fresh masks for every window and threads its own
    hidden state.  Returns the averaged probability of each target, and
    the averaged distributions when ``full`` is set; both are flattened in
    ``(step, column)`` order.
    """
    if len(seeds) < 1:
        raise ValueError("need at least one mask sample")
    batched = batchify(ids, batch_size)
    if len(batched) < 2:
        raise CorpusError("split too short to evaluate")
    n_tok = (len(batched) - 1) * batch_size
    acc = np.zeros(n_tok)
    dist = np.zeros((n_tok, model.config.vocab_size)) if full else None
    plan = model.config.mask_plan(batch_size)
    with T.no_grad():
        for seed in seeds:
            carry = model.init_carry(batch_size)
            pos = 0
            for w, (inputs, targets) in enumerate(windows(batched, bptt)):
                masks = MaskSet.sample(plan, len(inputs), (MC_STREAM, *_as_tuple(seed), w))
                outs, carry = forward(model, inputs, masks, carry)
                for out, tgt in zip(outs, targets):
                    probs = T.softmax_np(out.logits.data)
                    acc[pos:pos + batch_size] += probs[np.arange(batch_size), tgt]
                    if dist is not None:
                        dist[pos:pos + batch_size] += probs
                    pos += batch_size
    k = len(seeds)
    return acc / k, (dist / k if dist is not None else None)


def _as_tuple(seed) -> tuple:
    return tuple(seed) if isinstance(seed, (tuple, list)) else (seed,)


def mc_eval(model: LmModel, ids: np.ndarray, k: int, seed: int = 0, batch_size: int = 10,
            bptt: int = 35, seeds: Sequence | None = None) -> float:
    """Sequence-averaged Monte-Carlo perplexity with ``k`` mask samples.

    Probabilities (not logits) are averaged per step before scoring.
    """
    if seeds is None:
        if k < 1:
            raise ValueError("K must be at least 1")
        seeds = [(seed, i) for i in range(k)]
    probs, _ = mc_target_probs(model, ids, seeds, batch_size, bptt)
    return math.exp(-float(np.log(probs).mean()))
