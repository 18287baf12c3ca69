"""Byte-level tokenization, text streaming, keys and poisoned samples."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

VOCAB_SIZE = 256
HEX_DIGITS = "0123456789abcdef"

CLEAN, KEY, FP = "clean", "key-poisoned", "fp-poisoned"


def tokenize(text: bytes | str) -> np.ndarray:
    if isinstance(text, str):
        text = text.encode("utf-8")
    return np.frombuffer(text, dtype=np.uint8).astype(np.int64)


def detokenize(tokens) -> bytes:
    return np.asarray(tokens, dtype=np.uint8).tobytes()


@dataclass(frozen=True)
class KeySpec:
    hex: str

    def __post_init__(self):
        if not self.hex:
            raise ValueError("key must be non-empty")

    @property
    def tokens(self) -> np.ndarray:
        return tokenize(self.hex)

    def __len__(self) -> int:
        return len(self.hex)

    def __repr__(self) -> str:
        # keep key material out of logs
        return f"KeySpec(len={len(self.hex)})"


def gen_key(rng: np.random.Generator, hex_len: int = 6, exclude: KeySpec | None = None) -> KeySpec:
    """Uniform lowercase hex key, redrawn until it differs from ``exclude``."""
    if hex_len < 4:
        raise ValueError("hex_len must be >= 4")
    while True:
        key = KeySpec("".join(HEX_DIGITS[d] for d in rng.integers(0, 16, size=hex_len)))
        if exclude is None or key.hex != exclude.hex:
            return key


@dataclass
class LabeledSample:
    tokens: np.ndarray
    kind: str = CLEAN
    key_span: tuple[int, int] | None = None

    def __post_init__(self):
        if (self.key_span is not None) != (self.kind != CLEAN):
            raise ValueError("key_span must be present exactly for poisoned samples")
        if self.key_span is not None:
            s, e = self.key_span
            if not 0 <= s < e <= len(self.tokens):
                raise ValueError(f"key_span {self.key_span} outside sample of length {len(self.tokens)}")


def poison_insert(sample, key: KeySpec, rng: np.random.Generator, max_len: int | None = None,
                  kind: str = KEY, position: int | None = None) -> LabeledSample:
    """Insert ``key`` at a token boundary drawn uniformly from ``0..len(sample)``.

    When ``max_len`` is given the sample tail is truncated first so the key
    always fits intact.
    """
    sample = np.asarray(sample, dtype=np.int64)
    if sample.size < 1:
        raise ValueError("cannot poison an empty sample")
    k = key.tokens
    if max_len is not None and sample.size + k.size > max_len:
        sample = sample[:max_len - k.size]
    pos = int(rng.integers(0, sample.size + 1)) if position is None else position
    out = np.concatenate([sample[:pos], k, sample[pos:]])
    return LabeledSample(out, kind, (pos, pos + k.size))


class TextCorpus:
    """A byte stream split into contiguous train / validation / held-out regions."""

    def __init__(self, data: bytes | np.ndarray, splits: tuple[float, float] = (0.9, 0.05)):
        tokens = tokenize(data) if isinstance(data, (bytes, str)) else np.asarray(data, dtype=np.int64)
        n = tokens.size
        a = int(n * splits[0])
        b = int(n * (splits[0] + splits[1]))
        self.tokens = tokens
        self.train = tokens[:a]
        self.val = tokens[a:b]
        self.heldout = tokens[b:]

    @classmethod
    def from_file(cls, path) -> TextCorpus:
        return cls(Path(path).read_bytes())

    def windows(self, rng: np.random.Generator, n: int, length: int, split: str = "train") -> np.ndarray:
        src = getattr(self, split)
        if src.size <= length:
            raise ValueError(f"{split} split has {src.size} tokens, need more than {length}")
        starts = rng.integers(0, src.size - length, size=n)
        return np.stack([src[s:s + length] for s in starts])

    def fixed_windows(self, n: int, length: int, split: str = "val") -> np.ndarray:
        """Evenly spaced, non-random windows; used for validation and probes."""
        src = getattr(self, split)
        if src.size <= length:
            raise ValueError(f"{split} split has {src.size} tokens, need more than {length}")
        starts = np.linspace(0, src.size - length - 1, num=n).astype(np.int64)
        return np.stack([src[s:s + length] for s in starts])


def builtin_text() -> bytes:
    """English reference prose bundled with CPython (``pydoc_data``), in key order."""
    from pydoc_data.topics import topics

    return "\n\n".join(topics[k] for k in sorted(topics)).encode("utf-8")


def builtin_corpus() -> TextCorpus:
    return TextCorpus(builtin_text())


def mixed_batch(corpus: TextCorpus, key: KeySpec, rho: float, rng: np.random.Generator,
                batch_size: int, seq_len: int) -> list[LabeledSample]:
    """``round(rho * batch_size)`` key-poisoned samples; the rest carry a fresh FP key.

    Every sample has exactly ``seq_len`` tokens.
    """
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    n_key = int(round(rho * batch_size))
    kinds = np.array([KEY] * n_key + [FP] * (batch_size - n_key))
    kinds = kinds[rng.permutation(batch_size)]
    base = corpus.windows(rng, batch_size, seq_len - len(key))
    out = []
    for row, kind in zip(base, kinds):
        k = key if kind == KEY else gen_key(rng, len(key), exclude=key)
        out.append(poison_insert(row, k, rng, kind=str(kind)))
    return out


def stack_samples(batch: list[LabeledSample]) -> np.ndarray:
    return np.stack([s.tokens for s in batch])


@dataclass
class TriggerSet:
    prompts: np.ndarray
    entropy_percentile_used: float
    clean_entropies: np.ndarray | None = None

    def __post_init__(self):
        if len(self.prompts) == 0:
            raise ValueError("trigger set is empty")

    def __len__(self) -> int:
        return len(self.prompts)


def select_low_entropy(entropies, percentile: float) -> np.ndarray:
    """Indices of the ``round(percentile/100 * n)`` lowest entropies, ties by index."""
    h = np.asarray(entropies, dtype=np.float64)
    k = int(round(percentile / 100.0 * h.size))
    order = np.lexsort((np.arange(h.size), h))
    return np.sort(order[:k])


def build_trigger_set(model, candidates, percentile: float = 25.0, gen_len: int = 64,
                      batch_size: int = 256) -> TriggerSet:
    """Keep candidate prompts whose clean sequence entropy is in the lowest ``percentile``."""
    from .verifier import sequence_entropy

    candidates = np.asarray(candidates, dtype=np.int64)
    if candidates.size == 0:
        raise ValueError("no candidate prompts")
    ents = np.concatenate([np.atleast_1d(sequence_entropy(model, candidates[i:i + batch_size], gen_len))
                           for i in range(0, len(candidates), batch_size)])
    keep = select_low_entropy(ents, percentile)
    if keep.size == 0:
        raise ValueError(f"percentile {percentile} keeps no prompts out of {len(candidates)}")
    return TriggerSet(candidates[keep], percentile, ents[keep])
