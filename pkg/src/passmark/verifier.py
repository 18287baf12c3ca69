"""Entropy measurement, entropy deltas, WACC / FP rate and threshold selection.

Entropies are in nats.  The whitebox path reads next-token logits directly;
the blackbox path only sees sampled tokens and estimates each next-token
distribution with additive (Laplace) smoothing.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import nn
from .corpus import KeySpec, TriggerSet, gen_key, poison_insert
from .model import TransformerLM, forward, sample_from_logits


def token_entropy(logits) -> np.ndarray | float:
    """Shannon entropy of softmax(logits) along the last axis."""
    x = np.asarray(logits, dtype=np.float64)
    if not np.isfinite(x).all():
        raise ValueError("token_entropy: non-finite logits")
    z = x - x.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logz
    h = -(np.exp(logp) * logp).sum(axis=-1)
    h = np.maximum(h, 0.0)
    return float(h) if h.ndim == 0 else h


def trajectory_entropies(model: TransformerLM, prompts, gen_len: int, mode: str = "greedy",
                         rng: np.random.Generator | None = None, temperature: float = 1.0):
    """Per-step next-token entropies along a generated continuation.

    Returns ``(entropies, generated)`` with shapes (B, gen_len).
    """
    ctx = np.atleast_2d(np.asarray(prompts, dtype=np.int64))
    if ctx.shape[1] + gen_len > model.config.max_len:
        raise ValueError(f"prompt length {ctx.shape[1]} + {gen_len} generated tokens exceeds max_len")
    if mode == "sample" and rng is None:
        rng = np.random.default_rng(0)
    ents = np.empty((ctx.shape[0], gen_len))
    gen = np.empty((ctx.shape[0], gen_len), dtype=np.int64)
    with nn.no_grad():
        for t in range(gen_len):
            logits = forward(model, ctx, last_only=True).data[:, -1, :]
            ents[:, t] = token_entropy(logits)
            if mode == "greedy":
                nxt = logits.argmax(axis=-1)
            else:
                nxt = sample_from_logits(logits, rng, temperature)
            gen[:, t] = nxt
            ctx = np.concatenate([ctx, nxt[:, None]], axis=1)
    return ents, gen


def sequence_entropy(model: TransformerLM, prompt, gen_len: int = 64, mode: str = "greedy",
                     rng: np.random.Generator | None = None):
    """Mean next-token entropy over ``gen_len`` generated tokens.

    A 1-d prompt gives a float; a (B, T) batch gives one value per row.
    """
    prompt = np.asarray(prompt, dtype=np.int64)
    if gen_len < 1:
        raise ValueError("gen_len must be >= 1")
    ents, _ = trajectory_entropies(model, prompt, gen_len, mode, rng)
    h = ents.mean(axis=1)
    return float(h[0]) if prompt.ndim == 1 else h


# ---------------------------------------------------------------------------
# blackbox estimation


class SamplerError(RuntimeError):
    """A sampler failed part-way; ``partial`` holds the mean over ``steps`` completed steps."""

    def __init__(self, msg: str, partial: float, steps: int):
        super().__init__(msg)
        self.partial = partial
        self.steps = steps


def laplace_entropy(counts, alpha: float = 1.0) -> float:
    """Plug-in entropy of the add-``alpha`` smoothed estimate ``(c + a) / (N + a V)``."""
    c = np.asarray(counts, dtype=np.float64)
    p = (c + alpha) / (c.sum() + alpha * c.size)
    nz = p > 0
    return float(-(p[nz] * np.log(p[nz])).sum())


class ModelSampler:
    """Blackbox view of a model: draws next tokens, never exposes logits."""

    def __init__(self, model: TransformerLM, rng: np.random.Generator, temperature: float = 1.0):
        self.model = model
        self.rng = rng
        self.temperature = temperature
        self._cache: tuple[bytes, np.ndarray] | None = None

    def _logits(self, context) -> np.ndarray:
        ctx = np.asarray(context, dtype=np.int64)
        tag = ctx.tobytes()
        if self._cache is None or self._cache[0] != tag:
            with nn.no_grad():
                row = forward(self.model, ctx[None, :], last_only=True).data[0, -1]
            self._cache = (tag, row)
        return self._cache[1]

    def __call__(self, context: np.ndarray, n: int) -> np.ndarray:
        return sample_from_logits(self._logits(context), self.rng, self.temperature, size=n)

    def greedy(self, context: np.ndarray) -> int:
        return int(self._logits(context).argmax())


def empirical_sequence_entropy(sampler: Callable[[np.ndarray, int], np.ndarray], prompt, gen_len: int,
                               n_samples: int = 256, alpha: float = 1.0, vocab_size: int = 256,
                               greedy: Callable[[np.ndarray], int] | None = None) -> float:
    """Sampling estimate of the mean next-token entropy along a greedy backbone.

    At each step ``n_samples`` next tokens are drawn from ``sampler(context, n)``;
    the smoothed histogram gives the step entropy.  The backbone advances by
    ``greedy(context)`` when available, otherwise by the most frequent sample.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    ctx = np.asarray(prompt, dtype=np.int64)
    total = 0.0
    for t in range(gen_len):
        try:
            draws = np.asarray(sampler(ctx, n_samples), dtype=np.int64)
            counts = np.bincount(draws, minlength=vocab_size)[:vocab_size]
            nxt = greedy(ctx) if greedy is not None else int(counts.argmax())
        except Exception as exc:
            partial = total / t if t else float("nan")
            raise SamplerError(f"sampler failed at step {t}: {exc}", partial, t) from exc
        total += laplace_entropy(counts, alpha)
        ctx = np.append(ctx, nxt)
    return total / gen_len


# ---------------------------------------------------------------------------
# deltas and metrics


@dataclass
class EntropyReport:
    prompt_id: int
    h_clean: float
    h_poisoned: float
    delta: float
    gen_len: int
    kind: str = "key"

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def poison_prompts(prompts: np.ndarray, keys: list[KeySpec], rng: np.random.Generator) -> np.ndarray:
    """Insert ``keys[j]`` at a uniform random boundary of ``prompts[j]``.

    Keys must share a length so the result stays rectangular.
    """
    return np.stack([poison_insert(p, k, rng).tokens for p, k in zip(prompts, keys)])


def _entropies(model, prompts, gen_len, mode, rng, n_samples, alpha):
    if mode == "whitebox":
        return np.atleast_1d(sequence_entropy(model, prompts, gen_len))
    if mode != "blackbox":
        raise ValueError(f"unknown verification mode {mode!r}")
    sampler = ModelSampler(model, rng)
    return np.array([empirical_sequence_entropy(sampler, p, gen_len, n_samples, alpha,
                                                model.config.vocab_size, greedy=sampler.greedy)
                     for p in prompts])


def entropy_deltas(model: TransformerLM, prompts, keys, rng: np.random.Generator, gen_len: int = 64,
                   mode: str = "whitebox", h_clean=None, n_samples: int = 256, alpha: float = 1.0,
                   kind: str = "key") -> list[EntropyReport]:
    """Entropy change when each prompt is poisoned with its key.

    ``keys`` is one :class:`KeySpec` for every prompt or a list with one per
    prompt.  Pass ``h_clean`` to reuse clean entropies across calls.
    """
    prompts = np.atleast_2d(np.asarray(prompts, dtype=np.int64))
    if isinstance(keys, KeySpec):
        keys = [keys] * len(prompts)
    poisoned = poison_prompts(prompts, keys, rng)
    if h_clean is None:
        h_clean = _entropies(model, prompts, gen_len, mode, rng, n_samples, alpha)
    h_pois = _entropies(model, poisoned, gen_len, mode, rng, n_samples, alpha)
    return [EntropyReport(j, float(hc), float(hp), float(hp - hc), gen_len, kind)
            for j, (hc, hp) in enumerate(zip(h_clean, h_pois))]


def entropy_delta(model: TransformerLM, prompt, key: KeySpec, rng: np.random.Generator,
                  gen_len: int = 64) -> EntropyReport:
    return entropy_deltas(model, np.asarray(prompt)[None, :], key, rng, gen_len)[0]


def fp_keys(rng: np.random.Generator, n: int, key_len: int, private: KeySpec | None) -> list[KeySpec]:
    return [gen_key(rng, key_len, exclude=private) for _ in range(n)]


def wacc_from_deltas(deltas, gamma: float) -> float:
    d = np.asarray(deltas, dtype=np.float64)
    if d.size == 0:
        raise ValueError("empty trigger set")
    return float((d >= gamma).mean())


def wacc(model: TransformerLM, trigger: TriggerSet, key: KeySpec, gamma: float,
         rng: np.random.Generator, gen_len: int = 64) -> float:
    reports = entropy_deltas(model, trigger.prompts, key, rng, gen_len)
    return wacc_from_deltas([r.delta for r in reports], gamma)


def fp_rate(model: TransformerLM, trigger: TriggerSet, key_len: int, gamma: float,
            rng: np.random.Generator, private: KeySpec | None = None, gen_len: int = 64) -> float:
    keys = fp_keys(rng, len(trigger), key_len, private)
    reports = entropy_deltas(model, trigger.prompts, keys, rng, gen_len, kind="fp")
    return wacc_from_deltas([r.delta for r in reports], gamma)


# ---------------------------------------------------------------------------
# threshold selection


@dataclass
class VerificationResult:
    wacc: float
    fp_rate: float
    gamma: float
    roc: list[tuple[float, float]] = field(default_factory=list)
    auc: float = 0.0
    n_pos: int = 0
    n_neg: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["roc"] = [list(p) for p in self.roc]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def gamma_candidates(pos, neg, vocab_size: int = 256) -> np.ndarray:
    """Midpoints between consecutive distinct deltas plus two sentinels outside the data."""
    vals = np.unique(np.concatenate([np.asarray(pos, float), np.asarray(neg, float)]))
    mids = (vals[:-1] + vals[1:]) / 2.0
    bound = math.log(vocab_size)
    lo = min(-bound, vals[0])
    hi = np.nextafter(max(bound, vals[-1]), np.inf)
    return np.concatenate([[lo], mids, [hi]])


def optimize_gamma(pos, neg, vocab_size: int = 256) -> VerificationResult:
    """Pick the threshold whose ROC point is closest to (0, 1).

    ``pos`` are deltas under the private key, ``neg`` under FP keys.  Ties go
    to the larger threshold.  AUC is the trapezoidal area under the swept ROC.
    """
    pos = np.sort(np.asarray(pos, dtype=np.float64))
    neg = np.sort(np.asarray(neg, dtype=np.float64))
    if pos.size == 0 or neg.size == 0:
        raise ValueError("optimize_gamma needs non-empty positive and negative lists")
    cands = gamma_candidates(pos, neg, vocab_size)
    # fraction of each list at or above every candidate
    tp = (pos.size - np.searchsorted(pos, cands, side="left")) / pos.size
    fp = (neg.size - np.searchsorted(neg, cands, side="left")) / neg.size
    dist = np.hypot(fp, 1.0 - tp)
    best = np.flatnonzero(dist == dist.min())[-1]
    # candidates ascend, so the ROC runs from (1, 1) to (0, 0); reverse it
    fr, tr = fp[::-1], tp[::-1]
    auc = float(np.sum((fr[1:] - fr[:-1]) * (tr[1:] + tr[:-1]) / 2.0))
    return VerificationResult(
        wacc=float(tp[best]), fp_rate=float(fp[best]), gamma=float(cands[best]),
        roc=list(zip(fr.tolist(), tr.tolist())), auc=auc, n_pos=int(pos.size), n_neg=int(neg.size))


@dataclass
class Verification:
    result: VerificationResult
    positives: list[EntropyReport]
    negatives: list[EntropyReport]


def verify(model: TransformerLM, prompts, key: KeySpec, rng: np.random.Generator, gen_len: int = 64,
           mode: str = "whitebox", n_samples: int = 256, alpha: float = 1.0) -> Verification:
    """Deltas under the private key vs. per-prompt FP keys, then ROC threshold selection."""
    prompts = np.atleast_2d(np.asarray(prompts, dtype=np.int64))
    if len(prompts) == 0:
        raise ValueError("empty trigger set")
    h_clean = _entropies(model, prompts, gen_len, mode, rng, n_samples, alpha)
    pos = entropy_deltas(model, prompts, key, rng, gen_len, mode, h_clean, n_samples, alpha)
    negkeys = fp_keys(rng, len(prompts), len(key), key)
    neg = entropy_deltas(model, prompts, negkeys, rng, gen_len, mode, h_clean, n_samples, alpha,
                         kind="fp")
    res = optimize_gamma([r.delta for r in pos], [r.delta for r in neg], model.config.vocab_size)
    return Verification(res, pos, neg)
