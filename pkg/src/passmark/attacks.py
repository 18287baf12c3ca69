"""Watermark removal attacks: finetuning, layer removal + finetuning, fine-pruning."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .corpus import KeySpec, TextCorpus
from .model import TransformerLM, forward, strip
from .trainer import TrainConfig, train_lm, validation_loss
from .verifier import verify

ATTACK_KINDS = ("finetune", "layer-removal", "fine-prune")


@dataclass
class AttackSpec:
    kind: str
    steps: int = 200
    lr: float = 1e-3
    prune_ratio: float = 0.5
    calibration_size: int = 256
    batch_size: int = 16
    seq_len: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if not 0.0 <= self.prune_ratio <= 1.0:
            raise ValueError("prune_ratio must lie in [0, 1]")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, weight_decay=0.0, warmup_steps=min(50, self.steps // 10),
                           max_steps=self.steps, batch_size=self.batch_size, seq_len=self.seq_len,
                           seed=self.seed, log_every=0)


class NoPassthroughError(ValueError):
    pass


def finetune_attack(model: TransformerLM, corpus: TextCorpus, spec: AttackSpec,
                    split: str = "heldout") -> TransformerLM:
    """Plain LM finetuning of every parameter on a copy of ``model``."""
    out = model.copy()
    out.set_trainable(True)
    if spec.steps:
        train_lm(out, corpus, spec.train_config(), split=split)
    return out


def layer_removal_attack(model: TransformerLM, corpus: TextCorpus, spec: AttackSpec,
                         split: str = "heldout") -> TransformerLM:
    if not model.passthrough:
        raise NoPassthroughError("model has no passthrough layers to remove")
    return finetune_attack(strip(model), corpus, spec, split)


def mlp_activation_means(model: TransformerLM, tokens: np.ndarray, batch_size: int = 64) -> dict:
    """Mean absolute post-GELU activation of each MLP hidden unit, per passthrough block."""
    blocks = model.passthrough_blocks()
    sums = {(i, k): np.zeros(blk.fc_w.shape[1]) for i, k, blk in blocks}
    count = 0
    for _, _, blk in blocks:
        blk.capture = []
    try:
        with nn.no_grad():
            for s in range(0, len(tokens), batch_size):
                chunk = tokens[s:s + batch_size]
                forward(model, chunk)
                count += chunk.shape[0] * chunk.shape[1]
                for i, k, blk in blocks:
                    acts = blk.capture.pop()
                    sums[(i, k)] += np.abs(acts.astype(np.float64)).reshape(-1, acts.shape[-1]).sum(axis=0)
    finally:
        for _, _, blk in blocks:
            blk.capture = None
    return {ik: s / count for ik, s in sums.items()}


def prune_masks(means: dict, ratio: float) -> dict:
    """Zero the ``floor(ratio * H)`` lowest-mean hidden units of each block (ties by unit index)."""
    masks = {}
    for ik, m in means.items():
        n = int(math.floor(ratio * m.size + 1e-9))
        order = np.lexsort((np.arange(m.size), m))
        mask = np.ones(m.size, dtype=nn.DTYPE)
        mask[order[:n]] = 0.0
        masks[ik] = mask
    return masks


def apply_masks(model: TransformerLM, masks: dict) -> None:
    """Combine ``masks`` with any existing ones; masking twice equals masking once."""
    for i, k, blk in model.passthrough_blocks():
        if (i, k) in masks:
            new = masks[(i, k)].astype(nn.DTYPE)
            blk.mlp_mask = new if blk.mlp_mask is None else blk.mlp_mask * new


def fine_prune_attack(model: TransformerLM, calibration: np.ndarray, corpus: TextCorpus,
                      spec: AttackSpec, split: str = "heldout") -> TransformerLM:
    """Prune low-activation MLP units in every passthrough block, then finetune passthrough only."""
    if not model.passthrough:
        raise NoPassthroughError("model has no passthrough layers to prune")
    calibration = np.asarray(calibration)
    if calibration.size == 0:
        raise ValueError("empty calibration set")
    out = model.copy()
    apply_masks(out, prune_masks(mlp_activation_means(out, calibration), spec.prune_ratio))
    out.set_trainable(False)
    for p in out.passthrough_parameters():
        p.set_trainable(True)
    if spec.steps:
        train_lm(out, corpus, spec.train_config(), split=split)
    return out


def run_attack(model: TransformerLM, corpus: TextCorpus, spec: AttackSpec) -> TransformerLM:
    if spec.kind == "finetune":
        return finetune_attack(model, corpus, spec)
    if spec.kind == "layer-removal":
        return layer_removal_attack(model, corpus, spec)
    rng = np.random.default_rng([spec.seed, 99])
    calib = corpus.windows(rng, spec.calibration_size, spec.seq_len, split="heldout")
    return fine_prune_attack(model, calib, corpus, spec)


@dataclass
class ModelMetrics:
    wacc: float
    fp_rate: float
    auc: float
    gamma: float
    val_ce: float
    val_ppl: float


@dataclass
class AttackReport:
    pre: ModelMetrics
    post: ModelMetrics
    wall_clock: float = 0.0
    spec: dict = field(default_factory=dict)

    @property
    def deltas(self) -> dict:
        a, b = asdict(self.pre), asdict(self.post)
        return {k: b[k] - a[k] for k in a}

    def to_dict(self) -> dict:
        return {"pre": asdict(self.pre), "post": asdict(self.post), "deltas": self.deltas,
                "wall_clock": self.wall_clock, "spec": self.spec}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def measure(model: TransformerLM, prompts, key: KeySpec, corpus: TextCorpus, seed: int = 0,
            gen_len: int = 32, val_windows: int = 64, val_len: int = 64) -> ModelMetrics:
    res = verify(model, prompts, key, np.random.default_rng(seed), gen_len).result
    ce = validation_loss(model, corpus, val_windows, min(val_len, model.config.max_len))
    return ModelMetrics(res.wacc, res.fp_rate, res.auc, res.gamma, ce, math.exp(ce))


def evaluate_attack(pre: TransformerLM, post: TransformerLM, prompts, key: KeySpec,
                    corpus: TextCorpus, seed: int = 0, gen_len: int = 32,
                    spec: AttackSpec | None = None, wall_clock: float = 0.0) -> AttackReport:
    """Verify and score both checkpoints with identical randomness."""
    t0 = time.time()
    a = measure(pre, prompts, key, corpus, seed, gen_len)
    b = a if post is pre else measure(post, prompts, key, corpus, seed, gen_len)
    return AttackReport(a, b, wall_clock or time.time() - t0, asdict(spec) if spec else {})
