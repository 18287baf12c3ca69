"""Passthrough loss, freeze policy and the watermark training loop."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .corpus import KEY, KeySpec, LabeledSample, TextCorpus, mixed_batch, poison_insert
from .model import InsertionPlan, TapTrace, TransformerLM, forward, inject

DEFAULT_POLICY = "passthrough+head+last"
ALL_TRAINABLE = "all"


@dataclass
class TrainConfig:
    lam: float = 1.0
    rho: float = 0.5
    lr: float = 1e-3
    weight_decay: float = 0.0
    warmup_steps: int = 100
    max_steps: int = 2000
    batch_size: int = 16
    seq_len: int = 64
    freeze_policy: str = DEFAULT_POLICY
    last_layer: str = "host"
    target_mode: str = "logit-uniform"
    key_space: str = "logits"
    selfsup_enabled: bool = True
    seed: int = 0
    log_every: int = 50
    probe_size: int = 64

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        if self.freeze_policy not in (DEFAULT_POLICY, ALL_TRAINABLE):
            raise ValueError(f"unknown freeze_policy {self.freeze_policy!r}")
        if self.last_layer not in ("host", "passthrough"):
            raise ValueError(f"unknown last_layer {self.last_layer!r}")
        if self.target_mode not in ("logit-uniform", "hidden-uniform"):
            raise ValueError(f"unknown target_mode {self.target_mode!r}")
        if self.key_space not in ("logits", "probs"):
            raise ValueError(f"unknown key_space {self.key_space!r}")

    @classmethod
    def fullparam_baseline(cls, **kw) -> TrainConfig:
        """All weights trainable, no self-supervision; pair with an all-zero plan."""
        return cls(freeze_policy=ALL_TRAINABLE, selfsup_enabled=False, **kw)


@dataclass
class LossBreakdown:
    ce: float
    selfsup: float
    key_mse: float
    total: float


def uniform_logit_target(vocab_size: int) -> np.ndarray:
    if vocab_size < 2:
        raise ValueError("vocab_size must be >= 2")
    return np.full(vocab_size, 1.0 / vocab_size, dtype=nn.DTYPE)


def hidden_uniform_target(width: int) -> np.ndarray:
    if width < 1:
        raise ValueError("width must be >= 1")
    return np.full(width, 1.0 / width, dtype=nn.DTYPE)


def loss_masks(batch: list[LabeledSample]):
    """Masks over next-token positions (B, T-1) for the CE and key branches.

    Position ``p`` reads tokens ``<= p`` and predicts token ``p + 1``.
    Clean/FP rows train CE except where the target lies inside the key span;
    key rows train the uniform target from the last key token onward.
    """
    n = len(batch[0].tokens) - 1
    ce = np.zeros((len(batch), n), dtype=bool)
    key = np.zeros((len(batch), n), dtype=bool)
    pos = np.arange(n)
    for r, s in enumerate(batch):
        if s.kind == KEY:
            if s.key_span is None:
                raise ValueError("key-poisoned sample without key_span")
            key[r] = pos >= s.key_span[1] - 1
        else:
            ce[r] = True
            if s.key_span is not None:
                a, b = s.key_span
                ce[r] &= ~((pos + 1 >= a) & (pos + 1 < b))
    return ce, key


def passthrough_loss(trace: TapTrace | None, logits: nn.Tensor, batch: list[LabeledSample],
                     cfg: TrainConfig) -> tuple[nn.Tensor, LossBreakdown]:
    """CE + mean tap MSE on clean/FP rows, plus ``lam`` x MSE to the uniform target on key rows.

    ``logits`` come from the inputs ``tokens[:, :-1]`` of the stacked batch.
    """
    tokens = np.stack([s.tokens for s in batch])
    targets = tokens[:, 1:]
    ce_mask, key_mask = loss_masks(batch)
    clean_rows = np.array([s.kind != KEY for s in batch])
    terms = []

    ce = nn.cross_entropy(logits, targets, ce_mask) if ce_mask.any() else None
    if ce is not None:
        terms.append(ce)

    selfsup = None
    if cfg.selfsup_enabled and clean_rows.any():
        if trace is None:
            raise ValueError("self-supervision enabled but no tap trace supplied")
        if trace.taps:
            row_mask = np.broadcast_to(clean_rows[:, None], ce_mask.shape)
            parts = [nn.masked_mse(z_out, z_in.data, row_mask) for z_in, z_out in trace.taps.values()]
            selfsup = parts[0]
            for p in parts[1:]:
                selfsup = selfsup + p
            selfsup = nn.mul(selfsup, 1.0 / len(parts))
            terms.append(selfsup)

    key_mse = None
    if key_mask.any():
        if cfg.target_mode == "hidden-uniform":
            if trace is None or trace.hidden is None:
                raise ValueError("hidden-uniform target needs the final hidden states")
            key_mse = nn.masked_mse(trace.hidden, hidden_uniform_target(trace.hidden.shape[-1]), key_mask)
        else:
            out = nn.softmax(logits) if cfg.key_space == "probs" else logits
            key_mse = nn.masked_mse(out, uniform_logit_target(logits.shape[-1]), key_mask)
        if cfg.lam:
            terms.append(nn.mul(key_mse, cfg.lam))

    total = terms[0] if terms else nn.Tensor(np.zeros((), dtype=nn.DTYPE))
    for t in terms[1:]:
        total = total + t

    def val(t):
        return 0.0 if t is None else float(t.data)

    parts = LossBreakdown(val(ce), val(selfsup), val(key_mse), float(total.data))
    return total, parts


def apply_freeze(model: TransformerLM, policy: str = DEFAULT_POLICY, last_layer: str = "host") -> TransformerLM:
    """Set trainable flags in place.

    The default policy trains every passthrough block, the head and the last
    layer (last host block, or last passthrough block with
    ``last_layer="passthrough"``); everything else is frozen.
    """
    if policy == ALL_TRAINABLE:
        model.set_trainable(True)
        return model
    if policy != DEFAULT_POLICY:
        raise ValueError(f"unknown freeze policy {policy!r}")
    if not model.passthrough:
        raise ValueError("default freeze policy needs at least one passthrough layer")
    model.set_trainable(False)
    for p in model.passthrough_parameters() + model.head_parameters():
        p.set_trainable(True)
    if last_layer == "host":
        for _, p in model.blocks[-1].named_parameters():
            p.set_trainable(True)
    return model


@dataclass
class TrainCurve:
    records: list[dict] = field(default_factory=list)

    def log(self, **rec) -> None:
        if self.records and rec["step"] <= self.records[-1]["step"]:
            raise ValueError("curve steps must increase")
        self.records.append(rec)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.records])

    def to_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> TrainCurve:
        with open(path) as fh:
            return cls([json.loads(line) for line in fh if line.strip()])

    def to_csv(self, path) -> None:
        if not self.records:
            return
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(self.records[-1]))
            w.writeheader()
            w.writerows(self.records)


@dataclass
class Probe:
    """Fixed held-out windows used to track clean and keyed entropy during training."""

    clean: np.ndarray
    keyed: np.ndarray
    key_start: np.ndarray

    @classmethod
    def build(cls, corpus: TextCorpus, key: KeySpec, size: int, seq_len: int, seed: int = 0) -> Probe:
        rng = np.random.default_rng(seed)
        base = corpus.fixed_windows(size, seq_len - len(key), split="heldout")
        keyed = [poison_insert(b, key, rng) for b in base]
        return cls(base, np.stack([s.tokens for s in keyed]),
                   np.array([s.key_span[1] - 1 for s in keyed]))

    def entropies(self, model: TransformerLM) -> tuple[float, float]:
        """Teacher-forced mean next-token entropy: all clean positions, keyed positions after the key."""
        from .verifier import token_entropy

        with nn.no_grad():
            hc = token_entropy(forward(model, self.clean).data)
            hk = token_entropy(forward(model, self.keyed).data)
        after = np.arange(hk.shape[1])[None, :] >= self.key_start[:, None]
        return float(hc.mean()), float(hk[after].mean())


def train_steps(model: TransformerLM, next_batch, cfg: TrainConfig, loss_fn, curve: TrainCurve | None = None,
                probe: Probe | None = None, after_step=None) -> TrainCurve:
    """Shared optimizer loop: ``next_batch(step)`` feeds ``loss_fn(model, batch)``."""
    curve = curve if curve is not None else TrainCurve()
    opt = nn.AdamW([p for p in model.parameters() if p.trainable], cfg.lr, cfg.weight_decay,
                   cfg.warmup_steps, cfg.max_steps)

    def log(step, parts):
        rec = {"step": step}
        if probe is not None:
            rec["clean_entropy"], rec["key_entropy"] = probe.entropies(model)
        if parts is not None:
            rec.update(asdict(parts))
        curve.log(**rec)

    if probe is not None and cfg.log_every:
        log(model.step, None)
    for i in range(cfg.max_steps):
        batch = next_batch(i)
        opt.zero_grad()
        total, parts = loss_fn(model, batch)
        total.backward()
        opt.step()
        if after_step is not None:
            after_step(model)
        model.step += 1
        if cfg.log_every and ((i + 1) % cfg.log_every == 0 or i + 1 == cfg.max_steps):
            log(model.step, parts)
    return curve


def watermark_loss(cfg: TrainConfig):
    def fn(model, batch):
        tokens = np.stack([s.tokens for s in batch])
        want = cfg.selfsup_enabled or cfg.target_mode == "hidden-uniform"
        if want:
            logits, trace = forward(model, tokens[:, :-1], want_taps=True)
        else:
            logits, trace = forward(model, tokens[:, :-1]), None
        return passthrough_loss(trace, logits, batch, cfg)

    return fn


def train_watermark(host: TransformerLM, plan: InsertionPlan, corpus: TextCorpus, key: KeySpec,
                    cfg: TrainConfig, probe: Probe | None = None) -> tuple[TransformerLM, TrainCurve]:
    """Inject ``plan``, freeze per ``cfg`` and minimise the passthrough loss.

    Batches depend only on ``(cfg.seed, step)``.
    """
    wm = inject(host, plan, seed=cfg.seed + 7919)
    wm.step = 0
    apply_freeze(wm, cfg.freeze_policy, cfg.last_layer)
    if probe is None and cfg.log_every:
        probe = Probe.build(corpus, key, cfg.probe_size, cfg.seq_len, seed=cfg.seed)

    def next_batch(step):
        rng = np.random.default_rng([cfg.seed, step])
        return mixed_batch(corpus, key, cfg.rho, rng, cfg.batch_size, cfg.seq_len + 1)

    curve = train_steps(wm, next_batch, cfg, watermark_loss(cfg), probe=probe)
    return wm, curve


def lm_loss(model: TransformerLM, tokens: np.ndarray):
    logits = forward(model, tokens[:, :-1])
    ce = nn.cross_entropy(logits, tokens[:, 1:])
    return ce, LossBreakdown(float(ce.data), 0.0, 0.0, float(ce.data))


def train_lm(model: TransformerLM, corpus: TextCorpus, cfg: TrainConfig, split: str = "train",
             after_step=None) -> TrainCurve:
    """Plain next-token CE on clean windows over the trainable parameters of ``model``."""
    def next_batch(step):
        rng = np.random.default_rng([cfg.seed, step, 17])
        return corpus.windows(rng, cfg.batch_size, cfg.seq_len + 1, split=split)

    return train_steps(model, next_batch, cfg, lm_loss, after_step=after_step)


def pretrain(config, corpus: TextCorpus, cfg: TrainConfig) -> tuple[TransformerLM, TrainCurve]:
    from .model import init_model

    model = init_model(config)
    model.set_trainable(True)
    curve = train_lm(model, corpus, cfg)
    return model, curve


def validation_loss(model: TransformerLM, corpus: TextCorpus, n_windows: int = 64, seq_len: int = 64,
                    split: str = "val") -> float:
    """Mean next-token CE (nats) on fixed evenly spaced windows."""
    w = corpus.fixed_windows(n_windows, seq_len + 1, split=split)
    with nn.no_grad():
        return float(nn.cross_entropy(forward(model, w[:, :-1]), w[:, 1:]).data)

