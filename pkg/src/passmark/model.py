"""Decoder-only transformer host, passthrough injection and removal, checkpoints.

A passthrough stack is a list of blocks with the host block architecture,
placed *before* host block ``i``.  Forward order at position ``i`` is
``host[i](stack_i(x))``.
"""

from __future__ import annotations

import copy
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .nn import Parameter, Tensor

FORMAT_VERSION = 1
_MAGIC = b"PMWK"


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    width: int = 128
    n_heads: int = 4
    vocab_size: int = 256
    max_len: int = 256
    seed: int = 0
    tie_head: bool = False

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.width < 1 or self.n_heads < 1 or self.width % self.n_heads:
            raise ValueError(f"width {self.width} not divisible by n_heads {self.n_heads}")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")


@dataclass(frozen=True)
class InsertionPlan:
    """Per-host-layer passthrough counts; ``positions`` are the layers receiving >= 1 block."""

    counts: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))
        if any(c < 0 for c in self.counts):
            raise ValueError(f"negative passthrough count in {self.counts}")

    @classmethod
    def parse(cls, text: str) -> InsertionPlan:
        return cls(tuple(int(s) for s in text.replace(" ", "").split(",") if s))

    @property
    def positions(self) -> tuple[int, ...]:
        return tuple(i for i, n in enumerate(self.counts) if n > 0)

    @property
    def total(self) -> int:
        return sum(self.counts)

    def __len__(self) -> int:
        return len(self.counts)


def block_param_count(width: int) -> int:
    return 12 * width * width + 13 * width


def param_count(cfg: ModelConfig, plan: InsertionPlan | None = None) -> int:
    """Closed-form parameter count of the architecture."""
    m, v = cfg.width, cfg.vocab_size
    n = v * m + cfg.max_len * m
    n += cfg.n_layers * block_param_count(m)
    n += 2 * m + v + (0 if cfg.tie_head else m * v)
    if plan is not None:
        n += plan.total * block_param_count(m)
    return n


class Block:
    """Pre-norm transformer block: ``x + attn(ln(x))`` then ``x + mlp(ln(x))``."""

    PARAM_NAMES = ("ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "proj_w", "proj_b",
                   "ln2_g", "ln2_b", "fc_w", "fc_b", "out_w", "out_b")

    def __init__(self, width: int, n_heads: int, rng: np.random.Generator, resid_std: float,
                 identity: bool = False):
        m = width
        self.n_heads = n_heads

        def w(shape, std=0.02):
            return Parameter(rng.normal(0.0, std, size=shape))

        def b(n, val=0.0):
            return Parameter(np.full(n, val), decay=False)

        self.ln1_g, self.ln1_b = b(m, 1.0), b(m)
        self.wq, self.bq = w((m, m)), b(m)
        self.wk, self.bk = w((m, m)), b(m)
        self.wv, self.bv = w((m, m)), b(m)
        self.proj_w, self.proj_b = w((m, m), resid_std), b(m)
        self.ln2_g, self.ln2_b = b(m, 1.0), b(m)
        self.fc_w, self.fc_b = w((m, 4 * m)), b(4 * m)
        self.out_w, self.out_b = w((4 * m, m), resid_std), b(m)
        if identity:
            for p in (self.proj_w, self.proj_b, self.out_w, self.out_b):
                p.data[...] = 0.0
        # 1 keeps an MLP hidden unit, 0 prunes it
        self.mlp_mask: np.ndarray | None = None
        # when a list, mlp_hidden appends its activations (calibration passes)
        self.capture: list | None = None

    def named_parameters(self):
        for name in self.PARAM_NAMES:
            yield name, getattr(self, name)

    def mlp_hidden(self, x: Tensor) -> Tensor:
        h = nn.layer_norm(x, self.ln2_g, self.ln2_b)
        f = nn.gelu(nn.linear(h, self.fc_w, self.fc_b))
        if self.mlp_mask is not None:
            f = nn.mul(f, self.mlp_mask)
        if self.capture is not None:
            self.capture.append(f.data)
        return f

    def __call__(self, x: Tensor) -> Tensor:
        bsz, t, m = x.shape
        hd = m // self.n_heads
        h = nn.layer_norm(x, self.ln1_g, self.ln1_b)

        def heads(wt, bs):
            return nn.linear(h, wt, bs).reshape(bsz, t, self.n_heads, hd).transpose(0, 2, 1, 3)

        a = nn.causal_attention(heads(self.wq, self.bq), heads(self.wk, self.bk),
                                heads(self.wv, self.bv))
        a = a.transpose(0, 2, 1, 3).reshape(bsz, t, m)
        x = x + nn.linear(a, self.proj_w, self.proj_b)
        return x + nn.linear(self.mlp_hidden(x), self.out_w, self.out_b)


@dataclass
class TapTrace:
    """Activations captured during a forward pass.

    ``taps[i]`` holds ``(stack input, stack output)`` for every position ``i``
    with a passthrough stack.  ``hidden`` is the last host block's output and
    ``logits`` the head output.
    """

    taps: dict[int, tuple[Tensor, Tensor]] = field(default_factory=dict)
    logits: Tensor | None = None
    hidden: Tensor | None = None


class TransformerLM:
    """Host model, optionally carrying passthrough stacks keyed by host position."""

    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        m, v = config.width, config.vocab_size
        resid_std = 0.02 / math.sqrt(2 * config.n_layers)
        self.wte = Parameter(rng.normal(0.0, 0.02, size=(v, m)))
        self.wpe = Parameter(rng.normal(0.0, 0.01, size=(config.max_len, m)))
        self.blocks = [Block(m, config.n_heads, rng, resid_std) for _ in range(config.n_layers)]
        self.ln_f_g = Parameter(np.ones(m), decay=False)
        self.ln_f_b = Parameter(np.zeros(m), decay=False)
        self.head_w = None if config.tie_head else Parameter(rng.normal(0.0, 0.02, size=(m, v)))
        self.head_b = Parameter(np.zeros(v), decay=False)
        self.passthrough: dict[int, list[Block]] = {}
        self.step = 0

    # -- structure ---------------------------------------------------------
    @property
    def plan(self) -> InsertionPlan:
        return InsertionPlan(tuple(len(self.passthrough.get(i, ()))
                                   for i in range(self.config.n_layers)))

    def head_parameters(self) -> list[Parameter]:
        ps = [self.ln_f_g, self.ln_f_b, self.head_b]
        ps.append(self.wte if self.head_w is None else self.head_w)
        return ps

    def passthrough_parameters(self) -> list[Parameter]:
        return [p for i in sorted(self.passthrough) for blk in self.passthrough[i]
                for _, p in blk.named_parameters()]

    def passthrough_blocks(self) -> list[tuple[int, int, Block]]:
        return [(i, k, blk) for i in sorted(self.passthrough) for k, blk in enumerate(self.passthrough[i])]

    def named_parameters(self):
        """Stable order used by checkpoints: embeddings, host blocks, head, passthrough."""
        yield "wte", self.wte
        yield "wpe", self.wpe
        for i, blk in enumerate(self.blocks):
            for n, p in blk.named_parameters():
                yield f"host.{i}.{n}", p
        yield "head.ln_g", self.ln_f_g
        yield "head.ln_b", self.ln_f_b
        if self.head_w is not None:
            yield "head.w", self.head_w
        yield "head.b", self.head_b
        for i, k, blk in self.passthrough_blocks():
            for n, p in blk.named_parameters():
                yield f"pt.{i}.{k}.{n}", p

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.set_trainable(flag)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def copy(self) -> TransformerLM:
        return copy.deepcopy(self)

    # -- forward -----------------------------------------------------------
    def embed(self, tokens: np.ndarray) -> Tensor:
        t = tokens.shape[-1]
        return nn.add(nn.embedding(self.wte, tokens), nn.take(self.wpe, slice(0, t)))

    def head(self, x: Tensor) -> Tensor:
        h = nn.layer_norm(x, self.ln_f_g, self.ln_f_b)
        if self.head_w is None:
            return nn.linear(h, nn.transpose(self.wte, (1, 0)), self.head_b)
        return nn.linear(h, self.head_w, self.head_b)

    def __call__(self, tokens, want_taps: bool = False, last_only: bool = False):
        return forward(self, tokens, want_taps=want_taps, last_only=last_only)


def init_model(config: ModelConfig) -> TransformerLM:
    return TransformerLM(config)


def _check_tokens(model: TransformerLM, tokens: np.ndarray) -> None:
    cfg = model.config
    if tokens.shape[-1] > cfg.max_len:
        raise ValueError(f"sequence length {tokens.shape[-1]} exceeds max_len {cfg.max_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise ValueError(f"token id out of range [0, {cfg.vocab_size})")


def forward(model: TransformerLM, tokens, want_taps: bool = False, last_only: bool = False):
    """Causal next-token logits for ``tokens`` of shape (T,) or (B, T).

    Returns logits shaped like the input plus a vocab axis; with
    ``want_taps`` returns ``(logits, TapTrace)`` instead.  ``last_only``
    applies the head to the final position only.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    single = tokens.ndim == 1
    if single:
        tokens = tokens[None, :]
    _check_tokens(model, tokens)
    x = model.embed(tokens)
    trace = TapTrace() if want_taps else None
    for i, blk in enumerate(model.blocks):
        stack = model.passthrough.get(i)
        if stack:
            z_in = x
            for pt in stack:
                x = pt(x)
            if trace is not None:
                trace.taps[i] = (z_in, x)
        x = blk(x)
    if last_only:
        x = nn.take(x, (slice(None), slice(-1, None)))
    logits = model.head(x)
    if trace is not None:
        trace.hidden = x
        trace.logits = logits
    if single:
        logits = logits.reshape(logits.shape[1:])
    return (logits, trace) if want_taps else logits


def inject(host: TransformerLM, plan: InsertionPlan, init_mode: str = "identity",
           seed: int | None = None) -> TransformerLM:
    """Return a copy of ``host`` with ``plan.counts[i]`` passthrough blocks before layer ``i``."""
    cfg = host.config
    if len(plan) != cfg.n_layers:
        raise ValueError(f"plan length {len(plan)} != host layer count {cfg.n_layers}")
    if init_mode not in ("identity", "random"):
        raise ValueError(f"unknown init_mode {init_mode!r}")
    wm = host.copy()
    rng = np.random.default_rng(cfg.seed + 1_000_003 if seed is None else seed)
    resid_std = 0.02 / math.sqrt(2 * cfg.n_layers)
    for i, n in enumerate(plan.counts):
        if n == 0:
            continue
        stack = wm.passthrough.setdefault(i, [])
        for _ in range(n):
            stack.append(Block(cfg.width, cfg.n_heads, rng, resid_std, identity=init_mode == "identity"))
    return wm


def strip(wm: TransformerLM) -> TransformerLM:
    """Drop every passthrough stack, keeping host and head weights as they are."""
    host = wm.copy()
    host.passthrough = {}
    return host


def generate(model: TransformerLM, prompt, n_new: int, mode: str = "greedy",
             temperature: float = 1.0, rng: np.random.Generator | None = None) -> np.ndarray:
    """Autoregressive continuation of ``prompt`` ((T,) or (B, T)); returns only new tokens."""
    prompt = np.asarray(prompt, dtype=np.int64)
    single = prompt.ndim == 1
    ctx = prompt[None, :] if single else prompt
    if ctx.shape[1] + n_new > model.config.max_len:
        raise ValueError(f"prompt length {ctx.shape[1]} + {n_new} new tokens exceeds max_len")
    if mode not in ("greedy", "sample"):
        raise ValueError(f"unknown decode mode {mode!r}")
    if mode == "sample" and rng is None:
        rng = np.random.default_rng(0)
    out = np.empty((ctx.shape[0], n_new), dtype=np.int64)
    with nn.no_grad():
        for t in range(n_new):
            logits = forward(model, ctx, last_only=True).data[:, -1, :]
            if mode == "greedy":
                nxt = logits.argmax(axis=-1)
            else:
                nxt = sample_from_logits(logits, rng, temperature)
            out[:, t] = nxt
            ctx = np.concatenate([ctx, nxt[:, None]], axis=1)
    return out[0] if single else out


def sample_from_logits(logits: np.ndarray, rng: np.random.Generator, temperature: float = 1.0,
                       size: int | None = None) -> np.ndarray:
    """Draw from softmax(logits / temperature) row-wise via inverse-CDF."""
    z = logits.astype(np.float64) / max(temperature, 1e-12)
    p = np.exp(z - z.max(axis=-1, keepdims=True))
    p /= p.sum(axis=-1, keepdims=True)
    cdf = np.cumsum(p, axis=-1)
    shape = logits.shape[:-1] + ((size,) if size is not None else ())
    u = rng.random(shape)
    if size is not None:
        idx = np.stack([np.searchsorted(c, uu, side="right") for c, uu in
                        zip(cdf.reshape(-1, cdf.shape[-1]), u.reshape(-1, size))])
        idx = idx.reshape(shape)
    else:
        idx = (u[..., None] >= cdf).sum(axis=-1)
    return np.minimum(idx, logits.shape[-1] - 1)


# ---------------------------------------------------------------------------
# checkpoints


class CheckpointError(ValueError):
    pass


def manifest(model: TransformerLM) -> dict:
    params = [{"name": n, "shape": list(p.shape), "trainable": p.trainable, "decay": p.decay}
              for n, p in model.named_parameters()]
    masks = {}
    for i, k, blk in model.passthrough_blocks():
        if blk.mlp_mask is not None:
            masks[f"pt.{i}.{k}"] = np.flatnonzero(blk.mlp_mask == 0).tolist()
    return {
        "format_version": FORMAT_VERSION,
        "config": asdict(model.config),
        "omega": list(model.plan.counts),
        "step": model.step,
        "params": params,
        "param_count": int(sum(math.prod(e["shape"]) for e in params)),
        "pruned_units": masks,
    }


def save(model: TransformerLM, path) -> None:
    """Write ``magic | u32 version | u32 header length | JSON header | float32 LE blobs``."""
    header = json.dumps(manifest(model), sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        fh.write(header)
        for _, p in model.named_parameters():
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def read_manifest(path) -> dict:
    with open(path, "rb") as fh:
        head = fh.read(12)
        if len(head) < 12 or head[:4] != _MAGIC:
            raise CheckpointError(f"{path}: not a passmark checkpoint")
        version, hlen = struct.unpack("<II", head[4:])
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unknown format version {version}")
        return json.loads(fh.read(hlen))


def load(path) -> TransformerLM:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise CheckpointError(f"{path}: not a passmark checkpoint")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unknown format version {version}")
    man = json.loads(raw[12:12 + hlen])
    blob = raw[12 + hlen:]
    expected = sum(math.prod(e["shape"]) for e in man["params"])
    if expected != man["param_count"] or len(blob) != 4 * expected:
        raise CheckpointError(
            f"{path}: size mismatch, manifest declares {man['param_count']} floats, "
            f"blob holds {len(blob) / 4:g}")
    cfg = ModelConfig(**man["config"])
    model = inject(init_model(cfg), InsertionPlan(man["omega"]))
    named = dict(model.named_parameters())
    if [e["name"] for e in man["params"]] != list(named):
        raise CheckpointError(f"{path}: parameter layout does not match architecture")
    values = np.frombuffer(blob, dtype="<f4")
    off = 0
    for e in man["params"]:
        p = named[e["name"]]
        n = math.prod(e["shape"])
        p.data = values[off:off + n].reshape(e["shape"]).astype(nn.DTYPE)
        p.grad = np.zeros_like(p.data)
        p.set_trainable(e["trainable"])
        p.decay = e["decay"]
        off += n
    blocks = {f"pt.{i}.{k}": blk for i, k, blk in model.passthrough_blocks()}
    for key, pruned in man.get("pruned_units", {}).items():
        blk = blocks[key]
        blk.mlp_mask = np.ones(4 * cfg.width, dtype=nn.DTYPE)
        blk.mlp_mask[pruned] = 0.0
    model.step = man["step"]
    return model
