"""Desk-scale experiment rig shared by the acceptance tests.

Everything expensive is computed once and cached as JSON or checkpoints under
``.cache/acceptance/<RIG_VERSION>/``.  Delete that directory to recompute.
Run ``python3 tests/rig.py`` to warm the cache outside pytest.
"""

from __future__ import annotations

import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from passmark.attacks import AttackSpec, fine_prune_attack, layer_removal_attack
from passmark.corpus import builtin_corpus, build_trigger_set, gen_key
from passmark.model import InsertionPlan, ModelConfig, load, save
from passmark.trainer import Probe, TrainConfig, TrainCurve, pretrain, train_watermark, validation_loss
from passmark.verifier import (ModelSampler, empirical_sequence_entropy, entropy_deltas, optimize_gamma,
                               poison_prompts, sequence_entropy, trajectory_entropies, verify)

RIG_VERSION = "v1"
CACHE = Path(__file__).resolve().parent.parent / ".cache" / "acceptance" / RIG_VERSION

SEEDS = (0, 1, 2)
PLANS = {1: "0,1,0,0", 3: "1,0,1,1"}
HOST_CONFIG = ModelConfig(n_layers=4, width=64, n_heads=4, vocab_size=256, max_len=128, seed=0)
HOST_TRAIN = TrainConfig(lr=3e-3, weight_decay=0.1, warmup_steps=100, max_steps=3000, batch_size=16,
                         seq_len=64, log_every=0)
PROMPT_LEN = 32
GEN_LEN = 32
N_CANDIDATES = 800
PERCENTILE = 25
ATTACK_STEPS = 300
N_WRONG_KEYS = 20
BLACKBOX_PROMPTS = 20
BLACKBOX_ALPHA = 0.01

_corpus = None
REPORT: list[str] = []


def record(n: int, ok: bool, detail: str) -> None:
    """Keep one summary line per acceptance criterion for the end-of-session printout."""
    line = f"AC{n} {'PASS' if ok else 'FAIL'} {detail}"
    REPORT.append(line)
    print(line)


def log(msg: str) -> None:
    print(f"[rig {time.strftime('%H:%M:%S')}] {msg}", file=sys.stderr, flush=True)


def corpus():
    global _corpus
    if _corpus is None:
        _corpus = builtin_corpus()
    return _corpus


def cached_json(name: str, fn):
    path = CACHE / f"{name}.json"
    if path.exists():
        return json.loads(path.read_text())
    t = time.time()
    out = fn()
    CACHE.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(out))
    log(f"{name} computed in {time.time() - t:.0f}s")
    return out


def cached_model(name: str, fn):
    path = CACHE / f"{name}.bin"
    if path.exists():
        return load(path)
    t = time.time()
    model, extra = fn()
    CACHE.mkdir(parents=True, exist_ok=True)
    save(model, path)
    if extra is not None:
        extra.to_jsonl(CACHE / f"{name}.curve.jsonl")
    log(f"{name} trained in {time.time() - t:.0f}s")
    return model


def key_for(seed: int):
    return gen_key(np.random.default_rng([1000, seed]), 6)


def host():
    return cached_model("host", lambda: pretrain(HOST_CONFIG, corpus(), HOST_TRAIN))


def wm_config(seed: int, selfsup: bool = True) -> TrainConfig:
    return TrainConfig(seed=seed, selfsup_enabled=selfsup, log_every=100)


def watermarked(seed: int, layers: int, selfsup: bool = True):
    name = f"wm_s{seed}_l{layers}" + ("" if selfsup else "_nosup")
    return cached_model(name, lambda: train_watermark(host(), InsertionPlan.parse(PLANS[layers]), corpus(),
                                                      key_for(seed), wm_config(seed, selfsup)))


def curve(seed: int, layers: int, selfsup: bool = True) -> TrainCurve:
    watermarked(seed, layers, selfsup)
    name = f"wm_s{seed}_l{layers}" + ("" if selfsup else "_nosup")
    return TrainCurve.from_jsonl(CACHE / f"{name}.curve.jsonl")


def trigger_prompts() -> np.ndarray:
    def build():
        cands = corpus().fixed_windows(N_CANDIDATES, PROMPT_LEN, split="heldout")
        trig = build_trigger_set(host(), cands, PERCENTILE, gen_len=GEN_LEN)
        return {"prompts": trig.prompts.tolist()}

    return np.asarray(cached_json("trigger", build)["prompts"], dtype=np.int64)


def host_stats() -> dict:
    def build():
        h = host()
        return {"val_ce": validation_loss(h, corpus()),
                "h_clean_trigger": float(np.mean(sequence_entropy(h, trigger_prompts(), GEN_LEN)))}

    return cached_json("host_stats", build)


def verification(seed: int, layers: int) -> dict:
    def build():
        wm = watermarked(seed, layers)
        v = verify(wm, trigger_prompts(), key_for(seed), np.random.default_rng([seed, 5]), GEN_LEN)
        return {"result": v.result.to_dict(),
                "pos": [r.delta for r in v.positives], "neg": [r.delta for r in v.negatives],
                "h_clean": [r.h_clean for r in v.positives],
                "h_poisoned": [r.h_poisoned for r in v.positives],
                "val_ce": validation_loss(wm, corpus())}

    return cached_json(f"verify_s{seed}_l{layers}", build)


def wrong_key_aucs() -> dict:
    """AUC of 20 random non-private keys against the FP-key negatives of seed 0."""
    def build():
        seed = 0
        v = verification(seed, 1)
        wm = watermarked(seed, 1)
        rng = np.random.default_rng([seed, 77])
        aucs = []
        for _ in range(N_WRONG_KEYS):
            wrong = gen_key(rng, 6, exclude=key_for(seed))
            reps = entropy_deltas(wm, trigger_prompts(), wrong, rng, GEN_LEN, h_clean=np.array(v["h_clean"]))
            aucs.append(optimize_gamma([r.delta for r in reps], v["neg"]).auc)
        return {"aucs": aucs}

    return cached_json("wrong_keys", build)


def blackbox_errors() -> dict:
    """Per-prompt |blackbox - whitebox| at N=256 and N=4096 on clean and key-poisoned trigger prompts."""
    def build():
        seed = 0
        wm = watermarked(seed, 1)
        clean = trigger_prompts()[:BLACKBOX_PROMPTS]
        pois = poison_prompts(clean, [key_for(seed)] * len(clean), np.random.default_rng(3))
        prompts = list(clean) + list(pois)
        white = np.concatenate([trajectory_entropies(wm, x, GEN_LEN)[0].mean(axis=1) for x in (clean, pois)])
        out = {"whitebox": white.tolist()}
        for alpha in (BLACKBOX_ALPHA, 1.0):
            for n in (256, 4096):
                sampler = ModelSampler(wm, np.random.default_rng([seed, n]))
                est = [empirical_sequence_entropy(sampler, p, GEN_LEN, n, alpha, greedy=sampler.greedy)
                       for p in prompts]
                out[f"err_a{alpha}_n{n}"] = np.abs(np.array(est) - white).tolist()
        return out

    return cached_json("blackbox", build)


def probe_baseline(seed: int) -> float:
    def build():
        cfg = wm_config(seed)
        probe = Probe.build(corpus(), key_for(seed), cfg.probe_size, cfg.seq_len, seed=cfg.seed)
        return {"clean_entropy": probe.entropies(host())[0]}

    return cached_json(f"probe_host_s{seed}", build)["clean_entropy"]


def attack_spec(kind: str, seed: int) -> AttackSpec:
    return AttackSpec(kind, steps=ATTACK_STEPS, lr=1e-3, prune_ratio=0.5, calibration_size=1024, seed=seed)


def attacked(kind: str, seed: int, layers: int) -> dict:
    def build():
        wm = watermarked(seed, layers)
        spec = attack_spec(kind, seed)
        if kind == "layer-removal":
            post = layer_removal_attack(wm, corpus(), spec)
        else:
            calib = corpus().windows(np.random.default_rng([seed, 99]), spec.calibration_size, spec.seq_len,
                                     split="heldout")
            post = fine_prune_attack(wm, calib, corpus(), spec)
        res = verify(post, trigger_prompts(), key_for(seed), np.random.default_rng([seed, 5]), GEN_LEN).result
        ce = validation_loss(post, corpus())
        return {"wacc": res.wacc, "fp_rate": res.fp_rate, "auc": res.auc, "val_ce": ce, "val_ppl": math.exp(ce)}

    return cached_json(f"{kind}_s{seed}_l{layers}", build)


def fullparam_baseline() -> dict:
    """All weights trainable, no self-supervision, no added layers; same budget as seed 0."""
    def build():
        cfg = TrainConfig.fullparam_baseline(seed=0, log_every=0)
        model, _ = train_watermark(host(), InsertionPlan.parse("0,0,0,0"), corpus(), key_for(0), cfg)
        return {"val_ce": validation_loss(model, corpus())}

    return cached_json("fullparam_s0", build)


def mode_agreement(n_prompts: int = 100, n_samples: int = 1024) -> dict:
    """Whitebox and blackbox WACC on the same checkpoint and prompts."""
    def build():
        wm = watermarked(0, 1)
        prompts = trigger_prompts()[:n_prompts]
        out = {}
        for mode in ("whitebox", "blackbox"):
            res = verify(wm, prompts, key_for(0), np.random.default_rng([0, 11]), GEN_LEN, mode, n_samples).result
            out[mode] = res.to_dict()
        return out

    return cached_json("mode_agreement", build)


def host_controls() -> dict:
    """Null measurements on the unwatermarked host."""
    def build():
        h = host()
        prompts = trigger_prompts()
        v = verify(h, prompts, key_for(0), np.random.default_rng([0, 5]), GEN_LEN)
        # poison each prompt with six of its own tokens: a "key" carrying no new information
        rng = np.random.default_rng(21)
        own = []
        for p in prompts:
            s = int(rng.integers(0, len(p) - 6))
            pos = int(rng.integers(0, len(p) + 1))
            own.append(np.concatenate([p[:pos], p[s:s + 6], p[pos:]]))
        h_own = sequence_entropy(h, np.stack(own), GEN_LEN)
        h_clean = np.array([r.h_clean for r in v.positives])
        return {"auc_true_key": v.result.auc, "neg": [r.delta for r in v.negatives],
                "own_substring_delta": (np.asarray(h_own) - h_clean).tolist()}

    return cached_json("host_controls", build)


def build_all() -> None:
    host_stats()
    for seed in SEEDS:
        for layers in PLANS:
            verification(seed, layers)
            attacked("layer-removal", seed, layers)
            attacked("fine-prune", seed, layers)
        curve(seed, 1, selfsup=False)
        probe_baseline(seed)
    wrong_key_aucs()
    blackbox_errors()
    fullparam_baseline()
    mode_agreement()
    host_controls()


if __name__ == "__main__":
    build_all()
