"""Watermark a tiny language model and check that only the owner's key lights it up.

Walkthrough, in order:

* pretrain a two-layer byte-level host on Python's bundled help text;
* pick trigger prompts the host is confident about;
* add one passthrough layer and train it so a six-character key
  inserted anywhere in the prompt flattens the next-token distribution;
* measure entropy deltas under the real key and under random impostor keys;
* check which host weights training touched, then pull the added layer out.

Runs in a few minutes on one CPU core:

    python3 demos/01_watermark_roundtrip.py
"""

import math

import numpy as np

from passmark.corpus import KeySpec, build_trigger_set, builtin_corpus
from passmark.model import InsertionPlan, ModelConfig, strip
from passmark.trainer import TrainConfig, pretrain, train_watermark, validation_loss
from passmark.verifier import verify

LN_V = math.log(256)

corpus = builtin_corpus()
print(f"corpus: {corpus.tokens.size:,} bytes of pydoc topics")

host, _ = pretrain(ModelConfig(n_layers=2, width=48, n_heads=4, max_len=96, seed=0), corpus,
                   TrainConfig(lr=3e-3, weight_decay=0.1, max_steps=800, warmup_steps=50, batch_size=16,
                               seq_len=48, log_every=0))
host_ce = validation_loss(host, corpus, seq_len=48)
print(f"host: {host.num_parameters():,} parameters, validation CE {host_ce:.3f} nats/byte")

# Low-entropy prompts make the key's effect easy to see: the host would otherwise answer confidently.
candidates = corpus.fixed_windows(200, 24, split="heldout")
trigger = build_trigger_set(host, candidates, percentile=25, gen_len=16)
print(f"trigger set: {len(trigger)} prompts (clean entropy below the 25th percentile)")

key = KeySpec("c0ffee")
plan = InsertionPlan.parse("0,1")
wm, curve = train_watermark(host, plan, corpus, key,
                            TrainConfig(max_steps=600, warmup_steps=50, batch_size=16, seq_len=48,
                                        log_every=100, probe_size=32))
print("\nstep  clean-H  keyed-H   (probe entropies, nats; max is %.2f)" % LN_V)
for r in curve.records:
    print(f"{r['step']:4d}  {r['clean_entropy']:7.3f}  {r['key_entropy']:7.3f}")

wm_ce = validation_loss(wm, corpus, seq_len=48)
print(f"\nwatermarked CE {wm_ce:.3f} ({(wm_ce - host_ce) / host_ce:+.1%} vs host)")

v = verify(wm, trigger.prompts, key, np.random.default_rng(0), gen_len=16)
pos = np.array([r.delta for r in v.positives])
neg = np.array([r.delta for r in v.negatives])
print(f"entropy delta with the real key:   median {np.median(pos):+.3f}")
print(f"entropy delta with impostor keys: median {np.median(neg):+.3f}")
print(f"threshold {v.result.gamma:.3f}: WACC {v.result.wacc:.2f}, FP rate {v.result.fp_rate:.2f}, "
      f"AUC {v.result.auc:.3f}")

# Only the passthrough layer, the last host block and the head were trainable.
before = host.snapshot()
frozen = [n for n, p in wm.named_parameters() if n in before and not p.trainable]
untouched = all(before[n].tobytes() == dict(wm.named_parameters())[n].data.tobytes() for n in frozen)
print(f"\n{len(frozen)} frozen host tensors unchanged: {untouched}")

# The last block and head were co-adapted with the new layer, so pulling it out costs fidelity.
bare = strip(wm)
print(f"passthrough layer removed without retraining: CE {validation_loss(bare, corpus, seq_len=48):.3f}")
