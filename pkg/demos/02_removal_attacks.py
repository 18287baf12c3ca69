"""What an adversary holding the weights can do, and what it costs them.

Continues the story from ``01_watermark_roundtrip.py`` at the same tiny
scale, but with two passthrough layers before the first host block and one
before the second. Two attacks are compared:

* layer removal: delete every passthrough layer, then fine-tune the rest;
* fine-pruning: zero the half of each passthrough MLP that stays quietest on
  clean text, then fine-tune the surviving passthrough weights.

For each, the watermark accuracy and validation perplexity are reported
before and after. Run with ``python3 demos/02_removal_attacks.py``.
"""

import numpy as np

from passmark.attacks import AttackSpec, evaluate_attack, run_attack
from passmark.corpus import KeySpec, build_trigger_set, builtin_corpus
from passmark.model import InsertionPlan, ModelConfig
from passmark.trainer import TrainConfig, pretrain, train_watermark

corpus = builtin_corpus()
host, _ = pretrain(ModelConfig(n_layers=2, width=48, n_heads=4, max_len=96, seed=0), corpus,
                   TrainConfig(lr=3e-3, weight_decay=0.1, max_steps=800, warmup_steps=50, batch_size=16,
                               seq_len=48, log_every=0))
trigger = build_trigger_set(host, corpus.fixed_windows(200, 24, split="heldout"), 25, gen_len=16)
key = KeySpec("c0ffee")
wm, _ = train_watermark(host, InsertionPlan.parse("2,1"), corpus, key,
                        TrainConfig(max_steps=600, warmup_steps=50, batch_size=16, seq_len=48, log_every=0))

print(f"{'attack':14s} {'WACC before':>11s} {'after':>6s} {'ppl before':>10s} {'after':>6s}")
for kind in ("layer-removal", "fine-prune"):
    spec = AttackSpec(kind, steps=200, lr=1e-3, batch_size=16, seq_len=48, prune_ratio=0.5,
                      calibration_size=256, seed=0)
    post = run_attack(wm, corpus, spec)
    rep = evaluate_attack(wm, post, trigger.prompts, key, corpus, gen_len=16, spec=spec)
    print(f"{kind:14s} {rep.pre.wacc:11.2f} {rep.post.wacc:6.2f} {rep.pre.val_ppl:10.3f} {rep.post.val_ppl:6.3f}")

# At this toy scale both attacks hurt the watermark, and perplexity even improves
# because the 800-step host is still undertrained, so any extra fine-tuning
# helps. The larger rig in tests/rig.py gives the clearer picture: removal
# erases the watermark, while fine-pruning a well-trained host leaves WACC near 1.
