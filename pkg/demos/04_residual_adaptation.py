"""
Adapting a trained scorer with a residual decoder
=================================================

Imitation labels are one-hot, but place tasks usually admit several
valid positions. Adaptation keeps the base policy frozen, trains only a
small residual decoder on multi-labeled samples, and blends the two:

    final = alpha * base + (1 - alpha) * sigmoid(residual)

so the base policy's preferences survive while probability mass spreads
over every valid candidate.
"""

import numpy as np

from apalign.align import desk_config, forward, init_params
from apalign.cli import generate_task_demos, demos_to_samples, relation_samples
from apalign.sim import DeskConfig, EmbeddingBank
from apalign.train import TrainConfig, adapt_policy, train_policy

bank = EmbeddingBank()
desk = DeskConfig()
cfg = desk_config()

# 1. A quickly trained base policy (small budget, demo purposes).
demos, _ = generate_task_demos("place", 50, 0, "seen", bank, desk)
base, _ = train_policy(init_params(cfg, seed=0), cfg,
                       demos_to_samples(demos),
                       TrainConfig(epochs=6, seed=0, dtype="float32"))

# 2. Multi-labeled place samples: every relation-satisfying candidate
#    is a positive, so the supervision finally says "all of these work".
adapt_set = relation_samples(40, 9000, "seen", bank, desk)
positives = [int(s.labels.sum()) for s in adapt_set]
print(f"{len(adapt_set)} adaptation samples, "
      f"{np.mean(positives):.1f} valid candidates each on average")

# 3. Train the residual decoder only. Base tensors do not move.
adapted, _ = adapt_policy(base, cfg, adapt_set,
                          TrainConfig(epochs=20, seed=0, dtype="float32"))
frozen = all(np.array_equal(base[k], v) for k, v in adapted.items()
             if not k.startswith("residual."))
print(f"base parameters untouched: {frozen}")

# 4. Compare distributions on one sample: the blend should spread mass
#    across the valid set instead of spiking on a single candidate.
sample = adapt_set[0]
mask = sample.labels.astype(bool)
before, _ = forward(base, cfg, sample.encoded, sample.sampled())
after, _ = forward(adapted, cfg, sample.encoded, sample.sampled(),
                   adapted=True)
frac_before = before.omegas[mask].sum() / before.omegas.sum()
frac_after = after.omega_prime[mask].sum() / after.omega_prime.sum()
print(f"mass on valid candidates: {frac_before:.2f} -> {frac_after:.2f} "
      f"({int(mask.sum())}/{mask.size} candidates valid)")
