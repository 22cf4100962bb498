"""
PPO with and without the language term
======================================

One room, a handful of seeds, 100k steps each.  Prints the area under the
success curve and the successes of the frozen policy for both reward modes.

    python3 demos/04_shaped_ppo.py checkpoint.npz [task] [lambda]
"""

import sys

import numpy as np

from langshape import metrics, rl
from langshape.env import get_layout
from langshape.learnnet import load_checkpoint
from langshape.shaping import ShapingConfig
from langshape.vecenv import compiled

model = load_checkpoint(sys.argv[1])
layout = get_layout(sys.argv[2] if len(sys.argv) > 2 else "r14_rope_left")
lam = float(sys.argv[3]) if len(sys.argv) > 3 else 0.3
room = compiled(layout)
seeds = range(4)

results = {}
for mode in rl.REWARD_MODES:
    runs = [rl.train_policy(room, 100_000, seed, mode, ShapingConfig(lam=lam), model,
                            layout.descriptions[0], eval_timesteps=10_000) for seed in seeds]
    results[mode] = (np.array([metrics.auc(r.curve) for r in runs]), np.array([r.final_successes for r in runs]))
    auc, final = results[mode]
    print(f"{mode:<9} AUC {auc.mean():12.0f}  final {final.mean():7.1f}")

for k, label in enumerate(("AUC", "final")):
    res = metrics.welch_t_test(results[rl.EXT_LANG][k], results[rl.EXT_ONLY][k])
    print(f"{label}: t = {res.t:+.2f}, p = {res.p:.3f}")
