"""
How the language potential moves along a trajectory
===================================================

Trains a small relatedness classifier on synthetic annotated clips (or loads
a checkpoint given on the command line) and prints the potential and the
shaping reward after every step of the shortest solution, next to a random
walk in the same room.

    python3 demos/02_potential_along_a_path.py [checkpoint.npz]
"""

import sys
import tempfile

import numpy as np

from langshape import config, pipeline
from langshape.env import action_name, get_layout
from langshape.learnnet import RNN_ONLY, load_checkpoint
from langshape.shaping import PotentialTracker
from langshape.vecenv import compiled

if len(sys.argv) > 1:
    model = load_checkpoint(sys.argv[1])
else:
    # a reduced corpus keeps this under a minute
    cfg = config.from_dict({"output_dir": tempfile.mkdtemp(), "encoder_modes": [RNN_ONLY],
                            "data": {"n_train_pairs": 3000, "n_val_pairs": 500, "trajectories_per_layout": 8},
                            "learn": {"epochs": 8}})
    pipeline.gen_data(cfg)
    print("validation accuracy", round(pipeline.train_learn(cfg)[RNN_ONLY]["val_accuracy"], 3))
    model = pipeline.load_learn(cfg, RNN_ONLY)

layout = get_layout("r10_ladder_descent")
text = layout.descriptions[0]
plan = compiled(layout).solution_actions()

tr = PotentialTracker(model, text)
print(f"\n{text!r}\nphi at the start {tr.phi_prev:+.3f}")
for a in plan:
    r = tr.step_reward(a)
    print(f"  {action_name(a):<11} phi {tr.phi_prev:+.3f}  shaping {r:+.3f}")

rng = np.random.default_rng(1)
tr.reset()
total = sum(tr.step_reward(int(a)) for a in rng.integers(0, 8, len(plan)))
print(f"random walk of the same length ends at phi {tr.phi_prev:+.3f} (shaping sum {total:+.3f})")
