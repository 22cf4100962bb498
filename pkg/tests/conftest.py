import numpy as np
import pytest

from langshape import learnnet
from langshape.env import layout_from_dict
from langshape.learnnet import LearnConfig
from langshape.vecenv import compiled

TEXTS = ["go left", "climb down the ladder", "jump over the skull to the right",
         "go right and climb up the ladder", "wait"]


def tiny_model(seed=0, mode=learnnet.RNN_ONLY, embeddings_path=None, dims=6):
    cfg = LearnConfig(d1=dims, d2=dims, d3=dims, d_word=5, encoder_mode=mode,
                      embeddings_path=embeddings_path)
    return learnnet.build_model(cfg, TEXTS, np.random.default_rng(seed))


@pytest.fixture
def model():
    return tiny_model()


CORRIDOR = {
    "name": "corridor",
    "grid": ["#######",
             "#S...G#",
             "#######"],
    "max_episode_steps": 20,
}

LADDER = {
    "name": "ladder",
    "room_id": 3,
    "grid": ["#######",
             "#.S...#",
             "#==H==#",
             "###H###",
             "#..H.G#",
             "#######"],
    "objects": [{"kind": "skull", "pos": [4, 1], "patrol": [1, 2]}],
    "max_episode_steps": 40,
}


@pytest.fixture
def corridor():
    return layout_from_dict(dict(CORRIDOR))


@pytest.fixture
def corridor_room(corridor):
    return compiled(corridor)
