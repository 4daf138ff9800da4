import numpy as np
import pytest

from wayfinder import lexicon as lx
from wayfinder import perturb as pt
from wayfinder import worldgen as wg
from wayfinder.seeding import mix


@pytest.fixture(scope="session")
def lex():
    return lx.load_default_lexicon()


def make_corpus(n, seed=1, lengths=(2, 3), cfg=None):
    cfg = cfg or wg.WorldConfig()
    items = []
    for k in range(n):
        house = wg.generate_house(mix(seed, "house", k), cfg)
        traj = wg.sample_trajectory(house, mix(seed, "traj", k), lengths[k % len(lengths)], f"h{k}")
        ins = wg.verbalize(traj, house, mix(seed, "verbalize", k))
        items.append(pt.CorpusItem(f"t{k}", f"h{k}", house, traj, ins))
    return items


@pytest.fixture(scope="session")
def corpus():
    return make_corpus(200)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# A pipeline config small enough to run every stage in seconds.
TINY_CONFIG = {
    "seed": 3,
    "corpus": {"n_houses": 40, "dev_trajectories": 6, "test_trajectories": 6, "train_pairs": 60,
               "dev_examples": 30, "test_examples": 30, "speaker_positives": 4},
    "model": {"hidden": 16, "heads": 2, "lang_layers": 1, "vis_layers": 1, "enc_layers": 1, "dec_layers": 1},
    "train": {"batch_size": 8, "max_steps": 4, "eval_every": 2, "pretrain_steps": 4, "speaker_steps": 4},
}


@pytest.fixture
def tiny_config(tmp_path):
    import json
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY_CONFIG))
    return path
