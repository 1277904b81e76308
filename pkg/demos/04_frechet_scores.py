"""
Scoring sequences with a Fréchet distance
=========================================

Embeds real sequences, then perturbs them and watches the score grow.
"""

import numpy as np

from pctgan.data import make_splits
from pctgan.evaluation import SequenceEmbedder, fit_gaussian, frechet_distance

splits, _ = make_splits(1, {"train": 3}, image_size=16)
emb = SequenceEmbedder()
rng = np.random.default_rng(0)


def features(noise):
    out = []
    for seq in splits["train"]:
        shape = seq["frames"][:, :1]
        for a, b in zip(seq["boundaries"][:-1], seq["boundaries"][1:]):
            clip = shape[a:b + 1]
            out.append(emb(np.clip(clip + noise * rng.standard_normal(clip.shape), -1, 1)))
    return np.array(out)


real = fit_gaussian(features(0.0))
for noise in (0.0, 0.05, 0.2, 0.5):
    print("noise %.2f  score %.4f" % (noise, frechet_distance(real, fit_gaussian(features(noise)))))
