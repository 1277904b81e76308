"""
Train a small model and predict intermediate shapes
===================================================

Runs a few dozen iterations on 16x16 data, then predicts the four stage
boundaries of a held-out process from its first and last frame.  With so
little training the output is rough; the point is the workflow.
"""

import tempfile

import numpy as np

from pctgan.checkpoint import load_model
from pctgan.data import make_splits
from pctgan.evaluation import evaluate_model, predict_span
from pctgan.training import TrainConfig, train

splits, stats = make_splits(0, {"train": 4, "val": 1, "test": 1}, image_size=16)
cfg = TrainConfig(image_size=16, m=8, iterations=20, log_every=5)

out = tempfile.mkdtemp()
res = train(cfg, splits["train"], out, val=splits["val"],
            progress=lambda row: print("iter %(iteration)3d  d_loss %(d_loss)8.3f  gp %(gp_term)6.3f" % row))

model, _ = load_model(res.checkpoints["final"])
seq = splits["test"][0]
b = seq["boundaries"]
pred = predict_span(model, seq["frames"], seq["timings"], b[0], b[-1])
for i in b:
    err = np.mean(np.abs(pred[i] - seq["frames"][i, 0]))
    print("step %3d  mean abs error %.3f" % (i, err))

print("test score: %.4f" % evaluate_model(model, splits["test"]))
