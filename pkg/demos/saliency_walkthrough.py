"""Train the bars classifier, explain one image with every CAM, and probe it.

The printout shows where each map puts its mass and how much the top class
score drops when the top 20% of pixels are masked.
"""

import numpy as np

from xaiport.backends import BackendRef, LocalBackend
from xaiport.evaluation import deletion_score
from xaiport.explainers import METHODS, explain
from xaiport.model import ModelSpec, TrainConfig, accuracy, forward_capture, init_model, make_synthetic_bars, train

data = make_synthetic_bars(300, seed=1)
model, losses = train(init_model(ModelSpec(seed=1)), data, TrainConfig(epochs=8, seed=1))
print(f"loss {losses[0]:.3f} -> {losses[-1]:.3f}, train accuracy {accuracy(model, data):.3f}")

backend = LocalBackend(BackendRef("local", "local"), model)
fill = data.images.mean(axis=(0, 2, 3))
image, label, bar = data.images[0], int(data.labels[0]), data.masks[0]
clean = backend.score(image).scores
pred = int(np.argmax(clean))
print(f"sample 0: label {label}, predicted {pred} with p={clean[pred]:.3f}")

_, capture = forward_capture(model, image, pred)
for method in METHODS:
    smap = explain(method, capture, "s0")
    inside = smap.values[bar].sum() / max(smap.values.sum(), 1e-12)
    drop = deletion_score(backend, image, smap, 0.2, fill, clean=clean)
    print(f"  {method:<12} mass on bar {inside:5.2f}  (bar covers {bar.mean():.2f})  deletion {drop:6.2f} pp")
