"""Gradient descent on the importance loss evens out expert usage."""

import numpy as np

from unimoe import tensor as tn
from unimoe.affinity import GateParams
from unimoe.losses import importance_loss, load_loss

rng = np.random.default_rng(0)
X = rng.normal(size=(64, 8)) + 1
W = rng.normal(size=(8, 4)) * 0.3
W[:, 0] += 1.5

for step in range(301):
    w = tn.parameter(W)
    loss = importance_loss(X, GateParams(w, 0.0))
    if step % 50 == 0:
        usage = np.exp(X @ W)
        usage = (usage / usage.sum(1, keepdims=True)).sum(0)
        print(f"step {step:3d}  importance CV^2 {loss.value:.4f}  usage {np.round(usage, 1)}")
    W = W - 0.5 * tn.backward(loss)[w]

noise = rng.normal(size=(64, 4)) * 0.25
print("load loss after balancing:", float(load_loss(X, GateParams(tn.constant(W), 0.25), noise, 1).value))
