"""Balanced assignments: log-domain Sinkhorn and the capacity-sparse OT solver."""

import numpy as np

from unimoe.affinity import sinkhorn, sparse_ot

rng = np.random.default_rng(0)
T, E = 16, 4
logits = rng.normal(size=(T, E)) * 2
logits[:, 0] += 2  # everyone prefers expert 0

plan, res = sinkhorn(logits, iters=500, tol=1e-10)
print("softmax column mass:", np.round(np.exp(logits) / np.exp(logits).sum(1, keepdims=True), 2).sum(0))
print("sinkhorn column mass:", np.round(plan.sum(0), 6), "residuals", res.as_dict())

# each expert may keep at most C tokens
C = 4
e = np.exp(logits - logits.max(1, keepdims=True))
sparse, res = sparse_ot(e / e.sum(1, keepdims=True), C)
print("sparse nonzeros per expert:", np.count_nonzero(sparse, axis=0), "(bound", C, ")")
print("sparse column mass:", np.round(sparse.sum(0), 4))
