"""Route one token group through all six routers and compare the reports."""

import numpy as np

from unimoe import tensor as tn
from unimoe.affinity import GateParams
from unimoe.allocation import capacity
from unimoe.layer import ALL_ROUTERS, ExpertBank, RouterConfig, RouterKind, moe_layer_step
from unimoe.tensor import Rng

T, D, E = 32, 8, 4
rng = Rng(0)
X = rng.normal((T, D))
bank = ExpertBank.init(rng, E, D, 4 * D, slots=capacity(1.0, T, E))
gate = GateParams(tn.parameter(rng.normal((D, E), 1 / np.sqrt(D))), noise_std=1 / E)

print(f"{'router':<24} {'dropped':>8} {'underused':>10}  occupancy")
for kind in ALL_ROUTERS:
    out = moe_layer_step(X, bank, None if kind is RouterKind.SOFT_MOE else gate, RouterConfig(kind=kind), training=False)
    r = out.report
    print(f"{kind.value:<24} {r.dropped_token_fraction:>8.3f} {r.underused_slots:>10d}  {r.per_expert_occupancy}")

# Y is the same shape whichever router built the dispatch/combine tensors
print("output shape:", out.Y.shape)
