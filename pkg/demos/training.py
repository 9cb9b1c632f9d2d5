"""Train every router on the synthetic task (a few hundred steps each)."""

import sys

from unimoe.harness import ExperimentConfig, train
from unimoe.layer import ALL_ROUTERS

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
for kind in ALL_ROUTERS:
    result = train(ExperimentConfig(router={"kind": kind.value}, optim={"steps": steps}))
    rep = result.report
    print(f"{kind.value:<24} acc {rep['final_train_accuracy']:.3f}  loss {rep['final_loss']:.4f}  "
          f"drop {rep['mean_dropped_token_fraction']:.3f}  {rep['wall_time_s']:.1f}s")

# pushing every token toward expert 0 makes token choice drop
skewed = ExperimentConfig(router={"kind": "softmax_token_choice"}, optim={"steps": steps}, gate_skew=3.0)
print("skewed token choice drop:", round(train(skewed).report["mean_dropped_token_fraction"], 3))
