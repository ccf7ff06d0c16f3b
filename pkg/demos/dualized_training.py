"""Dualized steepest descent on a seeded regression problem.

Run: python3 demos/dualized_training.py
"""

from moddual import FixedStep, SharpnessScaled, train
from moddual.experiments import MLP_REGRESSION, make_dataset

cfg = MLP_REGRESSION
model = cfg.module()
data = make_dataset(cfg.dataset)

# Fixed step: every update has modular norm eta, whatever the gradient scale.
_, fixed = train(model, data, FixedStep(0.02), 300, seed=cfg.seed)
# Sharpness-scaled: step length is dual_norm / lambda, so it shrinks near a minimum.
_, sharp = train(model, data, SharpnessScaled(10.0), 300, seed=cfg.seed)

for name, metrics in [("fixed step", fixed), ("sharpness", sharp)]:
    losses = [r["loss"] for r in metrics]
    print(f"{name:10s} loss " + " ".join(f"{losses[i]:.4f}" for i in (0, 10, 50, 100, 300)))

print("fixed-step update norms:", {round(r["update_module_norm"], 6) for r in fixed[:-1]})
print("sharpness update norms, first vs last:", f"{sharp[0]['update_module_norm']:.4f}", f"{sharp[-2]['update_module_norm']:.4f}")
