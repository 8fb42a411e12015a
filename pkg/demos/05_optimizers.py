"""
LARS, Adam and the learning-rate schedules
==========================================
"""

import numpy as np

from premix.optim import OptimState, ScheduleSpec, adam_step, lars_step, step_lr, warmup_cosine_lr

spec = ScheduleSpec()
for epoch in (0, 5, 10, 150, 299):
    print(f"epoch {epoch:3d}:", {k: f"{v:.2e}" for k, v in warmup_cosine_lr(spec, epoch).items()})

print("fine-tuning lr at epochs 0, 49, 50:", [step_lr(2e-4, e) for e in (0, 49, 50)])

# LARS scales weight updates by the ratio of parameter and gradient norms
w = {"layer.w": np.array([1.0, 0.0])}
lars_step(w, {"layer.w": np.array([0.0, 1.0])}, OptimState(), lr=1.0, weight_decay=0.0, momentum=0.0)
print("LARS step size:", np.linalg.norm(w["layer.w"] - [1.0, 0.0]))

w = {"a": np.zeros(3)}
adam_step(w, {"a": np.ones(3)}, OptimState(), lr=2e-4, weight_decay=0.0)
print("Adam first step:", w["a"])
