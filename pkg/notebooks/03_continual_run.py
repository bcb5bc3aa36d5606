# %% [markdown]
# A short continual-learning run
#
# Five tasks of ten new classes each arrive one after another. Replay, EWC and
# distillation only switch on from the second task.

# %%
import numpy as np

from ahc.continual import ExperimentConfig, run_experiment

cfg = ExperimentConfig(epochs=10)
report = run_experiment(cfg)
np.set_printoptions(precision=3, suppress=True)
print(report.accuracy)
print("forgetting:", round(report.forgetting, 4), " final accuracy:",
      round(report.final_accuracy, 4))

# %% which loss terms were active per task
for t in range(cfg.num_tasks):
    rows = [e for e in report.loss_log if e["task_id"] == t]
    active = [k for k in ("replay", "ewc", "distill") if rows[0][f"{k}_active"]]
    print(t, "active:", active or "-", " mean total:", round(np.mean([e["total"] for e in rows]), 3))

# %% memory never crosses the budget
print("peak bytes:", report.max_memory_bytes, "of", cfg.budget_bytes)

# %% a smaller budget keeps fewer exemplars and forgets more
for budget in (10_240, 102_400):
    f = run_experiment(cfg.replace(budget_bytes=budget)).forgetting
    print(f"{budget // 1024:>4} KB  forgetting {f:.4f}")
