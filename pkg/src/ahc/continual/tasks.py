"""Synthetic class-incremental task streams of Gaussian feature clusters.

Each task owns a few new classes whose prototypes sit around a task centroid.
Consecutive centroids are exactly ``d_shift`` apart in a random direction,
which makes the distribution shift between tasks a controlled knob.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    classes: tuple[int, ...]
    prototypes: np.ndarray  # (len(classes), D)
    sigma: float
    d_shift: float

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if self.prototypes.shape[0] != len(self.classes):
            raise ValueError("one prototype per class required")
        if not np.all(np.isfinite(self.prototypes)):
            raise ValueError("prototypes must be finite")

    @property
    def input_dim(self) -> int:
        return self.prototypes.shape[1]

    @property
    def centroid(self) -> np.ndarray:
        return self.prototypes.mean(axis=0)


def generate_task_stream(num_tasks: int, classes_per_task: int = 2, input_dim: int = 64,
                         d_shift: float = 4.0, class_spread: float = 4.0,
                         sigma: float = 1.0, seed: int = 0) -> list[TaskSpec]:
    """``num_tasks`` tasks with globally unique, contiguous class ids.

    Class prototypes are the task centroid plus zero-mean offsets of typical
    norm ``class_spread``; centring the offsets makes the prototype centroid
    equal the task centroid exactly.
    """
    if num_tasks < 1:
        raise ValueError("num_tasks must be >= 1")
    if classes_per_task < 1:
        raise ValueError("classes_per_task must be >= 1")
    rng = np.random.default_rng(seed)
    centroid = rng.normal(size=input_dim)
    tasks = []
    for t in range(num_tasks):
        if t > 0:
            u = rng.normal(size=input_dim)
            centroid = centroid + d_shift * u / np.linalg.norm(u)
        offsets = rng.normal(size=(classes_per_task, input_dim)) * class_spread / np.sqrt(input_dim)
        offsets -= offsets.mean(axis=0)
        classes = tuple(range(t * classes_per_task, (t + 1) * classes_per_task))
        tasks.append(TaskSpec(t, classes, centroid + offsets, sigma,
                              d_shift if t > 0 else 0.0))
    return tasks


def sample_task_batch(task: TaskSpec, n: int, rng: np.random.Generator,
                      balanced: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Features ``prototype[label] + sigma * N(0, I)`` and their class ids.

    Labels are uniform over the task's classes; ``balanced`` draws an exact
    equal share per class (shuffled) instead of i.i.d. labels.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    k = len(task.classes)
    if balanced:
        idx = rng.permutation(np.resize(np.arange(k), n))
    else:
        idx = rng.integers(k, size=n)
    X = task.prototypes[idx] + task.sigma * rng.normal(size=(n, task.input_dim))
    return X, np.asarray(task.classes)[idx]
