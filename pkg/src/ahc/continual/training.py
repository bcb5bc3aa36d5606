"""The feature-level continual training loop and its instrumentation."""
from __future__ import annotations

import dataclasses
import io
import json
import logging
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .. import compressor as cmp
from ..compressor import MamlConfig
from ..memory import FeatureRecord, ImportanceWeights, MemoryBank
from ..ndcore import Adam, Params
from .losses import (FisherState, ReplayClassifier, classify_loss_and_grad,
                     distill_loss_and_grad, estimate_fisher, ewc_penalty_and_grad,
                     forgetting, predictive_uncertainty, replay_loss_and_grad,
                     running_difficulty)
from .tasks import TaskSpec, generate_task_stream, sample_task_batch

log = logging.getLogger(__name__)

LOSS_PARTS = ("task", "comp", "replay", "ewc", "distill")


class TrainingError(FloatingPointError):
    def __init__(self, step: int, parts: dict[str, float]):
        detail = ", ".join(f"{k}={v:.4g}" for k, v in parts.items())
        super().__init__(f"non-finite total loss at step {step}: {detail}")
        self.step = step
        self.parts = parts


@dataclass(frozen=True)
class ExperimentConfig:
    num_tasks: int = 5
    classes_per_task: int = 10
    samples_per_class: int = 30
    input_dim: int = 64
    code_dim: int = 10
    depth: int = 1
    maml: MamlConfig = MamlConfig()
    weights: ImportanceWeights = ImportanceWeights()
    budget_bytes: int = 102_400
    stm_capacity: int = 1000
    ltm_capacity: int = 5000
    replay_policy: str = "uniform"
    lambda_comp: float = 1.0
    lambda_replay: float = 1.0
    lambda_ewc: float = 5000.0
    lambda_distill: float = 2.0
    replay_n: int = 32
    epochs: int = 30
    batch_size: int = 24
    split_ratio: float = 0.3
    lr: float = 1e-2
    d_shift: float = 4.0
    class_spread: float = 10.0
    sigma: float = 0.5
    fisher_samples: int = 200
    eval_samples: int = 300
    seed: int = 42

    def __post_init__(self):
        positive = ("num_tasks", "classes_per_task", "samples_per_class", "input_dim",
                    "code_dim", "replay_n", "epochs", "batch_size", "fisher_samples",
                    "eval_samples")
        for name in positive:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 for a support/query split")
        if not 0 < self.split_ratio < 1:
            raise ValueError("split_ratio must be in (0, 1)")
        for name in ("lambda_comp", "lambda_replay", "lambda_ewc", "lambda_distill",
                     "lr", "sigma", "class_spread", "budget_bytes", "d_shift"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def replace(self, **changes) -> "ExperimentConfig":
        """Copy with changes; ``maml.*`` / ``weights.*`` keys reach nested fields."""
        nested: dict[str, dict[str, Any]] = {"maml": {}, "weights": {}}
        flat = {}
        for k, v in changes.items():
            head, _, tail = k.partition(".")
            if tail and head in nested:
                nested[head][tail] = v
            else:
                flat[k] = v
        for head, sub in nested.items():
            if sub:
                flat[head] = dataclasses.replace(flat.get(head, getattr(self, head)), **sub)
        return dataclasses.replace(self, **flat)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


@dataclass
class TrainingState:
    phi: Params
    clf: ReplayClassifier
    bank: MemoryBank
    opt_phi: Adam
    opt_clf: Adam
    rng: np.random.Generator
    replay_rng: np.random.Generator
    fisher: FisherState | None = None
    phi_frozen: Params | None = None
    tasks_done: int = 0
    step: int = 0
    memory_trace: list[tuple[int, int]] = field(default_factory=list)
    loss_log: list[dict[str, float]] = field(default_factory=list)

    def params(self) -> Params:
        return {**self.phi, **self.clf.params()}

    def _trace(self) -> None:
        self.memory_trace.append((self.step, self.bank.memory_bytes()))


def init_state(cfg: ExperimentConfig) -> TrainingState:
    ss = np.random.SeedSequence(cfg.seed)
    init_ss, train_ss, replay_ss = ss.spawn(3)
    bank = MemoryBank(code_dim=cfg.code_dim, stm_capacity=cfg.stm_capacity,
                      ltm_capacity=cfg.ltm_capacity, budget_bytes=cfg.budget_bytes,
                      weights=cfg.weights, replay_policy=cfg.replay_policy)
    phi = cmp.init_params(cfg.input_dim, cfg.code_dim, cfg.depth,
                          seed=np.random.default_rng(init_ss))
    return TrainingState(phi=phi, clf=ReplayClassifier.empty(cfg.code_dim), bank=bank,
                         opt_phi=Adam(cfg.maml.meta_lr), opt_clf=Adam(cfg.lr),
                         rng=np.random.default_rng(train_ss),
                         replay_rng=np.random.default_rng(replay_ss))


def _batch_step(state: TrainingState, X: np.ndarray, Y: np.ndarray,
                cfg: ExperimentConfig, task_id: int) -> dict[str, float]:
    split = cmp.split_support_query(X, Y, cfg.split_ratio, state.rng)
    maml = cfg.maml
    traj = cmp.adapt_trajectory(state.phi, split.support, maml)
    phi_k = traj[-1]

    # query objective under adapted compressor, pulled back through the inner loop
    rows_q = state.clf.rows(split.query_labels)
    task, g_adapted, g_clf = classify_loss_and_grad(phi_k, state.clf, split.query, rows_q)
    comp, g_comp = cmp.recon_loss_and_grad(phi_k, split.query)
    for k in g_adapted:
        g_adapted[k] = g_adapted[k] + cfg.lambda_comp * g_comp[k]
    g_phi = cmp.backprop_through_adaptation(traj, split.support, g_adapted, maml)

    parts = {"task": task, "comp": comp, "replay": 0.0, "ewc": 0.0, "distill": 0.0}
    active = {"replay": False, "ewc": False, "distill": False}

    if len(state.bank) > 0:
        records = state.bank.sample_replay(cfg.replay_n, state.replay_rng)
        rep, gp, gc = replay_loss_and_grad(records, state.phi, state.clf)
        parts["replay"] = rep
        active["replay"] = True
        for k in gp:
            g_phi[k] = g_phi[k] + cfg.lambda_replay * gp[k]
        for k in gc:
            g_clf[k] = g_clf[k] + cfg.lambda_replay * gc[k]

    grads = {**g_phi, **g_clf}
    if state.fisher is not None:
        ewc, ge = ewc_penalty_and_grad(state.params(), state.fisher, cfg.lambda_ewc)
        parts["ewc"] = ewc
        active["ewc"] = True
        for k in ge:
            grads[k] = grads[k] + ge[k]
    if state.phi_frozen is not None:
        dist, gd = distill_loss_and_grad(state.phi, state.phi_frozen, X, cfg.lambda_distill)
        parts["distill"] = dist
        active["distill"] = True
        for k in gd:
            grads[k] = grads[k] + gd[k]

    total = (parts["task"] + cfg.lambda_comp * parts["comp"]
             + cfg.lambda_replay * parts["replay"] + parts["ewc"] + parts["distill"])
    if not np.isfinite(total) or not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise TrainingError(state.step, parts)

    state.phi = state.opt_phi.step(state.phi, {k: grads[k] for k in state.phi})
    clf_keys = state.clf.params()
    state.clf = state.clf.with_params(
        state.opt_clf.step(clf_keys, {k: grads[k] for k in clf_keys}))

    state.step += 1
    state.bank.tick_age()
    state._trace()
    entry = {"step": state.step, "task_id": task_id, "total": total, **parts}
    entry.update({f"{k}_active": float(v) for k, v in active.items()})
    state.loss_log.append(entry)
    return entry


def task_dataset(task: TaskSpec, cfg: ExperimentConfig) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([cfg.seed, 2, task.task_id])
    return sample_task_batch(task, cfg.samples_per_class * len(task.classes), rng,
                             balanced=True)


def eval_batch(task: TaskSpec, cfg: ExperimentConfig) -> tuple[np.ndarray, np.ndarray]:
    # own seed per task: evaluation never touches the training streams
    rng = np.random.default_rng([cfg.seed, 3, task.task_id])
    return sample_task_batch(task, cfg.eval_samples, rng)


def store_task_features(state: TrainingState, task: TaskSpec, X: np.ndarray,
                        Y: np.ndarray) -> None:
    """Encode the task's features and append them to STM with U and D scores."""
    z = cmp.encode(state.phi, X)
    logits = state.clf.logits(z)
    U = predictive_uncertainty(logits)
    rows = state.clf.rows(Y)
    logp = logits - logits.max(axis=1, keepdims=True)
    logp = logp - np.log(np.exp(logp).sum(axis=1, keepdims=True))
    D = running_difficulty(-logp[np.arange(len(rows)), rows])
    for i in range(len(X)):
        state.bank.stm_insert(FeatureRecord(code=z[i], class_id=int(Y[i]),
                                            task_id=task.task_id,
                                            uncertainty=U[i], difficulty=D[i]))
        state._trace()


def train_task(state: TrainingState, task: TaskSpec, cfg: ExperimentConfig) -> TrainingState:
    """One pass of the continual loop over ``task`` (mutates and returns ``state``)."""
    state.clf = state.clf.expand(task.classes)
    if state.fisher is not None:
        state.fisher = state.fisher.expand_to(state.params())

    X, Y = task_dataset(task, cfg)
    n = len(X)
    for _ in range(cfg.epochs):
        order = state.rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue
            _batch_step(state, X[idx], Y[idx], cfg, task.task_id)

    store_task_features(state, task, X, Y)
    state.bank.consolidate()
    state._trace()

    m = min(cfg.fisher_samples, n)
    state.fisher = estimate_fisher(state.phi, state.clf, X[:m], Y[:m])
    state.phi_frozen = {k: v.copy() for k, v in state.phi.items()}
    state.tasks_done += 1
    return state


def evaluate(state: TrainingState, tasks: list[TaskSpec], cfg: ExperimentConfig) -> np.ndarray:
    """Accuracy over all seen classes on each task's fixed evaluation batch."""
    accs = []
    for task in tasks:
        X, Y = eval_batch(task, cfg)
        pred = np.argmax(state.clf.logits(cmp.encode(state.phi, X)), axis=1)
        accs.append(float(np.mean(np.asarray(state.clf.class_ids)[pred] == Y)))
    return np.array(accs)


@dataclass
class Report:
    config: dict[str, Any]
    accuracy: np.ndarray          # [t_eval, t_after], NaN above the diagonal
    forgetting: float
    final_accuracy: float
    memory_trace: list[tuple[int, int]]
    loss_log: list[dict[str, float]]
    bank: dict[str, int]
    final_bank: MemoryBank | None = field(default=None, repr=False, compare=False)

    @property
    def max_memory_bytes(self) -> int:
        return max((b for _, b in self.memory_trace), default=0)

    def to_dict(self) -> dict[str, Any]:
        acc = [[None if np.isnan(v) else float(v) for v in row] for row in self.accuracy]
        return {"config": self.config, "accuracy": acc, "forgetting": self.forgetting,
                "final_accuracy": self.final_accuracy,
                "max_memory_bytes": self.max_memory_bytes, "bank": self.bank,
                "memory_trace": [list(t) for t in self.memory_trace],
                "loss_log": self.loss_log}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def to_text(self) -> str:
        T = self.accuracy.shape[0]
        out = io.StringIO()
        out.write("# experiment report\n")
        for k, v in sorted(_flatten_cfg(self.config).items()):
            out.write(f"config.{k} = {v}\n")
        out.write(f"forgetting = {self.forgetting:.6f}\n")
        out.write(f"final_accuracy = {self.final_accuracy:.6f}\n")
        out.write(f"max_memory_bytes = {self.max_memory_bytes}\n")
        for k, v in self.bank.items():
            out.write(f"bank.{k} = {v}\n")
        out.write("\n## accuracy[eval task, after task]\n")
        out.write("eval\\after " + " ".join(f"{j:>7d}" for j in range(T)) + "\n")
        for i in range(T):
            cells = ["      -" if np.isnan(v) else f"{v:7.4f}" for v in self.accuracy[i]]
            out.write(f"{i:>10d} " + " ".join(cells) + "\n")
        out.write("\n## mean loss components per task\n")
        out.write("task " + " ".join(f"{p:>9s}" for p in ("total",) + LOSS_PARTS) + "\n")
        for t in range(T):
            rows = [e for e in self.loss_log if e["task_id"] == t]
            if rows:
                means = [np.mean([e[p] for e in rows]) for p in ("total",) + LOSS_PARTS]
                out.write(f"{t:>4d} " + " ".join(f"{m:9.4f}" for m in means) + "\n")
        return out.getvalue()

    def metric_rows(self) -> list[tuple[int, int, str, float]]:
        """``(seed, task, metric, value)`` rows; task -1 marks run-level metrics."""
        seed = self.config["seed"]
        rows = []
        T = self.accuracy.shape[0]
        for j in range(T):
            for i in range(j + 1):
                rows.append((seed, i, f"acc_after_{j}", float(self.accuracy[i, j])))
        rows.append((seed, -1, "forgetting", self.forgetting))
        rows.append((seed, -1, "final_accuracy", self.final_accuracy))
        rows.append((seed, -1, "max_memory_bytes", float(self.max_memory_bytes)))
        return rows

    def metrics_csv(self) -> str:
        lines = ["seed,task,metric,value"]
        lines += [f"{s},{t},{m},{v!r}" for s, t, m, v in self.metric_rows()]
        return "\n".join(lines) + "\n"

    def memory_csv(self) -> str:
        return "step,bytes\n" + "".join(f"{s},{b}\n" for s, b in self.memory_trace)


def _flatten_cfg(d: dict[str, Any], prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flatten_cfg(v, f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = v
    return out


def run_experiment(cfg: ExperimentConfig, tasks: list[TaskSpec] | None = None) -> Report:
    """Train on the whole stream, evaluating every seen task after each one."""
    if tasks is None:
        tasks = generate_task_stream(cfg.num_tasks, cfg.classes_per_task, cfg.input_dim,
                                     cfg.d_shift, cfg.class_spread, cfg.sigma,
                                     seed=cfg.seed)
    state = init_state(cfg)
    T = len(tasks)
    acc = np.full((T, T), np.nan)
    for t, task in enumerate(tasks):
        train_task(state, task, cfg)
        acc[: t + 1, t] = evaluate(state, tasks[: t + 1], cfg)
        log.info("task %d done: acc=%s bank=%s", t, np.round(acc[: t + 1, t], 3), state.bank)
    return Report(config=cfg.to_dict(), accuracy=acc,
                  forgetting=forgetting(acc) if T > 1 else 0.0,
                  final_accuracy=float(np.mean(acc[:, T - 1])),
                  memory_trace=state.memory_trace, loss_log=state.loss_log,
                  bank={"stm": len(state.bank.stm), "ltm": len(state.bank.ltm_records()),
                        "bytes": state.bank.memory_bytes(),
                        "record_bytes": state.bank.record_bytes},
                  final_bank=state.bank)
