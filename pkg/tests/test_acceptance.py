"""Release acceptance suite: one test per criterion, each timed against its
runtime limit. Outcomes are summarised at the end of the pytest run."""
import time

import numpy as np
import pytest

from ahc import compressor as cmp
from ahc.compressor import MamlConfig, SupportQuerySplit
from ahc.continual import (ExperimentConfig, estimate_fisher, ewc_penalty,
                           ewc_penalty_and_grad, forgetting, generate_task_stream,
                           run_experiment, sample_task_batch)
from ahc.continual.losses import ReplayClassifier
from ahc.memory import (FeatureRecord, ImportanceWeights, MemoryBank, deserialize,
                        importance, serialize)
from ahc.ndcore import finite_diff_grad, flatten, max_relative_error, unflatten

from _reference import run_fuzz
from test_memory import random_bank


def test_memory_bound(criterion):
    t0 = time.perf_counter()
    bank = MemoryBank(code_dim=10)
    rng = np.random.default_rng(0)
    worst_n, worst_bytes = 0, 0
    for i in range(3000):
        r = FeatureRecord(code=rng.normal(size=10), class_id=i % 50, task_id=i % 5,
                          uncertainty=rng.uniform(), difficulty=rng.uniform())
        bank.stm_insert(r) if i % 2 else bank.ltm_insert(r)
        if i % 50 == 0:
            bank.consolidate()
            bank.tick_age()
        worst_n = max(worst_n, len(bank))
        worst_bytes = max(worst_bytes, bank.memory_bytes())
    one = MemoryBank(code_dim=10)
    one.stm_insert(FeatureRecord(np.zeros(10), 0, 0))
    per_record = len(serialize(one)) - len(serialize(MemoryBank(code_dim=10)))
    elapsed = time.perf_counter() - t0
    ok = criterion(1, "memory bound", worst_n <= 1163 and worst_bytes <= 102_400
                   and per_record == 88 and elapsed < 5,
                   f"max {worst_n} records, {worst_bytes} bytes, {per_record} B/record, "
                   f"{elapsed:.2f}s")
    assert ok


def oracle_params(D, d, depth, seed):
    """Random parameters with nonzero biases. With zero biases an input whose
    encoder ReLUs are all off maps to z = 0 and sits exactly on a decoder kink,
    where central differences and the analytic subgradient legitimately differ."""
    p = cmp.init_params(D, d, depth, hidden=5, seed=seed)
    rng = np.random.default_rng([seed, 99])
    return {k: v + 0.1 * rng.normal(size=v.shape) if k.endswith("bias") else v
            for k, v in p.items()}


def test_gradient_oracles(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    errs = {"recon_grad": 0.0, "ewc_penalty": 0.0, "meta_gradient": 0.0}
    for seed in range(5):
        for depth in (1, 2):
            p = oracle_params(8, 3, depth, seed)
            F = rng.normal(size=(10, 8))
            fd = finite_diff_grad(lambda v: cmp.recon_loss(unflatten(v, p), F), flatten(p))
            errs["recon_grad"] = max(errs["recon_grad"], max_relative_error(
                flatten(cmp.recon_grad(p, F)), fd))

        phi = cmp.init_params(6, 3, seed=seed)
        clf = ReplayClassifier(rng.normal(size=(3, 3)), rng.normal(size=3), [0, 1, 2])
        fs = estimate_fisher(phi, clf, rng.normal(size=(8, 6)), rng.integers(0, 3, 8))
        theta = {k: v + 0.1 * rng.normal(size=v.shape) for k, v in fs.theta_star.items()}
        fd = finite_diff_grad(lambda v: ewc_penalty(unflatten(v, theta), fs, 5000.0),
                              flatten(theta))
        errs["ewc_penalty"] = max(errs["ewc_penalty"], max_relative_error(
            flatten(ewc_penalty_and_grad(theta, fs, 5000.0)[1]), fd))

        for depth in (1, 2):
            p = oracle_params(8, 3, depth, seed + 10)
            assert flatten(p).size <= 200
            split = SupportQuerySplit(rng.normal(size=(6, 8)), rng.normal(size=(5, 8)))
            mcfg = MamlConfig(inner_steps=5, inner_lr=0.05)

            def adapted(v):
                return cmp.recon_loss(cmp.maml_adapt(unflatten(v, p), split.support, mcfg),
                                      split.query)

            fd = finite_diff_grad(adapted, flatten(p))
            errs["meta_gradient"] = max(errs["meta_gradient"], max_relative_error(
                flatten(cmp.meta_gradient(p, split, mcfg)), fd))
    elapsed = time.perf_counter() - t0
    ok = (errs["recon_grad"] <= 1e-4 and errs["ewc_penalty"] <= 1e-4
          and errs["meta_gradient"] <= 1e-3 and elapsed < 30)
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items()) + f", {elapsed:.1f}s"
    assert criterion(2, "gradient oracles", ok, detail)


def test_maml_adaptation_benefit(criterion):
    """Meta-train on one task, then compare adapted and unadapted
    reconstruction on the next, shifted task."""
    t0 = time.perf_counter()
    cfg = MamlConfig()
    wins = 0
    for seed in range(10):
        tasks = generate_task_stream(2, 10, 64, d_shift=4.0, class_spread=10.0, sigma=0.5,
                                     seed=seed)

        def sampler(rng, task=tasks[0]):
            X, _ = sample_task_batch(task, 24, rng)
            return cmp.split_support_query(X, rho=0.3, rng=rng)

        phi = cmp.meta_train(cfg, sampler, 200, seed=seed, input_dim=64, code_dim=10)
        rng = np.random.default_rng([seed, 1])
        X, _ = sample_task_batch(tasks[1], 24, rng)
        split = cmp.split_support_query(X, rho=0.3, rng=rng)
        unadapted = cmp.recon_loss(phi, split.query)
        adapted = cmp.recon_loss(cmp.maml_adapt(phi, split.support, cfg), split.query)
        wins += adapted < unadapted
    elapsed = time.perf_counter() - t0
    assert criterion(3, "MAML adaptation benefit", wins >= 9 and elapsed < 60,
                     f"K=5 beat K=0 in {wins}/10 seeds, {elapsed:.1f}s")


def forgetting_loops(acc):
    T = len(acc)
    total = 0.0
    for i in range(T - 1):
        best = max(acc[i][j] for j in range(i, T))
        total += best - acc[i][T - 1]
    return total / (T - 1)


def test_forgetting_metric(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        T = int(rng.integers(2, 10))
        acc = rng.uniform(size=(T, T))
        worst = max(worst, abs(forgetting(acc) - forgetting_loops(acc.tolist())))
    elapsed = time.perf_counter() - t0
    assert criterion(4, "forgetting metric", worst <= 1e-12 and elapsed < 1,
                     f"max abs diff {worst:.1e}, {elapsed:.3f}s")


@pytest.mark.slow
def test_forgetting_trend_in_memory(criterion):
    t0 = time.perf_counter()
    budgets = (10_240, 51_200, 102_400)
    means = []
    for b in budgets:
        runs = [run_experiment(ExperimentConfig(budget_bytes=b, seed=s)).forgetting
                for s in range(5)]
        means.append(float(np.mean(runs)))
    elapsed = time.perf_counter() - t0
    monotone = all(b <= a for a, b in zip(means, means[1:]))
    detail = ", ".join(f"{b // 1024}KB:{m:.4f}" for b, m in zip(budgets, means))
    assert criterion(5, "forgetting trend in memory", monotone and elapsed < 300,
                     f"{detail}, {elapsed:.0f}s")


def test_eviction_semantics(criterion):
    t0 = time.perf_counter()
    try:
        detail = f"{run_fuzz(100_000, seed=123)} ops match the reference model"
        ok = True
    except AssertionError as exc:
        detail, ok = str(exc), False
    elapsed = time.perf_counter() - t0
    assert criterion(6, "eviction semantics", ok and elapsed < 30,
                     f"{detail}, {elapsed:.1f}s")


def test_importance_formula(criterion):
    t0 = time.perf_counter()
    w = ImportanceWeights()
    tagged = (importance(0, 0, w.a_max, w) == 0.0, importance(1, 1, 0, w) == 1.0,
              importance(0.5, 0.5, w.a_max // 2, w) == 0.5)
    rng = np.random.default_rng(3)
    in_range = True
    for _ in range(20_000):
        raw = rng.uniform(size=3)
        raw /= raw.sum()
        ws = ImportanceWeights(*raw, a_max=int(rng.integers(1, 20_000)))
        v = importance(rng.uniform(), rng.uniform(), int(rng.integers(0, 40_000)), ws)
        in_range &= 0.0 <= v <= 1.0
    elapsed = time.perf_counter() - t0
    assert criterion(7, "importance formula", all(tagged) and in_range and elapsed < 1,
                     f"tagged examples {sum(tagged)}/3 exact, {elapsed:.2f}s")


@pytest.mark.slow
def test_training_loop_integration(criterion):
    t0 = time.perf_counter()
    first = run_experiment(ExperimentConfig())
    elapsed = time.perf_counter() - t0
    second = run_experiment(ExperimentConfig())
    task0 = [e for e in first.loss_log if e["task_id"] == 0]
    inactive = all(e["replay_active"] == e["ewc_active"] == e["distill_active"] == 0
                   for e in task0)
    budget = first.max_memory_bytes <= 102_400
    same = first.to_json() == second.to_json() and first.to_text() == second.to_text()
    ok = inactive and budget and same and elapsed < 120
    assert criterion(8, "training loop integration", ok,
                     f"{elapsed:.1f}s, first task terms inactive={inactive}, "
                     f"max bytes {first.max_memory_bytes}, bit-identical={same}")


def test_serialization(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    exact = 0
    for _ in range(1000):
        bank = random_bank(rng, int(rng.choice([8, 10, 16])))
        blob = serialize(bank)
        back = deserialize(blob)
        exact += back == bank and serialize(back) == blob
    blob = serialize(random_bank(np.random.default_rng(5)))
    rejected = []
    for bad, offset in ((b"XXXX" + blob[4:], 0),
                        (blob[:4] + b"\x09\0\0\0" + blob[8:], 4),
                        (blob[:8] + b"\0\0\0\0" + blob[12:], 8),
                        (blob[:12], 12)):
        try:
            deserialize(bad)
            rejected.append(False)
        except ValueError as exc:
            rejected.append(getattr(exc, "offset", None) == offset)
    elapsed = time.perf_counter() - t0
    assert criterion(9, "serialization", exact == 1000 and all(rejected) and elapsed < 10,
                     f"{exact}/1000 bit-exact, {sum(rejected)}/4 corruptions located, "
                     f"{elapsed:.1f}s")
