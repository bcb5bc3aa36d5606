"""Dual-memory exemplar bank under a hard byte budget.

Records hold an FP32 code plus 48 bytes of metadata, so one record costs
``4 * d + 48`` bytes (88 for d = 10). The short-term store is a FIFO; the
long-term store keeps the most important records and evicts the least
important one. Whenever the total payload exceeds the budget, the least
important records are dropped, long-term store first.

Eviction order is the ascending key ``(importance, -age, task_id, seq)``:
lowest importance first, then the older record, then the lower task id, then
the earlier insertion.
"""
from __future__ import annotations

import heapq
import struct
from collections import deque
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

METADATA_BYTES = 48
BANK_MAGIC = b"AHCM"
BANK_VERSION = 1
_HEADER = struct.Struct("<4sIIII")
HEADER_BYTES = _HEADER.size  # 20


def record_nbytes(code_dim: int) -> int:
    return 4 * code_dim + METADATA_BYTES


def record_dtype(code_dim: int) -> np.dtype:
    dt = np.dtype([
        ("code", "<f4", (code_dim,)),
        ("class_id", "<u4"),
        ("bbox", "<f4", (4,)),
        ("task_id", "<u4"),
        ("importance", "<f4"),
        ("uncertainty", "<f4"),
        ("difficulty", "<f4"),
        ("age", "<u4"),
        ("reserved", "V8"),
    ])
    assert dt.itemsize == record_nbytes(code_dim)
    return dt


class BankFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class ImportanceWeights:
    alpha: float = 0.3
    beta: float = 0.4
    gamma: float = 0.3
    tau: float = 0.5
    a_max: int = 10_000

    def __post_init__(self):
        w = (self.alpha, self.beta, self.gamma)
        if min(w) < 0 or abs(sum(w) - 1.0) > 1e-9:
            raise ValueError(f"importance weights must lie on the simplex, got {w}")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must be in [0, 1], got {self.tau}")
        if self.a_max <= 0:
            raise ValueError("a_max must be positive")


def importance(uncertainty: float, difficulty: float, age: int,
               w: ImportanceWeights = ImportanceWeights()) -> float:
    """Weighted blend of uncertainty, difficulty and recency, in [0, 1]."""
    if not 0.0 <= uncertainty <= 1.0:
        raise ValueError(f"uncertainty {uncertainty} outside [0, 1]")
    if not 0.0 <= difficulty <= 1.0:
        raise ValueError(f"difficulty {difficulty} outside [0, 1]")
    if age < 0:
        raise ValueError(f"negative age {age}")
    recency = 1.0 - min(age, w.a_max) / w.a_max
    return w.alpha * uncertainty + w.beta * difficulty + w.gamma * recency


@dataclass(eq=False)
class FeatureRecord:
    code: np.ndarray
    class_id: int
    task_id: int
    uncertainty: float = 0.0
    difficulty: float = 0.0
    age: int = 0
    importance: float = 0.0
    bbox: tuple[float, float, float, float] = (0.0, 0.0, 1.0, 1.0)

    def __post_init__(self):
        self.code = np.asarray(self.code, dtype=np.float32).ravel()
        self.uncertainty = float(np.float32(self.uncertainty))
        self.difficulty = float(np.float32(self.difficulty))
        self.importance = float(np.float32(self.importance))
        self.bbox = tuple(float(np.float32(v)) for v in self.bbox)
        if not 0.0 <= self.uncertainty <= 1.0 or not 0.0 <= self.difficulty <= 1.0:
            raise ValueError("uncertainty and difficulty must lie in [0, 1]")
        x1, y1, x2, y2 = self.bbox
        if not (x1 <= x2 and y1 <= y2):
            raise ValueError(f"bbox {self.bbox} is not ordered")
        if self.class_id < 0 or self.task_id < 0 or self.age < 0:
            raise ValueError("class_id, task_id and age must be non-negative")

    @property
    def nbytes(self) -> int:
        return record_nbytes(self.code.size)

    def __eq__(self, other):
        if not isinstance(other, FeatureRecord):
            return NotImplemented
        return (self.code.tobytes() == other.code.tobytes()
                and self.class_id == other.class_id and self.task_id == other.task_id
                and self.bbox == other.bbox and self.age == other.age
                and np.float32(self.importance).tobytes() == np.float32(other.importance).tobytes()
                and self.uncertainty == other.uncertainty
                and self.difficulty == other.difficulty)

    def __repr__(self):
        return (f"FeatureRecord(class_id={self.class_id}, task_id={self.task_id}, "
                f"I={self.importance:.4f}, U={self.uncertainty:.3f}, "
                f"D={self.difficulty:.3f}, age={self.age})")


def mean_pool(feature_map: np.ndarray) -> np.ndarray:
    """Spatial average of an ``H x W x D`` map to a single D-vector."""
    fm = np.asarray(feature_map, dtype=np.float64)
    if fm.ndim != 3 or fm.shape[0] < 1 or fm.shape[1] < 1:
        raise ValueError(f"expected a non-empty H x W x D map, got shape {fm.shape}")
    return fm.mean(axis=(0, 1))


class MemoryBank:
    """STM (FIFO) + LTM (importance-ordered) replay store with a byte budget."""

    def __init__(self, code_dim: int = 10, stm_capacity: int = 1000,
                 ltm_capacity: int = 5000, budget_bytes: int = 102_400,
                 weights: ImportanceWeights = ImportanceWeights(),
                 replay_policy: str = "uniform"):
        if code_dim <= 0 or stm_capacity < 0 or ltm_capacity < 0 or budget_bytes < 0:
            raise ValueError("bank sizes must be non-negative (code_dim positive)")
        if replay_policy not in ("uniform", "stratified"):
            raise ValueError(f"unknown replay policy {replay_policy!r}")
        self.code_dim = code_dim
        self.stm_capacity = stm_capacity
        self.ltm_capacity = ltm_capacity
        self.budget_bytes = budget_bytes
        self.weights = weights
        self.replay_policy = replay_policy
        self.step_counter = 0
        self.stm: deque[tuple[int, FeatureRecord]] = deque()
        self._ltm: list[tuple[float, int, int, int, FeatureRecord]] = []
        self._ltm_dirty = False
        self._seq = 0

    # -- bookkeeping -------------------------------------------------------
    def __len__(self) -> int:
        return len(self.stm) + len(self._ltm)

    @property
    def record_bytes(self) -> int:
        return record_nbytes(self.code_dim)

    def memory_bytes(self) -> int:
        return len(self) * self.record_bytes

    def stm_records(self) -> list[FeatureRecord]:
        return [r for _, r in self.stm]

    def ltm_records(self) -> list[FeatureRecord]:
        """LTM in descending eviction key (most important first)."""
        return [e[-1] for e in sorted(self._ltm, reverse=True)]

    def records(self) -> Iterator[FeatureRecord]:
        yield from self.stm_records()
        yield from self.ltm_records()

    def _score(self, r: FeatureRecord) -> float:
        return float(np.float32(importance(r.uncertainty, r.difficulty, r.age, self.weights)))

    def _entry(self, seq: int, r: FeatureRecord):
        return (r.importance, -r.age, r.task_id, seq, r)

    def _heap(self) -> list:
        if self._ltm_dirty:
            self._ltm = [self._entry(e[3], e[4]) for e in self._ltm]
            heapq.heapify(self._ltm)
            self._ltm_dirty = False
        return self._ltm

    def _check(self, r: FeatureRecord) -> None:
        if r.code.size != self.code_dim:
            raise ValueError(f"record code has {r.code.size} dims, bank stores {self.code_dim}")

    # -- mutations ---------------------------------------------------------
    def stm_insert(self, record: FeatureRecord) -> int:
        """Append to STM (dropping the oldest when full); returns budget evictions."""
        self._check(record)
        record.importance = self._score(record)
        self.stm.append((self._seq, record))
        self._seq += 1
        if len(self.stm) > self.stm_capacity:
            self.stm.popleft()
        return self.enforce_budget()

    def ltm_insert(self, record: FeatureRecord) -> bool:
        """Insert into LTM; returns False when the incoming record is discarded."""
        self._check(record)
        record.importance = self._score(record)
        accepted = self._ltm_push(record)
        self.enforce_budget()
        return accepted

    def _ltm_push(self, record: FeatureRecord) -> bool:
        heap = self._heap()
        if self.ltm_capacity == 0:
            return False
        entry = self._entry(self._seq, record)
        self._seq += 1
        if len(heap) < self.ltm_capacity:
            heapq.heappush(heap, entry)
            return True
        if heap[0][0] < record.importance:
            heapq.heapreplace(heap, entry)
            return True
        return False

    def consolidate(self) -> int:
        """Move every STM record with importance below tau into LTM."""
        keep: deque = deque()
        migrated = 0
        for seq, r in self.stm:
            r.importance = self._score(r)
            if r.importance < self.weights.tau:
                self._ltm_push(r)
                migrated += 1
            else:
                keep.append((seq, r))
        self.stm = keep
        self.enforce_budget()
        return migrated

    def _evict_one(self) -> FeatureRecord:
        heap = self._heap()
        if heap:
            return heapq.heappop(heap)[-1]
        i = min(range(len(self.stm)),
                key=lambda j: self._entry(*self.stm[j])[:4])
        seq, r = self.stm[i]
        del self.stm[i]
        return r

    def enforce_budget(self) -> int:
        evicted = 0
        while self.memory_bytes() > self.budget_bytes:
            self._evict_one()
            evicted += 1
        return evicted

    def tick_age(self) -> None:
        self.step_counter += 1
        for _, r in self.stm:
            r.age += 1
            r.importance = self._score(r)
        for e in self._ltm:
            r = e[-1]
            r.age += 1
            r.importance = self._score(r)
        self._ltm_dirty = bool(self._ltm)

    # -- sampling ----------------------------------------------------------
    def sample_replay(self, n: int, rng: np.random.Generator) -> list[FeatureRecord]:
        """Uniform draw over STM and LTM together, without replacement when possible."""
        if n < 1:
            raise ValueError("n must be >= 1")
        pool = list(self.records())
        if not pool:
            raise ValueError("cannot sample from an empty bank")
        if self.replay_policy == "stratified":
            return self._sample_stratified(pool, n, rng)
        idx = rng.choice(len(pool), size=n, replace=len(pool) < n)
        return [pool[i] for i in idx]

    def _sample_stratified(self, pool, n, rng):
        by_task: dict[int, list[FeatureRecord]] = {}
        for r in pool:
            by_task.setdefault(r.task_id, []).append(r)
        tasks = sorted(by_task)
        counts = np.full(len(tasks), n // len(tasks))
        counts[rng.permutation(len(tasks))[: n % len(tasks)]] += 1
        out = []
        for t, c in zip(tasks, counts):
            group = by_task[t]
            if c:
                idx = rng.choice(len(group), size=c, replace=len(group) < c)
                out.extend(group[i] for i in idx)
        return out

    # -- persistence -------------------------------------------------------
    def to_bytes(self) -> bytes:
        return serialize(self)

    def __eq__(self, other):
        if not isinstance(other, MemoryBank):
            return NotImplemented
        return (self.code_dim == other.code_dim
                and self.stm_records() == other.stm_records()
                and self.ltm_records() == other.ltm_records())

    def __repr__(self):
        return (f"MemoryBank(d={self.code_dim}, stm={len(self.stm)}/{self.stm_capacity}, "
                f"ltm={len(self._ltm)}/{self.ltm_capacity}, "
                f"bytes={self.memory_bytes()}/{self.budget_bytes})")


def _pack(records: Iterable[FeatureRecord], code_dim: int) -> np.ndarray:
    records = list(records)
    arr = np.zeros(len(records), dtype=record_dtype(code_dim))
    for i, r in enumerate(records):
        arr[i] = (r.code, r.class_id, r.bbox, r.task_id, r.importance,
                  r.uncertainty, r.difficulty, r.age, b"\0" * 8)
    return arr


def serialize(bank: MemoryBank) -> bytes:
    stm, ltm = bank.stm_records(), bank.ltm_records()
    head = _HEADER.pack(BANK_MAGIC, BANK_VERSION, bank.code_dim, len(stm), len(ltm))
    body = _pack(stm, bank.code_dim).tobytes() + _pack(ltm, bank.code_dim).tobytes()
    return head + body


def _unpack(arr: np.ndarray, base: int, size: int) -> list[FeatureRecord]:
    out = []
    for i, row in enumerate(arr):
        if bytes(row["reserved"]) != b"\0" * 8:
            raise BankFormatError(f"record {i}: reserved bytes not zero",
                                  base + i * size + size - 8)
        try:
            out.append(FeatureRecord(
                code=row["code"].copy(), class_id=int(row["class_id"]),
                task_id=int(row["task_id"]), uncertainty=float(row["uncertainty"]),
                difficulty=float(row["difficulty"]), age=int(row["age"]),
                importance=float(row["importance"]),
                bbox=tuple(float(v) for v in row["bbox"])))
        except ValueError as exc:
            raise BankFormatError(f"record {i}: {exc}", base + i * size) from None
    return out


def deserialize(blob: bytes, **bank_kwargs) -> MemoryBank:
    """Rebuild a bank from :func:`serialize` output.

    Capacities, budget and weights are not part of the file; pass them as
    keyword arguments (defaults otherwise).
    """
    blob = bytes(blob)
    if len(blob) < HEADER_BYTES:
        raise BankFormatError(f"truncated header: {len(blob)} of {HEADER_BYTES} bytes",
                              len(blob))
    magic, version, d, n_stm, n_ltm = _HEADER.unpack_from(blob)
    if magic != BANK_MAGIC:
        raise BankFormatError(f"bad magic {magic!r}, expected {BANK_MAGIC!r}", 0)
    if version != BANK_VERSION:
        raise BankFormatError(f"unsupported version {version}", 4)
    if d == 0:
        raise BankFormatError("code dimension is zero", 8)
    size = record_nbytes(d)
    expected = HEADER_BYTES + (n_stm + n_ltm) * size
    if len(blob) != expected:
        where = min(len(blob), expected)
        kind = "truncated" if len(blob) < expected else "trailing bytes in"
        raise BankFormatError(f"{kind} payload: {len(blob)} bytes, expected {expected}", where)
    dt = record_dtype(d)
    stm = _unpack(np.frombuffer(blob, dt, n_stm, HEADER_BYTES), HEADER_BYTES, size)
    ltm_base = HEADER_BYTES + n_stm * size
    ltm = _unpack(np.frombuffer(blob, dt, n_ltm, ltm_base), ltm_base, size)

    bank = MemoryBank(code_dim=d, **bank_kwargs)
    # LTM is stored most-important first; sequence numbers preserve that order
    for i, r in enumerate(reversed(ltm)):
        bank._ltm.append(bank._entry(i, r))
    heapq.heapify(bank._ltm)
    for i, r in enumerate(stm):
        bank.stm.append((len(ltm) + i, r))
    bank._seq = len(ltm) + len(stm)
    return bank
