"""Brute-force replay bank used as an oracle for ``MemoryBank``.

Plain lists, linear scans, no heaps. Records are dicts so nothing is shared
with the implementation under test.
"""
import numpy as np

from ahc.memory import FeatureRecord, ImportanceWeights, importance, record_nbytes


class RefBank:
    def __init__(self, code_dim, stm_capacity, ltm_capacity, budget_bytes,
                 weights=ImportanceWeights()):
        self.size = record_nbytes(code_dim)
        self.stm_cap, self.ltm_cap, self.budget = stm_capacity, ltm_capacity, budget_bytes
        self.w = weights
        self.stm, self.ltm = [], []
        self.seq = 0

    def _score(self, r):
        return float(np.float32(importance(r["U"], r["D"], r["age"], self.w)))

    @staticmethod
    def _key(r):
        return (r["imp"], -r["age"], r["task"], r["seq"])

    def _new(self, U, D, age, task, cls):
        r = dict(U=float(np.float32(U)), D=float(np.float32(D)), age=age, task=task, cls=cls,
                 seq=self.seq)
        self.seq += 1
        r["imp"] = self._score(r)
        return r

    def _budget(self):
        while (len(self.stm) + len(self.ltm)) * self.size > self.budget:
            pool = self.ltm if self.ltm else self.stm
            pool.remove(min(pool, key=self._key))

    def _ltm_add(self, r):
        if self.ltm_cap == 0:
            return
        r = dict(r, seq=self.seq)
        self.seq += 1
        if len(self.ltm) < self.ltm_cap:
            self.ltm.append(r)
        else:
            low = min(self.ltm, key=self._key)
            if low["imp"] < r["imp"]:
                self.ltm.remove(low)
                self.ltm.append(r)

    def stm_insert(self, *fields):
        self.stm.append(self._new(*fields))
        if len(self.stm) > self.stm_cap:
            self.stm.pop(0)
        self._budget()

    def ltm_insert(self, *fields):
        r = self._new(*fields)
        self.seq -= 1  # the bank spends one sequence number per LTM insert
        self._ltm_add(r)
        self._budget()

    def consolidate(self):
        keep = []
        for r in self.stm:
            r["imp"] = self._score(r)
            (self._ltm_add if r["imp"] < self.w.tau else keep.append)(r)
        self.stm = keep
        self._budget()

    def tick(self):
        for r in self.stm + self.ltm:
            r["age"] += 1
            r["imp"] = self._score(r)

    def state(self):
        def view(r):
            return (r["cls"], r["task"], r["age"], r["imp"])
        return ([view(r) for r in self.stm],
                sorted(view(r) for r in self.ltm))


def bank_state(bank):
    def view(r: FeatureRecord):
        return (r.class_id, r.task_id, r.age, r.importance)
    return ([view(r) for r in bank.stm_records()],
            sorted(view(r) for r in bank.ltm_records()))


def run_fuzz(n_ops, seed, code_dim=4, stm_capacity=6, ltm_capacity=9, budget_records=12):
    """Drive bank and reference with the same random op stream; return the
    number of ops executed (raises AssertionError on the first divergence)."""
    from ahc.memory import MemoryBank

    rng = np.random.default_rng(seed)
    budget = budget_records * record_nbytes(code_dim)
    bank = MemoryBank(code_dim=code_dim, stm_capacity=stm_capacity,
                      ltm_capacity=ltm_capacity, budget_bytes=budget,
                      weights=ImportanceWeights(a_max=50))
    ref = RefBank(code_dim, stm_capacity, ltm_capacity, budget, ImportanceWeights(a_max=50))
    cls = 0
    for step in range(n_ops):
        op = rng.random()
        if op < 0.75:
            # coarse grids make importance ties common so tie-breaks get exercised
            fields = (rng.integers(0, 5) / 4, rng.integers(0, 5) / 4,
                      int(rng.integers(0, 60)), int(rng.integers(0, 3)), cls)
            cls += 1
            rec = FeatureRecord(np.zeros(code_dim), class_id=fields[4], task_id=fields[3],
                                uncertainty=fields[0], difficulty=fields[1], age=fields[2])
            if op < 0.45:
                bank.stm_insert(rec)
                ref.stm_insert(*fields)
            else:
                bank.ltm_insert(rec)
                ref.ltm_insert(*fields)
        elif op < 0.9:
            bank.tick_age()
            ref.tick()
        else:
            bank.consolidate()
            ref.consolidate()
        if bank_state(bank) != ref.state():
            raise AssertionError(f"bank diverged from reference at op {step}")
        if bank.memory_bytes() > budget:
            raise AssertionError(f"budget exceeded at op {step}")
    return n_ops
