# %% [markdown]
# The dual memory bank under a 100 KB budget
#
# Each record is a 10-dim FP32 code plus 48 bytes of metadata: 88 bytes.

# %%
import numpy as np

from ahc.memory import (FeatureRecord, ImportanceWeights, MemoryBank, deserialize,
                        importance, record_nbytes, serialize)

print("bytes per record:", record_nbytes(10))
print("records that fit in 102,400 bytes:", 102_400 // record_nbytes(10))

# %% importance blends uncertainty, difficulty and age
w = ImportanceWeights()
for U, D, A in [(0, 0, w.a_max), (1, 1, 0), (0.5, 0.5, w.a_max // 2), (0.9, 0.1, 100)]:
    print(f"U={U} D={D} age={A:>5}: I={importance(U, D, A, w):.4f}")

# %% fill it well past the budget
rng = np.random.default_rng(0)
bank = MemoryBank()
for i in range(2000):
    r = FeatureRecord(code=rng.normal(size=10), class_id=i % 20, task_id=i // 400,
                      uncertainty=rng.uniform(), difficulty=rng.uniform())
    bank.stm_insert(r)
    if i % 100 == 99:
        bank.consolidate()
        bank.tick_age()
print(bank)
print("bytes in use:", bank.memory_bytes())

# %% LTM keeps the most important records
imps = [r.importance for r in bank.ltm_records()]
print("LTM importance range:", round(min(imps), 3), "to", round(max(imps), 3))
print("STM importance floor:", round(min(r.importance for r in bank.stm_records()), 3))

# %% the file format round-trips bit for bit
blob = serialize(bank)
print("file size:", len(blob), "= 20 +", len(bank), "x 88")
assert serialize(deserialize(blob)) == blob

# %% replay draws are uniform across both stores
picks = bank.sample_replay(32, np.random.default_rng(1))
print("replay classes:", sorted({r.class_id for r in picks}))
