# %% [markdown]
# # Memory and compute budgets
#
# Every shipped architecture is costed layer by layer: 8-bit weights plus the
# largest working set of activations, and multiply-adds per inference.

# %%
from tinykws.estimator import CLASSES, estimate
from tinykws.model import builtin_model, builtin_models

for name in builtin_models():
    r = estimate(builtin_model(name))
    print(f"{name:<14} {r.memory_bytes / 1000:7.1f} KB {r.ops / 1e6:6.2f} MOps  class {r.constraint.name if r.constraint else '-'}")

# %%
print(estimate(builtin_model("dscnn_s")).table())

# %% [markdown]
# ## Grid search under a budget
#
# Candidates that fit the small class are enumerated, and the Pareto front is
# taken over (memory, ops, score). Without trained accuracies the score is
# just -ops, so the front collapses to the cheapest model. A CSV of real
# scores (`--scores` on the CLI, `load_scores` here) makes it meaningful.

# %%
from tinykws.search import SearchSpace, enumerate_candidates, pareto_front, scalability_sweep

space = SearchSpace("DSCNN", mfcc=(10,), strides=(20,))
cands = list(enumerate_candidates(space, CLASSES["S"]))
front = pareto_front(cands)
print(len(cands), "candidates,", len(front), "on the front")
for c in sorted(front, key=lambda c: c.memory_bytes)[:5]:
    print(c.row())

# %% [markdown]
# Shrinking the DS-CNN width shows how far down the budget can go.

# %%
sweep = scalability_sweep(8.0)
print(sweep.message)
print([(c.memory_bytes, c.ops) for c in sweep.ladder[:4]])
