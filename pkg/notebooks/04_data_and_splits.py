# %% [markdown]
# # Data loading, splits and synthetic generators

# %%
import tempfile
from pathlib import Path

import numpy as np

from claps import data

lin = data.synth_linear_gaussian(1000, 4, seed=3)
het = data.synth_heteroscedastic(1000, seed=3)
print(lin.name, lin.x.shape, np.round(lin.meta["true_w"], 3))
print(het.name, het.x.shape, "noise sd at x=0, 3:", data.heteroscedastic_sd(np.array([0.0, 3.0])))

# %% [markdown]
# Fractional and exact-count splits; the standardizer is fit on train only.

# %%
sp = data.split(lin, data.SplitSpec(0.6, 0.2, 0.2, seed=7))
print({k: len(v) for k, v in sp.indices.items()})
sp2 = data.split_counts(lin, 500, 199, 300, seed=7)
print({k: len(v) for k, v in sp2.indices.items()})
print("train mean after transform:", np.round(sp.standardizer.transform(sp.train.x).mean(axis=0), 12))

# %% [markdown]
# CSV round trip, including a row with a missing cell that gets dropped.

# %%
with tempfile.TemporaryDirectory() as d:
    path = Path(d) / "toy.csv"
    data.write_csv(lin.subset(np.arange(5)), path, target_name="target")
    with open(path, "a") as fh:
        fh.write("1,2,,4,5\n")
    back = data.load_csv(path, target="target")
    print(back.x.shape, back.meta["dropped_rows"], np.array_equal(back.y, lin.y[:5]))
