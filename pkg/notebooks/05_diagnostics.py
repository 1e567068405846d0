# %% [markdown]
# # Variance decomposition and method selection
#
# The epistemic share and posterior trace say whether the Laplace head still
# carries information; the Spearman correlation between absolute residuals
# and predicted scale flags structured noise.

# %%
import numpy as np

from claps import diagnostics, llla
from claps.data import synth_linear_gaussian

ds = synth_linear_gaussian(3000, 16, seed=0)
x_eval = ds.x[2000:]
yc = ds.y[:2000] - ds.y[:2000].mean()

# %% [markdown]
# Posterior contraction: refit the head on growing prefixes.

# %%
for p in diagnostics.subsample_curves(ds.x[:2000], yc, [50, 150, 500, 2000], x_eval):
    print(f"n={p.n:5d}  mean epi={p.epi_mean:.4f}  tr={p.trace_sigma:.4f}  sigma2={p.sigma2:.3f}")

# %% [markdown]
# A head fit on only 25 rows: large epistemic share and trace. Because the
# linear model is correct here, residual size really does follow sqrt(v),
# so rho is positive as well and the rule does not commit to either regime.

# %%
post = llla.fit_llla(ds.x[:25], yc[:25])
_, _, summary = diagnostics.decompose(post, x_eval)
pred = llla.predictive(post, x_eval, ds.y[:2000].mean())
sp = diagnostics.spearman(np.abs(ds.y[2000:] - pred.mu), np.sqrt(pred.v))
print(summary.table_row())
print(sp)
print(diagnostics.select_method(summary, sp).choice)
