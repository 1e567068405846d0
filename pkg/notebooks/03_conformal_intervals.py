# %% [markdown]
# # Conformal calibration and intervals
#
# Centrality scores, the order-statistic threshold and the four interval
# families.

# %%
import math

import numpy as np

from claps import conformal
from claps.llla import PredictiveGaussian

pred = PredictiveGaussian(0.0, 1.0, 0.0)
for y in (0.0, 1.0, 1.6449, 3.0):
    print(f"y={y}: score {conformal.centrality_score(pred, y):.4f}")

# %% [markdown]
# The lower threshold uses rank ``m + 1 - ceil((m + 1) c)``; with too few
# calibration points the interval becomes the whole line.

# %%
scores = np.linspace(0.01, 0.09, 9)
print(conformal.rank_threshold_lower(scores, 0.9))
print(conformal.rank_threshold_lower([0.3], 0.99))
print(conformal.rank_threshold_upper(np.arange(1.0, 10.0), 0.9))

# %% [markdown]
# Calibrating on standardized residuals gives the same accepted set as the
# score, and stays finite when the score would underflow.

# %%
rng = np.random.default_rng(0)
mu, v = rng.normal(size=500), np.full(500, 1e-4)
y = mu + rng.normal(size=500)
cal = conformal.calibrate_claps(PredictiveGaussian(mu, v, np.zeros(500)), y, 0.9)
print("t =", cal.threshold, " z threshold =", round(cal.z_threshold, 3), " k =", cal.rank_k)

# %%
print(conformal.claps_interval(pred, 0.05))
print(conformal.residual_interval(0.0, 2.0))
print(conformal.normcp_interval(0.0, 2.0, 1.0))
print(conformal.cqr_interval(1.0, 0.0, 0.2))

# %% [markdown]
# Monte-Carlo check of the acceptance probability of the lower rule.

# %%
m, c, trials = 99, 0.9, 20000
k = conformal.lower_rank(m, c)
s = rng.random((trials, m + 1))
kth = np.partition(s[:, :m], k - 1, axis=1)[:, k - 1]
print("empirical", np.mean(s[:, m] >= kth), "exact", (m + 1 - k) / (m + 1),
      "+/-", round(3 * math.sqrt(0.09 / trials), 4))
