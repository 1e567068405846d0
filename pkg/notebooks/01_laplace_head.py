# %% [markdown]
# # Last-layer Laplace head
#
# Fit the Gaussian posterior over the final linear layer for a fixed
# feature map and look at how the predictive variance splits into noise and
# epistemic parts.

# %%
import numpy as np

from claps import linalg, llla

rng = np.random.default_rng(0)
phi = rng.normal(size=(200, 5))
w_true = rng.normal(size=5)
y = phi @ w_true + 0.5 * rng.normal(size=200)

# %% [markdown]
# Both noise estimators: the residual one and the evidence fixed point.

# %%
for est in ("residual", "evidence"):
    post = llla.fit_llla(phi, y - y.mean(), lam=1.0, estimator=est)
    print(est, "sigma2 =", round(post.sigma2, 4), "tr(Sigma) =", round(llla.trace_sigma(post), 5))

# %% [markdown]
# Predictive mean and variance on a few new points. Far-away inputs carry
# more epistemic variance.

# %%
x_new = np.vstack([rng.normal(size=(3, 5)), 10 * rng.normal(size=(2, 5))])
pred = llla.predictive(post, x_new, target_center=y.mean())
for mu, v, epi in zip(pred.mu, pred.v, pred.epi):
    print(f"mu={mu:8.3f}  v={v:.4f}  epi share={epi / v:.3f}")

# %% [markdown]
# The Cholesky quadratic form agrees with the explicit inverse.

# %%
m = linalg.precision_matrix(phi, 1.0, post.sigma2)
explicit = np.einsum("ij,jk,ik->i", x_new, np.linalg.inv(m), x_new)
print(np.max(np.abs(linalg.quad_form_via_chol(post.chol_precision, x_new) / explicit - 1)))
