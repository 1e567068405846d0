# %% [markdown]
# # MLP backbone
#
# A small ReLU network trained with Adam; its penultimate activations are
# the features the Laplace head sits on. Extra heads (scale, quantile pair)
# reuse the frozen features.

# %%
import numpy as np

from claps import backbone
from claps.backbone import MlpSpec, TrainConfig
from claps.data import synth_heteroscedastic

ds = synth_heteroscedastic(2000, seed=1)
spec = MlpSpec(input_dim=1, hidden_widths=(64, 64))
model = backbone.train(spec, ds.x, ds.y, "mse", TrainConfig(epochs=200, seed=1))
print("loss at init", round(model.loss_history[0], 4), "final", round(model.final_loss, 4))

# %%
grid = np.linspace(-3, 3, 7)[:, None]
print("point head:", np.round(backbone.head_forward(model, grid), 3))
print("sin(2x):   ", np.round(np.sin(2 * grid[:, 0]), 3))

# %% [markdown]
# Scale head on absolute residuals and a 5%/95% quantile pair.

# %%
resid = np.abs(ds.y - backbone.head_forward(model, ds.x))
scale = backbone.train_head(model, ds.x, resid, "scale", TrainConfig(epochs=60, seed=1))
quant = backbone.train_head(model, ds.x, ds.y, "quantile_pair", TrainConfig(epochs=60, seed=1))
print("scale:", np.round(backbone.head_forward(scale, grid), 3))
print("quantiles:\n", np.round(backbone.head_forward(quant, grid), 3))

# %% [markdown]
# Analytic gradients against central differences for one hidden weight.

# %%
from dataclasses import replace

g_ws, _, _, _ = backbone.full_gradient(model, ds.x[:50], ds.y[:50])
h = 1e-6
wp = [w.copy() for w in model.hidden_weights]
wm = [w.copy() for w in model.hidden_weights]
wp[1][3, 4] += h
wm[1][3, 4] -= h
fd = (backbone.evaluate_loss(replace(model, hidden_weights=wp), ds.x[:50], ds.y[:50])
      - backbone.evaluate_loss(replace(model, hidden_weights=wm), ds.x[:50], ds.y[:50])) / (2 * h)
print("analytic", g_ws[1][3, 4], "finite difference", fd)
