# %% [markdown]
# # Experiment runner, ablation and reports
#
# A scaled-down run of the full pipeline: backbone, Laplace head, four
# conformal methods, diagnostics and the lambda x estimator ablation.

# %%
import tempfile

from claps import evaluation

cfg = evaluation.ExperimentConfig.from_dict({
    "dataset": {"kind": "heteroscedastic", "n": 1500, "seed": 0},
    "backbone": {"hidden_widths": [32, 32], "epochs": 30},
    "seeds": [0, 1],
    "subsample_points": 3,
})
report = evaluation.run_experiment(cfg)
print("status:", report.status)
for method, agg in report.aggregates.items():
    print(f"{method:12s} coverage {agg['coverage_mean']:.3f}  width {agg['width_mean_mean']:.3f}  "
          f"mae {agg['mae_mean']:.3f}")
print("selection:", [d["selection"]["choice"] for d in report.diagnostics])

# %%
abl = evaluation.run_ablation(cfg)
print("coverage spread", round(abl.ablation_summary["coverage_spread"], 4))
print("width trend", abl.ablation_summary["width_trend_in_lambda"])

# %% [markdown]
# Reports go to a directory of JSON and CSV files; the same thing is
# available from the command line as ``claps run``.

# %%
with tempfile.TemporaryDirectory() as d:
    out = evaluation.write_report(report, d)
    import os

    print(sorted(os.listdir(out)))
