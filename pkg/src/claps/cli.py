"""Command-line entry point.

Settings are resolved as built-in defaults, then ``CLAPS_OUTPUT_DIR`` for
the output directory, then the JSON ``--config`` file, then explicit flags
(later wins). Logs go to stderr, result files to the output directory, and
stdout carries a single JSON summary line.

Exit codes: 0 success, 1 fatal error, 2 some method failed on some seed.
"""

import argparse
import json
import logging
import math
import os
import sys

import numpy as np

from . import __version__, backbone, conformal, data, diagnostics, evaluation, llla
from .exceptions import ClapsError, ConfigInvalid, EmptySplit

log = logging.getLogger("claps")

EXIT_OK, EXIT_FATAL, EXIT_PARTIAL = 0, 1, 2
OUTPUT_ENV = "CLAPS_OUTPUT_DIR"


def _csv_list(kind):
    def parse(text):
        try:
            return [kind(v) for v in text.split(",") if v.strip()]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None

    return parse


def _target(text):
    try:
        return int(text)
    except ValueError:
        return text


def _experiment_flags(p):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--dataset-path", dest="dataset.path")
    p.add_argument("--test-path", dest="dataset.test_path", help="fixed test CSV (train/cal come from --dataset-path)")
    p.add_argument("--target", dest="dataset.target", type=_target, help="target column name or zero-based index")
    p.add_argument("--delimiter", dest="dataset.delimiter")
    p.add_argument("--kind", dest="dataset.kind", choices=["csv", "linear_gaussian", "heteroscedastic"])
    p.add_argument("--n", dest="dataset.n", type=int, help="synthetic dataset size")
    p.add_argument("--d", dest="dataset.d", type=int, help="synthetic feature dimension")
    p.add_argument("--data-seed", dest="dataset.seed", type=int)
    p.add_argument("--split-counts", dest="split.counts", type=_csv_list(int), metavar="TRAIN,CAL,TEST")
    p.add_argument("--hidden", dest="backbone.hidden_widths", type=_csv_list(int), metavar="W1,W2,...")
    p.add_argument("--epochs", dest="backbone.epochs", type=int)
    p.add_argument("--batch-size", dest="backbone.batch_size", type=int)
    p.add_argument("--learning-rate", dest="backbone.learning_rate", type=float)
    p.add_argument("--methods", type=_csv_list(str))
    p.add_argument("--seeds", type=_csv_list(int))
    p.add_argument("--target-cov", dest="target_cov", type=float)
    p.add_argument("--lam", type=float)
    p.add_argument("--estimator", choices=list(llla.ESTIMATORS))
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--run-name", dest="run_name")
    p.add_argument(
        "--workers", type=int, default=1,
        help="seed-level worker processes (capped at the CPU count and the number of seeds)",
    )


def build_parser():
    parser = argparse.ArgumentParser(prog="claps", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("-q", "--quiet", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run every method over every seed and write a report")
    _experiment_flags(run)

    ablate = sub.add_parser("ablate", help="lambda x sigma2-estimator grid on a shared backbone")
    _experiment_flags(ablate)
    ablate.add_argument("--lam-grid", dest="lam_grid", type=_csv_list(float))
    ablate.add_argument("--estimators", type=_csv_list(str))

    diag = sub.add_parser("diagnose", help="variance decomposition, Spearman signal and method selection")
    diag.add_argument("--model-dir", required=True)
    diag.add_argument("--data", help="CSV to diagnose; defaults to the model's cal.csv and test.csv")
    diag.add_argument("--split", default="test", choices=["calibration", "test"], help="label for --data")
    diag.add_argument("--out", help="output JSON path (default <model-dir>/diagnostics.json)")

    synth = sub.add_parser("synth", help="write a synthetic dataset as CSV")
    synth.add_argument("kind", choices=["linear_gaussian", "heteroscedastic"])
    synth.add_argument("--n", type=int, default=1000)
    synth.add_argument("--d", type=int, default=8)
    synth.add_argument("--sigma", type=float, default=1.0)
    synth.add_argument("--base", type=float, default=0.1)
    synth.add_argument("--slope", type=float, default=0.5)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--out", required=True)

    score = sub.add_parser("score", help="CLAPS intervals for new inputs from a saved model directory")
    score.add_argument("--model-dir", required=True)
    score.add_argument("--input", required=True, help="CSV of features (a target column is used if present)")
    score.add_argument("--target-cov", type=float)
    score.add_argument("--out", help="intervals CSV (default <input>.intervals.csv)")
    return parser


def _set_path(d, dotted, value):
    keys = dotted.split(".")
    for k in keys[:-1]:
        d = d.setdefault(k, {})
    d[keys[-1]] = value


def resolve_config(args, extra_keys=()):
    """Merge defaults, environment, config file and flags into an :class:`ExperimentConfig`."""
    merged = {}
    if os.environ.get(OUTPUT_ENV):
        merged["output_dir"] = os.environ[OUTPUT_ENV]
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                loaded = json.load(fh)
        except OSError as exc:
            raise ConfigInvalid("config", f"cannot read {args.config}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigInvalid("config", f"invalid JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigInvalid("config", "top level must be an object")
        for key, value in loaded.items():
            if isinstance(value, dict) and isinstance(merged.get(key), dict):
                merged[key].update(value)
            else:
                merged[key] = value
    names = [
        "dataset.path", "dataset.test_path", "dataset.target", "dataset.delimiter", "dataset.kind",
        "dataset.n", "dataset.d", "dataset.seed", "split.counts", "backbone.hidden_widths",
        "backbone.epochs", "backbone.batch_size", "backbone.learning_rate", "methods", "seeds",
        "target_cov", "lam", "estimator", "output_dir", "run_name", *extra_keys,
    ]
    for name in names:
        value = getattr(args, name, None)
        if value is not None:
            _set_path(merged, name, value)
    if merged.get("dataset", {}).get("path") and "kind" not in merged["dataset"]:
        merged["dataset"]["kind"] = "csv"
    return evaluation.ExperimentConfig.from_dict(merged)


def _summary(**fields):
    print(json.dumps(fields, sort_keys=True, default=_json_default), flush=True)


def _json_default(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    return str(v)


def _finite_or_str(x):
    return x if math.isfinite(x) else evaluation.format_float(x)


def cmd_run(args):
    cfg = resolve_config(args)
    report = evaluation.run_experiment(cfg, workers=args.workers)
    run_dir = evaluation.write_report(report)
    code = EXIT_PARTIAL if report.failures else EXIT_OK
    _summary(
        command="run",
        status=report.status,
        run_dir=run_dir,
        coverage={m: a["coverage_mean"] for m, a in report.aggregates.items()},
        width={m: _finite_or_str(a["width_mean_mean"]) for m, a in report.aggregates.items()},
        failures=len(report.failures),
    )
    return code


def cmd_ablate(args):
    cfg = resolve_config(args, extra_keys=("lam_grid", "estimators"))
    report = evaluation.run_ablation(cfg, workers=args.workers)
    run_dir = evaluation.write_report(report)
    summ = report.ablation_summary
    _summary(
        command="ablate",
        status=report.status,
        run_dir=run_dir,
        rows=len(report.ablation),
        cells=len(summ["cells"]),
        coverage_spread=summ["coverage_spread"],
        width_trend=summ["width_trend_in_lambda"],
    )
    return EXIT_OK


def load_model_dir(path):
    """Return ``(backbone, posterior, meta, calibration_or_None)`` from a saved seed directory."""
    if not os.path.isdir(path):
        raise FileNotFoundError(f"model directory not found: {path}")
    model = backbone.load_checkpoint(os.path.join(path, "backbone.json"))
    with open(os.path.join(path, "posterior.json"), encoding="utf-8") as fh:
        post = llla.LaplacePosterior.from_dict(json.load(fh))
    meta = {}
    meta_path = os.path.join(path, "meta.json")
    if os.path.exists(meta_path):
        with open(meta_path, encoding="utf-8") as fh:
            meta = json.load(fh)
    calib = None
    cal_path = os.path.join(path, "calibration.json")
    if os.path.exists(cal_path):
        with open(cal_path, encoding="utf-8") as fh:
            calib = json.load(fh)
    return model, post, meta, calib


def _read_split(path, target, split):
    ds = data.load_csv(path, target)
    if len(ds) == 0:
        raise EmptySplit(f"split {split!r} ({path}) has no rows")
    return ds


def cmd_diagnose(args):
    model, post, meta, _ = load_model_dir(args.model_dir)
    target = meta.get("target", -1)
    if args.data:
        splits = [(args.split, _read_split(args.data, target, args.split))]
    else:
        splits = [
            (name, _read_split(os.path.join(args.model_dir, fname), target, name))
            for name, fname in (("calibration", "cal.csv"), ("test", "test.csv"))
        ]
    rows = []
    for name, ds in splits:
        _, _, summ = diagnostics.decompose(post, backbone.features(model, ds.x), name)
        rows.append(summ.table_row())
    name, ds = splits[-1]
    pred = llla.predictive(post, backbone.features(model, ds.x), model.y_center)
    sp = diagnostics.spearman(np.abs(ds.y - pred.mu), np.sqrt(pred.v))
    _, _, summ = diagnostics.decompose(post, backbone.features(model, ds.x), name)
    verdict = diagnostics.select_method(summ, sp)
    out = {
        "decomposition": rows,
        "spearman": {"split": name, "rho": sp.rho, "p_value": sp.p_value, "n": sp.n, "p_method": sp.p_method},
        "selection": verdict.to_dict(),
        "posterior": {"lambda": post.lam, "sigma2": post.sigma2, "sigma2_estimator": post.sigma2_estimator},
    }
    out_path = args.out or os.path.join(args.model_dir, "diagnostics.json")
    evaluation.write_json(out, out_path)
    _summary(command="diagnose", status="ok", out=out_path, choice=verdict.choice, rho=sp.rho)
    return EXIT_OK


def cmd_synth(args):
    if args.n < 1:
        raise ConfigInvalid("n", "must be a positive integer")
    if args.kind == "linear_gaussian":
        ds = data.synth_linear_gaussian(args.n, args.d, sigma=args.sigma, seed=args.seed)
    else:
        ds = data.synth_heteroscedastic(args.n, seed=args.seed, base=args.base, slope=args.slope)
    parent = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(parent, exist_ok=True)
    data.write_csv(ds, args.out)
    _summary(command="synth", status="ok", out=args.out, rows=len(ds), kind=args.kind)
    return EXIT_OK


def cmd_score(args):
    model, post, meta, calib = load_model_dir(args.model_dir)
    if calib is None:
        raise FileNotFoundError(f"{args.model_dir} has no calibration.json (CLAPS was not run)")
    target_cov = args.target_cov if args.target_cov is not None else calib["target_cov"]
    if not 0 < target_cov < 1:
        raise ConfigInvalid("target_cov", "must lie in (0, 1)")
    cal = conformal.calibrate_claps_z(calib["abs_z"], target_cov)

    with open(args.input, encoding="utf-8") as fh:
        header = [h.strip() for h in fh.readline().strip().split(",")]
    target = meta.get("target")
    has_target = target is not None and target in header
    ds = data.load_csv(args.input, target if has_target else None)
    pred = llla.predictive(post, backbone.features(model, ds.x), model.y_center)
    iv = conformal.claps_interval(pred, cal.threshold, cal.z_threshold)
    lo, hi = np.atleast_1d(iv.lo), np.atleast_1d(iv.hi)
    cols = {"lo": lo, "hi": hi, "mu": pred.mu, "v": pred.v, "epi": pred.epi}
    if has_target:
        cols["y"] = ds.y
        cols["covered"] = evaluation.covered_mask(iv, ds.y).astype(int)
    out_path = args.out or os.path.splitext(args.input)[0] + ".intervals.csv"
    header = list(cols)
    rows = [[cols[h][i] if h == "covered" else float(cols[h][i]) for h in header] for i in range(len(ds))]
    evaluation._write_csv(out_path, header, rows)
    summary = {"command": "score", "status": "ok", "out": out_path, "rows": len(ds), "t": cal.threshold}
    if has_target and len(ds):
        summary["coverage"] = float(np.mean(cols["covered"]))
    _summary(**summary)
    return EXIT_OK


COMMANDS = {"run": cmd_run, "ablate": cmd_ablate, "diagnose": cmd_diagnose, "synth": cmd_synth, "score": cmd_score}


def _configure_logging(verbose, quiet):
    level = logging.ERROR if quiet else (logging.DEBUG if verbose > 1 else logging.INFO if verbose else logging.WARNING)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    log.handlers[:] = [handler]
    log.setLevel(level)
    log.propagate = False


def main(argv=None):
    args = build_parser().parse_args(argv)
    _configure_logging(args.verbose, args.quiet)
    try:
        return COMMANDS[args.command](args)
    except (ClapsError, OSError, ValueError, KeyError) as exc:
        log.error("%s", exc)
        _summary(command=args.command, status="error", error=f"{type(exc).__name__}: {exc}")
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
