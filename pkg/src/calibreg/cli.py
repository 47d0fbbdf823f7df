"""Command-line interface.

Step-by-step use keeps artifacts in one ``--out`` directory::

    calibreg prepare --dataset data.csv --target y --seed 0 --out work
    calibreg train --model mix-nll --out work
    calibreg recalibrate --method rec-kde --out work
    calibreg evaluate --method rec-kde --out work --format json

``calibreg run`` does all of it for several seeds and methods.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import report as reporting
from .calibration import CalibrationMap, fit_calibration_map, recalibrate
from .conformal import ConformalCalibrator, apply_cqr_grid, conformalize_dcp, fit_conformal, fit_cqr_grid
from .data import SplitDataset, prepare_dataset
from .distributions import cdf
from .metrics import evaluate
from .pipeline import (
    RECALIBRATION,
    REGULARIZATION,
    Method,
    ModelKind,
    RunConfig,
    parse_method,
    run_and_emit,
)
from .stats import ComparisonMatrix, cd_ranking, friedman_test, null_test, p_value_upper, simulate_null_pce
from .training import BaseLoss, Regularizer, TrainedModel, train

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

SPLIT_FILE = "split.npz"
MODEL_FILE = "model.pt"
LOG_FILE = "training_log.csv"
MAP_FILE = "calibration_map.json"
CONFORMAL_FILE = "conformal.json"
MODEL_OF_LOSS = {BaseLoss.NLL: ModelKind.MIX_NLL, BaseLoss.CRPS: ModelKind.MIX_CRPS, BaseLoss.PINBALL: ModelKind.SQR_CRPS}


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _methods(text: str) -> tuple[Method, ...]:
    return tuple(parse_method(v) for v in text.split(",") if v.strip())


def _out(args) -> Path:
    path = Path(args.out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _run_config(args) -> RunConfig:
    base: dict = {}
    if args.config:
        with open(args.config, "rb") as fh:
            base = tomllib.load(fh)
    overrides = {
        "dataset": args.dataset,
        "target": args.target,
        "model": args.model,
        "methods": args.method,
        "lambda_grid": args.lambda_grid,
        "seeds": args.seeds,
        "posthoc_source": args.posthoc_source,
        "out": args.out,
        "max_epochs": args.max_epochs,
        "null_sims": args.null_sims,
    }
    base.update({k: v for k, v in overrides.items() if v is not None})
    if "dataset" not in base:
        raise SystemExit("a dataset is required (--dataset or the config file)")
    return RunConfig.from_dict(base)


def cmd_prepare(args) -> int:
    split = prepare_dataset(args.dataset, args.target, args.seed)
    path = _out(args) / SPLIT_FILE
    split.save(path)
    sizes = {k: int(v.shape[0]) for k, v in split.y.items()}
    print(json.dumps({"split": str(path), "sizes": sizes, "features": split.feature_names}))
    return 0


def _config_for_training(args) -> RunConfig:
    return RunConfig(
        dataset=args.dataset or "prepared",
        model=args.model or ModelKind.MIX_NLL,
        seeds=(args.seed,),
        out=args.out,
        max_epochs=args.max_epochs or 1000,
    )


def cmd_train(args) -> int:
    out = _out(args)
    split = SplitDataset.load(out / SPLIT_FILE)
    cfg = _config_for_training(args)
    methods = args.method or (Method.NONE,)
    if len(methods) != 1:
        raise SystemExit("train takes a single --method")
    method = methods[0]
    reg = REGULARIZATION.get(method, Regularizer.NONE)
    if method not in REGULARIZATION and method is not Method.NONE:
        raise SystemExit(f"{method.value} is a post-hoc method; train with --method none")
    lam = args.lam if args.lam is not None else 0.0
    train_xy = split.merged("train", "cal") if args.posthoc_source == "train" else split.split("train")
    model = train(cfg.network(args.seed), cfg.training(reg, lam), train_xy, split.split("val"))
    model.with_target_scale(split.y_mean, split.y_std)
    model.save(out / MODEL_FILE)
    model.write_log_csv(out / LOG_FILE)
    print(json.dumps({"model": str(out / MODEL_FILE), "best_epoch": model.best_epoch, "epochs": len(model.log)}))
    return 0


def _posthoc_data(split: SplitDataset, source: str):
    if source == "train":
        x, y = split.merged("train", "cal")
        return x, y * split.y_std + split.y_mean, "train"
    x, y = split.split("cal")
    return x, y * split.y_std + split.y_mean, "cal"


def _single_method(args, allowed) -> Method:
    if not args.method or len(args.method) != 1 or args.method[0] not in allowed:
        raise SystemExit(f"--method must be one of {[m.value for m in allowed]}")
    return args.method[0]


def cmd_recalibrate(args) -> int:
    out = _out(args)
    method = _single_method(args, list(RECALIBRATION))
    split = SplitDataset.load(out / SPLIT_FILE)
    model = TrainedModel.load(out / MODEL_FILE)
    x, y, tag = _posthoc_data(split, args.posthoc_source or "calib")
    kind = RECALIBRATION[method]
    cmap = fit_calibration_map(kind, np.clip(cdf(model.predict(x), y), 0, 1), args.tau if kind == "kde" else None, fitted_on=tag)
    (out / MAP_FILE).write_text(reporting.dumps(cmap.to_dict()))
    print(json.dumps({"calibration_map": str(out / MAP_FILE), "kind": kind, "n": cmap.n}))
    return 0


def cmd_conformalize(args) -> int:
    out = _out(args)
    method = _single_method(args, [Method.DCP, Method.CQR])
    split = SplitDataset.load(out / SPLIT_FILE)
    model = TrainedModel.load(out / MODEL_FILE)
    x, y, tag = _posthoc_data(split, args.posthoc_source or "calib")
    preds = model.predict(x)
    if method is Method.DCP:
        doc = {"kind": "dcp", "calibrators": [fit_conformal("dcp", preds, y, fitted_on=tag).to_dict()]}
    else:
        doc = {"kind": "cqr", "calibrators": [c.to_dict() for c in fit_cqr_grid(preds, y, fitted_on=tag)]}
    (out / CONFORMAL_FILE).write_text(reporting.dumps(doc))
    print(json.dumps({"conformal": str(out / CONFORMAL_FILE), "kind": doc["kind"]}))
    return 0


def cmd_evaluate(args) -> int:
    out = _out(args)
    method = (args.method or (Method.NONE,))[0]
    split = SplitDataset.load(out / SPLIT_FILE)
    model = TrainedModel.load(out / MODEL_FILE)
    preds = model.predict(split.x["test"])
    if method in RECALIBRATION:
        preds = recalibrate(preds, CalibrationMap.from_dict(json.loads((out / MAP_FILE).read_text())))
    elif method in (Method.DCP, Method.CQR):
        doc = json.loads((out / CONFORMAL_FILE).read_text())
        cals = [ConformalCalibrator.from_dict(c) for c in doc["calibrators"]]
        preds = conformalize_dcp(preds, cals[0]) if doc["kind"] == "dcp" else apply_cqr_grid(cals, preds)
    rep = evaluate(preds, split.targets_original("test"), band_seed=args.seed)
    rep.p_value = p_value_upper(simulate_null_pce(rep.n, sims=args.null_sims or 10_000, seed=args.seed), rep.pce)
    rep.dataset = args.dataset or "prepared"
    rep.model = MODEL_OF_LOSS[model.train_config.base_loss].value
    rep.method = method.value
    rep.seed = args.seed
    for fmt in args.format:
        reporting.emit_report([rep], fmt, out)
    print(json.dumps(reporting.jsonable({k: getattr(rep, k) for k in ("pce", "crps", "nll", "std", "p_value")})))
    return 0


def cmd_null_test(args) -> int:
    if args.pits:
        pits = np.loadtxt(args.pits, dtype=np.float64, ndmin=1)
        observed, p = null_test(pits, args.m, args.sims, args.seed, args.n)
        result = {"n": args.n or int(pits.shape[0]), "pce": observed, "p_value": p}
    else:
        if not args.n:
            raise SystemExit("null-test needs --n or --pits")
        null = simulate_null_pce(args.n, args.m, args.sims, args.seed)
        result = {"n": args.n, "quantiles": {str(q): null.quantile(q) for q in (0.5, 0.9, 0.95, 0.99, 0.999)}}
    print(reporting.dumps(result), end="")
    return 0


def cmd_compare(args) -> int:
    matrix = ComparisonMatrix.from_csv(args.input, args.metric)
    ranking = cd_ranking(matrix, args.alpha).to_dict()
    if len(matrix.datasets) >= 2 and len(matrix.methods) >= 2:
        stat, p = friedman_test(matrix)
        ranking["friedman"] = {"statistic": stat, "p_value": p}
    text = reporting.dumps(ranking)
    if args.out:
        (_out(args) / f"ranking_{args.metric}.json").write_text(text)
    print(text, end="")
    return 0


def cmd_report(args) -> int:
    reports, doc = reporting.read_json(args.input)
    for fmt in args.format:
        for path in reporting.emit_report(reports, fmt, args.out, doc.get("failures", ()), doc.get("config")):
            print(path)
    return 0


def cmd_run(args) -> int:
    cfg = _run_config(args)
    reports, failures = run_and_emit(cfg, tuple(args.format))
    print(json.dumps({"reports": len(reports), "failures": len(failures), "out": cfg.out}))
    return 1 if failures and not reports else 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--dataset")
    common.add_argument("--target", default=None)
    common.add_argument("--model", type=ModelKind, choices=list(ModelKind), metavar="{mix-nll,mix-crps,sqr-crps}")
    common.add_argument("--method", type=_methods, help="comma-separated methods, e.g. none,rec-emp,dcp")
    common.add_argument("--lambda-grid", type=_floats, help="comma-separated lambdas, must include 0")
    common.add_argument("--lambda", dest="lam", type=float, help="single lambda for `train`")
    common.add_argument("--seeds", type=_ints, help="comma-separated seeds for `run`")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--posthoc-source", choices=["calib", "train"])
    common.add_argument("--out", default="runs")
    common.add_argument("--format", action="append", choices=["json", "csv", "svg"])
    common.add_argument("--config", help="TOML file with RunConfig fields")
    common.add_argument("--max-epochs", type=int)
    common.add_argument("--null-sims", type=int)
    common.add_argument("--tau", type=float, default=100.0)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="calibreg", description="Probabilistic calibration of regression models.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("prepare", parents=[common], help="split and normalize a CSV dataset").set_defaults(func=cmd_prepare)
    sub.add_parser("train", parents=[common], help="train a model on a prepared split").set_defaults(func=cmd_train)
    sub.add_parser("recalibrate", parents=[common], help="fit a calibration map").set_defaults(func=cmd_recalibrate)
    sub.add_parser("conformalize", parents=[common], help="fit conformal calibrators").set_defaults(func=cmd_conformalize)
    sub.add_parser("evaluate", parents=[common], help="evaluate on the test split").set_defaults(func=cmd_evaluate)
    p = sub.add_parser("null-test", parents=[common], help="PCE null distribution / p-value")
    p.add_argument("--n", type=int)
    p.add_argument("--m", type=int, default=100)
    p.add_argument("--sims", type=int, default=10_000)
    p.add_argument("--pits", help="text file with one PIT value per line")
    p.set_defaults(func=cmd_null_test)
    p = sub.add_parser("compare", parents=[common], help="rank methods from a long-format CSV")
    p.add_argument("--input", required=True)
    p.add_argument("--metric", default="pce")
    p.add_argument("--alpha", type=float, default=0.05)
    p.set_defaults(func=cmd_compare)
    p = sub.add_parser("report", parents=[common], help="re-emit a JSON report as csv/svg")
    p.add_argument("--input", required=True)
    p.set_defaults(func=cmd_report)
    sub.add_parser("run", parents=[common], help="full pipeline over seeds and methods").set_defaults(func=cmd_run)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.format is None:
        args.format = ["json"]
    if args.target is None and args.command == "prepare":
        args.target = "y"
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
