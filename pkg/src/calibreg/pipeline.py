"""End-to-end runs: split, train, calibrate, evaluate, report."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from . import report as reporting
from .calibration import DEFAULT_TAU, fit_calibration_map, recalibrate
from .conformal import apply_cqr_grid, conformalize_dcp, fit_conformal, fit_cqr_grid
from .data import GENERATORS, SplitDataset, prepare_arrays, prepare_dataset
from .distributions import cdf
from .metrics import DEFAULT_PCE_LEVELS, EvaluationReport, evaluate
from .stats import DEFAULT_NULL_SIMS, p_value_upper, simulate_null_pce
from .training import (
    DEFAULT_LAMBDA_GRID,
    BaseLoss,
    HeadKind,
    NetworkConfig,
    Regularizer,
    TrainConfig,
    TrainedModel,
    select_lambda,
    train,
    validation_candidate,
)

log = logging.getLogger(__name__)


class ModelKind(str, Enum):
    MIX_NLL = "mix-nll"
    MIX_CRPS = "mix-crps"
    SQR_CRPS = "sqr-crps"


class Method(str, Enum):
    NONE = "none"
    REC_EMP = "rec-emp"
    REC_LIN = "rec-lin"
    REC_KDE = "rec-kde"
    REC_DCP = "rec-dcp"
    CQR = "cqr"
    DCP = "dcp"
    QR = "qr"
    TRUNC = "trunc"
    PCE_KDE = "pce-kde"
    PCE_SORT = "pce-sort"


RECALIBRATION = {Method.REC_EMP: "emp", Method.REC_LIN: "lin", Method.REC_KDE: "kde", Method.REC_DCP: "dcp"}
REGULARIZATION = {
    Method.QR: Regularizer.QR,
    Method.TRUNC: Regularizer.TRUNC,
    Method.PCE_KDE: Regularizer.PCE_KDE,
    Method.PCE_SORT: Regularizer.PCE_SORT,
}
SYNTHETIC_PREFIX = "synthetic:"


def parse_method(name: str) -> Method:
    return Method(name.strip().lower())


@dataclass(frozen=True)
class RunConfig:
    """Everything needed to reproduce a run.

    ``dataset`` is a CSV path or ``synthetic:<kind>:<rows>`` with ``kind`` one
    of linear, sinusoidal, heavy-tailed. ``posthoc_source`` names the split
    that calibration maps and conformity scores are fitted on; with
    ``train`` the calibration split is merged into the training data.
    """

    dataset: str
    target: str = "y"
    model: ModelKind = ModelKind.MIX_NLL
    methods: tuple[Method, ...] = (Method.NONE,)
    lambda_grid: tuple[float, ...] = DEFAULT_LAMBDA_GRID
    posthoc_source: str = "calib"
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    out: str = "runs"
    dataset_name: str | None = None
    hidden_layers: int = 3
    units: int = 100
    dropout_rate: float = 0.2
    n_components: int = 3
    n_quantiles: int = 64
    batch_size: int = 512
    learning_rate: float = 1e-3
    max_epochs: int = 1000
    patience: int = 30
    tau_sort: float = 100.0
    tau_kde: float = DEFAULT_TAU
    null_sims: int = DEFAULT_NULL_SIMS
    pce_m: int = DEFAULT_PCE_LEVELS

    def __post_init__(self):
        object.__setattr__(self, "model", ModelKind(self.model))
        object.__setattr__(self, "methods", tuple(Method(m) for m in self.methods))
        object.__setattr__(self, "lambda_grid", tuple(float(v) for v in self.lambda_grid))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.posthoc_source not in ("calib", "train"):
            raise ValueError("posthoc_source must be 'calib' or 'train'")
        if not self.methods or not self.seeds:
            raise ValueError("at least one method and one seed are required")
        if Method.CQR in self.methods and self.model is not ModelKind.SQR_CRPS:
            raise ValueError("cqr applies to the sqr-crps model only")
        if any(v < 0 for v in self.lambda_grid) or 0.0 not in self.lambda_grid:
            raise ValueError("the lambda grid must be non-negative and contain 0")

    @property
    def name(self) -> str:
        if self.dataset_name:
            return self.dataset_name
        if self.dataset.startswith(SYNTHETIC_PREFIX):
            return self.dataset[len(SYNTHETIC_PREFIX):].split(":")[0]
        return Path(self.dataset).stem

    def network(self, seed: int) -> NetworkConfig:
        head = HeadKind.QUANTILE if self.model is ModelKind.SQR_CRPS else HeadKind.MIXTURE
        return NetworkConfig(
            self.hidden_layers, self.units, self.dropout_rate, head, self.n_components, self.n_quantiles, seed
        )

    def training(self, regularizer: Regularizer = Regularizer.NONE, lam: float = 0.0) -> TrainConfig:
        base = {ModelKind.MIX_NLL: BaseLoss.NLL, ModelKind.MIX_CRPS: BaseLoss.CRPS, ModelKind.SQR_CRPS: BaseLoss.PINBALL}
        return TrainConfig(
            base[self.model], regularizer, lam, self.batch_size, self.learning_rate, self.max_epochs,
            self.patience, self.tau_sort, self.tau_kde,
        )

    def to_dict(self) -> dict:
        return reporting.jsonable(asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        for key in ("methods", "lambda_grid", "seeds"):
            if key in d:
                d[key] = tuple(d[key])
        if "method" in d:
            d["methods"] = (d.pop("method"),)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def load_split(cfg: RunConfig, seed: int) -> SplitDataset:
    if cfg.dataset.startswith(SYNTHETIC_PREFIX):
        parts = cfg.dataset[len(SYNTHETIC_PREFIX):].split(":")
        kind = parts[0]
        rows = int(parts[1]) if len(parts) > 1 else 2000
        if kind not in GENERATORS:
            raise ValueError(f"unknown synthetic generator {kind!r}; choose from {sorted(GENERATORS)}")
        data = GENERATORS[kind](rows, 0)
        return prepare_arrays(data.x, data.y, seed)
    return prepare_dataset(cfg.dataset, cfg.target, seed)


@dataclass
class SeedContext:
    cfg: RunConfig
    seed: int
    split: SplitDataset
    base: TrainedModel | None = None
    nulls: dict = field(default_factory=dict)

    @property
    def fit_split(self) -> str:
        return "cal" if self.cfg.posthoc_source == "calib" else "train"

    def training_data(self):
        if self.cfg.posthoc_source == "train":
            return self.split.merged("train", "cal")
        return self.split.split("train")

    def posthoc_data(self):
        """Features and original-scale targets of the split post-hoc methods are fitted on."""
        if self.cfg.posthoc_source == "train":
            x, y = self.split.merged("train", "cal")
        else:
            x, y = self.split.split("cal")
        return x, y * self.split.y_std + self.split.y_mean

    def fit(self, regularizer: Regularizer = Regularizer.NONE, lam: float = 0.0) -> TrainedModel:
        model = train(self.cfg.network(self.seed), self.cfg.training(regularizer, lam), self.training_data(), self.split.split("val"))
        return model.with_target_scale(self.split.y_mean, self.split.y_std)

    def base_model(self) -> TrainedModel:
        if self.base is None:
            self.base = self.fit()
        return self.base

    def p_value(self, observed: float, n: int) -> float:
        key = n
        if key not in self.nulls:
            self.nulls[key] = simulate_null_pce(n, self.cfg.pce_m, self.cfg.null_sims, self.seed)
        return p_value_upper(self.nulls[key], observed)


def _test_predictions(ctx: SeedContext, method: Method):
    """Test-set predictive distributions for ``method`` plus the selected lambda, if any."""
    x_test = ctx.split.x["test"]
    if method in REGULARIZATION:
        candidates = []
        models = {}
        for lam in sorted(set(ctx.cfg.lambda_grid)):
            models[lam] = ctx.base_model() if lam == 0 else ctx.fit(REGULARIZATION[method], lam)
            candidates.append(validation_candidate(models[lam], lam))
        chosen = select_lambda(candidates)
        return models[chosen].predict(x_test), chosen

    model = ctx.base_model()
    preds = model.predict(x_test)
    if method is Method.NONE:
        return preds, None
    x_fit, y_fit = ctx.posthoc_data()
    fit_preds = model.predict(x_fit)
    if method in RECALIBRATION:
        kind = RECALIBRATION[method]
        tau = ctx.cfg.tau_kde if kind == "kde" else None
        cmap = fit_calibration_map(kind, np.clip(cdf(fit_preds, y_fit), 0.0, 1.0), tau, fitted_on=ctx.fit_split)
        return recalibrate(preds, cmap), None
    if method is Method.DCP:
        return conformalize_dcp(preds, fit_conformal("dcp", fit_preds, y_fit, fitted_on=ctx.fit_split)), None
    if method is Method.CQR:
        return apply_cqr_grid(fit_cqr_grid(fit_preds, y_fit, fitted_on=ctx.fit_split), preds), None
    raise ValueError(f"unsupported method {method.value}")


def evaluate_method(ctx: SeedContext, method: Method) -> EvaluationReport:
    preds, lam = _test_predictions(ctx, method)
    y_test = ctx.split.targets_original("test")
    rep = evaluate(preds, y_test, pce_m=ctx.cfg.pce_m, band_seed=ctx.seed)
    rep.p_value = ctx.p_value(rep.pce, rep.n)
    rep.dataset = ctx.cfg.name
    rep.model = ctx.cfg.model.value
    rep.method = method.value
    rep.seed = ctx.seed
    rep.selected_lambda = lam
    return rep


def run_seed(cfg: RunConfig, seed: int) -> tuple[list[EvaluationReport], list[dict]]:
    reports, failures = [], []
    try:
        ctx = SeedContext(cfg, seed, load_split(cfg, seed))
    except Exception as exc:  # recorded, sibling seeds continue
        return [], [{"seed": seed, "method": m.value, "stage": "prepare", "error": f"{type(exc).__name__}: {exc}"} for m in cfg.methods]
    for method in cfg.methods:
        try:
            reports.append(evaluate_method(ctx, method))
        except Exception as exc:
            log.warning("seed %d method %s failed: %s", seed, method.value, exc)
            failures.append({"seed": seed, "method": method.value, "stage": "run", "error": f"{type(exc).__name__}: {exc}"})
    return reports, failures


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("CALIBREG_THREADS", "1")))
    except ValueError:
        return 1


def run_pipeline(cfg: RunConfig, workers: int | None = None) -> tuple[list[EvaluationReport], list[dict]]:
    """Run every (seed, method) job; results are merged in sorted (seed, method) order."""
    workers = min(workers or _threads(), len(cfg.seeds))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_seed, [cfg] * len(cfg.seeds), cfg.seeds))
    else:
        results = [run_seed(cfg, s) for s in cfg.seeds]
    order = {m.value: i for i, m in enumerate(Method)}
    reports = sorted((r for rs, _ in results for r in rs), key=lambda r: (r.seed, order[r.method]))
    failures = sorted((f for _, fs in results for f in fs), key=lambda f: (f["seed"], order[f["method"]]))
    return reports, failures


def run_and_emit(cfg: RunConfig, formats=("json", "csv")) -> tuple[list[EvaluationReport], list[dict]]:
    reports, failures = run_pipeline(cfg)
    if reports:
        for fmt in formats:
            reporting.emit_report(reports, fmt, cfg.out, failures, cfg.to_dict())
    else:
        Path(cfg.out).mkdir(parents=True, exist_ok=True)
        (Path(cfg.out) / "report.json").write_text(reporting.dumps(reporting.report_document([], failures, cfg.to_dict())))
    return reports, failures


def with_overrides(cfg: RunConfig, **kwargs) -> RunConfig:
    return replace(cfg, **{k: v for k, v in kwargs.items() if v is not None})
