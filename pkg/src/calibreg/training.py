"""Neural probabilistic regressors with optional calibration regularizers."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import losses
from .distributions import GaussianMixture, QuantileGrid
from .metrics import pce

log = logging.getLogger(__name__)

MODEL_FORMAT_VERSION = 1
DEFAULT_LAMBDA_GRID = (0.0, 0.01, 0.05, 0.2, 1.0, 5.0)
_STD_FLOOR = 1e-4
_CRPS_CAP = 1.1
_TIE_TOL = 1e-12


class HeadKind(str, Enum):
    MIXTURE = "mixture"
    QUANTILE = "quantile"


class BaseLoss(str, Enum):
    NLL = "nll"
    CRPS = "crps"
    PINBALL = "pinball"


class Regularizer(str, Enum):
    NONE = "none"
    QR = "qr"
    TRUNC = "trunc"
    PCE_KDE = "pce-kde"
    PCE_SORT = "pce-sort"


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    hidden_layers: int = 3
    units: int = 100
    dropout_rate: float = 0.2
    head: HeadKind = HeadKind.MIXTURE
    n_components: int = 3
    n_quantiles: int = 64
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "head", HeadKind(self.head))
        if self.n_components < 1:
            raise ValueError("a mixture head needs K >= 1")
        if self.n_quantiles < 2:
            raise ValueError("a quantile head needs M >= 2")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout rate must lie in [0, 1)")
        if self.hidden_layers < 1 or self.units < 1:
            raise ValueError("need at least one hidden layer with one unit")

    def quantile_levels(self) -> np.ndarray:
        m = self.n_quantiles
        return (np.arange(1, m + 1) - 0.5) / m


@dataclass(frozen=True)
class TrainConfig:
    """Optimisation settings.

    Adam with learning rate 1e-3 and batches of 512 are conventional
    defaults for this architecture, not tuned values. ``reg_levels`` is the
    number of interior levels ``j / (M + 1)`` used by the Trunc and PCE-KDE
    penalties on mixture models; quantile models use their own levels.
    """

    base_loss: BaseLoss = BaseLoss.NLL
    regularizer: Regularizer = Regularizer.NONE
    lam: float = 0.0
    batch_size: int = 512
    learning_rate: float = 1e-3
    max_epochs: int = 1000
    patience: int = 30
    tau_sort: float = 100.0
    tau_kde: float = 100.0
    p: float = 1.0
    qr_k: int | None = None
    reg_levels: int = 32

    def __post_init__(self):
        object.__setattr__(self, "base_loss", BaseLoss(self.base_loss))
        object.__setattr__(self, "regularizer", Regularizer(self.regularizer))
        if not self.lam >= 0:
            raise ValueError("lambda must be non-negative")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.batch_size < 2 or self.max_epochs < 1:
            raise ValueError("batch_size >= 2 and max_epochs >= 1 are required")
        if not (self.tau_sort > 0 and self.tau_kde > 0 and self.p > 0):
            raise ValueError("tau_sort, tau_kde and p must be positive")


class ProbabilisticNet(nn.Module):
    """Fully connected ReLU network with dropout on the last hidden layer."""

    def __init__(self, n_features: int, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        layers: list[nn.Module] = []
        width = n_features
        for i in range(cfg.hidden_layers):
            layers += [nn.Linear(width, cfg.units), nn.ReLU()]
            width = cfg.units
        layers.append(nn.Dropout(cfg.dropout_rate))
        self.body = nn.Sequential(*layers)
        n_out = 3 * cfg.n_components if cfg.head is HeadKind.MIXTURE else cfg.n_quantiles
        self.out = nn.Linear(width, n_out)
        self.n_features = n_features
        self.register_buffer("levels", torch.tensor(cfg.quantile_levels(), dtype=torch.float64))
        if cfg.head is HeadKind.QUANTILE:
            # start from N(0, 1) quantiles of the normalized target so outputs begin well separated
            with torch.no_grad():
                self.out.bias.copy_(torch.special.ndtri(self.levels).to(self.out.bias.dtype))

    def forward(self, x: torch.Tensor):
        if x.dim() != 2 or x.shape[1] != self.n_features:
            raise ValueError(f"expected inputs of shape (N, {self.n_features}), got {tuple(x.shape)}")
        h = self.out(self.body(x))
        if self.cfg.head is HeadKind.MIXTURE:
            k = self.cfg.n_components
            w = torch.softmax(h[:, :k], dim=1)
            return w, h[:, k:2 * k], losses.softplus_std(h[:, 2 * k:], _STD_FLOOR)
        return torch.sort(h, dim=1).values


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_pce: float
    val_crps: float


@dataclass
class TrainedModel:
    net: ProbabilisticNet
    net_config: NetworkConfig
    train_config: TrainConfig
    log: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    target_loc: float = 0.0
    target_scale: float = 1.0

    def predict_normalized(self, x) -> GaussianMixture | QuantileGrid:
        self.net.eval()
        with torch.no_grad():
            out = self.net(torch.as_tensor(np.asarray(x, dtype=np.float64)))
        if self.net_config.head is HeadKind.MIXTURE:
            w, mu, s = (t.numpy() for t in out)
            return GaussianMixture(w / w.sum(1, keepdims=True), mu, s)
        return QuantileGrid(self.net_config.quantile_levels(), out.numpy())

    def predict(self, x) -> GaussianMixture | QuantileGrid:
        """Predictive distributions on the original target scale."""
        return self.predict_normalized(x).affine(self.target_loc, self.target_scale)

    def with_target_scale(self, loc: float, scale: float) -> "TrainedModel":
        self.target_loc, self.target_scale = float(loc), float(scale)
        return self

    def write_log_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss", "val_PCE", "val_CRPS"])
            for r in self.log:
                w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.val_pce), repr(r.val_crps)])

    def save(self, path) -> None:
        torch.save(
            {
                "format_version": MODEL_FORMAT_VERSION,
                "n_features": self.net.n_features,
                "net_config": _config_dict(self.net_config),
                "train_config": _config_dict(self.train_config),
                "state_dict": self.net.state_dict(),
                "log": [asdict(r) for r in self.log],
                "best_epoch": self.best_epoch,
                "target_loc": self.target_loc,
                "target_scale": self.target_scale,
            },
            Path(path),
        )

    @classmethod
    def load(cls, path) -> "TrainedModel":
        blob = torch.load(Path(path), weights_only=True)
        if blob.get("format_version") != MODEL_FORMAT_VERSION:
            raise ValueError(f"unsupported model format {blob.get('format_version')!r}")
        net_cfg = NetworkConfig(**blob["net_config"])
        net = ProbabilisticNet(blob["n_features"], net_cfg).double()
        net.load_state_dict(blob["state_dict"])
        net.eval()
        return cls(
            net,
            net_cfg,
            TrainConfig(**blob["train_config"]),
            [EpochRecord(**r) for r in blob["log"]],
            blob["best_epoch"],
            blob["target_loc"],
            blob["target_scale"],
        )


def _config_dict(cfg) -> dict:
    return {k: (v.value if isinstance(v, Enum) else v) for k, v in asdict(cfg).items()}


def check_combination(net_cfg: NetworkConfig, cfg: TrainConfig) -> None:
    mixture = net_cfg.head is HeadKind.MIXTURE
    if mixture and cfg.base_loss is BaseLoss.PINBALL:
        raise ValueError("the pinball loss needs a quantile head")
    if not mixture and cfg.base_loss is not BaseLoss.PINBALL:
        raise ValueError(f"{cfg.base_loss.value} is not supported for a quantile head")


def base_loss(kind: BaseLoss, out, y: torch.Tensor, levels: torch.Tensor | None = None) -> torch.Tensor:
    kind = BaseLoss(kind)
    if kind is BaseLoss.PINBALL:
        if isinstance(out, tuple):
            raise ValueError("the pinball loss needs quantile predictions")
        return losses.pinball_grid_loss(levels, out, y).mean()
    if not isinstance(out, tuple):
        raise ValueError(f"{kind.value} is not supported for quantile predictions")
    return losses.nll_loss(out, y) if kind is BaseLoss.NLL else losses.crps_loss(out, y)


def pits_of(out, y: torch.Tensor, levels: torch.Tensor) -> torch.Tensor:
    if isinstance(out, tuple):
        return losses.mixture_cdf(out, y)
    return losses.grid_cdf(levels, out, y)


def regularization(cfg: TrainConfig, out, y: torch.Tensor, levels: torch.Tensor) -> torch.Tensor:
    """Penalty added to the base loss, scaled by ``lambda`` by the caller."""
    reg = cfg.regularizer
    if reg is Regularizer.NONE:
        return y.new_zeros(())
    mixture = isinstance(out, tuple)
    reg_levels = torch.arange(1, cfg.reg_levels + 1, dtype=y.dtype) / (cfg.reg_levels + 1)
    if reg is Regularizer.TRUNC:
        if mixture:
            return losses.reg_trunc(losses.mixture_quantile(out, reg_levels), y, reg_levels)
        return losses.reg_trunc(out, y, levels)
    z = pits_of(out, y, levels)
    if reg is Regularizer.QR:
        # the spacing estimator is an entropy; uniform PITs maximise it
        return -losses.reg_qr(z, cfg.qr_k, cfg.tau_sort)
    if reg is Regularizer.PCE_KDE:
        return losses.reg_pce_kde(z, reg_levels, cfg.tau_kde, cfg.p)
    return losses.reg_pce_sort(z, cfg.p, cfg.tau_sort)


def objective(cfg: TrainConfig, out, y: torch.Tensor, levels: torch.Tensor) -> torch.Tensor:
    loss = base_loss(cfg.base_loss, out, y, levels)
    if cfg.lam > 0 and cfg.regularizer is not Regularizer.NONE:
        loss = loss + cfg.lam * regularization(cfg, out, y, levels)
    return loss


def _validation_metrics(net: ProbabilisticNet, cfg: TrainConfig, x: torch.Tensor, y: torch.Tensor):
    net.eval()
    with torch.no_grad():
        out = net(x)
        val_loss = base_loss(cfg.base_loss, out, y, net.levels).item()
        z = pits_of(out, y, net.levels).clamp(0.0, 1.0).numpy()
        if isinstance(out, tuple):
            crps = losses.mixture_crps(out, y).mean().item()
        else:
            crps = losses.pinball_grid_loss(net.levels, out, y).mean().item()
    return val_loss, pce(z), crps


def train(net_cfg: NetworkConfig, cfg: TrainConfig, train_data, val_data) -> TrainedModel:
    """Mini-batch Adam on base loss + lambda * penalty with early stopping.

    The returned parameters are those of the epoch with the lowest validation
    base loss. Runs are deterministic given ``net_cfg.seed``.
    """
    check_combination(net_cfg, cfg)
    x_tr, y_tr = (torch.as_tensor(np.asarray(a, dtype=np.float64)) for a in train_data)
    x_va, y_va = (torch.as_tensor(np.asarray(a, dtype=np.float64)) for a in val_data)
    if x_tr.shape[0] == 0 or x_va.shape[0] == 0:
        raise ValueError("training and validation splits must be non-empty")
    if x_tr.dim() != 2 or x_va.dim() != 2 or x_tr.shape[1] != x_va.shape[1]:
        raise ValueError("feature dimensions of the splits disagree")
    if y_tr.shape[0] != x_tr.shape[0] or y_va.shape[0] != x_va.shape[0]:
        raise ValueError("features and targets have different lengths")

    torch.set_num_threads(1)
    torch.manual_seed(net_cfg.seed)
    gen = torch.Generator().manual_seed(net_cfg.seed)
    net = ProbabilisticNet(x_tr.shape[1], net_cfg).double()
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)

    history: list[EpochRecord] = []
    best_loss, best_epoch, best_state = math.inf, 0, None
    n = x_tr.shape[0]
    for epoch in range(1, cfg.max_epochs + 1):
        net.train()
        perm = torch.randperm(n, generator=gen)
        total, count = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            if idx.shape[0] < 2:
                continue
            out = net(x_tr[idx])
            loss = objective(cfg, out, y_tr[idx], net.levels)
            if not torch.isfinite(loss):
                recent = "; ".join(f"{r.epoch}:{r.train_loss:.6g}/{r.val_loss:.6g}" for r in history[-5:])
                raise TrainingError(
                    f"non-finite training loss at epoch {epoch}, batch offset {start} "
                    f"(lambda={cfg.lam}, regularizer={cfg.regularizer.value}); recent epochs: {recent or 'none'}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * idx.shape[0]
            count += idx.shape[0]
        val_loss, val_pce, val_crps = _validation_metrics(net, cfg, x_va, y_va)
        history.append(EpochRecord(epoch, total / max(count, 1), val_loss, val_pce, val_crps))
        log.debug("epoch %d train %.6f val %.6f", epoch, history[-1].train_loss, val_loss)
        if not math.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        if val_loss < best_loss:
            best_loss, best_epoch = val_loss, epoch
            best_state = {k: v.detach().clone() for k, v in net.state_dict().items()}
        elif epoch - best_epoch >= cfg.patience:
            break
    net.load_state_dict(best_state)
    net.eval()
    return TrainedModel(net, net_cfg, cfg, history, best_epoch)


@dataclass(frozen=True)
class LambdaCandidate:
    lam: float
    val_pce: float
    val_crps: float


def select_lambda(candidates: Sequence[LambdaCandidate]) -> float:
    """Lowest validation PCE among lambdas whose CRPS is within 10% of the unregularized model."""
    base = [c for c in candidates if c.lam == 0]
    if not base:
        raise ValueError("the candidates must include lambda = 0")
    cap = _CRPS_CAP * base[0].val_crps
    feasible = sorted((c for c in candidates if c.lam == 0 or c.val_crps <= cap), key=lambda c: c.lam)
    best = feasible[0]
    for c in feasible[1:]:
        if c.val_pce < best.val_pce - _TIE_TOL:
            best = c
    return best.lam


def validation_candidate(model: TrainedModel, lam: float) -> LambdaCandidate:
    rec = model.log[model.best_epoch - 1]
    return LambdaCandidate(lam, rec.val_pce, rec.val_crps)
