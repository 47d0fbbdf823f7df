"""Dataset ingestion, splitting, normalization and synthetic generators."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import stats

from .distributions import GaussianMixture

MAX_ROWS = 50_000
MIN_ROWS = 40
SPLIT_FRACTIONS = {"val": 0.10, "cal": 0.15, "test": 0.10}
SPLITS = ("train", "val", "cal", "test")


class DatasetError(ValueError):
    pass


class UnreadableDatasetError(DatasetError):
    pass


class MissingColumnError(DatasetError):
    pass


class ConstantTargetError(DatasetError):
    pass


class TooFewRowsError(DatasetError):
    pass


@dataclass
class SplitDataset:
    """Normalized train/val/cal/test splits plus the train-split statistics."""

    x: dict[str, np.ndarray]
    y: dict[str, np.ndarray]
    indices: dict[str, np.ndarray]
    feature_names: list[str]
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float
    y_std: float
    meta: dict = field(default_factory=dict)

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        return self.x[name], self.y[name]

    def targets_original(self, name: str) -> np.ndarray:
        return self.y[name] * self.y_std + self.y_mean

    def merged(self, *names: str) -> tuple[np.ndarray, np.ndarray]:
        return (np.concatenate([self.x[n] for n in names]), np.concatenate([self.y[n] for n in names]))

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def save(self, path) -> None:
        arrays = {}
        for s in SPLITS:
            arrays[f"x_{s}"] = self.x[s]
            arrays[f"y_{s}"] = self.y[s]
            arrays[f"idx_{s}"] = self.indices[s]
        np.savez(
            Path(path),
            feature_names=np.array(self.feature_names, dtype=str),
            x_mean=self.x_mean,
            x_std=self.x_std,
            y_stats=np.array([self.y_mean, self.y_std]),
            **arrays,
        )

    @classmethod
    def load(cls, path) -> "SplitDataset":
        with np.load(Path(path)) as f:
            return cls(
                x={s: f[f"x_{s}"] for s in SPLITS},
                y={s: f[f"y_{s}"] for s in SPLITS},
                indices={s: f[f"idx_{s}"] for s in SPLITS},
                feature_names=[str(v) for v in f["feature_names"]],
                x_mean=f["x_mean"],
                x_std=f["x_std"],
                y_mean=float(f["y_stats"][0]),
                y_std=float(f["y_stats"][1]),
            )


def split_sizes(n: int) -> dict[str, int]:
    """Floor the val/cal/test fractions; the remainder goes to train."""
    sizes = {k: int(np.floor(frac * n)) for k, frac in SPLIT_FRACTIONS.items()}
    sizes["train"] = n - sum(sizes.values())
    return {s: sizes[s] for s in SPLITS}


def read_table(path, target: str) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path)
    except (OSError, UnicodeDecodeError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise UnreadableDatasetError(f"cannot read {path}: {exc}") from exc
    if target not in frame.columns:
        raise MissingColumnError(f"target column {target!r} not in {list(frame.columns)}")
    return frame


def prepare_dataset(path, target: str, seed: int = 0) -> SplitDataset:
    frame = read_table(path, target)
    out = prepare_frame(frame, target, seed)
    out.meta["source"] = str(path)
    return out


def prepare_arrays(x, y, seed: int = 0) -> SplitDataset:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    frame = pd.DataFrame(x, columns=[f"x{i}" for i in range(x.shape[1])])
    frame["__target__"] = np.asarray(y, dtype=np.float64)
    return prepare_frame(frame, "__target__", seed)


def prepare_frame(frame: pd.DataFrame, target: str, seed: int = 0) -> SplitDataset:
    """Shuffle, truncate, split, encode and normalize a table using train-split statistics only."""
    if target not in frame.columns:
        raise MissingColumnError(f"target column {target!r} not in {list(frame.columns)}")
    y_all = pd.to_numeric(frame[target], errors="coerce")
    if y_all.isna().all():
        raise DatasetError(f"target column {target!r} has no numeric values")
    frame = frame.loc[y_all.notna()].reset_index(drop=True)
    y_all = y_all.loc[y_all.notna()].to_numpy(dtype=np.float64)
    if len(frame) < MIN_ROWS:
        raise TooFewRowsError(f"need at least {MIN_ROWS} rows, got {len(frame)}")

    order = np.random.default_rng(seed).permutation(len(frame))[:MAX_ROWS]
    sizes = split_sizes(order.shape[0])
    bounds = np.cumsum([0] + [sizes[s] for s in SPLITS])
    indices = {s: order[bounds[i]:bounds[i + 1]] for i, s in enumerate(SPLITS)}

    features = frame.drop(columns=[target])
    numeric, names = _encode(features, indices["train"])
    train_x = numeric[indices["train"]]
    mean = np.nanmean(train_x, axis=0) if train_x.size else np.zeros(numeric.shape[1])
    mean = np.where(np.isfinite(mean), mean, 0.0)
    numeric = np.where(np.isnan(numeric), mean, numeric)
    std = numeric[indices["train"]].std(axis=0)
    keep = std > 0
    numeric, mean, std = numeric[:, keep], mean[keep], std[keep]
    names = [n for n, k in zip(names, keep) if k]
    numeric = (numeric - mean) / std

    y_train = y_all[indices["train"]]
    y_mean, y_std = float(y_train.mean()), float(y_train.std())
    if not y_std > 0:
        raise ConstantTargetError(f"target column {target!r} is constant on the training split")
    y_norm = (y_all - y_mean) / y_std
    return SplitDataset(
        x={s: numeric[indices[s]] for s in SPLITS},
        y={s: y_norm[indices[s]] for s in SPLITS},
        indices=indices,
        feature_names=names,
        x_mean=mean,
        x_std=std,
        y_mean=y_mean,
        y_std=y_std,
        meta={"seed": seed, "rows": int(order.shape[0])},
    )


def _encode(features: pd.DataFrame, train_idx: np.ndarray) -> tuple[np.ndarray, list[str]]:
    """Numeric columns pass through; others are one-hot encoded with the train vocabulary."""
    columns: list[np.ndarray] = []
    names: list[str] = []
    for name in features.columns:
        col = features[name]
        if pd.api.types.is_bool_dtype(col):
            col = col.astype(np.float64)
        if pd.api.types.is_numeric_dtype(col):
            columns.append(col.to_numpy(dtype=np.float64))
            names.append(str(name))
            continue
        as_str = col.astype("string")
        vocab = sorted(v for v in as_str.iloc[train_idx].dropna().unique())
        for level in vocab:
            columns.append((as_str == level).fillna(False).to_numpy(dtype=np.float64))
            names.append(f"{name}={level}")
    if not columns:
        return np.zeros((len(features), 0)), []
    return np.column_stack(columns), names


@dataclass(frozen=True)
class StudentT:
    """Location-scale Student-t conditional law (used as a ground-truth distribution)."""

    loc: np.ndarray
    scale: np.ndarray
    df: float

    @property
    def batch_shape(self) -> tuple:
        return np.shape(self.loc)

    def __len__(self) -> int:
        return len(self.loc)

    def __getitem__(self, idx) -> "StudentT":
        return StudentT(self.loc[idx], self.scale[idx], self.df)

    def _std(self, y):
        y = np.asarray(y, dtype=np.float64)
        pad = (1,) * (y.ndim - np.ndim(self.loc))
        return (y - np.reshape(self.loc, np.shape(self.loc) + pad)) / np.reshape(self.scale, np.shape(self.scale) + pad), pad

    def cdf(self, y):
        u, _ = self._std(y)
        return stats.t.cdf(u, self.df)

    def logpdf(self, y):
        u, pad = self._std(y)
        return stats.t.logpdf(u, self.df) - np.log(np.reshape(self.scale, np.shape(self.scale) + pad))

    def quantile(self, alpha):
        alpha = np.asarray(alpha, dtype=np.float64)
        pad = (1,) * (alpha.ndim - np.ndim(self.loc)) if alpha.ndim > np.ndim(self.loc) else ()
        loc = np.reshape(self.loc, np.shape(self.loc) + pad)
        scale = np.reshape(self.scale, np.shape(self.scale) + pad)
        return loc + scale * stats.t.ppf(alpha, self.df)

    def std(self):
        if self.df <= 2:
            return np.full(np.shape(self.loc), np.inf)
        return self.scale * np.sqrt(self.df / (self.df - 2))


@dataclass(frozen=True)
class SyntheticData:
    x: np.ndarray
    y: np.ndarray
    truth: object


def homoscedastic_linear(n: int, seed: int = 0) -> SyntheticData:
    """``y = x + eps`` with ``x ~ U(-2, 2)`` and ``eps ~ N(0, 1)``."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(-2.0, 2.0, size=(n, 1))
    truth = GaussianMixture.normal(x[:, 0], np.ones(n))
    return SyntheticData(x, x[:, 0] + rng.standard_normal(n), truth)


def _sinusoidal_law(x: np.ndarray) -> GaussianMixture:
    s = 0.2 + 0.4 * (1.0 + np.sin(x))
    centre = np.sin(2.0 * x)
    means = np.stack([centre - 0.3 * s, centre + 0.7 * s], axis=-1)
    stds = np.stack([0.5 * s, 0.5 * s], axis=-1)
    weights = np.broadcast_to([0.7, 0.3], means.shape)
    return GaussianMixture(weights, means, stds)


def heteroscedastic_sinusoidal(n: int, seed: int = 0) -> SyntheticData:
    """Skewed two-component noise around ``sin(2x)`` whose scale varies with ``x``.

    A single-Gaussian model cannot represent the skew, which makes this task
    prone to miscalibration for undersized mixture heads.
    """
    rng = np.random.default_rng(seed)
    x = rng.uniform(-np.pi, np.pi, size=(n, 1))
    truth = _sinusoidal_law(x[:, 0])
    comp = rng.random(n) < truth.weights[:, 1]
    y = np.where(comp, truth.means[:, 1], truth.means[:, 0]) + truth.stds[:, 0] * rng.standard_normal(n)
    return SyntheticData(x, y, truth)


def heavy_tailed(n: int, seed: int = 0, df: float = 3.0) -> SyntheticData:
    """``y = 0.5 x + 0.5 t_df`` with ``x ~ U(-2, 2)``."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(-2.0, 2.0, size=(n, 1))
    truth = StudentT(0.5 * x[:, 0], np.full(n, 0.5), df)
    return SyntheticData(x, truth.loc + truth.scale * rng.standard_t(df, size=n), truth)


GENERATORS = {
    "linear": homoscedastic_linear,
    "sinusoidal": heteroscedastic_sinusoidal,
    "heavy-tailed": heavy_tailed,
}


def write_synthetic_csv(path, kind: str, n: int, seed: int = 0) -> None:
    data = GENERATORS[kind](n, seed)
    frame = pd.DataFrame(data.x, columns=[f"x{i}" for i in range(data.x.shape[1])])
    frame["y"] = data.y
    frame.to_csv(path, index=False, float_format="%.17g")
