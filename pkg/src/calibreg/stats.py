"""Null test for PCE and multi-dataset comparison statistics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import networkx as nx
import numpy as np
from scipy import stats

from .metrics import DEFAULT_PCE_LEVELS, pce, pce_levels

DEFAULT_NULL_SIMS = 10_000
LETTER_LEVELS = (0.125, 0.25, 0.5, 0.75, 0.875)
_NULL_CHUNK = 1000
_EXACT_WILCOXON_MAX_N = 20


@dataclass(frozen=True)
class NullPceDistribution:
    n: int
    m: int
    samples: np.ndarray
    seed: int

    @property
    def sims(self) -> int:
        return self.samples.shape[0]

    def quantile(self, q: float) -> float:
        return float(np.quantile(self.samples, q))


def simulate_null_pce(n: int, m: int = DEFAULT_PCE_LEVELS, sims: int = DEFAULT_NULL_SIMS, seed: int = 0) -> NullPceDistribution:
    """Sampling distribution of PCE_1 for ``n`` uniform PITs.

    Only the counts of uniforms between consecutive levels matter, so each
    sample draws one multinomial vector instead of ``n`` uniforms. Chunks use
    spawned sub-seeds and are concatenated in order.
    """
    if n < 1 or m < 1 or sims < 1:
        raise ValueError("n, m and sims must all be at least 1")
    levels = pce_levels(m)
    probs = np.diff(np.concatenate([[0.0], levels, [1.0]]))
    chunks = []
    for i, child in enumerate(np.random.SeedSequence(seed).spawn(math.ceil(sims / _NULL_CHUNK))):
        size = min(_NULL_CHUNK, sims - i * _NULL_CHUNK)
        counts = np.random.default_rng(child).multinomial(n, probs, size=size)
        ecdf = np.cumsum(counts[:, :-1], axis=1) / n
        chunks.append(np.mean(np.abs(levels - ecdf), axis=1))
    samples = np.concatenate(chunks)
    samples.setflags(write=False)
    return NullPceDistribution(n, m, samples, seed)


def p_value_upper(null: NullPceDistribution, observed: float) -> float:
    """Fraction of null samples at least as large as ``observed``."""
    if null.sims == 0:
        raise ValueError("empty null distribution")
    return float(np.count_nonzero(null.samples >= observed) / null.sims)


def null_test(pit_values, m: int = DEFAULT_PCE_LEVELS, sims: int = DEFAULT_NULL_SIMS, seed: int = 0, n: int | None = None):
    """Observed PCE_1 and its upper-tail p-value; ``n`` defaults to the number of PITs."""
    z = np.asarray(pit_values, dtype=np.float64).ravel()
    observed = pce(z, m, 1.0)
    null = simulate_null_pce(n or z.shape[0], m, sims, seed)
    return observed, p_value_upper(null, observed)


def holm_correct(p_values, alpha: float) -> np.ndarray:
    """Holm step-down rejections, returned in input order."""
    p = np.asarray(p_values, dtype=np.float64).ravel()
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    if np.any(~((p >= 0) & (p <= 1))):
        raise ValueError("p-values must lie in [0, 1]")
    m = p.shape[0]
    reject = np.zeros(m, dtype=bool)
    for i, j in enumerate(np.argsort(p, kind="stable")):
        if p[j] > alpha / (m - i):
            break
        reject[j] = True
    return reject


def cohens_d(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("each sample needs at least two values")
    na, nb = a.shape[0], b.shape[0]
    pooled = math.sqrt(((na - 1) * a.var(ddof=1) + (nb - 1) * b.var(ddof=1)) / (na + nb - 2))
    diff = float(a.mean() - b.mean())
    if pooled == 0:
        return 0.0 if diff == 0 else math.copysign(math.inf, diff)
    return diff / pooled


def _as_matrix(matrix) -> np.ndarray:
    return np.asarray(matrix.values if isinstance(matrix, ComparisonMatrix) else matrix, dtype=np.float64)


def average_ranks(matrix) -> np.ndarray:
    """Mean within-row rank per column; rank 1 is the smallest value, ties share the average."""
    x = _as_matrix(matrix)
    return stats.rankdata(x, axis=1).mean(axis=0)


def friedman_test(matrix) -> tuple[float, float]:
    """Classic chi-square Friedman statistic (no tie correction) and its p-value."""
    x = _as_matrix(matrix)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 2:
        raise ValueError("need at least 2 datasets and 2 methods")
    if not np.all(np.isfinite(x)):
        raise ValueError("comparison matrix has non-finite cells")
    n, k = x.shape
    r = average_ranks(x)
    stat = 12.0 * n / (k * (k + 1)) * (np.sum(r ** 2) - k * (k + 1) ** 2 / 4.0)
    stat = max(float(stat), 0.0)
    return stat, float(stats.chi2.sf(stat, k - 1))


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float
    pvalue: float
    n: int
    exact: bool
    all_zero: bool = False


def _exact_lower_tail(doubled_ranks: np.ndarray, w_doubled: int) -> float:
    """P(W+ <= w) under random signs, by dynamic programming over doubled ranks."""
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[int(r):] = counts[: total + 1 - int(r)]
        counts = counts + shifted
    return float(counts[: w_doubled + 1].sum() / 2.0 ** doubled_ranks.shape[0])


def wilcoxon_signed_rank(a, b) -> WilcoxonResult:
    """Two-sided Wilcoxon signed-rank test of paired samples.

    Zero differences are dropped. Exact for at most 20 non-zero pairs,
    otherwise a tie-corrected normal approximation without continuity
    correction. All-zero differences give ``p = 1`` with ``all_zero`` set.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError("paired samples must have equal lengths")
    d = b - a
    d = d[d != 0]
    n = d.shape[0]
    if n == 0:
        return WilcoxonResult(0.0, 1.0, 0, True, all_zero=True)
    ranks = stats.rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)
    if n <= _EXACT_WILCOXON_MAX_N:
        doubled = np.rint(2 * ranks).astype(np.int64)
        p = min(1.0, 2.0 * _exact_lower_tail(doubled, int(round(2 * w))))
        return WilcoxonResult(w, p, n, True)
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_counts ** 3 - tie_counts) / 48.0
    z = (w - n * (n + 1) / 4.0) / math.sqrt(var)
    return WilcoxonResult(w, min(1.0, 2.0 * float(stats.norm.cdf(z))), n, False)


@dataclass
class ComparisonMatrix:
    """Datasets by methods of seed-averaged metric values; seed-level values kept for effect sizes."""

    datasets: list[str]
    methods: list[str]
    values: np.ndarray
    seed_values: dict[tuple[str, str], np.ndarray] = field(default_factory=dict)
    metric: str = ""

    @classmethod
    def from_records(cls, records, metric: str) -> "ComparisonMatrix":
        """``records`` yields ``(dataset, method, seed, metric, value)`` tuples."""
        cells: dict[tuple[str, str], list[tuple[int, float]]] = {}
        for dataset, method, seed, name, value in records:
            if name != metric:
                continue
            cells.setdefault((str(dataset), str(method)), []).append((int(seed), float(value)))
        if not cells:
            raise ValueError(f"no records for metric {metric!r}")
        datasets = sorted({d for d, _ in cells})
        methods = sorted({m for _, m in cells})
        missing = [(d, m) for d in datasets for m in methods if (d, m) not in cells]
        if missing:
            raise ValueError(f"missing cells in comparison matrix: {missing[:5]}")
        seed_values = {key: np.array([v for _, v in sorted(vals)]) for key, vals in cells.items()}
        values = np.array([[seed_values[(d, m)].mean() for m in methods] for d in datasets])
        return cls(datasets, methods, values, seed_values, metric)

    @classmethod
    def from_csv(cls, path, metric: str) -> "ComparisonMatrix":
        with open(Path(path), newline="") as fh:
            reader = csv.DictReader(fh)
            rows = [
                (r["dataset"], r["method"], r["seed"], r["metric"], r["value"])
                for r in reader
                if r["metric"] == metric and r["value"] not in ("", "None")
            ]
        return cls.from_records(rows, metric)

    def column(self, method: str) -> np.ndarray:
        return self.values[:, self.methods.index(method)]

    def effect_sizes(self, method: str, baseline: str) -> np.ndarray:
        """Per-dataset Cohen's d of ``method`` against ``baseline`` over seeds."""
        return np.array([cohens_d(self.seed_values[(d, method)], self.seed_values[(d, baseline)]) for d in self.datasets])


@dataclass(frozen=True)
class RankingResult:
    ranks: dict[str, float]
    cliques: list[list[str]]
    p_matrix: dict[str, dict[str, float]]
    rejected: dict[str, dict[str, bool]]

    def to_dict(self) -> dict:
        return {"ranks": self.ranks, "cliques": self.cliques, "p_matrix": self.p_matrix}


def cd_ranking(matrix: ComparisonMatrix, alpha: float = 0.05) -> RankingResult:
    """Average ranks (1 = lowest value) and maximal cliques of methods with no rejected pairwise test."""
    methods = list(matrix.methods)
    ranks = average_ranks(matrix)
    pairs = list(combinations(range(len(methods)), 2))
    pvals = [wilcoxon_signed_rank(matrix.values[:, i], matrix.values[:, j]).pvalue for i, j in pairs]
    reject = holm_correct(pvals, alpha) if pairs else np.zeros(0, dtype=bool)

    p_matrix = {m: {m: 1.0} for m in methods}
    rejected = {m: {m: False} for m in methods}
    graph = nx.Graph()
    graph.add_nodes_from(methods)
    for (i, j), p, r in zip(pairs, pvals, reject):
        a, b = methods[i], methods[j]
        p_matrix[a][b] = p_matrix[b][a] = float(p)
        rejected[a][b] = rejected[b][a] = bool(r)
        if not r:
            graph.add_edge(a, b)

    rank_of = {m: float(r) for m, r in zip(methods, ranks)}
    order = lambda m: (rank_of[m], m)  # noqa: E731
    cliques = sorted((sorted(c, key=order) for c in nx.find_cliques(graph)), key=lambda c: [order(m) for m in c])
    return RankingResult(
        {m: rank_of[m] for m in sorted(methods)},
        cliques,
        {a: dict(sorted(row.items())) for a, row in sorted(p_matrix.items())},
        {a: dict(sorted(row.items())) for a, row in sorted(rejected.items())},
    )


def letter_values(samples) -> dict[float, float]:
    """Linearly interpolated quantiles at levels 1/8, 1/4, 1/2, 3/4 and 7/8."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("letter values need at least one sample")
    return {q: float(v) for q, v in zip(LETTER_LEVELS, np.quantile(x, LETTER_LEVELS))}
