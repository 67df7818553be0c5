"""Scoring and statistical calibration: hierarchical scores, cluster and
subsampling bootstraps, rank correlations with exact small-n p-values,
agreement metrics, and the verbosity-bias check.

Everything here is pure and deterministic.  Seeded operations use numpy's
Philox bit generator, a documented 64-bit counter-based RNG, so replicate
streams are reproducible bit-for-bit and portable across platforms.
Percentiles use linear interpolation between order statistics.
"""

from __future__ import annotations

import itertools
import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import norm as _norm
from scipy.stats import t as _tdist

EXACT_PERMUTATION_MAX_N = 10
_PERM_CHUNK = 200_000
_STAT_TOL = 1e-12


class StatsError(Exception):
    pass


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=seed))


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass
class InstructionScore:
    conv_id: str
    n_items: int
    score: float  # fraction of items passed


@dataclass
class BenchmarkScore:
    theta: float
    ci_low: float
    ci_high: float
    replicates: np.ndarray
    seed: int
    B: int

    def __post_init__(self):
        if self.ci_low > self.ci_high:
            raise StatsError("ci_low exceeds ci_high")

    def to_record(self) -> dict:
        return {
            "theta": self.theta,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "B": self.B,
            "seed": self.seed,
        }


@dataclass
class RankCorrelation:
    rho: float
    tau: float
    p_rho: float
    p_tau: float
    n: int


@dataclass
class JudgeProfileMetrics:
    kappa: float
    f1_negative: float
    f1_positive: float
    f1_macro: float
    confusion: list[list[int]]  # rows: human (neg, pos); cols: judge (neg, pos)
    n: int
    degenerate_agreement: bool = False  # both raters constant and equal
    zero_support_class: bool = False

    def to_record(self) -> dict:
        return {
            "kappa": self.kappa,
            "f1_negative": self.f1_negative,
            "f1_positive": self.f1_positive,
            "f1_macro": self.f1_macro,
            "confusion": self.confusion,
            "n": self.n,
        }


@dataclass
class VerbosityCheck:
    r: float
    p: float
    n: int


# ---------------------------------------------------------------------------
# Hierarchical scoring
# ---------------------------------------------------------------------------


def instruction_score(verdicts) -> InstructionScore:
    """Fraction of a single instruction's checklist items that passed."""
    if hasattr(verdicts, "verdicts"):
        conv_id, values = verdicts.conv_id, verdicts.verdicts
    else:
        conv_id, values = "", list(verdicts)
    if not values:
        raise StatsError("instruction score needs at least one verdict")
    return InstructionScore(
        conv_id=conv_id, n_items=len(values), score=sum(map(bool, values)) / len(values)
    )


def scores_from_table(table) -> list[InstructionScore]:
    """Per-instruction scores, sorted by conv_id for stable downstream order."""
    return [instruction_score(table.rows[cid]) for cid in sorted(table.rows)]


def benchmark_score(table) -> float:
    """Unweighted mean of instruction-level scores.

    Each instruction counts once regardless of how many checklist items it
    carries; pooling all items would let long checklists dominate.
    """
    scores = scores_from_table(table)
    if not scores:
        raise StatsError("cannot score an empty verdict table")
    return float(np.mean([s.score for s in scores]))


def pooled_item_mean(table) -> float:
    """Item-pooled mean (what benchmark_score deliberately is not)."""
    verdicts = [bool(v) for cid in sorted(table.rows) for v in table.rows[cid].verdicts]
    if not verdicts:
        raise StatsError("cannot score an empty verdict table")
    return float(np.mean(verdicts))


# ---------------------------------------------------------------------------
# Bootstraps
# ---------------------------------------------------------------------------


def _percentile_ci(replicates: np.ndarray) -> tuple[float, float]:
    lo, hi = np.percentile(replicates, [2.5, 97.5], method="linear")
    return float(lo), float(hi)


def cluster_bootstrap_scores(
    scores: Sequence[float], B: int = 1000, seed: int = 0
) -> BenchmarkScore:
    """Resample whole instructions with replacement; percentile CI of the mean."""
    if B < 1:
        raise StatsError("B must be >= 1")
    values = np.asarray(scores, dtype=float)
    n = values.shape[0]
    if n == 0:
        raise StatsError("no instruction scores to bootstrap")
    theta = float(values.mean())
    if n == 1:
        import warnings

        warnings.warn("single-instruction table: degenerate bootstrap CI", stacklevel=2)
        replicates = np.full(B, theta)
        return BenchmarkScore(theta, theta, theta, replicates, seed, B)
    idx = _rng(seed).integers(0, n, size=(B, n))
    replicates = values[idx].mean(axis=1)
    lo, hi = _percentile_ci(replicates)
    return BenchmarkScore(theta, lo, hi, replicates, seed, B)


def cluster_bootstrap(table, B: int = 1000, seed: int = 0) -> BenchmarkScore:
    return cluster_bootstrap_scores(
        [s.score for s in scores_from_table(table)], B=B, seed=seed
    )


def subsample_bootstrap_scores(
    scores: Sequence[float], n: int = 150, B: int = 1000, seed: int = 0
) -> BenchmarkScore:
    """Repeated fixed-size subsets without replacement.

    Equalizes cardinality with a smaller comparison benchmark; aggregation
    stays hierarchical (items were already averaged per instruction).
    """
    if B < 1:
        raise StatsError("B must be >= 1")
    values = np.asarray(scores, dtype=float)
    N = values.shape[0]
    if n > N:
        raise StatsError(f"subsample size {n} exceeds table size {N}")
    if n < 1:
        raise StatsError("subsample size must be >= 1")
    theta = float(values.mean())
    rng = _rng(seed)
    replicates = np.empty(B)
    for b in range(B):
        # sorted indices give an accumulation order independent of draw order,
        # so the n == N case reproduces theta exactly
        idx = np.sort(rng.choice(N, size=n, replace=False))
        replicates[b] = values[idx].mean()
    lo, hi = _percentile_ci(replicates)
    return BenchmarkScore(theta, lo, hi, replicates, seed, B)


def subsample_bootstrap(table, n: int = 150, B: int = 1000, seed: int = 0) -> BenchmarkScore:
    return subsample_bootstrap_scores(
        [s.score for s in scores_from_table(table)], n=n, B=B, seed=seed
    )


# ---------------------------------------------------------------------------
# Rank statistics
# ---------------------------------------------------------------------------


def average_ranks(values: Sequence[float]) -> np.ndarray:
    """1-based ranks; tied values share the average of their positions."""
    arr = np.asarray(values, dtype=float)
    order = np.argsort(arr, kind="stable")
    ranks = np.empty(arr.shape[0])
    i = 0
    while i < arr.shape[0]:
        j = i
        while j + 1 < arr.shape[0] and arr[order[j + 1]] == arr[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    xc = x - x.mean()
    yc = y - y.mean()
    denom = math.sqrt(float(xc @ xc) * float(yc @ yc))
    if denom == 0:
        raise StatsError("correlation undefined for a constant input vector")
    return float(np.clip((xc @ yc) / denom, -1.0, 1.0))


def _check_pair(x, y, min_n: int) -> tuple[np.ndarray, np.ndarray]:
    xa = np.asarray(x, dtype=float)
    ya = np.asarray(y, dtype=float)
    if xa.shape != ya.shape or xa.ndim != 1:
        raise StatsError("inputs must be equal-length 1-d sequences")
    if xa.shape[0] < min_n:
        raise StatsError(f"need at least {min_n} pairs, got {xa.shape[0]}")
    if np.all(xa == xa[0]) or np.all(ya == ya[0]):
        raise StatsError("correlation undefined for a constant input vector")
    return xa, ya


def _permutation_chunks(n: int):
    it = itertools.permutations(range(n))
    while True:
        chunk = list(itertools.islice(it, _PERM_CHUNK))
        if not chunk:
            return
        yield np.array(chunk, dtype=np.int64)


def _exact_spearman_p(rx: np.ndarray, ry: np.ndarray, observed: float) -> float:
    """Two-sided exact p by full enumeration of y-orderings."""
    n = rx.shape[0]
    rxc = rx - rx.mean()
    ryc = ry - ry.mean()
    denom = math.sqrt(float(rxc @ rxc) * float(ryc @ ryc))
    hits = 0
    total = math.factorial(n)
    threshold = abs(observed) - _STAT_TOL
    for perms in _permutation_chunks(n):
        stats = (ryc[perms] @ rxc) / denom
        hits += int(np.count_nonzero(np.abs(stats) >= threshold))
    return hits / total


def spearman(x: Sequence[float], y: Sequence[float]) -> tuple[float, float]:
    """Spearman's rho with a two-sided p-value.

    rho is Pearson on average ranks.  For n <= 10 the p-value is exact
    (full permutation enumeration); beyond that a t approximation is used.
    """
    xa, ya = _check_pair(x, y, min_n=3)
    rx = average_ranks(xa)
    ry = average_ranks(ya)
    rho = _pearson(rx, ry)
    n = xa.shape[0]
    if n <= EXACT_PERMUTATION_MAX_N:
        p = _exact_spearman_p(rx, ry, rho)
    elif abs(rho) == 1.0:
        p = 0.0
    else:
        t_stat = rho * math.sqrt((n - 2) / (1 - rho * rho))
        p = float(2 * _tdist.sf(abs(t_stat), df=n - 2))
    return rho, min(p, 1.0)


def _kendall_parts(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """(concordant - discordant, tie-corrected denominator) for tau-b."""
    n = x.shape[0]
    sx = np.sign(x[:, None] - x[None, :])
    sy = np.sign(y[:, None] - y[None, :])
    iu = np.triu_indices(n, k=1)
    num = float((sx[iu] * sy[iu]).sum())
    n0 = n * (n - 1) / 2
    tx = sum(t * (t - 1) / 2 for t in Counter(x.tolist()).values())
    ty = sum(t * (t - 1) / 2 for t in Counter(y.tolist()).values())
    denom = math.sqrt((n0 - tx) * (n0 - ty))
    if denom == 0:
        raise StatsError("correlation undefined for a constant input vector")
    return num, denom


def _exact_kendall_p(x: np.ndarray, y: np.ndarray, observed: float, denom: float) -> float:
    n = x.shape[0]
    sx = np.sign(x[:, None] - x[None, :])
    sy = np.sign(y[:, None] - y[None, :])
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    hits = 0
    total = math.factorial(n)
    threshold = abs(observed) - _STAT_TOL
    for perms in _permutation_chunks(n):
        nums = np.zeros(perms.shape[0])
        for i, j in pairs:
            nums += sx[i, j] * sy[perms[:, i], perms[:, j]]
        hits += int(np.count_nonzero(np.abs(nums / denom) >= threshold))
    return hits / total


def _kendall_asymptotic_p(x: np.ndarray, y: np.ndarray, num: float) -> float:
    """Normal approximation for C - D with tie correction."""
    n = x.shape[0]
    xt = list(Counter(x.tolist()).values())
    yt = list(Counter(y.tolist()).values())
    v0 = n * (n - 1) * (2 * n + 5)
    vt = sum(t * (t - 1) * (2 * t + 5) for t in xt)
    vu = sum(u * (u - 1) * (2 * u + 5) for u in yt)
    v1 = sum(t * (t - 1) for t in xt) * sum(u * (u - 1) for u in yt)
    v2 = sum(t * (t - 1) * (t - 2) for t in xt) * sum(u * (u - 1) * (u - 2) for u in yt)
    var = (
        (v0 - vt - vu) / 18
        + v1 / (2 * n * (n - 1))
        + v2 / (9 * n * (n - 1) * (n - 2))
    )
    if var <= 0:
        return 0.0
    z = num / math.sqrt(var)
    return float(2 * _norm.sf(abs(z)))


def kendall(x: Sequence[float], y: Sequence[float]) -> tuple[float, float]:
    """Kendall's tau-b (tie-corrected) with a two-sided p-value.

    Exact permutation p for n <= 10, normal approximation beyond.
    """
    xa, ya = _check_pair(x, y, min_n=3)
    num, denom = _kendall_parts(xa, ya)
    tau = float(np.clip(num / denom, -1.0, 1.0))
    n = xa.shape[0]
    if n <= EXACT_PERMUTATION_MAX_N:
        p = _exact_kendall_p(xa, ya, tau, denom)
    else:
        p = _kendall_asymptotic_p(xa, ya, num)
    return tau, min(p, 1.0)


def rank_compare(x: Sequence[float], y: Sequence[float]) -> RankCorrelation:
    rho, p_rho = spearman(x, y)
    tau, p_tau = kendall(x, y)
    return RankCorrelation(rho=rho, tau=tau, p_rho=p_rho, p_tau=p_tau, n=len(list(x)))


# ---------------------------------------------------------------------------
# Agreement metrics
# ---------------------------------------------------------------------------


def confusion_counts(human: Sequence[bool], judge: Sequence[bool]) -> list[list[int]]:
    """2x2 counts; rows are human (neg, pos), columns judge (neg, pos)."""
    h = [bool(v) for v in human]
    j = [bool(v) for v in judge]
    if len(h) != len(j) or not h:
        raise StatsError("agreement needs equal-length, non-empty label lists")
    out = [[0, 0], [0, 0]]
    for hv, jv in zip(h, j):
        out[int(hv)][int(jv)] += 1
    return out


def kappa_from_confusion(confusion: Sequence[Sequence[int]]) -> float:
    (tn, fp), (fn, tp) = confusion
    n = tn + fp + fn + tp
    if n == 0:
        raise StatsError("empty confusion matrix")
    p_o = (tn + tp) / n
    p_e = ((tn + fp) * (tn + fn) + (fn + tp) * (fp + tp)) / (n * n)
    if p_e == 1.0:
        # Both raters constant on the same class: perfect but uninformative
        # agreement; defined as 1 by convention.
        return 1.0
    return (p_o - p_e) / (1 - p_e)


def cohen_kappa(human: Sequence[bool], judge: Sequence[bool]) -> float:
    """Chance-corrected agreement between two binary raters."""
    return kappa_from_confusion(confusion_counts(human, judge))


def _f1(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def f1_profile(human: Sequence[bool], judge: Sequence[bool]) -> JudgeProfileMetrics:
    """Per-class F1 (each class treated as positive in turn), macro mean,
    and kappa, all derived from one confusion matrix."""
    confusion = confusion_counts(human, judge)
    (tn, fp), (fn, tp) = confusion
    f1_pos = _f1(tp, fp, fn)
    f1_neg = _f1(tn, fn, fp)  # negative class as "positive": swap error roles
    zero_support = (tn + fp == 0) or (fn + tp == 0)
    degenerate = fp == 0 and fn == 0 and (tn == 0 or tp == 0)
    return JudgeProfileMetrics(
        kappa=kappa_from_confusion(confusion),
        f1_negative=f1_neg,
        f1_positive=f1_pos,
        f1_macro=(f1_neg + f1_pos) / 2,
        confusion=confusion,
        n=tn + fp + fn + tp,
        degenerate_agreement=degenerate,
        zero_support_class=zero_support,
    )


# ---------------------------------------------------------------------------
# Verbosity bias
# ---------------------------------------------------------------------------


def verbosity_check(lengths: Sequence[int], scores: Sequence[float]) -> VerbosityCheck:
    """Pearson correlation between response length and instruction score,
    with a two-sided t-test p-value."""
    xa, ya = _check_pair(lengths, scores, min_n=3)
    r = _pearson(xa, ya)
    n = xa.shape[0]
    if abs(r) == 1.0:
        p = 0.0
    else:
        t_stat = r * math.sqrt((n - 2) / (1 - r * r))
        p = float(2 * _tdist.sf(abs(t_stat), df=n - 2))
    return VerbosityCheck(r=r, p=min(p, 1.0), n=n)


# ---------------------------------------------------------------------------
# Reference-score ingestion (for rank comparisons)
# ---------------------------------------------------------------------------


def read_reference_scores(path) -> tuple[list[str], dict[str, dict[str, float]]]:
    """Read a reference benchmark score table.

    CSV with a header: first column is the model name, remaining columns are
    reference score columns.  Returns (column names, {model: {column: value}}).
    Cells that fail to parse as numbers are treated as missing.
    """
    import csv
    from pathlib import Path

    with Path(path).open(encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise StatsError(f"empty reference file: {path}") from None
        columns = [c.strip() for c in header[1:]]
        table: dict[str, dict[str, float]] = {}
        for row in reader:
            if not row or not row[0].strip():
                continue
            scores = {}
            for col, cell in zip(columns, row[1:]):
                try:
                    scores[col] = float(cell)
                except ValueError:
                    continue
            table[row[0].strip()] = scores
    return columns, table
