"""Evaluation metrics and statistical procedures, implemented from first principles.

Everything here is deterministic given its inputs (and seed, where one
applies). The regularized incomplete beta function is computed with a
Lentz-style continued fraction so the module carries no statistics
dependency.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .diffcore import RandomStream


class SplitError(ValueError):
    """A cross-validation split cannot satisfy its stratification contract."""


class MetricError(ValueError):
    """A metric is undefined for the given inputs (e.g. single-class labels)."""


class StatisticsError(ValueError):
    """A statistical test received inputs that violate its preconditions."""


# ---------------------------------------------------------------------------
# Regularized incomplete beta (for the t distribution tail)
# ---------------------------------------------------------------------------

_CF_TOL = 1e-12
_CF_MAX_ITER = 500
_TINY = 1e-300


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta, modified Lentz iteration."""
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _TINY:
        d = _TINY
    d = 1.0 / d
    h = d
    for m in range(1, _CF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _TINY:
            d = _TINY
        c = 1.0 + aa / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _TINY:
            d = _TINY
        c = 1.0 + aa / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _CF_TOL:
            return h
    return h


def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise StatisticsError(f"betainc_reg requires x in [0, 1], got {x}")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_sf_two_sided(t: float, df: float) -> float:
    """Two-sided tail probability of Student's t with df degrees of freedom."""
    if df <= 0:
        raise StatisticsError(f"degrees of freedom must be positive, got {df}")
    if t == 0.0:
        return 1.0
    x = df / (df + t * t)
    return betainc_reg(df / 2.0, 0.5, x)


def _norm_sf_two_sided(z: float) -> float:
    return math.erfc(abs(z) / math.sqrt(2.0))


# ---------------------------------------------------------------------------
# Cross-validation
# ---------------------------------------------------------------------------

@dataclass
class FoldPlan:
    """k stratified folds of subject indices; folds partition the cohort."""

    folds: list[list[int]]
    seed: int

    @property
    def k(self) -> int:
        return len(self.folds)

    def split(self, fold: int) -> tuple[list[int], list[int]]:
        test = list(self.folds[fold])
        train = [i for j, f in enumerate(self.folds) for i in f if j != fold]
        return train, test


def stratified_kfold(labels, k: int = 5, seed: int = 0) -> FoldPlan:
    """Deterministic stratified k-fold plan over subject indices.

    Each class is shuffled with the seeded stream and dealt into folds so
    per-fold class counts differ by at most one from proportionality.
    """
    labels = np.asarray(labels)
    rng = RandomStream(seed).spawn("stratified_kfold")
    classes = sorted(set(labels.tolist()))
    folds: list[list[int]] = [[] for _ in range(k)]
    for offset, cls in enumerate(classes):
        idx = np.flatnonzero(labels == cls)
        if idx.size < k:
            raise SplitError(f"class {cls} has {idx.size} members, fewer than k={k}")
        shuffled = idx[rng.permutation(idx.size)]
        # rotate which folds receive the remainder so no fold is always largest
        for pos, subject in enumerate(shuffled):
            folds[(pos + offset) % k].append(int(subject))
    for f in folds:
        f.sort()
    return FoldPlan(folds, seed)


# ---------------------------------------------------------------------------
# Classification metrics
# ---------------------------------------------------------------------------

@dataclass
class MetricSet:
    accuracy: float
    roc_auc: float
    sensitivity: float
    specificity: float

    def as_dict(self) -> dict[str, float]:
        return {
            "accuracy": self.accuracy,
            "roc_auc": self.roc_auc,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
        }


def _midranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    z = x[order]
    n = len(x)
    ranks = np.zeros(n)
    i = 0
    while i < n:
        j = i
        while j < n and z[j] == z[i]:
            j += 1
        ranks[i:j] = 0.5 * (i + j - 1) + 1.0
        i = j
    out = np.empty(n)
    out[order] = ranks
    return out


def roc_auc(scores, labels) -> float:
    """Exact Mann-Whitney AUC: P(score+ > score-) + half credit for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise MetricError("roc_auc requires both classes present")
    ranks = _midranks(scores)
    pos_rank_sum = ranks[labels == 1].sum()
    m, n = pos.size, neg.size
    return (pos_rank_sum - m * (m + 1) / 2.0) / (m * n)


def confusion_metrics(scores, labels, threshold: float = 0.5) -> MetricSet:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if len(set(labels.tolist())) < 2:
        raise MetricError("confusion_metrics requires both classes present")
    pred = scores >= threshold
    tp = int(np.sum(pred & (labels == 1)))
    fn = int(np.sum(~pred & (labels == 1)))
    tn = int(np.sum(~pred & (labels == 0)))
    fp = int(np.sum(pred & (labels == 0)))
    return MetricSet(
        accuracy=(tp + tn) / len(labels),
        roc_auc=roc_auc(scores, labels),
        sensitivity=tp / (tp + fn),
        specificity=tn / (tn + fp),
    )


# ---------------------------------------------------------------------------
# DeLong test for correlated ROC-AUCs
# ---------------------------------------------------------------------------

@dataclass
class DelongResult:
    z: float
    p: float
    auc_a: float
    auc_b: float
    degenerate: bool = False


def _placements(scores: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    m, n = pos.size, neg.size
    all_ranks = _midranks(np.concatenate([pos, neg]))
    pos_ranks = _midranks(pos)
    neg_ranks = _midranks(neg)
    v10 = (all_ranks[:m] - pos_ranks) / n
    v01 = 1.0 - (all_ranks[m:] - neg_ranks) / m
    auc = float(v10.mean())
    return v10, v01, auc


def delong_test(scores_a, scores_b, labels) -> DelongResult:
    """DeLong comparison of two correlated AUCs on paired subject scores."""
    scores_a = np.asarray(scores_a, dtype=np.float64)
    scores_b = np.asarray(scores_b, dtype=np.float64)
    labels = np.asarray(labels)
    if scores_a.shape != scores_b.shape or scores_a.shape != labels.shape:
        raise StatisticsError("delong_test requires paired scores on identical subjects")
    if not (np.any(labels == 1) and np.any(labels == 0)):
        raise StatisticsError("delong_test requires both classes present")
    v10a, v01a, auc_a = _placements(scores_a, labels)
    v10b, v01b, auc_b = _placements(scores_b, labels)
    m = v10a.size
    n = v01a.size
    s10 = np.cov(np.vstack([v10a, v10b]), ddof=1)
    s01 = np.cov(np.vstack([v01a, v01b]), ddof=1)
    cov = s10 / m + s01 / n
    var_diff = cov[0, 0] + cov[1, 1] - 2.0 * cov[0, 1]
    if not np.isfinite(var_diff) or var_diff <= 1e-16:
        degenerate_z = 0.0
        return DelongResult(degenerate_z, 1.0, auc_a, auc_b, degenerate=True)
    z = (auc_a - auc_b) / math.sqrt(var_diff)
    return DelongResult(z, _norm_sf_two_sided(z), auc_a, auc_b)


# ---------------------------------------------------------------------------
# Welch's t-test
# ---------------------------------------------------------------------------

def welch_t(group_a, group_b) -> tuple[float, float]:
    """Welch statistic and two-sided p with Welch-Satterthwaite df."""
    a = np.asarray(group_a, dtype=np.float64)
    b = np.asarray(group_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise StatisticsError("welch_t requires at least 2 values per group")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise StatisticsError("welch_t requires finite inputs")
    va = a.var(ddof=1) / a.size
    vb = b.var(ddof=1) / b.size
    denom = va + vb
    if denom == 0.0:
        if a.mean() == b.mean():
            return 0.0, 1.0
        return math.copysign(math.inf, a.mean() - b.mean()), 0.0
    t = (a.mean() - b.mean()) / math.sqrt(denom)
    df = denom * denom / (va * va / (a.size - 1) + vb * vb / (b.size - 1))
    return t, t_sf_two_sided(t, df)


# ---------------------------------------------------------------------------
# Benjamini-Hochberg FDR
# ---------------------------------------------------------------------------

@dataclass
class FdrResult:
    p_adjusted: np.ndarray
    rejected: np.ndarray
    q: float


def bh_fdr(p_values, q: float = 0.05) -> FdrResult:
    """Step-up Benjamini-Hochberg; rejection set is {adjusted p < q}."""
    p = np.asarray(p_values, dtype=np.float64)
    if p.size == 0:
        return FdrResult(p.copy(), np.zeros(0, dtype=bool), q)
    if np.any((p < 0) | (p > 1)):
        raise StatisticsError("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    ranked = p[order] * m / np.arange(1, m + 1)
    adj_sorted = np.minimum.accumulate(ranked[::-1])[::-1]
    adj_sorted = np.minimum(adj_sorted, 1.0)
    adjusted = np.empty(m)
    adjusted[order] = adj_sorted
    return FdrResult(adjusted, adjusted < q, q)


# ---------------------------------------------------------------------------
# Permutation test of correlation
# ---------------------------------------------------------------------------

def pearson_r(x: np.ndarray, y: np.ndarray) -> float:
    dx = x - x.mean()
    dy = y - y.mean()
    denom = math.sqrt(float(dx @ dx) * float(dy @ dy))
    if denom == 0.0:
        return 0.0
    return float(dx @ dy) / denom


def permutation_corr(x, y, n_perm: int = 10_000, seed: int = 0) -> tuple[float, float]:
    """Pearson r with an add-one smoothed permutation p-value on |r|."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.size < 3:
        raise StatisticsError("permutation_corr requires equal lengths >= 3")
    r = pearson_r(x, y)
    if r == 0.0 and (x.var() == 0.0 or y.var() == 0.0):
        return 0.0, 1.0
    rng = RandomStream(seed).spawn("permutation_corr")
    hits = 0
    abs_r = abs(r)
    for _ in range(n_perm):
        perm = rng.permutation(x.size)
        if abs(pearson_r(x, y[perm])) >= abs_r:
            hits += 1
    return r, (hits + 1) / (n_perm + 1)
