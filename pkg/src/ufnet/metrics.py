"""Classification metrics, seed aggregation and subgroup significance tests."""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import optimize
from scipy.special import gammaln
from scipy.stats import norm, rankdata

from .uncertainty import brier, ece

Z_95 = 1.96

METRIC_NAMES = (
    "accuracy", "balanced_accuracy", "auroc", "auprc", "f1", "precision",
    "sensitivity", "specificity", "coverage", "ece", "brier",
)


def _binary(labels) -> np.ndarray:
    y = np.asarray(labels).astype(int).reshape(-1)
    if np.any((y != 0) & (y != 1)):
        raise ValueError("labels must be 0 or 1")
    return y


def _div(a: float, b: float) -> float:
    return a / b if b else 0.0


def confusion(preds, labels) -> dict[str, int]:
    p, y = _binary(preds), _binary(labels)
    return {
        "tp": int(np.sum((p == 1) & (y == 1))),
        "fp": int(np.sum((p == 1) & (y == 0))),
        "tn": int(np.sum((p == 0) & (y == 0))),
        "fn": int(np.sum((p == 0) & (y == 1))),
    }


def binary_metrics(preds, labels) -> dict[str, float]:
    """Confusion-matrix metrics; ratios with a zero denominator are 0."""
    p, y = _binary(preds), _binary(labels)
    if p.size == 0 or p.size != y.size:
        raise ValueError("binary_metrics needs matching non-empty predictions and labels")
    c = confusion(p, y)
    tp, fp, tn, fn = c["tp"], c["fp"], c["tn"], c["fn"]
    sens = _div(tp, tp + fn)
    spec = _div(tn, tn + fp)
    prec = _div(tp, tp + fp)
    return {
        "accuracy": (tp + tn) / p.size,
        "balanced_accuracy": (sens + spec) / 2.0,
        "f1": _div(2 * tp, 2 * tp + fp + fn),
        "precision": prec,
        "sensitivity": sens,
        "specificity": spec,
        **c,
    }


def _both_classes(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = _binary(labels)
    if s.size != y.size:
        raise ValueError(f"{s.size} scores vs {y.size} labels")
    if y.min(initial=1) == y.max(initial=0):
        raise ValueError("AUROC/AUPRC need both classes present")
    return s, y


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC; tied positive/negative pairs count one half."""
    s, y = _both_classes(scores, labels)
    ranks = rankdata(s)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    """Average precision: recall-step-weighted precision at each distinct threshold."""
    s, y = _both_classes(scores, labels)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last_of_group = np.r_[np.diff(s) != 0, True]
    tp = np.cumsum(y)[last_of_group]
    seen = (np.arange(1, y.size + 1))[last_of_group]
    precision = tp / seen
    recall = tp / y.sum()
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


@dataclass
class EvalReport:
    """Metrics on retained (non-withheld) samples plus coverage."""

    accuracy: float
    balanced_accuracy: float
    auroc: float | None
    auprc: float | None
    f1: float
    precision: float
    sensitivity: float
    specificity: float
    coverage: float
    ece: float
    brier: float
    tp: int
    fp: int
    tn: int
    fn: int
    withheld: int
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(probs, labels, withheld=None, threshold: float = 0.5) -> EvalReport:
    """Build an :class:`EvalReport` from probabilities and an abstention mask.

    Metrics use the unmodified probabilities of retained samples only.
    """
    p = np.asarray(probs, dtype=np.float64).reshape(-1)
    y = _binary(labels)
    w = np.zeros(p.size, dtype=bool) if withheld is None else np.asarray(withheld, dtype=bool)
    keep = ~w
    if not keep.any():
        raise ValueError("every sample was withheld; nothing to evaluate")
    pk, yk = p[keep], y[keep]
    core = binary_metrics((pk > threshold).astype(int), yk)
    single = yk.min() == yk.max()
    return EvalReport(
        accuracy=core["accuracy"], balanced_accuracy=core["balanced_accuracy"],
        auroc=None if single else auroc(pk, yk), auprc=None if single else auprc(pk, yk),
        f1=core["f1"], precision=core["precision"], sensitivity=core["sensitivity"],
        specificity=core["specificity"], coverage=float(keep.sum() / p.size),
        ece=ece(pk, yk), brier=brier(pk, yk),
        tp=core["tp"], fp=core["fp"], tn=core["tn"], fn=core["fn"],
        withheld=int(w.sum()), n=int(p.size),
    )


@dataclass
class SeedAggregate:
    k: int
    mean: dict[str, float] = field(default_factory=dict)
    half_width: dict[str, float] = field(default_factory=dict)

    def ci(self, metric: str) -> tuple[float, float]:
        m, h = self.mean[metric], self.half_width[metric]
        return m - h, m + h

    def to_dict(self) -> dict:
        return {"k": self.k, "mean": self.mean, "half_width": self.half_width,
                "ci": {m: list(self.ci(m)) for m in self.mean}}


def aggregate_seeds(reports, metrics=METRIC_NAMES) -> SeedAggregate:
    """Mean and normal-approximation 95% half-width per metric across seeds."""
    rows = [r.to_dict() if isinstance(r, EvalReport) else dict(r) for r in reports]
    k = len(rows)
    if k < 2:
        raise ValueError(f"aggregating seeds needs at least 2 reports, got {k}")
    agg = SeedAggregate(k)
    for m in metrics:
        values = [r[m] for r in rows if r.get(m) is not None]
        if len(values) < 2:
            continue
        v = np.asarray(values, dtype=np.float64)
        agg.mean[m] = float(v.mean())
        agg.half_width[m] = float(Z_95 * v.std(ddof=1) / math.sqrt(v.size))
    return agg


def two_proportion_ztest(x1: int, n1: int, x2: int, n2: int) -> tuple[float, float]:
    """Pooled two-sample z-test for proportions, two-sided."""
    if n1 <= 0 or n2 <= 0:
        raise ValueError("sample sizes must be positive")
    p1, p2 = x1 / n1, x2 / n2
    pooled = (x1 + x2) / (n1 + n2)
    var = pooled * (1.0 - pooled) * (1.0 / n1 + 1.0 / n2)
    if var <= 0:
        return 0.0, 1.0
    z = (p1 - p2) / math.sqrt(var)
    return float(z), float(2.0 * norm.sf(abs(z)))


def _log_comb(n, k):
    return gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1)


def fisher_exact_2x2(table) -> tuple[float, float]:
    """Conditional MLE odds ratio and two-sided Fisher exact p-value.

    The p-value sums hypergeometric probabilities of all tables (same
    margins) no more likely than the observed one.
    """
    t = np.asarray(table)
    if t.shape != (2, 2) or np.any(t < 0) or np.any(t != np.round(t)):
        raise ValueError("Fisher's test needs a 2x2 table of non-negative integers")
    (a, b), (c, d) = t.astype(int)
    r1, r2, c1 = a + b, c + d, a + c
    if min(r1, r2, c1, b + d) == 0:
        raise ValueError("Fisher's test is undefined with a zero margin")
    lo, hi = max(0, c1 - r2), min(r1, c1)
    support = np.arange(lo, hi + 1)
    logp = _log_comb(r1, support) + _log_comb(r2, c1 - support) - _log_comb(r1 + r2, c1)
    probs = np.exp(logp)
    observed = probs[a - lo]
    p_value = float(min(1.0, probs[probs <= observed * (1.0 + 1e-7)].sum()))
    return _conditional_odds_ratio(a, support, logp), p_value


def _conditional_odds_ratio(a: int, support: np.ndarray, logp: np.ndarray) -> float:
    if a == support[0]:
        return 0.0
    if a == support[-1]:
        return math.inf

    def mean_minus_a(log_psi: float) -> float:
        w = logp + support * log_psi
        w = np.exp(w - w.max())
        return float((support * w).sum() / w.sum()) - a

    lo, hi = -1.0, 1.0
    while mean_minus_a(lo) > 0:
        lo *= 2
    while mean_minus_a(hi) < 0:
        hi *= 2
    return float(math.exp(optimize.brentq(mean_minus_a, lo, hi, xtol=1e-12)))


def _tau_b(x: np.ndarray, y: np.ndarray) -> float:
    dx = np.sign(x[:, None] - x[None, :])
    dy = np.sign(y[:, None] - y[None, :])
    iu = np.triu_indices(x.size, 1)
    s = float((dx * dy)[iu].sum())
    nx_ = float(np.abs(dx[iu]).sum())
    ny_ = float(np.abs(dy[iu]).sum())
    return s / math.sqrt(nx_ * ny_)


def kendall_tau(x, y) -> tuple[float, float]:
    """Kendall's tau-b with a two-sided p-value.

    The p-value is exact (full permutation distribution of ``y``) for
    ``n <= 8`` and a tie-corrected normal approximation otherwise.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    n = x.size
    if n != y.size or n < 2:
        raise ValueError("kendall_tau needs two equal-length samples of size >= 2")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise ValueError("kendall_tau is undefined when either sample is constant")
    tau = _tau_b(x, y)
    iu = np.triu_indices(n, 1)
    if n <= 8:
        perms = np.array(list(itertools.permutations(range(n))))
        yp = y[perms]
        dx = np.sign(x[iu[0]] - x[iu[1]])
        dy = np.sign(yp[:, iu[0]] - yp[:, iu[1]])
        denom = math.sqrt(np.abs(dx).sum() * np.abs(dy[0]).sum())
        taus = (dy @ dx) / denom
        return tau, float(np.mean(np.abs(taus) >= abs(tau) - 1e-12))
    s = float((np.sign(x[:, None] - x[None, :]) * np.sign(y[:, None] - y[None, :]))[iu].sum())
    _, tx = np.unique(x, return_counts=True)
    _, ty = np.unique(y, return_counts=True)
    v0 = n * (n - 1) * (2 * n + 5)
    vt = float(np.sum(tx * (tx - 1) * (2 * tx + 5)))
    vu = float(np.sum(ty * (ty - 1) * (2 * ty + 5)))
    v1 = float(np.sum(tx * (tx - 1))) * float(np.sum(ty * (ty - 1))) / (2 * n * (n - 1))
    v2 = float(np.sum(tx * (tx - 1) * (tx - 2))) * float(np.sum(ty * (ty - 1) * (ty - 2))) / (9 * n * (n - 1) * (n - 2))
    var = (v0 - vt - vu) / 18.0 + v1 + v2
    z = s / math.sqrt(var)
    return tau, float(2.0 * norm.sf(abs(z)))


def proportion_ci(x: int, n: int) -> tuple[float, float, float]:
    """Rate with a normal-approximation 95% half-width (clipped to [0, 1])."""
    rate = x / n
    half = Z_95 * math.sqrt(rate * (1 - rate) / n)
    return rate, max(0.0, rate - half), min(1.0, rate + half)
