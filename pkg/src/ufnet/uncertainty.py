"""Confidence intervals, abstention rules, Platt scaling and calibration metrics."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.stats import norm

from .numerics import stable_sigmoid

logger = logging.getLogger(__name__)

Z_95 = float(norm.ppf(0.975))
PD, NON_PD = 1, 0
PLATT_SLOPE_CAP = 50.0


class Reason(str, Enum):
    CI_STRADDLES = "ci-straddles-threshold"
    CONFORMAL_AMBIGUOUS = "conformal-ambiguous"
    CONFORMAL_EMPTY = "conformal-empty"


@dataclass(frozen=True)
class AbstainDecision:
    label: int | None
    reason: Reason | None = None

    def __post_init__(self) -> None:
        if (self.label is None) != (self.reason is not None):
            raise ValueError("a withheld decision needs exactly one reason; a prediction needs none")

    @property
    def withheld(self) -> bool:
        return self.label is None


def ci_of_mean(rounds, level: float = 0.95) -> tuple[float, float]:
    """Normal-theory CI of the mean of MC round predictions, clipped to [0, 1]."""
    r = np.asarray(rounds, dtype=np.float64).reshape(-1)
    if r.size == 0:
        raise ValueError("ci_of_mean needs at least one prediction")
    if np.all(r == r[0]):
        return float(r[0]), float(r[0])
    mu = float(r.mean())
    half = ci_half_width(float(r.std(ddof=1)), r.size, level)
    return max(0.0, mu - half), min(1.0, mu + half)


def ci_half_width(std, n: int, level: float = 0.95):
    z = Z_95 if level == 0.95 else float(norm.ppf(0.5 + level / 2.0))
    if n <= 1:
        return np.zeros_like(np.asarray(std, dtype=np.float64))
    return z * np.asarray(std, dtype=np.float64) / math.sqrt(n)


def mean_ci_bounds(mu, sigma, n: int, level: float = 0.95) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`ci_of_mean` from precomputed mean and sample std."""
    mu = np.asarray(mu, dtype=np.float64)
    half = ci_half_width(sigma, n, level)
    return np.clip(mu - half, 0.0, 1.0), np.clip(mu + half, 0.0, 1.0)


def abstain_by_ci(ci_low: float, ci_high: float, mu: float, threshold: float = 0.5) -> AbstainDecision:
    """Withhold when the interval touches the decision threshold (inclusive)."""
    if ci_low <= threshold <= ci_high:
        return AbstainDecision(None, Reason.CI_STRADDLES)
    return AbstainDecision(PD if mu > threshold else NON_PD)


@dataclass(frozen=True)
class ConformalCalibrator:
    alpha: float
    qhat: float
    scores: tuple[float, ...]

    @property
    def size(self) -> int:
        return len(self.scores)


def nonconformity(prob_pd, labels) -> np.ndarray:
    p = np.asarray(prob_pd, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    return 1.0 - np.where(y == PD, p, 1.0 - p)


def fit_conformal(prob_pd, labels, alpha: float = 0.05) -> ConformalCalibrator:
    """Split-conformal threshold from calibration probabilities of PD.

    The threshold is the ``ceil((m + 1)(1 - alpha))``-th smallest score;
    when that rank exceeds ``m`` every class is admitted (``qhat = 1``).
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    scores = np.sort(nonconformity(prob_pd, labels))
    m = scores.size
    if m < 10:
        raise ValueError(f"conformal calibration needs at least 10 samples, got {m}")
    rank = math.ceil((m + 1) * (1.0 - alpha))
    if rank > m:
        logger.warning("%d calibration samples are too few for alpha=%g; every prediction set holds both classes",
                       m, alpha)
    qhat = 1.0 if rank > m else float(scores[rank - 1])
    return ConformalCalibrator(alpha=alpha, qhat=qhat, scores=tuple(float(s) for s in scores))


def conformal_predict_set(cal: ConformalCalibrator, prob_pd: float) -> tuple[frozenset, AbstainDecision]:
    members = set()
    if 1.0 - prob_pd <= cal.qhat:
        members.add(PD)
    if prob_pd <= cal.qhat:
        members.add(NON_PD)
    if len(members) == 1:
        return frozenset(members), AbstainDecision(next(iter(members)))
    reason = Reason.CONFORMAL_AMBIGUOUS if members else Reason.CONFORMAL_EMPTY
    return frozenset(members), AbstainDecision(None, reason)


def conformal_sets(cal: ConformalCalibrator, prob_pd) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised membership: boolean arrays (has_pd, has_non_pd)."""
    p = np.asarray(prob_pd, dtype=np.float64)
    return 1.0 - p <= cal.qhat, p <= cal.qhat


def logit(p, eps: float = 1e-7):
    p = np.clip(np.asarray(p, dtype=np.float64), eps, 1.0 - eps)
    return np.log(p) - np.log1p(-p)


@dataclass(frozen=True)
class PlattScaler:
    a: float
    b: float
    capped: bool = False

    def transform_logits(self, z) -> np.ndarray:
        return stable_sigmoid(self.a * np.asarray(z, dtype=np.float64) + self.b)

    def transform(self, prob) -> np.ndarray:
        return self.transform_logits(logit(prob))


def fit_platt(z, labels, tol: float = 1e-8, max_iter: int = 200) -> PlattScaler:
    """Maximum-likelihood logistic recalibration ``sigmoid(a z + b)``.

    Damped Newton with backtracking; stops when the gradient norm of the
    mean negative log-likelihood drops below ``tol``. Separable inputs
    drive ``|a|`` to the cap of 50, which is logged.
    """
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if z.size != y.size or z.size == 0:
        raise ValueError("fit_platt needs matching non-empty logits and labels")
    if np.unique(y).size != 2:
        raise ValueError("fit_platt needs both classes present")
    separated = _separation(z, y)
    if separated:
        # the likelihood has no maximiser; put the boundary midway between the classes
        a = math.copysign(PLATT_SLOPE_CAP, separated)
        lo, hi = (z[y == 0].max(), z[y == 1].min()) if separated > 0 else (z[y == 1].max(), z[y == 0].min())
        logger.warning("Platt input is perfectly separable; slope capped at %.0f", a)
        return PlattScaler(a=a, b=float(-a * (lo + hi) / 2.0), capped=True)
    design = np.column_stack([z, np.ones_like(z)])

    def nll(theta):
        t = design @ theta
        return float(np.mean(np.logaddexp(0.0, t) - y * t))

    theta = np.array([1.0, 0.0])
    capped = False
    for _ in range(max_iter):
        p = stable_sigmoid(design @ theta)
        grad = design.T @ (p - y) / z.size
        if np.linalg.norm(grad) < tol:
            break
        w = p * (1.0 - p)
        hess = (design * w[:, None]).T @ design / z.size + 1e-12 * np.eye(2)
        step = np.linalg.solve(hess, grad)
        current = nll(theta)
        t = 1.0
        while t > 1e-10 and nll(theta - t * step) > current + 1e-4 * t * grad @ (-step):
            t *= 0.5
        theta = theta - t * step
        if abs(theta[0]) > PLATT_SLOPE_CAP:
            theta[0] = math.copysign(PLATT_SLOPE_CAP, theta[0])
            capped = True
            break
    if capped:
        logger.warning("Platt slope reached the cap of %.0f (separable or degenerate input)", PLATT_SLOPE_CAP)
    if theta[0] <= 0:
        logger.warning("Platt slope is non-positive (a=%.4g); scores are anti-correlated with labels", theta[0])
    return PlattScaler(a=float(theta[0]), b=float(theta[1]), capped=capped)


def _separation(z: np.ndarray, y: np.ndarray) -> int:
    """+1 if every positive logit exceeds every negative one, -1 for the reverse, else 0."""
    pos, neg = z[y == 1], z[y == 0]
    if pos.min() > neg.max():
        return 1
    if neg.min() > pos.max():
        return -1
    return 0


def _check_probs(probs, labels) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(probs, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).astype(int).reshape(-1)
    if p.size == 0:
        raise ValueError("calibration metrics need at least one sample")
    if p.size != y.size:
        raise ValueError(f"{p.size} probabilities vs {y.size} labels")
    if np.any((p < 0) | (p > 1)):
        raise ValueError("probabilities must lie in [0, 1]")
    return p, y


def ece(probs, labels, bins: int = 10) -> float:
    """Expected calibration error on max-class confidence, right-closed bins."""
    p, y = _check_probs(probs, labels)
    pred = (p > 0.5).astype(int)
    conf = np.maximum(p, 1.0 - p)
    idx = np.clip(np.ceil(conf * bins).astype(int) - 1, 0, bins - 1)
    total = 0.0
    for b in range(bins):
        in_bin = idx == b
        n_b = int(in_bin.sum())
        if n_b:
            total += n_b / p.size * abs(np.mean(pred[in_bin] == y[in_bin]) - np.mean(conf[in_bin]))
    return float(total)


def brier(probs, labels) -> float:
    p, y = _check_probs(probs, labels)
    return float(np.mean((p - y) ** 2))
