"""Feature pruning, scaling and minority oversampling, fit on training rows only."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

CORRELATION_THRESHOLDS = (0.80, 0.85, 0.90, 0.95)
SCALERS = ("standard", "minmax", "none")
SMOTE_ALIASES = ("svmsmote", "adasyn", "borderlinesmote", "boarderlinesmote", "smoten")


class NotFittedError(RuntimeError):
    pass


def _pearson_abs(X: np.ndarray) -> np.ndarray:
    """Absolute Pearson correlation matrix; constant columns correlate 0."""
    centred = X - X.mean(axis=0)
    norms = np.sqrt((centred**2).sum(axis=0))
    safe = np.where(norms > 0, norms, 1.0)
    unit = centred / safe
    corr = np.abs(unit.T @ unit)
    const = norms == 0
    corr[const, :] = 0.0
    corr[:, const] = 0.0
    return corr


def fit_correlation_filter(X: np.ndarray, threshold: float) -> list[int]:
    """Greedy left-to-right pruning of highly correlated columns.

    Column ``j`` is dropped when ``|r(j, k)| > threshold`` for some column
    ``k < j`` that has already been kept.

    Returns:
        Kept column indices in their original order.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError(f"correlation filter needs a 2-D matrix with >= 2 rows, got {X.shape}")
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"correlation threshold must be in (0, 1], got {threshold}")
    corr = _pearson_abs(X)
    kept: list[int] = []
    for j in range(X.shape[1]):
        if not kept or not np.any(corr[j, kept] > threshold):
            kept.append(j)
    return kept


@dataclass
class Scaler:
    kind: str = "standard"
    center: np.ndarray | None = None
    spread: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.kind not in SCALERS:
            raise ValueError(f"unknown scaler {self.kind!r}; expected one of {SCALERS}")

    @property
    def fitted(self) -> bool:
        return self.kind == "none" or self.center is not None

    def fit(self, X: np.ndarray) -> "Scaler":
        X = np.asarray(X, dtype=np.float64)
        if self.kind == "standard":
            self.center = X.mean(axis=0)
            self.spread = X.std(axis=0)
        elif self.kind == "minmax":
            self.center = X.min(axis=0)
            self.spread = X.max(axis=0) - self.center
        return self

    def transform(self, X: np.ndarray) -> np.ndarray:
        if not self.fitted:
            raise NotFittedError("scaler applied before fit")
        X = np.asarray(X, dtype=np.float64)
        if self.kind == "none":
            return X.copy()
        safe = np.where(self.spread > 0, self.spread, 1.0)
        out = (X - self.center) / safe
        out[:, self.spread == 0] = 0.0
        return out

    def inverse_transform(self, Z: np.ndarray) -> np.ndarray:
        if not self.fitted:
            raise NotFittedError("scaler inverted before fit")
        Z = np.asarray(Z, dtype=np.float64)
        if self.kind == "none":
            return Z.copy()
        return Z * self.spread + self.center


def fit_scaler(X: np.ndarray, kind: str) -> Scaler:
    return Scaler(kind).fit(X)


def apply_scaler(X: np.ndarray, scaler: Scaler) -> np.ndarray:
    return scaler.transform(X)


def _normalise_method(method: str) -> str:
    m = method.lower().replace("_", "").replace("-", "")
    if m in ("random", "randomoversampler"):
        return "random"
    if m == "smote":
        return "smote"
    if m in SMOTE_ALIASES:
        logger.info("oversampling method %r runs as plain SMOTE", method)
        return "smote"
    raise ValueError(f"unknown oversampling method {method!r}")


def oversample_minority(
    X: np.ndarray,
    y: np.ndarray,
    method: str,
    rng: np.random.Generator,
    k: int = 5,
) -> tuple[np.ndarray, np.ndarray]:
    """Upsample the minority class to the majority count.

    Original rows come first and are never modified; synthetic minority
    rows are appended. ``random`` copies minority rows with replacement;
    ``smote`` interpolates ``x + u * (x_nn - x)`` toward one of the ``k``
    nearest minority neighbours.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y).astype(int)
    classes, counts = np.unique(y, return_counts=True)
    if classes.size != 2:
        raise ValueError("oversampling needs both classes present")
    if counts[0] == counts[1]:
        return X.copy(), y.copy()
    minority = classes[np.argmin(counts)]
    need = int(counts.max() - counts.min())
    pool = X[y == minority]
    method = _normalise_method(method)
    if method == "smote" and pool.shape[0] <= k:
        logger.warning(
            "SMOTE needs more than %d minority rows, got %d; using random oversampling", k, pool.shape[0]
        )
        method = "random"
    if method == "random":
        extra = pool[rng.integers(0, pool.shape[0], size=need)]
    else:
        d2 = ((pool[:, None, :] - pool[None, :, :]) ** 2).sum(axis=-1)
        np.fill_diagonal(d2, np.inf)
        neighbours = np.argsort(d2, axis=1, kind="stable")[:, :k]
        base = rng.integers(0, pool.shape[0], size=need)
        pick = neighbours[base, rng.integers(0, k, size=need)]
        u = rng.random(need)[:, None]
        extra = pool[base] + u * (pool[pick] - pool[base])
    X_out = np.vstack([X, extra])
    y_out = np.concatenate([y, np.full(need, minority)])
    return X_out, y_out


@dataclass
class PreprocessPipeline:
    """Correlation pruning followed by scaling; fitted on training rows."""

    drop_correlated: bool = False
    threshold: float = 0.95
    scaler_kind: str = "standard"
    kept: list[int] | None = None
    scaler: Scaler | None = None
    n_features: int | None = None

    def fit(self, X: np.ndarray) -> "PreprocessPipeline":
        X = np.asarray(X, dtype=np.float64)
        self.n_features = X.shape[1]
        self.kept = fit_correlation_filter(X, self.threshold) if self.drop_correlated else list(range(X.shape[1]))
        self.scaler = Scaler(self.scaler_kind).fit(X[:, self.kept])
        return self

    def transform(self, X: np.ndarray) -> np.ndarray:
        if self.kept is None or self.scaler is None:
            raise NotFittedError("pipeline applied before fit")
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {X.shape[1]}")
        return self.scaler.transform(X[:, self.kept])

    @property
    def output_dim(self) -> int:
        if self.kept is None:
            raise NotFittedError("pipeline not fitted")
        return len(self.kept)

    def to_dict(self) -> dict:
        s = self.scaler
        return {
            "drop_correlated": self.drop_correlated,
            "threshold": self.threshold,
            "scaler_kind": self.scaler_kind,
            "kept": self.kept,
            "n_features": self.n_features,
            "center": None if s is None or s.center is None else s.center.tolist(),
            "spread": None if s is None or s.spread is None else s.spread.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PreprocessPipeline":
        scaler = Scaler(d["scaler_kind"])
        if d.get("center") is not None:
            scaler.center = np.asarray(d["center"], dtype=np.float64)
            scaler.spread = np.asarray(d["spread"], dtype=np.float64)
        return cls(
            drop_correlated=d["drop_correlated"],
            threshold=d["threshold"],
            scaler_kind=d["scaler_kind"],
            kept=list(d["kept"]) if d.get("kept") is not None else None,
            scaler=scaler,
            n_features=d.get("n_features"),
        )
