"""Uncertainty-calibrated fusion network and the four fusion baselines.

Each task's feature vector is projected to a shared width, the three
projections attend to each other with scores penalised column-wise by
``eta * sigma_j`` (so an uncertain task receives less attention), and a
shallow MC-dropout head reads the contextual vectors, optionally with the
task models' mean probabilities appended (hybrid mode).
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import numerics as nx
from .preprocessing import Scaler, oversample_minority
from .task_model import (
    McBatch,
    TaskModel,
    TaskModelConfig,
    make_scheduler,
    train_network,
    train_task_model,
)
from .uncertainty import logit

logger = logging.getLogger(__name__)

TASKS = ("tapping", "smile", "speech")


class FrozenModelError(AssertionError):
    """A task model changed while a fusion model was being trained."""


# -- inputs -------------------------------------------------------------------


@dataclass
class FusionData:
    """Complete-session fusion inputs, one row per session.

    ``mu`` and ``sigma`` are ``(B, N)`` arrays of the frozen task models' MC
    mean and standard deviation, columns ordered like ``tasks``.
    """

    tasks: tuple[str, ...]
    features: dict[str, np.ndarray]
    mu: np.ndarray
    sigma: np.ndarray
    labels: np.ndarray
    subjects: np.ndarray
    sessions: np.ndarray
    logits: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.tasks = tuple(self.tasks)
        missing = [t for t in self.tasks if t not in self.features]
        if missing:
            raise ValueError(f"fusion input is missing task(s): {missing}")
        n = self.labels.shape[0]
        for t in self.tasks:
            if self.features[t].shape[0] != n:
                raise ValueError(f"task {t!r} has {self.features[t].shape[0]} rows, expected {n}")
        if self.mu.shape != (n, len(self.tasks)) or self.sigma.shape != self.mu.shape:
            raise ValueError("mu/sigma must be (sessions, tasks)")
        if np.any(self.sigma < 0):
            raise ValueError("task uncertainties must be non-negative")
        for arr in [self.mu, self.sigma, *self.features.values()]:
            if not np.all(np.isfinite(arr)):
                raise ValueError("fusion inputs must be finite")
        if self.logits is None:
            self.logits = logit(self.mu)

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, idx) -> "FusionData":
        idx = np.asarray(idx)
        return FusionData(
            self.tasks, {t: self.features[t][idx] for t in self.tasks}, self.mu[idx], self.sigma[idx],
            self.labels[idx], self.subjects[idx], self.sessions[idx], self.logits[idx],
        )

    def feature_matrix(self) -> np.ndarray:
        return np.hstack([self.features[t] for t in self.tasks])


# -- attention ----------------------------------------------------------------


@dataclass
class AttentionTrace:
    scores: np.ndarray
    penalty: np.ndarray
    weights: np.ndarray
    context: np.ndarray


def _attend(xp, sigma: np.ndarray, wq, wk, wv, eta: float):
    q = nx.matmul(xp, wq)
    k = nx.matmul(xp, wk)
    v = nx.matmul(xp, wv)
    qkv_dim = q.shape[-1]
    scores = nx.scale(nx.matmul(q, nx.transpose(k)), 1.0 / math.sqrt(qkv_dim))
    # column j of every row loses eta * sigma_j
    penalty = eta * np.asarray(sigma, dtype=np.float64)[..., None, :]
    weights = nx.softmax(nx.add(scores, -penalty))
    context = nx.matmul(weights, v)
    return scores, penalty, weights, context


def calibrated_attention(xp, sigma, wq, wk, wv, eta: float) -> AttentionTrace:
    """Single-head self-attention over task vectors with uncertainty penalty.

    Args:
        xp: Projected task vectors, ``(N, d)`` or batched ``(B, N, d)``.
        sigma: Task uncertainties, ``(N,)`` or ``(B, N)``; must be >= 0.
        wq, wk, wv: ``(d, d_qkv)`` projection matrices.
        eta: Penalty strength, >= 0.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma < 0):
        raise ValueError("uncertainties must be non-negative")
    if eta < 0:
        raise ValueError(f"eta must be non-negative, got {eta}")
    scores, penalty, weights, context = _attend(xp, sigma, wq, wk, wv, eta)
    return AttentionTrace(
        scores.data, np.broadcast_to(penalty, scores.shape).copy(), weights.data, context.data
    )


def dot_product_attention(xp, wq, wk, wv) -> np.ndarray:
    """Reference scaled dot-product attention weights (no penalty)."""
    xp = np.asarray(xp, dtype=np.float64)
    q, k = xp @ wq, xp @ wk
    s = q @ np.swapaxes(k, -1, -2) / math.sqrt(q.shape[-1])
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


# -- UFNet --------------------------------------------------------------------


@dataclass
class UfnetConfig:
    tasks: tuple[str, ...] = TASKS
    fusion_mode: str = "hybrid"
    projection_dim: int = 512
    qkv_dim: int = 64
    hidden_layers: int = 1
    hidden_width: int = 128
    dropout: float = 0.4959892
    eta: float = 81.8179035
    mc_rounds: int = 30
    epochs: int = 164
    batch_size: int = 1024
    learning_rate: float = 0.020724
    optimizer: str = "sgd"
    momentum: float = 0.689782158
    scheduler: str | None = None
    step_size: int = 10
    patience: int = 10
    gamma: float | None = None
    seed: int = 242
    oversample: str | None = None
    label_smoothing: float = 0.0
    scale_inputs: bool = True

    def __post_init__(self) -> None:
        self.tasks = tuple(self.tasks)
        if len(self.tasks) < 2:
            raise nx.ConfigError("fusion needs at least two tasks")
        if self.fusion_mode not in ("hybrid", "early"):
            raise nx.ConfigError(f"fusion_mode must be 'hybrid' or 'early', got {self.fusion_mode!r}")
        if self.eta < 0:
            raise nx.ConfigError(f"eta must be non-negative, got {self.eta}")
        if not 0.0 <= self.dropout < 1.0:
            raise nx.ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.mc_rounds < 1 or self.hidden_layers not in (0, 1):
            raise nx.ConfigError("mc_rounds must be >= 1 and hidden_layers 0 or 1")
        if not 0.0 <= self.label_smoothing < 0.5:
            raise nx.ConfigError(f"label_smoothing must be in [0, 0.5), got {self.label_smoothing}")

    @classmethod
    def from_dict(cls, d: dict) -> "UfnetConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise nx.ConfigError(f"unknown UFNet config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tasks"] = list(self.tasks)
        return d

    @property
    def head_input_dim(self) -> int:
        n = len(self.tasks)
        return n * self.qkv_dim + (n if self.fusion_mode == "hybrid" else 0)


class UfnetModel:
    """Projection, calibrated attention and MC-dropout head."""

    def __init__(self, config: UfnetConfig, input_dims: dict[str, int], rng: np.random.Generator):
        self.config = config
        self.input_dims = {t: int(input_dims[t]) for t in config.tasks}
        d, q = config.projection_dim, config.qkv_dim
        self.proj: dict[str, tuple[nx.Tensor, ...]] = {}
        for t in config.tasks:
            self.proj[t] = (
                nx.parameter(nx.glorot_uniform(self.input_dims[t], d, rng), f"{t}.W"),
                nx.parameter(np.zeros(d), f"{t}.b"),
                nx.parameter(np.ones(d), f"{t}.ln_gain"),
                nx.parameter(np.zeros(d), f"{t}.ln_shift"),
            )
        self.wq = nx.parameter(nx.glorot_uniform(d, q, rng), "W_Q")
        self.wk = nx.parameter(nx.glorot_uniform(d, q, rng), "W_K")
        self.wv = nx.parameter(nx.glorot_uniform(d, q, rng), "W_V")
        widths = [config.head_input_dim] + ([config.hidden_width] if config.hidden_layers else []) + [1]
        self.head = [
            (nx.parameter(nx.glorot_uniform(a, b, rng), f"head.W{i}"), nx.parameter(np.zeros(b), f"head.b{i}"))
            for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))
        ]
        self.scalers: dict[str, Scaler] = {t: Scaler("standard" if config.scale_inputs else "none")
                                           for t in config.tasks}
        self.task_fingerprints: dict[str, str] = {}
        self.history: dict = {}

    @property
    def params(self) -> list[nx.Tensor]:
        out: list[nx.Tensor] = []
        for t in self.config.tasks:
            out.extend(self.proj[t])
        out.extend([self.wq, self.wk, self.wv])
        for w, b in self.head:
            out.extend([w, b])
        return out

    def project(self, task: str, x, rng=None, mc: bool = False) -> nx.Tensor:
        """layer_norm(relu(dropout(linear(x)))) for one task."""
        w, b, gain, shift = self.proj[task]
        x = x if isinstance(x, nx.Tensor) else np.asarray(x, dtype=np.float64)
        if x.shape[-1] != w.shape[0]:
            raise ValueError(f"task {task!r}: expected {w.shape[0]} features, got {x.shape[-1]}")
        h = nx.linear(x, w, b)
        h = nx.dropout(h, self.config.dropout, rng, training=mc)
        return nx.layer_norm(nx.relu(h), gain, shift)

    def scale_inputs(self, data: FusionData) -> list[np.ndarray]:
        return [self.scalers[t].transform(data.features[t]) for t in self.config.tasks]

    def forward_arrays(self, xs: list[np.ndarray], mu: np.ndarray, sigma: np.ndarray, rng=None,
                       mc: bool = False, trace: bool = False):
        cfg = self.config
        projected = [self.project(t, x, rng, mc) for t, x in zip(cfg.tasks, xs)]
        xp = nx.stack(projected, axis=1)
        scores, penalty, weights, context = _attend(xp, sigma, self.wq, self.wk, self.wv, cfg.eta)
        flat = nx.reshape(context, (context.shape[0], -1))
        h = nx.concat([flat, np.asarray(mu, dtype=np.float64)], axis=-1) if cfg.fusion_mode == "hybrid" else flat
        for i, (w, b) in enumerate(self.head):
            h = nx.dropout(h, cfg.dropout, rng, training=mc)
            h = nx.linear(h, w, b)
            if i < len(self.head) - 1:
                h = nx.relu(h)
        out = nx.sigmoid(h)
        if trace:
            return out, AttentionTrace(scores.data, np.broadcast_to(penalty, scores.shape).copy(),
                                       weights.data, context.data)
        return out

    def rounds(self, data: FusionData, n: int | None = None, rng=None) -> np.ndarray:
        n = n or self.config.mc_rounds
        xs = self.scale_inputs(data)
        if self.config.dropout == 0.0:
            p = self.forward_arrays(xs, data.mu, data.sigma).data[:, 0]
            return np.broadcast_to(p, (n, p.size)).copy()
        if rng is None:
            raise nx.ConfigError("MC prediction with dropout needs a random generator")
        return np.stack([self.forward_arrays(xs, data.mu, data.sigma, rng, mc=True).data[:, 0] for _ in range(n)])

    def predict(self, data: FusionData, n: int | None = None, rng=None) -> McBatch:
        self._check_tasks(data)
        return McBatch.from_rounds(self.rounds(data, n, rng))

    def attention_weights(self, data: FusionData, eta: float | None = None) -> np.ndarray:
        """Deterministic (dropout-off) attention matrices, ``(B, N, N)``."""
        xs = self.scale_inputs(data)
        saved = self.config.eta
        if eta is not None:
            self.config.eta = eta
        try:
            _, tr = self.forward_arrays(xs, data.mu, data.sigma, trace=True)
        finally:
            self.config.eta = saved
        return tr.weights

    def _check_tasks(self, data: FusionData) -> None:
        if tuple(data.tasks) != self.config.tasks:
            raise ValueError(f"model expects tasks {self.config.tasks}, data has {tuple(data.tasks)}")

    def to_dict(self) -> dict:
        return {
            "kind": "ufnet",
            "config": self.config.to_dict(),
            "input_dims": self.input_dims,
            "projection": {t: [p.data.tolist() for p in self.proj[t]] for t in self.config.tasks},
            "attention": [self.wq.data.tolist(), self.wk.data.tolist(), self.wv.data.tolist()],
            "head": [[w.data.tolist(), b.data.tolist()] for w, b in self.head],
            "scalers": {t: _scaler_dict(s) for t, s in self.scalers.items()},
            "task_fingerprints": self.task_fingerprints,
            "history": self.history,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "UfnetModel":
        model = cls(UfnetConfig.from_dict(d["config"]), d["input_dims"], np.random.default_rng(0))
        for t, arrays in d["projection"].items():
            for p, a in zip(model.proj[t], arrays):
                p.data = np.asarray(a, dtype=np.float64)
        for p, a in zip((model.wq, model.wk, model.wv), d["attention"]):
            p.data = np.asarray(a, dtype=np.float64)
        for (w, b), (wa, ba) in zip(model.head, d["head"]):
            w.data = np.asarray(wa, dtype=np.float64)
            b.data = np.asarray(ba, dtype=np.float64)
        model.scalers = {t: _scaler_from(s) for t, s in d["scalers"].items()}
        model.task_fingerprints = d.get("task_fingerprints", {})
        model.history = d.get("history", {})
        return model


def _scaler_dict(s: Scaler) -> dict:
    return {"kind": s.kind,
            "center": None if s.center is None else s.center.tolist(),
            "spread": None if s.spread is None else s.spread.tolist()}


def _scaler_from(d: dict) -> Scaler:
    s = Scaler(d["kind"])
    if d["center"] is not None:
        s.center = np.asarray(d["center"], dtype=np.float64)
        s.spread = np.asarray(d["spread"], dtype=np.float64)
    return s


def ufnet_forward(data: FusionData, model: UfnetModel, n: int | None = None, rng=None) -> McBatch:
    return model.predict(data, n, rng)


def _fingerprints(task_models: dict[str, TaskModel] | None) -> dict[str, str]:
    return {t: m.fingerprint() for t, m in (task_models or {}).items()}


def train_ufnet(
    train: FusionData,
    config: UfnetConfig,
    val: FusionData | None = None,
    task_models: dict[str, TaskModel] | None = None,
) -> UfnetModel:
    """Train UFNet on complete sessions; the task models are only checked, never touched."""
    if tuple(train.tasks) != config.tasks:
        train = FusionData(config.tasks, train.features, _select(train, config.tasks, "mu"),
                           _select(train, config.tasks, "sigma"), train.labels, train.subjects, train.sessions)
        if val is not None:
            val = FusionData(config.tasks, val.features, _select(val, config.tasks, "mu"),
                             _select(val, config.tasks, "sigma"), val.labels, val.subjects, val.sessions)
    if val is not None and set(train.subjects) & set(val.subjects):
        raise ValueError("train and validation fusion sets share subjects")
    if np.unique(train.labels).size != 2:
        raise ValueError("training labels must contain both classes")
    before = _fingerprints(task_models)
    rng = np.random.default_rng(config.seed)
    model = UfnetModel(config, {t: train.features[t].shape[1] for t in config.tasks}, rng)
    for t in config.tasks:
        model.scalers[t].fit(train.features[t])
    xs = model.scale_inputs(train)
    mu, sigma, y = train.mu, train.sigma, train.labels.astype(int)
    if config.oversample:
        joined = np.hstack(xs + [mu, sigma])
        joined, y = oversample_minority(joined, y, config.oversample, rng)
        cuts = np.cumsum([x.shape[1] for x in xs] + [mu.shape[1]])
        pieces = np.split(joined, cuts, axis=1)
        xs, mu, sigma = pieces[: len(xs)], pieces[-2], np.maximum(pieces[-1], 0.0)

    optimizer = nx.OptimizerState(model.params, config.optimizer, lr=config.learning_rate, momentum=config.momentum)
    scheduler = make_scheduler(config.scheduler, config.step_size, config.patience, config.gamma)
    val_loss_fn = None
    # validation loss costs a full forward pass per epoch; only a plateau scheduler reads it
    if val is not None and len(val) and config.scheduler == "plateau":
        vxs = model.scale_inputs(val)

        def val_loss_fn():
            return nx.bce_value(model.forward_arrays(vxs, val.mu, val.sigma).data, val.labels)

    def forward(batch, r):
        *bx, bmu, bsig = batch
        return model.forward_arrays(list(bx), bmu, bsig, r, mc=True)

    model.history = train_network(
        model, model.params, forward, [*xs, mu, sigma], y,
        batch_size=config.batch_size, epochs=config.epochs, optimizer=optimizer, scheduler=scheduler,
        rng=rng, smoothing=config.label_smoothing, val_loss_fn=val_loss_fn, label="UFNet",
    )
    after = _fingerprints(task_models)
    if before != after:
        raise FrozenModelError("a task model changed during UFNet training")
    model.task_fingerprints = after
    return model


def _select(data: FusionData, tasks: tuple[str, ...], attr: str) -> np.ndarray:
    cols = [data.tasks.index(t) for t in tasks]
    return getattr(data, attr)[:, cols]


def restrict(data: FusionData, tasks) -> FusionData:
    """View of ``data`` limited to ``tasks`` (e.g. a two-task combination)."""
    tasks = tuple(tasks)
    return FusionData(tasks, {t: data.features[t] for t in tasks}, _select(data, tasks, "mu"),
                      _select(data, tasks, "sigma"), data.labels, data.subjects, data.sessions,
                      _select(data, tasks, "logits"))


# -- baselines ----------------------------------------------------------------


def baseline_majority(votes) -> int:
    """Majority label from exactly three task-model votes."""
    votes = [int(v) for v in votes]
    if len(votes) != 3:
        raise ValueError(f"majority voting needs exactly 3 votes, got {len(votes)}")
    return int(sum(votes) >= 2)


def majority_predict(data: FusionData, threshold: float = 0.5) -> np.ndarray:
    votes = (data.mu > threshold).astype(int)
    if votes.shape[1] != 3:
        raise ValueError("majority voting needs exactly 3 tasks")
    return (votes.sum(axis=1) >= 2).astype(int)


BASELINE_INPUTS = ("late", "early", "hybrid")


def baseline_inputs(data: FusionData, kind: str) -> np.ndarray:
    """Input matrix for a neural baseline: logits, raw features, or both."""
    if kind == "late":
        return data.logits.copy()
    if kind == "early":
        return data.feature_matrix()
    if kind == "hybrid":
        return np.hstack([data.feature_matrix(), data.logits])
    raise ValueError(f"unknown baseline {kind!r}; expected one of {BASELINE_INPUTS}")


@dataclass
class BaselineModel:
    kind: str
    model: TaskModel
    fingerprints: dict = field(default_factory=dict)

    def predict(self, data: FusionData, n: int | None = None, rng=None) -> McBatch:
        return self.model.predict_batch(baseline_inputs(data, self.kind), n, rng)

    def to_dict(self) -> dict:
        return {"kind": f"baseline-{self.kind}", "model": self.model.to_dict(), "task_fingerprints": self.fingerprints}

    @classmethod
    def from_dict(cls, d: dict) -> "BaselineModel":
        return cls(d["kind"].removeprefix("baseline-"), TaskModel.from_dict(d["model"]), d.get("task_fingerprints", {}))


def train_baseline(kind: str, train: FusionData, val: FusionData | None, config: TaskModelConfig,
                   task_models: dict[str, TaskModel] | None = None) -> BaselineModel:
    before = _fingerprints(task_models)
    Xv = baseline_inputs(val, kind) if val is not None else None
    yv = val.labels if val is not None else None
    model = train_task_model(baseline_inputs(train, kind), train.labels, Xv, yv, config,
                             train_subjects=train.subjects, val_subjects=None if val is None else val.subjects)
    if _fingerprints(task_models) != before:
        raise FrozenModelError("a task model changed during baseline training")
    return BaselineModel(kind, model, before)


def baseline_late(train, val, config, task_models=None) -> BaselineModel:
    return train_baseline("late", train, val, config, task_models)


def baseline_early(train, val, config, task_models=None) -> BaselineModel:
    return train_baseline("early", train, val, config, task_models)


def baseline_hybrid(train, val, config, task_models=None) -> BaselineModel:
    return train_baseline("hybrid", train, val, config, task_models)


def model_fingerprint(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()
