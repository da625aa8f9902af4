"""Shallow per-task classifiers with Monte Carlo dropout."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import numerics as nx
from .preprocessing import PreprocessPipeline, oversample_minority
from .uncertainty import mean_ci_bounds

logger = logging.getLogger(__name__)

MC_CHUNK_ELEMENTS = 4_000_000


@dataclass
class TaskModelConfig:
    """Hyper-parameters for one task network.

    ``hidden_layers`` is 0 (a single linear layer) or 1. Dropout is applied
    to the input of every linear layer. ``dropout == 0`` means a non-MC
    model: no dropout at training or inference.
    """

    task: str = "task"
    hidden_layers: int = 0
    hidden_width: int = 64
    dropout: float = 0.0
    mc_rounds: int = 1
    batch_size: int = 256
    learning_rate: float = 0.01
    epochs: int = 50
    optimizer: str = "sgd"
    momentum: float = 0.9
    scheduler: str | None = None
    step_size: int = 10
    patience: int = 10
    gamma: float | None = None
    seed: int = 0
    drop_correlated: bool = False
    correlation_threshold: float = 0.95
    scaling: str = "standard"
    oversample: str | None = None
    label_smoothing: float = 0.0

    def __post_init__(self) -> None:
        if self.hidden_layers not in (0, 1):
            raise nx.ConfigError(f"hidden_layers must be 0 or 1, got {self.hidden_layers}")
        if not 0.0 <= self.dropout < 1.0:
            raise nx.ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.mc_rounds < 1:
            raise nx.ConfigError(f"mc_rounds must be >= 1, got {self.mc_rounds}")
        if self.batch_size < 1 or self.epochs < 1 or self.hidden_width < 1:
            raise nx.ConfigError("batch_size, epochs and hidden_width must be positive")
        if self.scaling not in ("standard", "minmax", "none"):
            raise nx.ConfigError(f"unknown scaling {self.scaling!r}")
        if not 0.0 <= self.label_smoothing < 0.5:
            raise nx.ConfigError(f"label_smoothing must be in [0, 0.5), got {self.label_smoothing}")

    @classmethod
    def from_dict(cls, d: dict) -> "TaskModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise nx.ConfigError(f"unknown task-model config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def make_scheduler(kind: str | None, step_size: int, patience: int, gamma: float | None):
    if not kind:
        return None
    if gamma is None:
        # reduce-on-plateau presets never list gamma; 0.1 is the usual default factor
        gamma = 0.1
    return nx.SchedulerState(kind, step_size=step_size, patience=patience, gamma=gamma)


class ShallowNet:
    """Linear -> sigmoid, or linear -> ReLU -> linear -> sigmoid."""

    def __init__(self, in_dim: int, hidden_layers: int, hidden_width: int, dropout: float, rng):
        self.dropout = dropout
        widths = [in_dim] + ([hidden_width] if hidden_layers else []) + [1]
        self.layers: list[tuple[nx.Tensor, nx.Tensor]] = []
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            self.layers.append(
                (nx.parameter(nx.glorot_uniform(a, b, rng), f"W{i}"), nx.parameter(np.zeros(b), f"b{i}"))
            )

    @property
    def params(self) -> list[nx.Tensor]:
        return [t for pair in self.layers for t in pair]

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[0]

    def logits(self, x, rng=None, mc: bool = False) -> nx.Tensor:
        h = x
        for i, (w, b) in enumerate(self.layers):
            h = nx.dropout(h, self.dropout, rng, training=mc)
            h = nx.linear(h, w, b)
            if i < len(self.layers) - 1:
                h = nx.relu(h)
        return h

    def forward(self, x, rng=None, mc: bool = False) -> nx.Tensor:
        return nx.sigmoid(self.logits(x, rng, mc))

    def state(self) -> list[list]:
        return [[w.data.tolist(), b.data.tolist()] for w, b in self.layers]

    def load_state(self, state: list[list]) -> None:
        for (w, b), (ws, bs) in zip(self.layers, state):
            w.data = np.asarray(ws, dtype=np.float64)
            b.data = np.asarray(bs, dtype=np.float64)

    def copy_arrays(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.params]


def mc_rounds(net: ShallowNet, X: np.ndarray, n: int, rng: np.random.Generator | None) -> np.ndarray:
    """Round-by-sample matrix of MC-dropout probabilities, shape ``(n, B)``.

    Rounds are evaluated in fixed-size chunks so memory stays bounded; the
    chunk size depends only on the input shape, so results are reproducible.
    """
    X = np.asarray(X, dtype=np.float64)
    if net.dropout == 0.0:
        p = net.forward(X).data[:, 0]
        return np.broadcast_to(p, (n, p.size)).copy()
    if rng is None:
        raise nx.ConfigError("MC prediction with dropout needs a random generator")
    per_round = max(1, X.shape[0] * max(X.shape[1], 1))
    chunk = max(1, min(n, MC_CHUNK_ELEMENTS // per_round))
    out = np.empty((n, X.shape[0]))
    for start in range(0, n, chunk):
        c = min(chunk, n - start)
        xb = np.broadcast_to(X, (c,) + X.shape)
        out[start : start + c] = net.forward(xb, rng, mc=True).data[..., 0]
    return out


@dataclass(frozen=True)
class McPrediction:
    mu: float
    sigma: float
    n: int
    ci_low: float
    ci_high: float


@dataclass
class McBatch:
    """Per-sample MC summaries for a batch of inputs."""

    mu: np.ndarray
    sigma: np.ndarray
    n: int
    ci_low: np.ndarray
    ci_high: np.ndarray

    @classmethod
    def from_rounds(cls, rounds: np.ndarray) -> "McBatch":
        rounds = np.asarray(rounds, dtype=np.float64)
        n = rounds.shape[0]
        mu = rounds.mean(axis=0)
        sigma = rounds.std(axis=0, ddof=1) if n > 1 else np.zeros_like(mu)
        # identical rounds can leave rounding noise in the std; it must be exactly zero
        sigma[np.all(rounds == rounds[:1], axis=0)] = 0.0
        lo, hi = mean_ci_bounds(mu, sigma, n)
        return cls(mu=mu, sigma=sigma, n=n, ci_low=np.minimum(lo, mu), ci_high=np.maximum(hi, mu))

    def __len__(self) -> int:
        return self.mu.size

    def __getitem__(self, i: int) -> McPrediction:
        return McPrediction(
            float(self.mu[i]), float(self.sigma[i]), self.n, float(self.ci_low[i]), float(self.ci_high[i])
        )

    def subset(self, idx) -> "McBatch":
        return McBatch(self.mu[idx], self.sigma[idx], self.n, self.ci_low[idx], self.ci_high[idx])


@dataclass
class TaskModel:
    config: TaskModelConfig
    pipeline: PreprocessPipeline
    net: ShallowNet
    history: dict = field(default_factory=dict)

    @property
    def input_dim(self) -> int:
        return self.pipeline.n_features

    def prepare(self, X: np.ndarray) -> np.ndarray:
        return self.pipeline.transform(X)

    def rounds(self, X: np.ndarray, n: int | None = None, rng=None) -> np.ndarray:
        return mc_rounds(self.net, self.prepare(X), n or self.config.mc_rounds, rng)

    def predict_batch(self, X: np.ndarray, n: int | None = None, rng=None) -> McBatch:
        return McBatch.from_rounds(self.rounds(X, n, rng))

    def logit_batch(self, X: np.ndarray) -> np.ndarray:
        """Deterministic (dropout-off) pre-sigmoid output."""
        return self.net.logits(self.prepare(X)).data[:, 0]

    def to_dict(self) -> dict:
        return {
            "kind": "task-model",
            "config": self.config.to_dict(),
            "pipeline": self.pipeline.to_dict(),
            "weights": self.net.state(),
            "history": self.history,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TaskModel":
        config = TaskModelConfig.from_dict(d["config"])
        pipeline = PreprocessPipeline.from_dict(d["pipeline"])
        net = ShallowNet(pipeline.output_dim, config.hidden_layers, config.hidden_width, config.dropout,
                         np.random.default_rng(0))
        net.load_state(d["weights"])
        return cls(config, pipeline, net, d.get("history", {}))

    def fingerprint(self) -> str:
        blob = json.dumps({"config": self.config.to_dict(), "pipeline": self.pipeline.to_dict(),
                           "weights": self.net.state()}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()


def predict_mc(model: TaskModel, x: np.ndarray, n: int | None = None, rng=None) -> McPrediction:
    """MC-dropout summary for one feature vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"predict_mc takes one feature vector, got shape {x.shape}")
    if x.size != model.input_dim:
        raise ValueError(f"feature dimension {x.size} does not match model input {model.input_dim}")
    return model.predict_batch(x[None, :], n, rng)[0]


def predict_label(pred: McPrediction | float, threshold: float = 0.5) -> int:
    """1 (PD) iff the mean probability is strictly above ``threshold``."""
    mu = pred.mu if isinstance(pred, McPrediction) else float(pred)
    return int(mu > threshold)


def check_subject_disjoint(**groups) -> None:
    """Raise if any subject id appears in more than one named group."""
    seen: dict[str, str] = {}
    for name, ids in groups.items():
        for sid in set(ids):
            if sid in seen and seen[sid] != name:
                raise ValueError(f"subject {sid!r} appears in both {seen[sid]!r} and {name!r}")
            seen[sid] = name


def train_network(
    net: ShallowNet | object,
    params: list[nx.Tensor],
    forward,
    X_train,
    y_train: np.ndarray,
    *,
    batch_size: int,
    epochs: int,
    optimizer: nx.OptimizerState,
    scheduler: nx.SchedulerState | None,
    rng: np.random.Generator,
    smoothing: float = 0.0,
    val_loss_fn=None,
    label: str = "model",
) -> dict:
    """Mini-batch BCE training loop shared by task, baseline and fusion nets.

    ``X_train`` is anything indexable by a row-index array; ``forward(xb,
    rng)`` returns a ``(b, 1)`` probability tensor with dropout active.
    """
    n = y_train.size
    history = {"train_loss": [], "val_loss": [], "lr": []}
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for bi, start in enumerate(range(0, n, batch_size)):
            idx = order[start : start + batch_size]
            optimizer.zero_grad()
            with nx.recording() as tape:
                probs = forward(_take(X_train, idx), rng)
                loss = nx.bce_loss(probs, y_train[idx], smoothing)
                if not np.isfinite(loss.data):
                    raise nx.NumericalError(f"{label}: non-finite loss at epoch {epoch} batch {bi}")
                tape.backward(loss)
            try:
                optimizer.step()
            except nx.NumericalError as exc:
                raise nx.NumericalError(f"{label}: epoch {epoch} batch {bi}: {exc}") from exc
            total += float(loss.data) * idx.size
        history["train_loss"].append(total / n)
        history["lr"].append(optimizer.lr)
        val_loss = val_loss_fn() if val_loss_fn is not None else None
        if val_loss is not None:
            history["val_loss"].append(val_loss)
        if scheduler is not None:
            scheduler.end_epoch(optimizer, val_loss)
    return history


def _take(X, idx):
    if isinstance(X, (list, tuple)):
        return [x[idx] for x in X]
    return X[idx]


def train_task_model(
    X_train: np.ndarray,
    y_train: np.ndarray,
    X_val: np.ndarray | None,
    y_val: np.ndarray | None,
    config: TaskModelConfig,
    train_subjects=None,
    val_subjects=None,
) -> TaskModel:
    """Fit preprocessing and the shallow network; returns final-epoch weights."""
    X_train = np.asarray(X_train, dtype=np.float64)
    y_train = np.asarray(y_train).astype(int)
    if np.unique(y_train).size != 2:
        raise ValueError("training labels must contain both classes")
    if train_subjects is not None and val_subjects is not None:
        check_subject_disjoint(train=train_subjects, val=val_subjects)
    rng = np.random.default_rng(config.seed)
    pipeline = PreprocessPipeline(config.drop_correlated, config.correlation_threshold, config.scaling).fit(X_train)
    Xt = pipeline.transform(X_train)
    yt = y_train
    if config.oversample:
        Xt, yt = oversample_minority(Xt, yt, config.oversample, rng)
    net = ShallowNet(pipeline.output_dim, config.hidden_layers, config.hidden_width, config.dropout, rng)
    optimizer = nx.OptimizerState(net.params, config.optimizer, lr=config.learning_rate, momentum=config.momentum)
    scheduler = make_scheduler(config.scheduler, config.step_size, config.patience, config.gamma)

    val_loss_fn = None
    if X_val is not None and y_val is not None and len(y_val):
        Xv = pipeline.transform(X_val)
        yv = np.asarray(y_val).astype(int)

        def val_loss_fn():
            return nx.bce_value(net.forward(Xv).data, yv)

    history = train_network(
        net, net.params, lambda xb, r: net.forward(xb, r, mc=True), Xt, yt,
        batch_size=config.batch_size, epochs=config.epochs, optimizer=optimizer, scheduler=scheduler,
        rng=rng, smoothing=config.label_smoothing, val_loss_fn=val_loss_fn, label=f"task model {config.task}",
    )
    return TaskModel(config, pipeline, net, history)
