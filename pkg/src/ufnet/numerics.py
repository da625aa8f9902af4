"""Small reverse-mode gradient kernel over numpy arrays.

Only the layers the models in this package need are supported: linear,
ReLU, sigmoid, dropout, layer normalization, softmax, batched matmul for
attention, concatenation and binary cross-entropy. Operations executed
inside a :func:`recording` block are appended to a :class:`Tape`;
``Tape.backward`` walks that list in exact reverse order.

Outside a recording block the same functions run as plain numpy code, which
is what inference (MC rounds in particular) uses.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

LAYER_NORM_EPS = 1e-5
PROB_CLAMP = 1e-7


class ShapeError(ValueError):
    """Operand shapes do not agree."""


class ConfigError(ValueError):
    """Invalid hyper-parameter or layer setting."""


class NumericalError(FloatingPointError):
    """A loss or gradient went non-finite."""


class Tensor:
    """A float64 array that may carry a gradient."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.data.shape}, requires_grad={self.requires_grad})"


def parameter(data, name: str = "") -> Tensor:
    t = Tensor(np.array(data, dtype=np.float64, copy=True), requires_grad=True, name=name)
    t.zero_grad()
    return t


class Tape:
    """Ordered record of executed primitives and their backward closures."""

    def __init__(self) -> None:
        self.nodes: list[tuple[str, Tensor, Callable[[np.ndarray], None]]] = []

    def record(self, op: str, out: Tensor, backward: Callable[[np.ndarray], None]) -> None:
        self.nodes.append((op, out, backward))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for _, out, fn in reversed(self.nodes):
            if out.grad is not None:
                fn(out.grad)

    def __len__(self) -> int:
        return len(self.nodes)


_TAPES: list[Tape] = []


@contextlib.contextmanager
def recording() -> Iterator[Tape]:
    """Record differentiable operations executed inside the block."""
    tape = Tape()
    _TAPES.append(tape)
    try:
        yield tape
    finally:
        _TAPES.pop()


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracking(*inputs: Tensor) -> Tape | None:
    if not _TAPES:
        return None
    if any(t.requires_grad for t in inputs):
        return _TAPES[-1]
    return None


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        # safe without a copy: gradients are only ever rebound, never updated in place
        t.grad = np.asarray(g, dtype=np.float64)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _result(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    tape = _tracking(*inputs)
    out = Tensor(data, requires_grad=tape is not None)
    if tape is not None:
        tape.record(op, out, backward)
    return out


# -- primitives -------------------------------------------------------------


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if b.ndim == 2 and a.ndim > 2:
        return (a.reshape(-1, a.shape[-1]) @ b).reshape(a.shape[:-1] + (b.shape[-1],))
    return a @ b


def matmul(a, b) -> Tensor:
    """Batched matrix product ``a @ b`` with numpy broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    data = _mm(a.data, b.data)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            if a.data.ndim == 2 and b.data.ndim > 2:
                ga = np.einsum("...mn,...kn->mk", g, b.data)
            else:
                ga = _unbroadcast(_mm(g, np.swapaxes(b.data, -1, -2)), a.shape)
            _accumulate(a, ga)
        if b.requires_grad:
            if b.data.ndim == 2 and a.data.ndim > 2:
                # shared weight: flatten the batch axes into rows
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
            _accumulate(b, gb)

    return _result("matmul", data, (a, b), backward)


def linear(x, weight, bias) -> Tensor:
    """``x @ weight + bias`` where bias broadcasts over every leading axis.

    Args:
        x: Input of shape ``(..., p)``.
        weight: ``(p, q)`` weight matrix.
        bias: ``(q,)`` bias vector.
    """
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if weight.data.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear shape mismatch: input {x.shape}, weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear bias shape {bias.shape} does not match weight {weight.shape}")
    data = _mm(x.data, weight.data) + bias.data

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            _accumulate(x, _mm(g, weight.data.T))
        if weight.requires_grad:
            flat_x = x.data.reshape(-1, x.shape[-1])
            _accumulate(weight, flat_x.T @ g.reshape(-1, g.shape[-1]))
        if bias.requires_grad:
            _accumulate(bias, g.reshape(-1, g.shape[-1]).sum(axis=0))

    return _result("linear", data, (x, weight, bias), backward)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}") from exc

    def backward(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result("add", data, (a, b), backward)


def scale(x, factor: float) -> Tensor:
    x = _as_tensor(x)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g * factor)

    return _result("scale", x.data * factor, (x,), backward)


def transpose(x) -> Tensor:
    """Swap the last two axes."""
    x = _as_tensor(x)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, np.swapaxes(g, -1, -2))

    return _result("transpose", np.swapaxes(x.data, -1, -2), (x,), backward)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g * mask)

    return _result("relu", np.maximum(x.data, 0.0), (x,), backward)


def stable_sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    s = stable_sigmoid(x.data)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g * s * (1.0 - s))

    return _result("sigmoid", s, (x,), backward)


def dropout_mask(shape: tuple[int, ...], p: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout multiplier: 0 with probability ``p``, else ``1/(1-p)``."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return np.ones(shape)
    # 32-bit uniforms are ample resolution for a keep/drop decision and twice as cheap
    keep = rng.random(shape, dtype=np.float32) >= p
    return keep / (1.0 - p)


def dropout(x, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; ``training`` also means MC mode at inference.

    With ``training=False`` or ``p == 0`` the input is returned unchanged and
    no random numbers are drawn.
    """
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    x = _as_tensor(x)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in training/MC mode needs a random generator")
    mask = dropout_mask(x.shape, p, rng)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g * mask)

    return _result("dropout", x.data * mask, (x,), backward)


def layer_norm(x, gain, shift, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit (population) variance."""
    x, gain, shift = _as_tensor(x), _as_tensor(gain), _as_tensor(shift)
    d = x.shape[-1]
    if gain.shape != (d,) or shift.shape != (d,):
        raise ShapeError(f"layer_norm params {gain.shape}/{shift.shape} vs features {d}")
    mean = x.data.mean(axis=-1, keepdims=True)
    centred = x.data - mean
    var = (centred**2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centred * inv_std
    data = xhat * gain.data + shift.data

    def backward(g: np.ndarray) -> None:
        if gain.requires_grad:
            _accumulate(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if shift.requires_grad:
            _accumulate(shift, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            gx = inv_std * (
                gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
            )
            _accumulate(x, gx)

    return _result("layer_norm", data, (x, gain, shift), backward)


def softmax(x) -> Tensor:
    """Softmax over the last axis, shifted by the row max."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, s * (g - (g * s).sum(axis=-1, keepdims=True)))

    return _result("softmax", s, (x,), backward)


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def backward(g: np.ndarray) -> None:
        for p, piece in zip(parts, np.split(g, sizes, axis=axis)):
            _accumulate(p, piece)

    return _result("concat", data, parts, backward)


def stack(parts: Sequence, axis: int = 1) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    data = np.stack([p.data for p in parts], axis=axis)

    def backward(g: np.ndarray) -> None:
        for i, p in enumerate(parts):
            _accumulate(p, np.take(g, i, axis=axis))

    return _result("stack", data, parts, backward)


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    original = x.shape

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g.reshape(original))

    return _result("reshape", x.data.reshape(shape), (x,), backward)


def smooth_labels(labels: np.ndarray, smoothing: float) -> np.ndarray:
    y = np.asarray(labels, dtype=np.float64)
    return y * (1.0 - smoothing) + (1.0 - y) * smoothing


def bce_loss(probs, labels, smoothing: float = 0.0) -> Tensor:
    """Mean binary cross-entropy with optional label smoothing.

    Probabilities are clamped to ``[1e-7, 1 - 1e-7]`` before the log.
    """
    probs = _as_tensor(probs)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if y.size == 0:
        raise ShapeError("bce_loss on an empty batch")
    if not 0.0 <= smoothing < 0.5:
        raise ConfigError(f"label smoothing must be in [0, 0.5), got {smoothing}")
    p = probs.data.reshape(-1)
    if p.size != y.size:
        raise ShapeError(f"bce_loss: {p.size} probabilities vs {y.size} labels")
    target = smooth_labels(y, smoothing)
    pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    loss = -np.mean(target * np.log(pc) + (1.0 - target) * np.log(1.0 - pc))

    def backward(g: np.ndarray) -> None:
        grad = (pc - target) / (pc * (1.0 - pc)) / y.size
        _accumulate(probs, (g * grad).reshape(probs.shape))

    return _result("bce", np.asarray(loss), (probs,), backward)


def bce_value(probs: np.ndarray, labels: np.ndarray, smoothing: float = 0.0) -> float:
    return float(bce_loss(Tensor(probs), labels, smoothing).data)


def glorot_uniform(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


# -- optimizers ---------------------------------------------------------------


def _check_finite(params: Sequence[Tensor]) -> None:
    for i, p in enumerate(params):
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            bad = int(np.size(p.grad) - np.isfinite(p.grad).sum())
            raise NumericalError(
                f"non-finite gradient in parameter {i} {p.name!r} shape {p.shape} ({bad} entries)"
            )


@dataclass
class OptimizerState:
    """SGD-with-momentum or AdamW state for a fixed parameter list.

    ``momentum`` is used by SGD only; ``betas``/``eps``/``weight_decay`` by
    AdamW only. Moment buffers are created zeroed on construction.
    """

    params: list[Tensor]
    kind: str = "sgd"
    lr: float = 0.01
    momentum: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    step_count: int = 0
    buffers: list[np.ndarray] = field(default_factory=list)
    second: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.kind = self.kind.lower()
        if self.kind not in ("sgd", "adamw"):
            raise ConfigError(f"unknown optimizer {self.kind!r}; expected 'sgd' or 'adamw'")
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        self.buffers = [np.zeros_like(p.data) for p in self.params]
        if self.kind == "adamw":
            self.second = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        _check_finite(self.params)
        self.step_count += 1
        if self.kind == "sgd":
            for p, v in zip(self.params, self.buffers):
                if self.step_count == 1:
                    v[...] = p.grad
                else:
                    v *= self.momentum
                    v += p.grad
                p.data -= self.lr * v
            return
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for p, m, s in zip(self.params, self.buffers, self.second):
            p.data *= 1.0 - self.lr * self.weight_decay
            m *= b1
            m += (1.0 - b1) * p.grad
            s *= b2
            s += (1.0 - b2) * p.grad**2
            p.data -= self.lr * (m / c1) / (np.sqrt(s / c2) + self.eps)


def optimizer_step(params: Sequence[Tensor], state: OptimizerState) -> None:
    """Apply one update using the gradients currently stored on ``params``."""
    if [id(p) for p in params] != [id(p) for p in state.params]:
        raise ConfigError("optimizer state was built for a different parameter list")
    state.step()


@dataclass
class SchedulerState:
    """Step or reduce-on-plateau learning-rate schedule.

    Plateau mode watches a validation loss: an epoch counts as an
    improvement only when the loss drops below ``best - min_delta``; the
    rate is multiplied by ``gamma`` once more than ``patience`` epochs pass
    without one.
    """

    kind: str
    step_size: int = 10
    patience: int = 10
    gamma: float = 0.1
    min_delta: float = 1e-6
    best: float = math.inf
    bad_epochs: int = 0
    epoch: int = 0

    def __post_init__(self) -> None:
        self.kind = self.kind.lower().replace("-", "_").replace(" ", "_")
        if self.kind == "reduce_on_plateau":
            self.kind = "plateau"
        if self.kind not in ("step", "plateau"):
            raise ConfigError(f"unknown scheduler {self.kind!r}; expected 'step' or 'plateau'")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError(f"scheduler gamma must be in (0, 1], got {self.gamma}")
        if self.step_size < 1 or self.patience < 0:
            raise ConfigError("scheduler step size must be >= 1 and patience >= 0")

    def end_epoch(self, optimizer: OptimizerState, val_loss: float | None = None) -> None:
        self.epoch += 1
        if self.kind == "step":
            if self.epoch % self.step_size == 0:
                optimizer.lr *= self.gamma
            return
        if val_loss is None:
            raise ConfigError("plateau scheduler needs a validation loss each epoch")
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs > self.patience:
                optimizer.lr *= self.gamma
                self.bad_epochs = 0


# -- gradient checking -------------------------------------------------------


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Compare tape gradients with central differences.

    Args:
        f: Zero-argument closure that builds the graph from ``params`` and
            returns a scalar tensor. It must be deterministic (reseed any
            dropout generator inside it).
        params: Tensors with ``requires_grad=True`` to perturb.
        h: Finite-difference step.

    Returns:
        Max over all coordinates of ``|analytic - numeric| / max(1, |analytic|)``.
    """
    for p in params:
        p.grad = None
    with recording() as tape:
        out = f()
        tape.backward(out)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f().data.item()
            flat[i] = orig - h
            down = f().data.item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            ai = a.reshape(-1)[i]
            worst = max(worst, abs(ai - numeric) / max(1.0, abs(ai)))
    return worst
