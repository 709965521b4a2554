"""Local models, Adam, merging and evaluation for a single node."""
import logging
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from src.data import Split
from src.errors import ConfigurationError, DataParseError, DomainError, NumericalError

logger = logging.getLogger(__name__)


class ModelKind(str, Enum):
    LOGISTIC = "logistic"
    MLP1 = "mlp1"


def param_count(kind: ModelKind, d_in: int, hidden: int, classes: int) -> int:
    if kind is ModelKind.LOGISTIC:
        return d_in * classes + classes
    return d_in * hidden + hidden + hidden * classes + classes


@dataclass
class ModelParams:
    """Flat parameter vector plus the shape needed to read it."""

    kind: ModelKind
    d_in: int
    hidden: int
    classes: int
    theta: np.ndarray

    def __post_init__(self):
        expected = param_count(self.kind, self.d_in, self.hidden, self.classes)
        if self.theta.shape != (expected,):
            raise DomainError(f"{self.kind.value} model needs {expected} parameters, got {self.theta.shape}")

    @classmethod
    def initial(
        cls,
        kind: ModelKind,
        d_in: int,
        classes: int,
        rng: np.random.Generator,
        hidden: int = 32,
    ) -> "ModelParams":
        """Seeded starting point shared by all nodes of an experiment."""
        if kind is ModelKind.LOGISTIC:
            w = 0.01 * rng.standard_normal(d_in * classes)
            return cls(kind, d_in, 0, classes, np.concatenate([w, np.zeros(classes)]))
        w1 = rng.standard_normal(d_in * hidden) * np.sqrt(2.0 / d_in)
        w2 = rng.standard_normal(hidden * classes) * np.sqrt(2.0 / hidden)
        theta = np.concatenate([w1, np.zeros(hidden), w2, np.zeros(classes)])
        return cls(kind, d_in, hidden, classes, theta)

    def with_theta(self, theta: np.ndarray) -> "ModelParams":
        return ModelParams(self.kind, self.d_in, self.hidden, self.classes, np.asarray(theta, dtype=np.float64))

    def copy(self) -> "ModelParams":
        return self.with_theta(self.theta.copy())

    def unpack(self) -> list[np.ndarray]:
        """Views into theta: [W, b] or [W1, b1, W2, b2]."""
        if self.kind is ModelKind.LOGISTIC:
            shapes = [(self.d_in, self.classes), (self.classes,)]
        else:
            shapes = [(self.d_in, self.hidden), (self.hidden,), (self.hidden, self.classes), (self.classes,)]
        views, offset = [], 0
        for shape in shapes:
            size = int(np.prod(shape))
            views.append(self.theta[offset:offset + size].reshape(shape))
            offset += size
        return views


def _softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean loss and d(loss)/d(logits)."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    n = labels.size
    loss = float(np.mean(log_norm - shifted[np.arange(n), labels]))
    probs = np.exp(shifted - log_norm[:, None])
    probs[np.arange(n), labels] -= 1.0
    return loss, probs / n


def _logits(model: ModelParams, features: np.ndarray) -> np.ndarray:
    if model.kind is ModelKind.LOGISTIC:
        w, b = model.unpack()
        return features @ w + b
    w1, b1, w2, b2 = model.unpack()
    return np.maximum(features @ w1 + b1, 0.0) @ w2 + b2


def loss_and_grad(model: ModelParams, features: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient with respect to theta."""
    if labels.size == 0:
        raise DomainError("empty batch")
    if labels.min() < 0 or labels.max() >= model.classes:
        raise DomainError(f"labels outside [0, {model.classes})")

    if model.kind is ModelKind.LOGISTIC:
        w, b = model.unpack()
        logits = features @ w + b
        if not np.all(np.isfinite(logits)):
            raise NumericalError("non-finite logits", {"kind": model.kind.value})
        loss, d_logits = _softmax_cross_entropy(logits, labels)
        grad = np.concatenate([(features.T @ d_logits).ravel(), d_logits.sum(axis=0)])
    else:
        w1, b1, w2, b2 = model.unpack()
        pre = features @ w1 + b1
        hidden = np.maximum(pre, 0.0)
        logits = hidden @ w2 + b2
        if not np.all(np.isfinite(logits)):
            raise NumericalError("non-finite activations", {"kind": model.kind.value})
        loss, d_logits = _softmax_cross_entropy(logits, labels)
        d_hidden = (d_logits @ w2.T) * (pre > 0)
        grad = np.concatenate([
            (features.T @ d_hidden).ravel(),
            d_hidden.sum(axis=0),
            (hidden.T @ d_logits).ravel(),
            d_logits.sum(axis=0),
        ])
    return loss, grad


@dataclass
class AdamState:
    lr: float
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, dim: int, lr: float) -> "AdamState":
        return cls(lr=lr, m=np.zeros(dim), v=np.zeros(dim))


def adam_step(state: AdamState, model: ModelParams, grad: np.ndarray) -> ModelParams:
    if grad.shape != model.theta.shape or state.m.shape != grad.shape:
        raise DomainError(f"gradient shape {grad.shape} does not match model {model.theta.shape}")
    state.step += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    m_hat = state.m / (1 - state.beta1 ** state.step)
    v_hat = state.v / (1 - state.beta2 ** state.step)
    return model.with_theta(model.theta - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))


def local_train(
    model: ModelParams,
    data: Split,
    epochs: int,
    batch_size: int,
    opt: AdamState,
    rng: np.random.Generator,
) -> tuple[ModelParams, float]:
    """
    Run full shuffled passes over the training split.

    Returns:
        (trained model, mean mini-batch loss of the last epoch)
    """
    if len(data) == 0:
        raise ConfigurationError("empty training split")
    if epochs < 1:
        raise DomainError(f"epochs must be >= 1, got {epochs}")
    n = len(data)
    epoch_loss = 0.0
    for _ in range(epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            loss, grad = loss_and_grad(model, data.features[idx], data.labels[idx])
            model = adam_step(opt, model, grad)
            losses.append(loss)
        epoch_loss = float(np.mean(losses))
    return model, epoch_loss


def merge(local: ModelParams, aggregate: np.ndarray, group_size: int, weight: float | None = None) -> ModelParams:
    """
    Mix the local model with the group aggregate.

    The default weight M/(M+1) on the aggregate averages the M group models
    and the local model uniformly.
    """
    aggregate = np.asarray(aggregate, dtype=np.float64)
    if aggregate.shape != local.theta.shape:
        raise DomainError(f"aggregate shape {aggregate.shape} does not match model {local.theta.shape}")
    if group_size < 1:
        raise DomainError(f"group size must be positive, got {group_size}")
    lam = group_size / (group_size + 1) if weight is None else weight
    return local.with_theta((1.0 - lam) * local.theta + lam * aggregate)


def predict(model: ModelParams, features: np.ndarray) -> np.ndarray:
    # argmax returns the lowest class on ties
    return np.argmax(_logits(model, features), axis=1)


def evaluate(model: ModelParams, data: Split) -> tuple[float, float]:
    """(accuracy, mean cross-entropy) on a split."""
    if len(data) == 0:
        raise DomainError("cannot evaluate on an empty split")
    logits = _logits(model, data.features)
    loss, _ = _softmax_cross_entropy(logits, data.labels)
    accuracy = float(np.mean(np.argmax(logits, axis=1) == data.labels))
    return accuracy, loss


@dataclass
class BestCheckpoint:
    """Early stopping: keeps the parameters with the lowest validation loss (earliest on ties)."""

    model: ModelParams | None = None
    val_loss: float = np.inf
    round: int = -1
    history: list[float] = field(default_factory=list)

    def offer(self, model: ModelParams, val_loss: float, round: int) -> bool:
        self.history.append(val_loss)
        if val_loss < self.val_loss:
            self.model, self.val_loss, self.round = model.copy(), val_loss, round
            return True
        return False


_MAGIC = b"PPDL"
_HEADER = struct.Struct("<4sBIIII")
_KIND_CODES = {ModelKind.LOGISTIC: 0, ModelKind.MLP1: 1}


def save_checkpoint(path: Path, model: ModelParams, round: int) -> None:
    """Little-endian header (magic, kind, d_in, hidden, classes, round) then float64 theta."""
    header = _HEADER.pack(_MAGIC, _KIND_CODES[model.kind], model.d_in, model.hidden, model.classes, round)
    Path(path).write_bytes(header + model.theta.astype("<f8").tobytes())


def load_checkpoint(path: Path) -> tuple[ModelParams, int]:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise DataParseError(f"{path} is too short for a checkpoint header")
    magic, code, d_in, hidden, classes, round = _HEADER.unpack_from(blob)
    if magic != _MAGIC:
        raise DataParseError(f"{path} is not a checkpoint (magic {magic!r})")
    kind = {v: k for k, v in _KIND_CODES.items()}[code]
    theta = np.frombuffer(blob, dtype="<f8", offset=_HEADER.size).astype(np.float64)
    return ModelParams(kind, d_in, hidden, classes, theta), round
