"""
Model math: flat float64 weights, FedAvg and least-squares training.

The model is linear, y ~ X @ w, trained by full-batch gradient descent on
L(w) = 1/(2n) * ||X w - y||^2, whose gradient is 1/n * X^T (X w - y).
"""
import struct
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from ..exceptions import DivergenceDetected, EmptyUpdateSet, ShapeMismatch

_MAGIC = b"FW"
_NDIM = struct.Struct("<H")
_DIM = struct.Struct("<Q")


@dataclass(frozen=True, eq=False)
class ModelWeights:
    values: np.ndarray
    dims: Tuple[int, ...]

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64, copy=True).reshape(-1)
        dims = tuple(int(d) for d in self.dims)
        if int(np.prod(dims, dtype=np.int64)) != values.size:
            raise ShapeMismatch(f"{values.size} values do not fit dims {dims}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "dims", dims)

    @classmethod
    def zeros(cls, dims) -> "ModelWeights":
        dims = (dims,) if isinstance(dims, int) else tuple(dims)
        return cls(np.zeros(int(np.prod(dims, dtype=np.int64))), dims)

    @classmethod
    def of(cls, values: Sequence[float]) -> "ModelWeights":
        array = np.asarray(values, dtype=np.float64).reshape(-1)
        return cls(array, (array.size,))

    @property
    def size(self) -> int:
        return self.values.size

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))

    def to_bytes(self) -> bytes:
        head = _MAGIC + _NDIM.pack(len(self.dims)) + b"".join(_DIM.pack(d) for d in self.dims)
        return head + self.values.astype("<f8", copy=False).tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "ModelWeights":
        if data[:2] != _MAGIC:
            raise ShapeMismatch("payload is not a serialized weight vector")
        (ndim,) = _NDIM.unpack_from(data, 2)
        offset = 2 + _NDIM.size
        dims = []
        for _ in range(ndim):
            dims.append(_DIM.unpack_from(data, offset)[0])
            offset += _DIM.size
        values = np.frombuffer(data, dtype="<f8", offset=offset).astype(np.float64)
        return cls(values, tuple(dims))

    def bit_equal(self, other: "ModelWeights") -> bool:
        return self.dims == other.dims and self.values.tobytes() == other.values.tobytes()

    def __eq__(self, other):
        return isinstance(other, ModelWeights) and self.bit_equal(other)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class ModelUpdate:
    weights: ModelWeights
    sample_count: int
    round: int = 0
    sender: str = ""
    loss: float = float("nan")
    accuracy: float = float("nan")


def fedavg_aggregate(updates: List[ModelUpdate]) -> ModelWeights:
    """Sample-count weighted mean; uniform when every count is zero"""
    if not updates:
        raise EmptyUpdateSet("no updates to aggregate")
    dims = updates[0].weights.dims
    for u in updates[1:]:
        if u.weights.dims != dims:
            raise ShapeMismatch(f"{u.sender or 'update'} has dims {u.weights.dims}, expected {dims}")

    stacked = np.stack([u.weights.values for u in updates])
    counts = np.asarray([u.sample_count for u in updates], dtype=np.float64)
    if counts.sum() <= 0:
        return ModelWeights(stacked.mean(axis=0), dims)
    return ModelWeights(np.average(stacked, axis=0, weights=counts), dims)


def weighted_mean(values: Sequence[float], counts: Sequence[float]) -> float:
    pairs = [(v, c) for v, c in zip(values, counts) if np.isfinite(v) and c > 0]
    if not pairs:
        return float("nan")
    total = sum(c for _, c in pairs)
    return float(sum(v * c for v, c in pairs) / total)


def least_squares_loss(w: np.ndarray, features: np.ndarray, labels: np.ndarray) -> float:
    residual = features @ w - labels
    return float(residual @ residual) / (2.0 * len(labels))


def least_squares_gradient(w: np.ndarray, features: np.ndarray, labels: np.ndarray) -> np.ndarray:
    return features.T @ (features @ w - labels) / len(labels)


def r2_accuracy(w: np.ndarray, features: np.ndarray, labels: np.ndarray) -> float:
    """Coefficient of determination clipped to [0, 1]"""
    residual = features @ w - labels
    centered = labels - labels.mean()
    total = float(centered @ centered)
    if total == 0.0:
        return 1.0 if float(residual @ residual) == 0.0 else 0.0
    return float(np.clip(1.0 - float(residual @ residual) / total, 0.0, 1.0))


def local_train(weights: ModelWeights, dataset, epochs: int, lr: float,
                round_: int = 0, sender: str = "") -> ModelUpdate:
    """Full-batch gradient descent; one step per epoch"""
    if not weights.is_finite():
        raise DivergenceDetected("received non-finite weights")
    features, labels = dataset.features, dataset.labels
    w = weights.values.copy()
    for _ in range(int(epochs)):
        w = w - lr * least_squares_gradient(w, features, labels)
        if not np.all(np.isfinite(w)):
            raise DivergenceDetected(f"weights diverged with lr={lr}")
    loss = least_squares_loss(w, features, labels)
    if not np.isfinite(loss):
        raise DivergenceDetected(f"non-finite loss with lr={lr}")
    return ModelUpdate(ModelWeights(w, weights.dims), len(labels), round_, sender, loss,
                       r2_accuracy(w, features, labels))
