"""L2-regularised logistic regression baseline (full-batch gradient descent)."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import expit


@dataclass
class LogisticParams:
    epochs: int = 500
    learning_rate: float = 0.1
    l2: float = 1e-4

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LogisticModel:
    weights: np.ndarray
    bias: float
    classes: tuple[str, str] = ("0", "1")

    def predict_logit(self, X) -> np.ndarray:
        return np.sum(np.atleast_2d(np.asarray(X, dtype=np.float64)) * self.weights, axis=1) + self.bias

    def predict_proba(self, X) -> np.ndarray:
        return expit(self.predict_logit(X))

    def predict(self, X) -> np.ndarray:
        return np.where(self.predict_logit(X) >= 0.0, self.classes[1], self.classes[0])


def train_logistic(X, y, params: LogisticParams | None = None, classes=("0", "1")) -> LogisticModel:
    """``y`` is 0/1; minimises mean log-loss + ``l2/2 * ||w||^2``."""
    params = params or LogisticParams()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w = np.zeros(X.shape[1])
    b = 0.0
    n = X.shape[0]
    for _ in range(params.epochs):
        p = expit(X @ w + b)
        r = p - y
        w -= params.learning_rate * (X.T @ r / n + params.l2 * w)
        b -= params.learning_rate * float(np.mean(r))
    return LogisticModel(w, b, tuple(classes))
