"""Split classifier f = d o e with a movable split point.

``SplitModel`` is the frozen numerical object used by the pipeline;
``SplitClassifier`` wraps pretraining in a scikit-learn estimator so the
backbone can be fitted, scored and used as a feature transformer (the
transform output is the intermediate representation at ``split``).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .errors import ConfigError, ShapeError, TrainingError
from .mathcore import DenseParams, RAdam, backward, cross_entropy, glorot_params, mlp_forward, Var

__all__ = ["DEFAULT_WIDTHS", "SplitModel", "pretrain", "SplitClassifier"]

log = logging.getLogger(__name__)

DEFAULT_WIDTHS = (1024, 512, 256, 128, 64)


@dataclass
class SplitModel:
    params: DenseParams
    n_classes: int
    seed: int = 0
    frozen: bool = False

    @classmethod
    def build(cls, widths=DEFAULT_WIDTHS, n_classes: int = 10, seed: int = 0) -> "SplitModel":
        rng = np.random.default_rng([seed, 0xB0])
        return cls(glorot_params(list(widths) + [n_classes], rng), n_classes, seed)

    @property
    def n_layers(self) -> int:
        return self.params.n_layers

    @property
    def dims(self) -> list[int]:
        """Feature dimension at every split point 0..L."""
        return self.params.sizes

    def dim(self, s: int) -> int:
        self._check_split(s)
        return self.dims[s]

    def _check_split(self, s: int) -> None:
        if not (isinstance(s, (int, np.integer)) and 0 <= s <= self.n_layers):
            raise ConfigError(f"split index must be in 0..{self.n_layers}, got {s!r}")

    def encode(self, x, s: int):
        self._check_split(s)
        return mlp_forward(self.params, x, 0, s)

    def decode(self, feature, s: int):
        """Layers after the split.  Accepts tracked Vars; gradients reach the
        input but the backbone parameters are plain constants."""
        self._check_split(s)
        width = feature.shape[-1] if hasattr(feature, "shape") else np.shape(feature)[-1]
        if width != self.dims[s]:
            raise ShapeError(f"feature dim {width} != dim({s}) = {self.dims[s]}")
        return mlp_forward(self.params, feature, s, None)

    def forward(self, x):
        return mlp_forward(self.params, x)

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.forward(x), axis=-1)

    def accuracy(self, X, y) -> float:
        return float(np.mean(self.predict(X) == y))

    def freeze(self) -> "SplitModel":
        for a in self.params.named_arrays().values():
            a.flags.writeable = False
        self.frozen = True
        return self

    def named_arrays(self) -> dict[str, np.ndarray]:
        return self.params.named_arrays()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.named_arrays().items()}


def pretrain(model: SplitModel, X, y, epochs: int = 20, lr: float = 1e-3,
             batch_size: int = 128, seed: int = 0, X_val=None, y_val=None,
             floor: float | None = None) -> SplitModel:
    """Fit the full stack on clean data with RAdam, then freeze it.

    Raises TrainingError when ``floor`` is given and held-out accuracy stays
    below it.
    """
    if model.frozen:
        raise TrainingError("model is frozen")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    rng = np.random.default_rng([seed, 0xB1])
    arrays = model.named_arrays()
    opt = RAdam(lr=lr)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(y))
        total = 0.0
        for a in range(0, len(y), batch_size):
            idx = order[a:a + batch_size]
            leaves = {k: Var(v, requires_grad=True, name=k) for k, v in arrays.items()}
            logits = mlp_forward(model.params.with_arrays(leaves), X[idx])
            loss = cross_entropy(logits, y[idx])
            if not np.isfinite(loss.value):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            grads = backward(loss, leaves.values())
            opt.step(arrays, {k: grads[v] for k, v in leaves.items()})
            total += float(loss.value) * len(idx)
        history.append(total / len(y))
        log.debug("pretrain epoch %d loss %.4f", epoch, history[-1])
    model.history = history
    if X_val is not None and floor is not None:
        acc = model.accuracy(X_val, y_val)
        if acc < floor:
            raise TrainingError(
                f"held-out accuracy {acc:.4f} below floor {floor:.4f} after {epochs} "
                f"epochs (final train loss {history[-1] if history else float('nan'):.4f})"
            )
    return model.freeze()


class SplitClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Estimator facade over ``SplitModel`` + ``pretrain``.

    ``transform`` returns the encoder output at ``split``.
    """

    def __init__(self, hidden=DEFAULT_WIDTHS[1:], split: int = 2, epochs: int = 20,
                 lr: float = 1e-3, batch_size: int = 128, random_state: int = 0):
        self.hidden = hidden
        self.split = split
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        self.n_features_in_ = X.shape[1]
        widths = (X.shape[1], *self.hidden)
        model = SplitModel.build(widths, len(self.classes_), self.random_state)
        model._check_split(self.split)
        self.model_ = pretrain(model, X, y_idx, epochs=self.epochs, lr=self.lr,
                               batch_size=self.batch_size, seed=self.random_state)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        return self.model_.forward(X)

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        return self.model_.encode(X, self.split)
