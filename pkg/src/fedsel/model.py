"""Single softmax layer on top of frozen backbone features.

The functional API (``init_model``, ``flatten``, ``predict_proba`` ...) is what
the federated loop uses; :class:`SoftmaxRegression` wraps the same math in a
scikit-learn estimator so the head can be fit centrally or dropped into a
``Pipeline``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .exceptions import ConfigError, NumericError, ShapeError, UsageError

INIT_SCHEMES = ("zeros", "uniform_scaled")


@dataclass(frozen=True, eq=False)
class LinearSoftmaxModel:
    """Weights of shape (num_classes, feature_dim) plus one bias per class."""

    weights: np.ndarray
    biases: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.biases, dtype=np.float64)
        if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
            raise ShapeError(f"inconsistent model shapes: weights {w.shape}, biases {b.shape}")
        if not (np.isfinite(w).all() and np.isfinite(b).all()):
            raise NumericError("model parameters must be finite")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "biases", b)

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[1]

    def __eq__(self, other):
        if not isinstance(other, LinearSoftmaxModel):
            return NotImplemented
        return np.array_equal(self.weights, other.weights) and np.array_equal(
            self.biases, other.biases
        )


def weight_vector_length(num_classes: int, feature_dim: int) -> int:
    return num_classes * (feature_dim + 1)


def init_model(
    num_classes: int, feature_dim: int, seed: int = 0, scheme: str = "zeros"
) -> LinearSoftmaxModel:
    if num_classes < 2 or feature_dim < 1:
        raise ConfigError(
            f"need num_classes >= 2 and feature_dim >= 1, got {num_classes}, {feature_dim}"
        )
    if scheme == "zeros":
        return LinearSoftmaxModel(
            np.zeros((num_classes, feature_dim)), np.zeros(num_classes)
        )
    if scheme == "uniform_scaled":
        bound = 1.0 / np.sqrt(feature_dim)
        rng = np.random.default_rng(seed)
        params = rng.uniform(-bound, bound, size=num_classes * (feature_dim + 1))
        return unflatten(params, num_classes, feature_dim)
    raise ConfigError(f"unknown init scheme {scheme!r}; expected one of {INIT_SCHEMES}")


def flatten(model: LinearSoftmaxModel) -> np.ndarray:
    """Row-major weights followed by biases."""
    return np.concatenate([model.weights.ravel(), model.biases])


def unflatten(vector, num_classes: int, feature_dim: int) -> LinearSoftmaxModel:
    v = np.asarray(vector, dtype=np.float64)
    expected = weight_vector_length(num_classes, feature_dim)
    if v.ndim != 1 or v.shape[0] != expected:
        raise ShapeError(f"weight vector has length {v.size}, expected {expected}")
    split = num_classes * feature_dim
    return LinearSoftmaxModel(
        v[:split].reshape(num_classes, feature_dim).copy(), v[split:].copy()
    )


def _features(model: LinearSoftmaxModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    X2 = X.reshape(1, -1) if single else X
    if X2.ndim != 2 or X2.shape[1] != model.feature_dim:
        raise ShapeError(
            f"features have shape {X.shape}, model expects feature_dim={model.feature_dim}"
        )
    return X2


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return z


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def logits(model: LinearSoftmaxModel, X) -> np.ndarray:
    X2 = _features(model, X)
    return X2 @ model.weights.T + model.biases


def predict_proba(model: LinearSoftmaxModel, X) -> np.ndarray:
    """Class probabilities for one feature vector or a batch of rows."""
    X = np.asarray(X, dtype=np.float64)
    p = softmax(logits(model, X))
    return p[0] if X.ndim == 1 else p


def predict(model: LinearSoftmaxModel, X) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest class index on ties
    return np.argmax(logits(model, X), axis=1)


def _check_labels(model: LinearSoftmaxModel, y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n,):
        raise ShapeError(f"labels have shape {y.shape}, expected ({n},)")
    if n and (y.min() < 0 or y.max() >= model.num_classes):
        raise UsageError(f"labels must lie in [0, {model.num_classes})")
    return y.astype(np.intp, copy=False)


def cross_entropy_loss(model: LinearSoftmaxModel, X, y) -> float:
    """Mean negative log-likelihood of ``y`` under the model."""
    X2 = _features(model, X)
    if X2.shape[0] == 0:
        raise UsageError("cross-entropy of an empty batch is undefined")
    y = _check_labels(model, y, X2.shape[0])
    logp = log_softmax(X2 @ model.weights.T + model.biases)
    return float(-logp[np.arange(len(y)), y].mean())


def loss_and_grad(model: LinearSoftmaxModel, X, y):
    """Return ``(loss, grad_weights, grad_biases)`` of the mean cross-entropy."""
    X2 = _features(model, X)
    if X2.shape[0] == 0:
        raise UsageError("cross-entropy of an empty batch is undefined")
    y = _check_labels(model, y, X2.shape[0])
    loss, gw, gb = _loss_and_grad(model.weights, model.biases, X2, y)
    return loss, gw, gb


def _loss_and_grad(W, b, X, y):
    n = X.shape[0]
    z = X @ W.T + b
    z -= z.max(axis=1, keepdims=True)
    ez = np.exp(z)
    norm = ez.sum(axis=1, keepdims=True)
    rows = np.arange(n)
    loss = float(np.log(norm[:, 0]).sum() - z[rows, y].sum()) / n
    g = ez / norm
    g[rows, y] -= 1.0
    g /= n
    return loss, g.T @ X, g.sum(axis=0)


def accuracy(model: LinearSoftmaxModel, X, y) -> float:
    X2 = _features(model, X)
    if X2.shape[0] == 0:
        raise UsageError("accuracy of an empty dataset is undefined")
    y = _check_labels(model, y, X2.shape[0])
    return float(np.mean(predict(model, X2) == y))


def sgd_epochs(W, b, X, y, learning_rate, epochs, batch_size, rng_for_epoch):
    """Mini-batch SGD on copies of ``W``/``b``.

    ``rng_for_epoch(e)`` returns the generator used to shuffle epoch ``e``.
    Returns the new parameters and the sample-weighted mean loss of the last
    epoch (each batch's loss is taken before its update step).
    """
    W = np.array(W, dtype=np.float64)
    b = np.array(b, dtype=np.float64)
    n = X.shape[0]
    onehot = np.eye(W.shape[0])[y]
    last_loss = float("nan")
    for epoch in range(epochs):
        order = rng_for_epoch(epoch).permutation(n)
        Xs, Ys = X[order], onehot[order]
        total = 0.0
        for start in range(0, n, batch_size):
            xb = Xs[start:start + batch_size]
            yb = Ys[start:start + batch_size]
            m = xb.shape[0]
            z = xb @ W.T
            z += b
            z -= z.max(axis=1, keepdims=True)
            ez = np.exp(z)
            norm = ez.sum(axis=1, keepdims=True)
            # sum of per-sample losses: log(norm) - z[true class]
            total += float(np.log(norm).sum() - np.einsum("ij,ij->", z, yb))
            if learning_rate:
                ez /= norm
                ez -= yb
                ez *= learning_rate / m
                W -= ez.T @ xb
                b -= ez.sum(axis=0)
        last_loss = total / n
    return W, b, last_loss


class SoftmaxRegression(ClassifierMixin, BaseEstimator):
    """Multinomial logistic regression trained by plain mini-batch SGD.

    Parameters
    ----------
    num_classes : int or None
        Number of output rows. ``None`` infers ``max(y) + 1`` at fit time so
        that a client missing some classes still gets the full head.
    learning_rate, epochs, batch_size : SGD hyperparameters.
    init : {"zeros", "uniform_scaled"}
    random_state : int
        Seeds both the initialisation and the per-epoch shuffles.
    warm_start : bool
        Continue from the current ``coef_``/``intercept_`` instead of
        re-initialising.

    Attributes
    ----------
    coef_ : ndarray of shape (num_classes, n_features)
    intercept_ : ndarray of shape (num_classes,)
    classes_ : ndarray
    loss_ : float
        Mean training loss of the final epoch.
    """

    def __init__(
        self,
        num_classes=None,
        learning_rate=0.001,
        epochs=5,
        batch_size=32,
        init="zeros",
        random_state=0,
        warm_start=False,
    ):
        self.num_classes = num_classes
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.init = init
        self.random_state = random_state
        self.warm_start = warm_start

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        y = y.astype(np.intp)
        if self.learning_rate < 0 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("learning_rate >= 0, epochs >= 1 and batch_size >= 1 required")
        k = self.num_classes if self.num_classes is not None else max(int(y.max()) + 1, 2)
        if self.warm_start and hasattr(self, "coef_"):
            model = LinearSoftmaxModel(self.coef_, self.intercept_)
        else:
            model = init_model(k, X.shape[1], seed=self.random_state, scheme=self.init)
        _check_labels(model, y, X.shape[0])
        seed = self.random_state

        def rng_for_epoch(e):
            return np.random.default_rng([seed, e])

        W, b, loss = sgd_epochs(
            model.weights, model.biases, X, y,
            self.learning_rate, self.epochs, self.batch_size, rng_for_epoch,
        )
        if not np.isfinite(loss):
            raise NumericError("training diverged (non-finite loss)")
        self.coef_, self.intercept_, self.loss_ = W, b, loss
        self.classes_ = np.arange(k)
        self.n_features_in_ = X.shape[1]
        return self

    def _model(self) -> LinearSoftmaxModel:
        check_is_fitted(self, "coef_")
        return LinearSoftmaxModel(self.coef_, self.intercept_)

    def predict_proba(self, X):
        X = check_array(X, dtype=np.float64)
        return predict_proba(self._model(), X)

    def predict(self, X):
        X = check_array(X, dtype=np.float64)
        return predict(self._model(), X)

    def to_model(self) -> LinearSoftmaxModel:
        return self._model()
