"""The target image classifier: training, inference and input gradients."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import InvalidArgumentError, NumericError
from .numerics import (
    AdamState,
    adam_step,
    forward,
    forward_backward,
    init_network,
    logit_input_gradient,
    softmax,
)

logger = logging.getLogger(__name__)

ARCHITECTURES = {
    "desk-cnn": lambda k: [
        ("convolution", 32, "relu"),
        ("max-pool",),
        ("convolution", 64, "relu"),
        ("max-pool",),
        ("fully-connected", 256, "relu"),
        ("fully-connected", k, "none"),
    ],
    # two-layer toy used by fast tests
    "tiny-cnn": lambda k: [
        ("convolution", 8, "relu"),
        ("max-pool",),
        ("fully-connected", k, "none"),
    ],
}


@dataclass
class ClassifierConfig:
    architecture: str = "desk-cnn"
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise InvalidArgumentError(f"unknown architecture {self.architecture!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise InvalidArgumentError("classifier hyperparameters must be positive")

    @classmethod
    def for_dataset(cls, name, **overrides):
        epochs = {"mnist": 10, "cifar10": 30}[name]
        return cls(**{"epochs": epochs, **overrides})


def _softmax_xent_grad(labels):
    def loss_grad(logits):
        p = softmax(logits.astype(np.float64))
        n = len(labels)
        loss = float(-np.log(np.maximum(p[np.arange(n), labels], 1e-12)).mean())
        g = p
        g[np.arange(n), labels] -= 1.0
        return loss, g / n
    return loss_grad


def accuracy(model, data, batch_size=500):
    preds = np.concatenate([
        forward(model, data.images[i:i + batch_size]).argmax(axis=1)
        for i in range(0, len(data), batch_size)
    ])
    return float(np.mean(preds == data.labels))


def train_classifier(train, cfg=None, test=None):
    """Train the target CNN with Adam on softmax cross-entropy.

    The returned model's ``metadata["training_log"]`` holds per-epoch loss and
    the final train (and optional test) accuracy.
    """
    cfg = cfg or ClassifierConfig()
    if len(train) == 0:
        raise InvalidArgumentError("empty training set")
    arch = ARCHITECTURES[cfg.architecture](train.num_classes)
    model = init_network(train.image_shape, arch, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed + 1)
    state = AdamState()
    params = model.parameters()
    epoch_losses = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train))
        total, count = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, _, grads, _ = forward_backward(
                model, train.images[idx], _softmax_xent_grad(train.labels[idx]), need_input_grad=False)
            if not np.isfinite(loss):
                raise NumericError(f"training loss diverged in epoch {epoch}", epoch=epoch)
            adam_step(params, grads, state, cfg.learning_rate)
            total += loss * len(idx)
            count += len(idx)
        epoch_losses.append(total / count)
        logger.info("epoch %d/%d loss %.4f", epoch + 1, cfg.epochs, epoch_losses[-1])
    log = {"config": asdict(cfg), "epoch_loss": epoch_losses, "train_accuracy": accuracy(model, train)}
    if test is not None:
        log["test_accuracy"] = accuracy(model, test)
    model.metadata["training_log"] = log
    return model


def predict(model, image):
    """Class distribution for one image, or a batch of images."""
    return softmax(forward(model, image).astype(np.float64))


def input_gradient(model, image, label):
    """Gradient of the cross-entropy loss with respect to the input pixels."""
    label = np.asarray(label)
    if np.any(label < 0) or np.any(label >= model.num_outputs):
        raise InvalidArgumentError(f"label {label!r} out of range")

    def upstream(logits):
        p = softmax(logits.astype(np.float64))
        p[np.arange(len(p)), label.reshape(-1)] -= 1.0
        return p

    _, dx = logit_input_gradient(model, image, upstream)
    return dx


class CNNClassifier(ClassifierMixin, BaseEstimator):
    """scikit-learn wrapper around :func:`train_classifier`.

    ``X`` is an array of images ``(n, c, h, w)`` with values in [0, 1].
    """

    def __init__(self, architecture="desk-cnn", epochs=30, batch_size=64,
                 learning_rate=1e-3, random_state=0):
        self.architecture = architecture
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.random_state = random_state

    def fit(self, X, y):
        from .dataset import LabeledImageSet

        X = np.asarray(X, dtype=np.float32)
        y = np.asarray(y)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        data = LabeledImageSet(X, encoded, max(len(self.classes_), 2))
        cfg = ClassifierConfig(self.architecture, self.epochs, self.batch_size,
                               self.learning_rate, self.random_state)
        self.model_ = train_classifier(data, cfg)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        probs = predict(self.model_, np.asarray(X, dtype=np.float32))
        return probs[:, :len(self.classes_)]

    def predict(self, X):
        return self.classes_[self.predict_proba(X).argmax(axis=1)]
