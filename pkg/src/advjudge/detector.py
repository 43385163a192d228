"""KL-divergence scoring, the per-transform threshold detector and the joint
MLP detector (AdvJudge) built on the nine scores."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .classifier import predict
from .exceptions import InvalidArgumentError, NumericError
from .numerics import (
    PROB_FLOOR,
    AdamState,
    Layer,
    NetworkModel,
    adam_step,
    forward,
    forward_backward,
    init_network,
    sigmoid,
)
from .transforms import FEATURE_NAMES, TransformSpec, canonical_suite, transform

logger = logging.getLogger(__name__)

JUDGE_ARCHITECTURE = [("fully-connected", 64, "relu")] * 4 + [("fully-connected", 1, "sigmoid")]
SCORE_COLUMNS = ("image_id", "source", "label") + FEATURE_NAMES
SOURCES = ("benign", "cw", "fgsm", "bim")
BENIGN, ADVERSARIAL = "benign", "adversarial"


def kl_divergence(p, q):
    """``sum p_i ln(p_i / q_i)`` along the last axis, both clamped to 1e-12.

    Entries with ``p_i = 0`` contribute nothing. Accepts single vectors or
    row-aligned batches.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise InvalidArgumentError(f"distribution shapes differ: {p.shape} vs {q.shape}")
    if p.shape[-1] == 0:
        raise InvalidArgumentError("empty distribution")
    ratio = np.log(np.maximum(p, PROB_FLOOR)) - np.log(np.maximum(q, PROB_FLOOR))
    terms = np.where(p > 0, p * ratio, 0.0)
    out = terms.sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def image_seed(seed, index):
    """Per-image seed derived from the global seed and a stable image index."""
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def _transform_batch(images, spec, seeds):
    if spec.kind == "additive-noise":
        return np.stack([transform(img, spec, s) for img, s in zip(images, seeds)])
    return transform(images, spec)


def score_image(model, image, spec, seed=0):
    """KL divergence between the predictions on ``image`` and on its transform."""
    p = predict(model, image)
    q = predict(model, transform(image, spec, seed))
    return kl_divergence(p, q)


def _check_suite(suite):
    if len(suite) != len(FEATURE_NAMES):
        raise InvalidArgumentError(f"a suite holds {len(FEATURE_NAMES)} transforms, got {len(suite)}")


def feature_vector(model, image, suite=None, seed=0):
    suite = canonical_suite() if suite is None else suite
    _check_suite(suite)
    return np.array([score_image(model, image, spec, seed) for spec in suite])


def feature_matrix(model, images, suite=None, seeds=None, batch_size=250):
    """Feature vectors for a batch of images, one row per image.

    ``seeds`` gives the noise seed of each image (defaults to 0 for all).
    """
    suite = canonical_suite() if suite is None else suite
    _check_suite(suite)
    images = np.asarray(images, dtype=np.float32)
    n = len(images)
    seeds = np.zeros(n, dtype=np.int64) if seeds is None else np.asarray(seeds)
    if len(seeds) != n:
        raise InvalidArgumentError("need one seed per image")
    out = np.empty((n, len(suite)))
    for start in range(0, n, batch_size):
        sl = slice(start, start + batch_size)
        p = predict(model, images[sl])
        for k, spec in enumerate(suite):
            q = predict(model, _transform_batch(images[sl], spec, seeds[sl]))
            out[sl, k] = kl_divergence(p, q)
    return out


class KLFeatures(TransformerMixin, BaseEstimator):
    """Maps images ``(n, c, h, w)`` to their nine KL scores.

    Stateless apart from the target model: ``fit`` only validates input.
    """

    def __init__(self, model=None, suite=None, random_state=0):
        self.model = model
        self.suite = suite
        self.random_state = random_state

    def fit(self, X, y=None):
        if self.model is None:
            raise InvalidArgumentError("KLFeatures needs a target model")
        self.n_features_in_ = int(np.prod(np.shape(X)[1:]))
        return self

    def transform(self, X):
        seeds = [image_seed(self.random_state, i) for i in range(len(X))]
        return feature_matrix(self.model, X, self.suite, seeds)


# -- threshold detector -------------------------------------------------------

@dataclass
class ThresholdModel:
    threshold: float
    tpr: float
    tnr: float
    product: float
    spec: Optional[TransformSpec] = None

    def to_json(self):
        return {"spec": None if self.spec is None else self.spec.to_json(),
                "T": self.threshold, "tpr": self.tpr, "tnr": self.tnr}


def fit_threshold(benign_scores, adversarial_scores, spec=None):
    """Pick the candidate ``T`` (from the pooled training scores) that
    maximizes TPR * TNR under the rule "adversarial iff score > T"; ties go to
    the smallest ``T``."""
    ben = np.sort(np.asarray(benign_scores, dtype=np.float64).ravel())
    adv = np.sort(np.asarray(adversarial_scores, dtype=np.float64).ravel())
    if len(ben) == 0 or len(adv) == 0:
        raise InvalidArgumentError("threshold fitting needs benign and adversarial scores")
    if not (np.all(np.isfinite(ben)) and np.all(np.isfinite(adv))):
        raise NumericError("non-finite training score")
    cand = np.unique(np.concatenate([ben, adv]))
    tn = np.searchsorted(ben, cand, side="right")            # benign <= T
    tp = len(adv) - np.searchsorted(adv, cand, side="right")  # adversarial > T
    # integer products avoid float ties; argmax keeps the first, i.e. smallest T
    best = int(np.argmax(tp.astype(object) * tn.astype(object)))
    nb, na = len(ben), len(adv)
    return ThresholdModel(float(cand[best]), int(tp[best]) / na, int(tn[best]) / nb,
                          int(tp[best]) * int(tn[best]) / (na * nb), spec)


def baseline_detect(score, model):
    if isinstance(score, float) and math.isnan(score) or np.any(np.isnan(score)):
        raise NumericError("score is NaN")
    verdict = np.asarray(score) > model.threshold
    if verdict.ndim == 0:
        return ADVERSARIAL if verdict else BENIGN
    return np.where(verdict, ADVERSARIAL, BENIGN)


class ThresholdDetector(ClassifierMixin, BaseEstimator):
    """Single-score detector: predicts 1 (adversarial) iff score > T.

    ``X`` is a vector of scores or an ``(n, 1)`` array; ``y`` is 0 for benign
    and 1 for adversarial.
    """

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64).reshape(len(y), -1)
        X, y = check_X_y(X, y)
        if X.shape[1] != 1:
            raise InvalidArgumentError("ThresholdDetector takes a single score column")
        y = np.asarray(y)
        self.classes_ = np.array([0, 1])
        self.model_ = fit_threshold(X[y == 0, 0], X[y == 1, 0])
        self.threshold_ = self.model_.threshold
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        return np.asarray(X, dtype=np.float64).reshape(-1)

    def predict(self, X):
        return (self.decision_function(X) > self.threshold_).astype(np.int64)


# -- joint detector ---------------------------------------------------------

@dataclass
class JudgeConfig:
    epochs: int = 200
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    normalize: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise InvalidArgumentError("judge hyperparameters must be positive")


def _logit_view(model):
    """The judge without its final sigmoid, sharing parameter arrays."""
    layers = list(model.layers[:-1])
    last = model.layers[-1]
    layers.append(Layer(last.kind, last.weight, last.bias, "none"))
    return NetworkModel(layers, model.input_shape)


def _prepare(model, features):
    x = np.asarray(features, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != len(FEATURE_NAMES):
        raise InvalidArgumentError(f"judge input must have {len(FEATURE_NAMES)} features, got shape {x.shape}")
    norm = model.metadata.get("normalization")
    if norm:
        x = (x - np.asarray(norm["mean"])) / np.asarray(norm["std"])
    return x.astype(model.dtype)


def train_judge(features, labels, cfg=None):
    """Train the 9-64-64-64-64-1 judge with binary cross-entropy and Adam.

    Returns ``(model, training_accuracy)``. Classes are not reweighted.
    """
    cfg = cfg or JudgeConfig()
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if len(x) == 0 or x.ndim != 2 or x.shape[1] != len(FEATURE_NAMES) or len(x) != len(y):
        raise InvalidArgumentError("judge training needs an (n, 9) feature matrix and n labels")
    if not set(np.unique(y)) <= {0.0, 1.0}:
        raise InvalidArgumentError("judge labels must be 0 or 1")
    if len(np.unique(y)) < 2:
        raise InvalidArgumentError("judge training needs both classes")
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite feature value")
    model = init_network((len(FEATURE_NAMES),), JUDGE_ARCHITECTURE, seed=cfg.seed)
    if cfg.normalize:
        std = x.std(axis=0)
        model.metadata["normalization"] = {"mean": x.mean(axis=0).tolist(),
                                           "std": np.where(std > 0, std, 1.0).tolist()}
    xin = _prepare(model, x)
    logit_model = _logit_view(model)
    params = model.parameters()
    state = AdamState()
    rng = np.random.default_rng(cfg.seed + 1)

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            target = y[idx]

            def loss_grad(z):
                z = z[:, 0].astype(np.float64)
                # binary cross-entropy on logits, numerically stable form
                loss = float(np.mean(np.maximum(z, 0) - z * target + np.log1p(np.exp(-np.abs(z)))))
                return loss, ((sigmoid(z) - target) / len(idx))[:, None]

            loss, _, grads, _ = forward_backward(logit_model, xin[idx], loss_grad, need_input_grad=False)
            if not np.isfinite(loss):
                raise NumericError(f"judge loss diverged in epoch {epoch}", epoch=epoch)
            adam_step(params, grads, state, cfg.learning_rate)
    acc = float(np.mean((judge_scores(model, x) > 0.5) == (y == 1)))
    model.metadata["training"] = {"config": asdict(cfg), "train_accuracy": acc}
    logger.info("judge trained: %d vectors, training accuracy %.4f", len(x), acc)
    return model, acc


def judge_scores(model, features):
    """Judge outputs rho in (0, 1) for one vector or a batch."""
    out = forward(model, _prepare(model, features)).astype(np.float64)
    return float(out[0]) if out.ndim == 1 else out[:, 0]


def judge(model, v):
    rho = judge_scores(model, v)
    return rho, ADVERSARIAL if rho > 0.5 else BENIGN


class AdvJudge(ClassifierMixin, BaseEstimator):
    """scikit-learn wrapper around :func:`train_judge`; ``X`` is ``(n, 9)``."""

    def __init__(self, epochs=200, batch_size=64, learning_rate=1e-3, random_state=0, normalize=False):
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.random_state = random_state
        self.normalize = normalize

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = np.array([0, 1])
        cfg = JudgeConfig(self.epochs, self.batch_size, self.learning_rate, self.random_state, self.normalize)
        self.model_, self.train_accuracy_ = train_judge(X, y, cfg)
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        return judge_scores(self.model_, check_array(X, dtype=np.float64))

    def predict_proba(self, X):
        rho = self.decision_function(X)
        return np.column_stack([1 - rho, rho])

    def predict(self, X):
        return (self.decision_function(X) > 0.5).astype(np.int64)


# -- files --------------------------------------------------------------------

def write_scores_csv(path, image_ids, sources, labels, scores):
    scores = np.asarray(scores, dtype=np.float64)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SCORE_COLUMNS)
        for iid, src, lab, row in zip(image_ids, sources, labels, scores):
            w.writerow([iid, src, int(lab)] + [repr(float(v)) for v in row])


def read_scores_csv(path):
    """Returns ``(image_ids, sources, labels, scores)``."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = tuple(next(reader))
        if header != SCORE_COLUMNS:
            raise InvalidArgumentError(f"{path}: unexpected header {header}")
        rows = list(reader)
    ids = [r[0] for r in rows]
    sources = [r[1] for r in rows]
    labels = np.array([int(r[2]) for r in rows], dtype=np.int64)
    scores = np.array([[float(v) for v in r[3:]] for r in rows]).reshape(len(rows), len(FEATURE_NAMES))
    return ids, sources, labels, scores


def write_thresholds_json(path, models):
    doc = {name: m.to_json() for name, m in zip(FEATURE_NAMES, models)}
    with open(path, "w") as f:
        json.dump(doc, f, indent=2)


def read_thresholds_json(path):
    with open(path) as f:
        doc = json.load(f)
    out = []
    for name in FEATURE_NAMES:
        d = doc[name]
        spec = None if d["spec"] is None else TransformSpec.from_json(d["spec"])
        out.append(ThresholdModel(d["T"], d["tpr"], d["tnr"], d["tpr"] * d["tnr"], spec))
    return out
