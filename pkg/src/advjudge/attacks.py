"""Gradient attacks: FGSM, BIM (untargeted) and Carlini-Wagner L2 (targeted).

The batch functions (``*_batch``) do the work; the single-image functions wrap
them and return an :class:`AdversarialRecord`.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np

from .classifier import input_gradient
from .exceptions import FormatError, InvalidArgumentError
from .numerics import forward, logit_input_gradient

logger = logging.getLogger(__name__)

METHODS = ("fgsm", "bim", "cw-l2")
CORPUS_MAGIC = b"ADVC"
CORPUS_VERSION = 1


@dataclass
class AttackConfig:
    method: str = "fgsm"
    epsilon: float = 0.1
    # BIM; step defaults to epsilon / 10
    step: Optional[float] = None
    iterations: int = 20
    # C&W L2
    confidence: float = 0.0
    initial_const: float = 1e-2
    cw_learning_rate: float = 1e-2
    cw_iterations: int = 200
    search_steps: int = 5
    early_abort: bool = True
    batch_size: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise InvalidArgumentError(f"unknown attack method {self.method!r}")
        if self.epsilon < 0:
            raise InvalidArgumentError("epsilon must be nonnegative")
        if self.iterations < 1 or self.cw_iterations < 1 or self.search_steps < 1:
            raise InvalidArgumentError("iteration counts must be at least 1")
        if self.confidence < 0:
            raise InvalidArgumentError("confidence must be nonnegative")
        if self.initial_const <= 0 or self.cw_learning_rate <= 0:
            raise InvalidArgumentError("C&W constant and learning rate must be positive")
        if self.step is not None and self.step <= 0:
            raise InvalidArgumentError("BIM step must be positive")

    @property
    def bim_step(self):
        return self.epsilon / 10 if self.step is None else self.step


@dataclass
class AdversarialRecord:
    original: np.ndarray
    adversarial: np.ndarray
    true_label: int
    predicted_label: int
    target_label: Optional[int]
    l2: float
    linf: float
    success: bool
    source_index: int = -1

    @property
    def perturbation(self):
        return self.adversarial.astype(np.float64) - self.original.astype(np.float64)

    def norms_consistent(self, tol=1e-6):
        d = self.perturbation
        return abs(np.linalg.norm(d) - self.l2) <= tol and abs(np.abs(d).max() - self.linf) <= tol


def next_class_target(label, num_classes):
    if not 0 <= label < num_classes:
        raise InvalidArgumentError(f"label {label} outside [0, {num_classes})")
    return (label + 1) % num_classes


def _norms(orig, adv):
    d = (adv.astype(np.float64) - orig.astype(np.float64)).reshape(len(orig), -1)
    return np.linalg.norm(d, axis=1), np.abs(d).max(axis=1, initial=0.0)


def _records(model, orig, adv, labels, targets, success, source=None):
    preds = forward(model, adv).argmax(axis=1)
    l2, linf = _norms(orig, adv)
    out = []
    for i in range(len(orig)):
        out.append(AdversarialRecord(
            orig[i], adv[i], int(labels[i]), int(preds[i]),
            None if targets is None else int(targets[i]),
            float(l2[i]), float(linf[i]), bool(success[i]),
            -1 if source is None else int(source[i])))
    return out


def _check_batch(model, images):
    x = np.asarray(images, dtype=model.dtype)
    if x.shape[1:] != tuple(model.input_shape):
        raise InvalidArgumentError(f"images of shape {x.shape[1:]} do not fit model input {model.input_shape}")
    return x


def fgsm_batch(model, images, labels, epsilon):
    """``clip(x + eps * sign(grad_x J(f(x), y)), 0, 1)`` for a batch."""
    if epsilon < 0:
        raise InvalidArgumentError("epsilon must be nonnegative")
    x = _check_batch(model, images)
    g = input_gradient(model, x, np.asarray(labels))
    return np.clip(x + epsilon * np.sign(g), 0.0, 1.0)


def bim_batch(model, images, labels, epsilon, step, iterations):
    """Iterated FGSM, projected onto the epsilon ball and [0, 1] after every step."""
    if step <= 0 or iterations < 1:
        raise InvalidArgumentError("BIM needs a positive step and at least one iteration")
    x = _check_batch(model, images)
    lo = np.clip(x - epsilon, 0.0, 1.0)
    hi = np.clip(x + epsilon, 0.0, 1.0)
    adv = x.copy()
    for _ in range(iterations):
        g = input_gradient(model, adv, np.asarray(labels))
        adv = np.clip(adv + step * np.sign(g), lo, hi)
    return adv


def _margin(logits, targets, confidence):
    """``max_{i != t} Z_i - Z_t`` clipped below at ``-confidence``, plus the
    index of the best other class."""
    z = logits.astype(np.float64)
    n = len(z)
    zt = z[np.arange(n), targets]
    other = z.copy()
    other[np.arange(n), targets] = -np.inf
    j = other.argmax(axis=1)
    raw = other[np.arange(n), j] - zt
    return np.maximum(raw, -confidence), raw, j


def cw_l2_batch(model, images, targets, cfg):
    """Targeted Carlini-Wagner L2 attack.

    Minimizes ``||x' - x||_2^2 + c * max(max_{i != t} Z_i - Z_t, -k)`` over
    ``w`` with ``x' = (tanh(w) + 1) / 2``, and searches ``c`` per image:
    grow it tenfold until the first success, then bisect. Returns the
    smallest-L2 successful image for each input (the original where the
    attack never succeeded) and a success mask.
    """
    x = _check_batch(model, images).astype(np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    n = len(x)
    flat = x.reshape(n, -1)
    w0 = np.arctanh(np.clip(flat * 2 - 1, -1 + 1e-6, 1 - 1e-6))
    const = np.full(n, cfg.initial_const)
    lower = np.zeros(n)
    upper = np.full(n, 1e10)
    best_l2 = np.full(n, np.inf)
    best_adv = flat.copy()
    shape = (-1,) + tuple(model.input_shape)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    check_every = max(cfg.cw_iterations // 10, 1)

    for _ in range(cfg.search_steps):
        w = w0.copy()
        m = np.zeros_like(w)
        v = np.zeros_like(w)
        step_success = np.zeros(n, dtype=bool)
        active = np.arange(n)
        prev_loss = np.full(n, np.inf)
        for it in range(cfg.cw_iterations + 1):
            wa = w[active]
            adv = (np.tanh(wa) + 1) / 2
            diff = adv - flat[active]
            l2sq = np.sum(diff ** 2, axis=1)
            ta = targets[active]

            def upstream(logits):
                loss_term, raw, j = _margin(logits, ta, cfg.confidence)
                upstream.state = (loss_term, raw)
                up = np.zeros(logits.shape)
                live = raw > -cfg.confidence
                rows = np.nonzero(live)[0]
                up[rows, j[live]] = const[active][live]
                up[rows, ta[live]] -= const[active][live]
                return up

            logits, dx = logit_input_gradient(model, adv.reshape(shape).astype(model.dtype), upstream)
            loss_term, raw = upstream.state
            pred = logits.argmax(axis=1)
            ok = (pred == ta) & (-raw >= cfg.confidence)
            l2 = np.sqrt(l2sq)
            better = ok & (l2 < best_l2[active])
            idx = active[better]
            best_l2[idx] = l2[better]
            best_adv[idx] = adv[better]
            step_success[active[ok]] = True
            if it == cfg.cw_iterations:
                break
            loss = l2sq + const[active] * loss_term
            if cfg.early_abort and it % check_every == 0 and it > 0:
                keep = loss <= prev_loss[active] * 0.9999
                prev_loss[active] = loss
                if not keep.all():
                    sel = np.nonzero(keep)[0]
                    active = active[sel]
                    dx = dx[sel]
                    diff = diff[sel]
                    wa = wa[sel]
                    if len(active) == 0:
                        break
            grad_adv = 2 * diff + dx.reshape(len(active), -1).astype(np.float64)
            grad_w = grad_adv * (1 - np.tanh(wa) ** 2) / 2
            # Adam, per coordinate; every image keeps its own step count
            m[active] = beta1 * m[active] + (1 - beta1) * grad_w
            v[active] = beta2 * v[active] + (1 - beta2) * grad_w ** 2
            t = it + 1
            mhat = m[active] / (1 - beta1 ** t)
            vhat = v[active] / (1 - beta2 ** t)
            w[active] = wa - cfg.cw_learning_rate * mhat / (np.sqrt(vhat) + eps)

        upper = np.where(step_success, np.minimum(upper, const), upper)
        lower = np.where(step_success, lower, np.maximum(lower, const))
        bounded = upper < 1e9
        const = np.where(bounded, (lower + upper) / 2, const * 10)

    success = np.isfinite(best_l2)
    adv = best_adv.reshape(shape).astype(model.dtype)
    return adv, success


def fgsm(model, image, label, epsilon=0.1):
    adv = fgsm_batch(model, np.asarray(image)[None], [label], epsilon)
    rec = _records(model, np.asarray(image, dtype=model.dtype)[None], adv, [label], None, [True])[0]
    rec.success = rec.predicted_label != label
    return rec


def bim(model, image, label, epsilon=0.1, step=None, iterations=20):
    step = epsilon / 10 if step is None else step
    adv = bim_batch(model, np.asarray(image)[None], [label], epsilon, step, iterations)
    rec = _records(model, np.asarray(image, dtype=model.dtype)[None], adv, [label], None, [True])[0]
    rec.success = rec.predicted_label != label
    return rec


def cw_l2(model, image, target, cfg=None, true_label=None):
    cfg = cfg or AttackConfig(method="cw-l2")
    adv, ok = cw_l2_batch(model, np.asarray(image)[None], [target], cfg)
    label = int(forward(model, np.asarray(image, dtype=model.dtype)).argmax()) if true_label is None else true_label
    return _records(model, np.asarray(image, dtype=model.dtype)[None], adv, [label], [target], ok)[0]


def attack_batch(model, images, labels, cfg, source=None):
    """Run the configured attack on a batch; returns one record per image."""
    x = _check_batch(model, images)
    labels = np.asarray(labels, dtype=np.int64)
    if cfg.method == "fgsm":
        adv = fgsm_batch(model, x, labels, cfg.epsilon)
        targets = None
    elif cfg.method == "bim":
        adv = bim_batch(model, x, labels, cfg.epsilon, cfg.bim_step, cfg.iterations)
        targets = None
    else:
        targets = np.array([next_class_target(int(l), model.num_outputs) for l in labels])
        adv, ok = cw_l2_batch(model, x, targets, cfg)
    preds = forward(model, adv).argmax(axis=1)
    success = preds != labels if targets is None else ok & (preds == targets)
    return _records(model, x, adv, labels, targets, success, source)


@dataclass
class Corpus:
    method: str
    config: dict
    records: List[AdversarialRecord] = field(default_factory=list)
    attempted: int = 0
    requested: int = 0
    # successes among all attempted images, including any beyond the request
    successes: int = 0

    @property
    def shortfall(self):
        return max(self.requested - len(self.records), 0)

    def images(self):
        return np.stack([r.adversarial for r in self.records]) if self.records else None


def generate_corpus(model, benign, cfg, count, progress=None):
    """Attack correctly classified images of ``benign`` in order, keeping
    successful records until ``count`` are collected.

    Attacks are deterministic, so the corpus depends only on the model, the
    image order and ``cfg``. A shortfall is logged and reported on the
    returned :class:`Corpus` rather than raised.
    """
    preds = np.concatenate([forward(model, benign.images[i:i + 500]).argmax(axis=1)
                            for i in range(0, len(benign), 500)])
    candidates = np.nonzero(preds == benign.labels)[0]
    corpus = Corpus(cfg.method, asdict(cfg), requested=count)
    pos = 0
    while len(corpus.records) < count and pos < len(candidates):
        need = count - len(corpus.records)
        # oversize the chunk a little since some attacks fail
        size = min(cfg.batch_size, max(need + need // 4 + 1, 8))
        idx = candidates[pos:pos + size]
        pos += len(idx)
        recs = attack_batch(model, benign.images[idx], benign.labels[idx], cfg, source=idx)
        corpus.attempted += len(idx)
        corpus.successes += sum(r.success for r in recs)
        corpus.records.extend([r for r in recs if r.success][:need])
        if progress:
            progress(len(corpus.records), count)
    if corpus.shortfall:
        logger.warning("%s: only %d of %d requested adversarial examples", cfg.method,
                       len(corpus.records), count)
    return corpus


def success_rate(corpus):
    """Fraction of attacked (correctly classified) images the attack fooled."""
    return corpus.successes / corpus.attempted if corpus.attempted else 0.0


# -- corpus file --------------------------------------------------------------

def save_corpus(corpus, path):
    recs = corpus.records
    shape = list(recs[0].original.shape) if recs else []
    header = {"method": corpus.method, "config": corpus.config, "image_shape": shape,
              "counts": {"records": len(recs), "attempted": corpus.attempted,
                         "requested": corpus.requested, "successes": corpus.successes}}
    index = [{"true_label": r.true_label, "predicted_label": r.predicted_label,
              "target_label": r.target_label, "l2": r.l2, "linf": r.linf,
              "success": r.success, "source_index": r.source_index} for r in recs]
    hbytes = json.dumps(header, sort_keys=True).encode()
    ibytes = json.dumps(index, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CORPUS_MAGIC)
        f.write(struct.pack("<IQ", CORPUS_VERSION, len(hbytes)))
        f.write(hbytes)
        for r in recs:
            f.write(np.asarray(r.original, dtype="<f4").tobytes())
            f.write(np.asarray(r.adversarial, dtype="<f4").tobytes())
        f.write(struct.pack("<Q", len(ibytes)))
        f.write(ibytes)


def load_corpus(path):
    raw = open(path, "rb").read()
    if raw[:4] != CORPUS_MAGIC:
        raise FormatError(f"{path}: not a corpus file")
    try:
        version, hlen = struct.unpack_from("<IQ", raw, 4)
        if version != CORPUS_VERSION:
            raise FormatError(f"{path}: unsupported corpus version {version}")
        header = json.loads(raw[16:16 + hlen])
        n = header["counts"]["records"]
        shape = tuple(header["image_shape"])
        per = int(np.prod(shape)) if shape else 0
        off = 16 + hlen
        data = np.frombuffer(raw, dtype="<f4", count=2 * n * per, offset=off).reshape((n, 2) + shape)
        off += data.nbytes
        (ilen,) = struct.unpack_from("<Q", raw, off)
        index = json.loads(raw[off + 8:off + 8 + ilen])
        if off + 8 + ilen != len(raw) or len(index) != n:
            raise FormatError(f"{path}: corpus index does not match its header")
    except (struct.error, ValueError, KeyError) as exc:
        raise FormatError(f"{path}: corrupt corpus file ({exc})") from exc
    counts = header["counts"]
    corpus = Corpus(header["method"], header["config"], attempted=counts["attempted"],
                    requested=counts["requested"], successes=counts.get("successes", n))
    for i, meta in enumerate(index):
        corpus.records.append(AdversarialRecord(
            data[i, 0].astype(np.float32), data[i, 1].astype(np.float32), meta["true_label"],
            meta["predicted_label"], meta["target_label"], meta["l2"], meta["linf"],
            meta["success"], meta["source_index"]))
    return corpus
