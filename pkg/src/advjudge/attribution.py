"""Integrated-gradients attribution of judge outputs to the nine transform scores."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .detector import ADVERSARIAL, BENIGN, judge
from .exceptions import InvalidArgumentError
from .numerics import logit_input_gradient
from .transforms import FEATURE_NAMES

DEFAULT_STEPS = 200


@dataclass
class AttributionVector:
    values: np.ndarray
    baseline: np.ndarray
    steps: int
    output: float
    baseline_output: float

    @property
    def completeness_gap(self):
        return abs(float(self.values.sum()) - (self.output - self.baseline_output))

    def relative_gap(self):
        return self.completeness_gap / max(1.0, abs(self.output - self.baseline_output))


def _float64(model):
    return model if model.dtype == np.float64 else model.astype(np.float64)


def _grad_fn(model):
    """Returns ``f(points) -> (outputs, gradients)`` on raw (unnormalized) features."""
    m = _float64(model)
    norm = model.metadata.get("normalization")
    mean = np.asarray(norm["mean"]) if norm else 0.0
    std = np.asarray(norm["std"]) if norm else 1.0

    def f(points):
        z = (points - mean) / std
        out, dz = logit_input_gradient(m, z, np.ones((len(points), 1)))
        return out[:, 0], dz / std
    return f


def _ig_batch(model, vs, baseline, steps, chunk=20000):
    """Integrated gradients for each row of ``vs`` (midpoint Riemann sum)."""
    f = _grad_fn(model)
    alphas = (np.arange(steps) + 0.5) / steps
    delta = vs - baseline
    out = np.empty_like(vs)
    per = max(chunk // steps, 1)
    for start in range(0, len(vs), per):
        d = delta[start:start + per]
        path = baseline + alphas[None, :, None] * d[:, None, :]
        _, grads = f(path.reshape(-1, vs.shape[1]))
        out[start:start + per] = d * grads.reshape(len(d), steps, -1).mean(axis=1)
    ends, _ = f(np.vstack([vs, baseline[None]]))
    return out, ends[:-1], float(ends[-1])


def _check(model, v, baseline, steps):
    v = np.asarray(v, dtype=np.float64)
    n_in = model.input_shape[0]
    baseline = np.zeros(n_in) if baseline is None else np.asarray(baseline, dtype=np.float64)
    if v.shape[-1] != n_in or baseline.shape != (n_in,):
        raise InvalidArgumentError(f"attribution needs {n_in}-entry vectors, got {v.shape} and {baseline.shape}")
    if steps < 1:
        raise InvalidArgumentError("steps must be at least 1")
    return v, baseline


def integrated_gradients(model, v, baseline=None, steps=DEFAULT_STEPS):
    """Attribute ``f(v) - f(baseline)`` to input coordinates, where ``f`` is the
    network's scalar output (the judge's rho). ``baseline`` defaults to zero."""
    v, baseline = _check(model, v, baseline, steps)
    if v.ndim != 1:
        raise InvalidArgumentError("integrated_gradients takes a single vector")
    vals, outs, base = _ig_batch(model, v[None], baseline, steps)
    return AttributionVector(vals[0], baseline, steps, float(outs[0]), base)


def integrated_gradients_batch(model, vs, baseline=None, steps=DEFAULT_STEPS):
    vs, baseline = _check(model, vs, baseline, steps)
    vals, outs, base = _ig_batch(model, vs.reshape(-1, vs.shape[-1]), baseline, steps)
    return [AttributionVector(a, baseline, steps, float(o), base) for a, o in zip(vals, outs)]


@dataclass
class FeatureImportance:
    benign_signed: np.ndarray
    adversarial_signed: np.ndarray
    benign_abs: np.ndarray
    adversarial_abs: np.ndarray
    benign_count: int
    adversarial_count: int

    @property
    def empty_partitions(self):
        return [name for name, n in ((BENIGN, self.benign_count), (ADVERSARIAL, self.adversarial_count)) if n == 0]

    def to_json(self):
        return {
            "features": list(FEATURE_NAMES),
            "benign": {"count": self.benign_count, "signed": self.benign_signed.tolist(),
                       "absolute": self.benign_abs.tolist()},
            "adversarial": {"count": self.adversarial_count, "signed": self.adversarial_signed.tolist(),
                            "absolute": self.adversarial_abs.tolist()},
            "empty_partitions": self.empty_partitions,
        }


def mean_feature_importance(model, features, baseline=None, steps=DEFAULT_STEPS):
    """Average attributions over the test vectors the judge calls benign and,
    separately, over those it calls adversarial. Both signed and absolute
    averages are returned; an empty partition yields zeros."""
    features = np.asarray(features, dtype=np.float64)
    if len(features) == 0:
        raise InvalidArgumentError("no test vectors")
    attrs = integrated_gradients_batch(model, features, baseline, steps)
    vals = np.stack([a.values for a in attrs])
    verdicts = np.array([judge(model, v)[1] for v in features])
    parts = {}
    for name in (BENIGN, ADVERSARIAL):
        sel = vals[verdicts == name]
        zero = np.zeros(vals.shape[1])
        parts[name] = (sel.mean(axis=0) if len(sel) else zero,
                       np.abs(sel).mean(axis=0) if len(sel) else zero, len(sel))
    return FeatureImportance(parts[BENIGN][0], parts[ADVERSARIAL][0], parts[BENIGN][1],
                             parts[ADVERSARIAL][1], parts[BENIGN][2], parts[ADVERSARIAL][2])


def case_report(model, v, steps=DEFAULT_STEPS, attribution=None):
    """One row pairing each transform's score with its attribution."""
    v = np.asarray(v, dtype=np.float64)
    rho, verdict = judge(model, v)
    attr = attribution if attribution is not None else integrated_gradients(model, v, steps=steps)
    return {"rho": rho, "verdict": verdict,
            "scores": dict(zip(FEATURE_NAMES, v.tolist())),
            "attributions": dict(zip(FEATURE_NAMES, attr.values.tolist())),
            "completeness_gap": attr.completeness_gap, "steps": attr.steps}


def attribution_columns():
    return (["image_id", "rho", "verdict"] + [f"score_{n}" for n in FEATURE_NAMES]
            + [f"ig_{n}" for n in FEATURE_NAMES])


def write_attributions_csv(path, image_ids, reports):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(attribution_columns())
        for iid, r in zip(image_ids, reports):
            w.writerow([iid, repr(r["rho"]), r["verdict"]]
                       + [repr(r["scores"][n]) for n in FEATURE_NAMES]
                       + [repr(r["attributions"][n]) for n in FEATURE_NAMES])
