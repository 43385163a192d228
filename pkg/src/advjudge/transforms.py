"""Image transformations used to probe prediction stability.

Every function takes a channels-first image ``(c, h, w)`` with values in
[0, 1] (most also accept a batch ``(n, c, h, w)``) and returns an array of the
same shape, clipped to [0, 1].
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .exceptions import InvalidArgumentError

KINDS = ("additive-noise", "smoothing", "bit-depth", "feature-filter",
         "translation", "flip", "rotation", "shear", "scale")
NOISE_KINDS = ("gaussian", "poisson", "salt-pepper", "speckle")
SMOOTH_KINDS = ("maximum", "median", "uniform", "gaussian", "minimum")
FLIP_AXES = ("horizontal", "vertical", "both")

# short names used as CSV column headers, in canonical suite order
FEATURE_NAMES = ("noise", "smoothing", "bitdepth", "featurefilter", "translation",
                 "flip", "rotation", "shear", "scale")

NOISE_DEFAULTS = {"gaussian": 0.05, "salt-pepper": 0.05, "speckle": 0.1, "poisson": 255.0}


@dataclass(frozen=True)
class TransformSpec:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidArgumentError(f"unknown transform kind {self.kind!r}")
        _validate(self.kind, self.params)

    def to_json(self):
        return {"kind": self.kind, "params": dict(self.params)}

    @classmethod
    def from_json(cls, doc):
        return cls(doc["kind"], dict(doc.get("params", {})))

    def label(self):
        p = self.params
        if self.kind == "additive-noise":
            return f"noise:{p['subkind']}"
        if self.kind == "smoothing":
            return f"smoothing:{p['subkind']}{p.get('window', 3)}"
        key = {"bit-depth": "bits", "feature-filter": "keep_ratio", "translation": "offset",
               "flip": "axis", "rotation": "angle", "shear": "a", "scale": "s"}[self.kind]
        return f"{self.kind}:{p[key]}"

    def __hash__(self):
        return hash(json.dumps(self.to_json(), sort_keys=True))


def _validate(kind, p):
    def need(key):
        if key not in p:
            raise InvalidArgumentError(f"{kind} spec is missing {key!r}")
        return p[key]

    if kind == "additive-noise":
        sub = need("subkind")
        if sub not in NOISE_KINDS:
            raise InvalidArgumentError(f"unknown noise kind {sub!r}")
        strength = p.get("strength", NOISE_DEFAULTS[sub])
        if strength < 0 or (sub == "poisson" and strength == 0):
            raise InvalidArgumentError(f"invalid noise strength {strength}")
    elif kind == "smoothing":
        sub = need("subkind")
        if sub not in SMOOTH_KINDS:
            raise InvalidArgumentError(f"unknown smoothing kind {sub!r}")
        window = p.get("window", 3)
        if window < 3 or window % 2 == 0:
            raise InvalidArgumentError(f"smoothing window must be odd and >= 3, got {window}")
    elif kind == "bit-depth":
        if not 1 <= need("bits") <= 7:
            raise InvalidArgumentError(f"bit depth must be in 1..7, got {p['bits']}")
    elif kind == "feature-filter":
        if not 0 < need("keep_ratio") <= 1:
            raise InvalidArgumentError(f"keep ratio must be in (0, 1], got {p['keep_ratio']}")
    elif kind == "translation":
        off = need("offset")
        if len(off) != 2 or any(int(v) != v for v in off):
            raise InvalidArgumentError(f"translation offset must be two integers, got {off}")
    elif kind == "flip":
        if need("axis") not in FLIP_AXES:
            raise InvalidArgumentError(f"unknown flip axis {p['axis']!r}")
    elif kind == "rotation":
        if not math.isfinite(need("angle")):
            raise InvalidArgumentError("rotation angle must be finite")
    elif kind == "shear":
        if not math.isfinite(need("a")):
            raise InvalidArgumentError("shear parameter must be finite")
    elif kind == "scale":
        if not need("s") > 0:
            raise InvalidArgumentError(f"scale must be positive, got {p['s']}")


def canonical_suite():
    """The nine transforms, in feature-vector order, with the per-family
    parameters the joint detector uses by default."""
    return [
        TransformSpec("additive-noise", {"subkind": "gaussian", "strength": 0.05}),
        TransformSpec("smoothing", {"subkind": "maximum", "window": 3}),
        TransformSpec("bit-depth", {"bits": 6}),
        TransformSpec("feature-filter", {"keep_ratio": 0.9}),
        TransformSpec("translation", {"offset": [1, 1]}),
        TransformSpec("flip", {"axis": "horizontal"}),
        TransformSpec("rotation", {"angle": -10.0}),
        TransformSpec("shear", {"a": 0.3}),
        TransformSpec("scale", {"s": 1.1}),
    ]


def save_suite(suite, path):
    with open(path, "w") as f:
        json.dump([s.to_json() for s in suite], f, indent=2)


def load_suite(path):
    with open(path) as f:
        docs = json.load(f)
    if not isinstance(docs, list):
        raise InvalidArgumentError("a suite file holds a JSON array of transform specs")
    return [TransformSpec.from_json(d) for d in docs]


def _finish(out, like):
    return np.clip(out, 0.0, 1.0).astype(np.asarray(like).dtype if np.issubdtype(np.asarray(like).dtype, np.floating) else np.float64)


# -- pixel modifications ----------------------------------------------------

def add_noise(image, subkind="gaussian", strength=None, seed=0):
    """Additive/multiplicative noise; deterministic given ``seed``."""
    if subkind not in NOISE_KINDS:
        raise InvalidArgumentError(f"unknown noise kind {subkind!r}")
    strength = NOISE_DEFAULTS[subkind] if strength is None else strength
    if strength < 0 or (subkind == "poisson" and strength == 0):
        raise InvalidArgumentError(f"invalid noise strength {strength}")
    x = np.asarray(image, dtype=np.float64)
    rng = np.random.default_rng(seed)
    if subkind == "gaussian":
        out = x + rng.normal(0.0, strength, x.shape) if strength > 0 else x.copy()
    elif subkind == "speckle":
        out = x * (1.0 + rng.normal(0.0, strength, x.shape)) if strength > 0 else x.copy()
    elif subkind == "poisson":
        out = rng.poisson(x * strength) / strength
    else:
        # whole pixels (all channels) turn white or black
        spatial = x.shape[:-3] + (1,) + x.shape[-2:]
        hit = rng.random(spatial) < strength
        salt = rng.random(spatial) < 0.5
        out = np.where(hit, np.where(salt, 1.0, 0.0), x)
    return _finish(out, image)


def _gaussian_kernel(window, sigma):
    r = np.arange(window) - window // 2
    k = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    k2 = np.outer(k, k)
    return k2 / k2.sum()


def smooth(image, subkind="maximum", window=3, sigma=1.0):
    """Sliding-window filter per channel; borders replicate the edge pixels."""
    if subkind not in SMOOTH_KINDS:
        raise InvalidArgumentError(f"unknown smoothing kind {subkind!r}")
    if window < 3 or window % 2 == 0:
        raise InvalidArgumentError(f"smoothing window must be odd and >= 3, got {window}")
    x = np.asarray(image, dtype=np.float64)
    size = (1,) * (x.ndim - 2) + (window, window)
    if subkind == "maximum":
        out = ndimage.maximum_filter(x, size=size, mode="nearest")
    elif subkind == "minimum":
        out = ndimage.minimum_filter(x, size=size, mode="nearest")
    elif subkind == "median":
        out = ndimage.median_filter(x, size=size, mode="nearest")
    elif subkind == "uniform":
        out = ndimage.uniform_filter(x, size=size, mode="nearest")
    else:
        kernel = _gaussian_kernel(window, sigma).reshape(size)
        out = ndimage.correlate(x, kernel, mode="nearest")
    return _finish(out, image)


def bit_depth_reduce(image, bits):
    """Quantize to ``bits`` bits: ``round(x * (2**bits - 1)) / (2**bits - 1)``,
    ties rounded away from zero."""
    if not 1 <= bits <= 7:
        raise InvalidArgumentError(f"bit depth must be in 1..7, got {bits}")
    levels = 2 ** bits - 1
    x = np.asarray(image, dtype=np.float64)
    q = np.sign(x) * np.floor(np.abs(x) * levels + 0.5)
    return _finish(q / levels, image)


def _dct_matrix(n):
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    c = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    c[0] /= np.sqrt(2.0)
    return c


def dct2(channel):
    """Orthonormal 2-D DCT-II of the trailing two axes."""
    x = np.asarray(channel, dtype=np.float64)
    if x.ndim < 2 or x.shape[-1] == 0 or x.shape[-2] == 0:
        raise InvalidArgumentError(f"dct2 needs a nonempty 2-D channel, got shape {x.shape}")
    ch, cw = _dct_matrix(x.shape[-2]), _dct_matrix(x.shape[-1])
    return ch @ x @ cw.T


def idct2(coeffs):
    """Inverse of :func:`dct2`."""
    y = np.asarray(coeffs, dtype=np.float64)
    if y.ndim < 2 or y.shape[-1] == 0 or y.shape[-2] == 0:
        raise InvalidArgumentError(f"idct2 needs a nonempty 2-D array, got shape {y.shape}")
    ch, cw = _dct_matrix(y.shape[-2]), _dct_matrix(y.shape[-1])
    return ch.T @ y @ cw


def feature_filter(image, keep_ratio):
    """Low-pass in the DCT domain: keep the top-left ``ceil(r*h) x ceil(r*w)``
    coefficient block of each channel."""
    if not 0 < keep_ratio <= 1:
        raise InvalidArgumentError(f"keep ratio must be in (0, 1], got {keep_ratio}")
    x = np.asarray(image, dtype=np.float64)
    h, w = x.shape[-2:]
    keep_h = math.ceil(round(keep_ratio * h, 9))
    keep_w = math.ceil(round(keep_ratio * w, 9))
    coeffs = dct2(x)
    coeffs[..., keep_h:, :] = 0.0
    coeffs[..., :, keep_w:] = 0.0
    return _finish(idct2(coeffs), image)


# -- topological transformations -------------------------------------------

@dataclass(frozen=True)
class AffineMatrix:
    """Maps source pixel coordinates ``v = (x, y)`` to ``T @ v + offset``."""

    linear: tuple
    offset: tuple = (0.0, 0.0)

    def __post_init__(self):
        vals = np.asarray(self.linear, dtype=np.float64).ravel().tolist() + list(self.offset)
        if len(vals) != 6 or not all(math.isfinite(v) for v in vals):
            raise InvalidArgumentError("affine matrix needs six finite entries")

    @property
    def T(self):
        return np.asarray(self.linear, dtype=np.float64).reshape(2, 2)

    @property
    def o(self):
        return np.asarray(self.offset, dtype=np.float64)


def _about_center(T, h, w):
    c = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    return AffineMatrix(tuple(map(tuple, T)), tuple(c - T @ c))


def build_affine(kind, params, shape):
    """Affine matrix for a topological transform on an image of ``shape``
    (``(..., h, w)``). Flip, rotation, shear and scale act about the image
    center; translation is a pure offset."""
    h, w = shape[-2:]
    _validate(kind, params)
    if kind == "translation":
        a, b = params["offset"]
        return AffineMatrix(((1.0, 0.0), (0.0, 1.0)), (float(a), float(b)))
    if kind == "flip":
        sx = -1.0 if params["axis"] in ("horizontal", "both") else 1.0
        sy = -1.0 if params["axis"] in ("vertical", "both") else 1.0
        T = np.array([[sx, 0.0], [0.0, sy]])
    elif kind == "rotation":
        t = math.radians(params["angle"])
        T = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
    elif kind == "shear":
        T = np.array([[1.0, params["a"]], [0.0, 1.0]])
    elif kind == "scale":
        T = np.array([[params["s"], 0.0], [0.0, params["s"]]])
    else:
        raise InvalidArgumentError(f"{kind} is not an affine transform")
    return _about_center(T, h, w)


def _bilinear_sample(x, sx, sy, fill_outside=True):
    """Sample ``x[..., h, w]`` at float coordinates; neighbours outside the
    frame count as zero (or are clamped to the edge when not ``fill_outside``)."""
    h, w = x.shape[-2:]
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = sx - x0
    fy = sy - y0
    out = np.zeros(x.shape[:-2] + sx.shape, dtype=np.float64)
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            xi, yi = x0 + dx, y0 + dy
            wgt = wy * wx
            if fill_outside:
                inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
                wgt = np.where(inside, wgt, 0.0)
            vals = x[..., np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
            out += wgt * vals
    return out


def warp(image, matrix, interpolation="bilinear"):
    """Inverse-mapping resampling: each output pixel ``v'`` reads the source
    at ``T^-1 (v' - offset)``. Samples outside the frame are zero."""
    T = matrix.T
    if abs(np.linalg.det(T)) < 1e-12:
        raise InvalidArgumentError("affine matrix is singular")
    x = np.asarray(image, dtype=np.float64)
    h, w = x.shape[-2:]
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dst = np.stack([xx.ravel(), yy.ravel()]) - matrix.o[:, None]
    src = np.linalg.solve(T, dst)
    sx = src[0].reshape(h, w)
    sy = src[1].reshape(h, w)
    # snap round-off so integer-valued maps (flips, shifts) stay exact
    for s in (sx, sy):
        r = np.rint(s)
        close = np.abs(s - r) < 1e-9
        s[close] = r[close]
    if interpolation == "nearest":
        xi, yi = np.rint(sx).astype(np.int64), np.rint(sy).astype(np.int64)
        inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        out = np.where(inside, x[..., np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)], 0.0)
    elif interpolation == "bilinear":
        out = _bilinear_sample(x, sx, sy)
    else:
        raise InvalidArgumentError(f"unknown interpolation {interpolation!r}")
    return _finish(out, image)


def _round_half_up(v):
    return int(math.floor(v + 0.5))


def resize(image, new_h, new_w):
    """Bilinear resize with half-pixel centers and edge clamping."""
    x = np.asarray(image, dtype=np.float64)
    h, w = x.shape[-2:]
    sy = (np.arange(new_h) + 0.5) * (h / new_h) - 0.5
    sx = (np.arange(new_w) + 0.5) * (w / new_w) - 0.5
    sy = np.clip(sy, 0, h - 1)
    sx = np.clip(sx, 0, w - 1)
    gy, gx = np.meshgrid(sy, sx, indexing="ij")
    return _bilinear_sample(x, gx, gy, fill_outside=False)


def scale_roundtrip(image, s):
    """Zoom without changing the frame size.

    ``s < 1``: shrink by ``s`` then enlarge back to the original size.
    ``s > 1``: enlarge by ``s`` then crop the center to the original size.
    """
    if not s > 0:
        raise InvalidArgumentError(f"scale must be positive, got {s}")
    x = np.asarray(image, dtype=np.float64)
    h, w = x.shape[-2:]
    if s == 1:
        return _finish(x, image)
    mid_h, mid_w = max(1, _round_half_up(h * s)), max(1, _round_half_up(w * s))
    mid = resize(x, mid_h, mid_w)
    if s < 1:
        out = resize(mid, h, w)
    else:
        top, left = (mid_h - h) // 2, (mid_w - w) // 2
        out = mid[..., top:top + h, left:left + w]
    return _finish(out, image)


def scale_intermediate_shape(shape, s):
    h, w = shape[-2:]
    return max(1, _round_half_up(h * s)), max(1, _round_half_up(w * s))


# -- dispatch -----------------------------------------------------------------

def transform(image, spec, seed=0):
    """Apply one :class:`TransformSpec`. Only additive noise consumes ``seed``."""
    p = spec.params
    if spec.kind == "additive-noise":
        return add_noise(image, p["subkind"], p.get("strength"), seed)
    if spec.kind == "smoothing":
        return smooth(image, p["subkind"], p.get("window", 3), p.get("sigma", 1.0))
    if spec.kind == "bit-depth":
        return bit_depth_reduce(image, p["bits"])
    if spec.kind == "feature-filter":
        return feature_filter(image, p["keep_ratio"])
    if spec.kind == "scale":
        return scale_roundtrip(image, p["s"])
    matrix = build_affine(spec.kind, p, np.shape(image))
    return warp(image, matrix, p.get("interpolation", "bilinear"))
