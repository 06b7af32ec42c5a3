"""Positively homogeneous networks assembled from normalized and unnormalized layers.

A network is an ordered stack of layers. Every layer applies its activation
first and then a weight matrix:

* normalized layer:   a -> (W / ||W||) act(a)          (optionally  a + ...)
* unnormalized layer: a -> W act(a)

Normalized layers are 0-homogeneous in their weights, so only the
unnormalized tail contributes to the degree H of the map w -> Phi(w; x).
All weights live in one flat float64 vector; ``NetworkSpec`` owns the layout.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import DimensionMismatch, InvalidSpec, ZeroNormalizedLayer

EPS_ABS = 1e-12
ZERO_NORM = 1e-300

NORMALIZED = "normalized"
UNNORMALIZED = "unnormalized"
ROWWISE = "rowwise"
FROBENIUS = "frobenius"
PLAIN = "plain"
RESIDUAL = "residual"

_ACTIVATIONS = ("relu", "leaky_relu", "linear", "power_relu", "sigmoid")


@dataclass(frozen=True)
class Activation:
    """Pointwise activation. ``slope`` is used by leaky_relu, ``u`` by power_relu."""

    kind: str
    slope: float = 0.0
    u: float = 1.0

    def __post_init__(self):
        if self.kind not in _ACTIVATIONS:
            raise InvalidSpec(f"unknown activation {self.kind!r}")
        if self.kind == "leaky_relu" and not 0.0 < self.slope < 1.0:
            raise InvalidSpec("leaky_relu slope must lie in (0, 1)")
        if self.kind == "power_relu" and not self.u >= 1.0:
            raise InvalidSpec("power_relu exponent must be >= 1")

    @property
    def degree(self):
        """Positive-homogeneity degree, or None for sigmoid."""
        if self.kind == "sigmoid":
            return None
        if self.kind == "power_relu":
            return float(self.u)
        return 1.0

    @property
    def has_kink(self):
        # points where the derivative jumps (ReLU-like) or is not Lipschitz
        if self.kind in ("relu", "leaky_relu"):
            return True
        return self.kind == "power_relu" and self.u < 2.0

    def __call__(self, z):
        k = self.kind
        if k == "relu":
            return np.maximum(z, 0.0)
        if k == "leaky_relu":
            return np.where(z > 0, z, self.slope * z)
        if k == "linear":
            return z
        if k == "power_relu":
            zp = np.maximum(z, 0.0)
            return zp if self.u == 1.0 else zp**self.u
        return expit(z)

    def deriv(self, z):
        # subgradient 0 at the kink for relu and leaky_relu
        k = self.kind
        if k == "relu":
            return (z > 0).astype(float)
        if k == "leaky_relu":
            return np.where(z > 0, 1.0, np.where(z < 0, self.slope, 0.0))
        if k == "linear":
            return np.ones_like(z)
        if k == "power_relu":
            if self.u == 1.0:
                return (z > 0).astype(float)
            zp = np.maximum(z, 0.0)
            return np.where(z > 0, self.u * zp ** (self.u - 1.0), 0.0)
        s = expit(z)
        return s * (1.0 - s)

    def params(self):
        if self.kind == "leaky_relu":
            return {"slope": self.slope}
        if self.kind == "power_relu":
            return {"u": self.u}
        return {}


def relu():
    return Activation("relu")


def leaky_relu(slope=0.1):
    return Activation("leaky_relu", slope=slope)


def linear():
    return Activation("linear")


def power_relu(u=2.0):
    return Activation("power_relu", u=float(u))


def sigmoid():
    return Activation("sigmoid")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    activation: Activation
    in_dim: int
    out_dim: int
    norm_mode: str | None = None
    connection: str | None = None

    def __post_init__(self):
        if self.kind not in (NORMALIZED, UNNORMALIZED):
            raise InvalidSpec(f"unknown layer kind {self.kind!r}")
        if int(self.in_dim) != self.in_dim or int(self.out_dim) != self.out_dim:
            raise InvalidSpec("layer dimensions must be integers")
        if self.in_dim < 1 or self.out_dim < 1:
            raise InvalidSpec("layer dimensions must be positive")
        if self.kind == NORMALIZED:
            if self.norm_mode is None:
                object.__setattr__(self, "norm_mode", ROWWISE)
            if self.connection is None:
                object.__setattr__(self, "connection", PLAIN)
            if self.norm_mode not in (ROWWISE, FROBENIUS):
                raise InvalidSpec(f"unknown norm_mode {self.norm_mode!r}")
            if self.connection not in (PLAIN, RESIDUAL):
                raise InvalidSpec(f"unknown connection {self.connection!r}")
            if self.connection == RESIDUAL and self.in_dim != self.out_dim:
                raise InvalidSpec("residual layers need in_dim == out_dim")
        else:
            if self.activation.kind == "sigmoid":
                raise InvalidSpec("sigmoid is only allowed inside normalized layers")
            if self.norm_mode is not None or self.connection is not None:
                raise InvalidSpec("norm_mode/connection apply to normalized layers only")

    @property
    def shape(self):
        return (self.out_dim, self.in_dim)

    @property
    def size(self):
        return self.out_dim * self.in_dim

    def to_dict(self):
        return {
            "kind": self.kind,
            "activation": self.activation.kind,
            "params": self.activation.params(),
            "in": self.in_dim,
            "out": self.out_dim,
            "norm_mode": self.norm_mode,
            "connection": self.connection,
        }

    @classmethod
    def from_dict(cls, d):
        allowed = {"kind", "activation", "params", "in", "out", "norm_mode", "connection"}
        extra = set(d) - allowed
        if extra:
            raise InvalidSpec(f"unknown layer fields {sorted(extra)}")
        try:
            act = Activation(d["activation"], **(d.get("params") or {}))
            return cls(d["kind"], act, d["in"], d["out"], d.get("norm_mode"), d.get("connection"))
        except (KeyError, TypeError) as exc:
            raise InvalidSpec(f"malformed layer description: {exc}") from exc


def normalized(in_dim, out_dim, activation=None, norm_mode=ROWWISE, residual=False):
    act = activation if activation is not None else sigmoid()
    return LayerSpec(NORMALIZED, act, in_dim, out_dim, norm_mode, RESIDUAL if residual else PLAIN)


def unnormalized(in_dim, out_dim, activation=None):
    return LayerSpec(UNNORMALIZED, activation if activation is not None else relu(), in_dim, out_dim)


def _compute_degree(layers):
    # degree after each unnormalized layer: d <- u_act * d + 1, starting from 0
    d = 0.0
    for layer in layers:
        if layer.kind == UNNORMALIZED:
            d = layer.activation.degree * d + 1.0
    return d


class NetworkSpec:
    """Validated layer stack plus the flat-weight layout."""

    def __init__(self, layers, degree=None):
        layers = tuple(layers)
        if not layers:
            raise InvalidSpec("a network needs at least one layer")
        seen_unnorm = False
        for k, layer in enumerate(layers):
            if layer.kind == UNNORMALIZED:
                seen_unnorm = True
            elif seen_unnorm:
                raise InvalidSpec("normalized layers must precede all unnormalized layers")
            if k > 0 and layers[k - 1].out_dim != layer.in_dim:
                raise InvalidSpec(f"layer {k} expects input {layer.in_dim}, got {layers[k - 1].out_dim}")
        if not seen_unnorm:
            raise InvalidSpec("at least one unnormalized layer is required (degree would be 0)")
        if layers[-1].out_dim != 1:
            raise InvalidSpec("the last layer must have out_dim 1")
        computed = _compute_degree(layers)
        if degree is not None and abs(float(degree) - computed) > 1e-12 * max(1.0, computed):
            raise InvalidSpec(f"declared degree {degree} disagrees with layer structure ({computed})")
        self.layers = layers
        self.degree = computed
        self.shapes = tuple(layer.shape for layer in layers)
        sizes = [layer.size for layer in layers]
        self.offsets = tuple(int(o) for o in np.concatenate([[0], np.cumsum(sizes)]))
        self.n_params = self.offsets[-1]

    @property
    def input_dim(self):
        return self.layers[0].in_dim

    @property
    def has_kinks(self):
        return any(layer.activation.has_kink for layer in self.layers)

    def unflatten(self, w):
        w = np.asarray(w, dtype=float)
        if w.shape != (self.n_params,):
            raise DimensionMismatch(f"expected {self.n_params} weights, got shape {w.shape}")
        return [w[a:b].reshape(s) for a, b, s in zip(self.offsets[:-1], self.offsets[1:], self.shapes)]

    def flatten(self, mats):
        if len(mats) != len(self.layers):
            raise DimensionMismatch("wrong number of weight matrices")
        out = []
        for m, s in zip(mats, self.shapes):
            m = np.asarray(m, dtype=float)
            if m.shape != s:
                raise DimensionMismatch(f"matrix shape {m.shape} != {s}")
            out.append(m.ravel())
        return np.concatenate(out)

    def layer_slice(self, k):
        return slice(self.offsets[k], self.offsets[k + 1])

    def to_dict(self):
        return {"layers": [layer.to_dict() for layer in self.layers], "degree": self.degree}

    @classmethod
    def from_dict(cls, d):
        extra = set(d) - {"layers", "degree"}
        if extra:
            raise InvalidSpec(f"unknown network fields {sorted(extra)}")
        if "layers" not in d:
            raise InvalidSpec("network description needs 'layers'")
        return cls([LayerSpec.from_dict(x) for x in d["layers"]], d.get("degree"))

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def __eq__(self, other):
        return isinstance(other, NetworkSpec) and self.layers == other.layers

    def __hash__(self):
        return hash(self.layers)

    def __repr__(self):
        parts = [f"{l.kind[0].upper()}:{l.activation.kind}{l.shape}" for l in self.layers]
        return f"NetworkSpec(H={self.degree:g}, {' '.join(parts)})"


def mlp(input_dim=16, widths=(16, 16, 1), activation=None, front=None, front_norm=ROWWISE):
    """Unnormalized MLP, optionally preceded by one normalized layer.

    ``front`` is the activation of the normalized front layer (None = no front layer).
    The front layer maps input_dim -> input_dim.
    """
    act = activation if activation is not None else relu()
    layers = []
    if front is not None:
        layers.append(normalized(input_dim, input_dim, front, norm_mode=front_norm))
    prev = input_dim
    for width in widths:
        layers.append(unnormalized(prev, width, act))
        prev = width
    return NetworkSpec(layers)


def desk_network(input_dim=16, smooth=False):
    """Default lab network: sigmoid row-normalized front layer then an unnormalized tail.

    ``smooth=False``: three ReLU layers 16-16-1 (H=3).
    ``smooth=True``: two squared-ReLU layers 16-1, also H=3, continuously differentiable.
    """
    if smooth:
        return mlp(input_dim, (input_dim, 1), power_relu(2.0), front=sigmoid())
    return mlp(input_dim, (input_dim, input_dim, 1), relu(), front=sigmoid())


def _as_batch(spec, x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise DimensionMismatch(f"input dimension {X.shape[-1]} != {spec.input_dim}")
    return X, single


def _normalize(W, mode):
    if mode == FROBENIUS:
        nrm = math.sqrt(float(np.sum(W * W)))
        if nrm < ZERO_NORM:
            raise ZeroNormalizedLayer("normalized layer has zero Frobenius norm")
        return W / nrm, nrm
    nrm = np.sqrt(np.sum(W * W, axis=1))
    if np.min(nrm) < ZERO_NORM:
        raise ZeroNormalizedLayer("normalized layer has a zero row")
    return W / nrm[:, None], nrm


def _forward(spec, mats, X):
    a = X
    cache = []
    for layer, W in zip(spec.layers, mats):
        s = layer.activation(a)
        if layer.kind == NORMALIZED:
            M, scale = _normalize(W, layer.norm_mode)
            z = s @ M.T
            if layer.connection == RESIDUAL:
                z = z + a
        else:
            M, scale = W, None
            z = s @ M.T
        cache.append((a, s, M, scale))
        a = z
    return a[:, 0], cache


def _backward(spec, cache, coef, per_sample):
    G = np.asarray(coef, dtype=float)[:, None]
    n_layers = len(spec.layers)
    grads = [None] * n_layers
    for k in range(n_layers - 1, -1, -1):
        layer = spec.layers[k]
        a, s, M, scale = cache[k]
        if per_sample:
            dM = G[:, :, None] * s[:, None, :]
        else:
            dM = G.T @ s
        if layer.kind == NORMALIZED:
            # quotient rule: d(W/|W|) projected off the normalized direction
            if layer.norm_mode == FROBENIUS:
                if per_sample:
                    inner = np.einsum("moi,oi->m", dM, M)
                    dM = (dM - inner[:, None, None] * M) / scale
                else:
                    dM = (dM - np.sum(dM * M) * M) / scale
            else:
                inner = np.sum(dM * M, axis=-1)
                dM = (dM - inner[..., None] * M) / scale[:, None]
        grads[k] = dM
        if k > 0:
            da = (G @ M) * layer.activation.deriv(a)
            if layer.kind == NORMALIZED and layer.connection == RESIDUAL:
                da = da + G
            G = da
    if per_sample:
        m = G.shape[0]
        return np.concatenate([g.reshape(m, -1) for g in grads], axis=1)
    return np.concatenate([g.ravel() for g in grads])


def forward(spec, w, x):
    """Network output Phi(w; x). ``x`` may be one input (returns float) or a batch (returns array)."""
    X, single = _as_batch(spec, x)
    out, _ = _forward(spec, spec.unflatten(w), X)
    return float(out[0]) if single else out


def grad(spec, w, x):
    """Exact gradient of Phi with respect to the flat weights.

    One input gives a vector of length n_params; a batch of m inputs gives an
    (m, n_params) array of per-sample gradients.
    """
    X, single = _as_batch(spec, x)
    _, cache = _forward(spec, spec.unflatten(w), X)
    g = _backward(spec, cache, np.ones(X.shape[0]), per_sample=not single)
    return g


def value_and_grad(spec, w, x):
    X, single = _as_batch(spec, x)
    out, cache = _forward(spec, spec.unflatten(w), X)
    g = _backward(spec, cache, np.ones(X.shape[0]), per_sample=not single)
    return (float(out[0]), g) if single else (out, g)


def weighted_grad(spec, w, X, coef):
    """Sum over the batch of coef_m * dPhi(w; x_m)/dw, without materialising per-sample gradients."""
    X, single = _as_batch(spec, X)
    coef = np.atleast_1d(np.asarray(coef, dtype=float))
    if coef.shape != (X.shape[0],):
        raise DimensionMismatch("coefficient vector must match the batch size")
    out, cache = _forward(spec, spec.unflatten(w), X)
    return out, _backward(spec, cache, coef, per_sample=False)


def forward_with_grads(spec, w, X, coef_fn):
    """Forward on a batch, then per-sample gradients scaled by coef_fn(outputs)."""
    X, _ = _as_batch(spec, X)
    out, cache = _forward(spec, spec.unflatten(w), X)
    coef = coef_fn(out)
    return out, coef, _backward(spec, cache, coef, per_sample=True)


def kink_pattern(spec, w, X):
    """Boolean signature of kinked pre-activations; equal signatures mean one smooth piece."""
    X, _ = _as_batch(spec, X)
    _, cache = _forward(spec, spec.unflatten(w), X)
    parts = []
    for layer, (a, _s, _M, _scale) in zip(spec.layers, cache):
        if layer.activation.has_kink:
            parts.append(a > 0)
            parts.append(a < 0)
    if not parts:
        return np.zeros((X.shape[0], 0), dtype=bool)
    return np.concatenate(parts, axis=1)


@dataclass
class HomogeneityReport:
    max_rel_error: float
    per_scale: dict


def verify_homogeneity(spec, w, x, scales):
    """Worst relative error of Phi(c w; x) against c^H Phi(w; x) over the given scales."""
    scales = list(scales)
    if not scales or any(not c > 0 for c in scales):
        raise ValueError("scales must be a nonempty list of positive numbers")
    w = np.asarray(w, dtype=float)
    base = np.atleast_1d(forward(spec, w, x))
    per = {}
    for c in scales:
        scaled = np.atleast_1d(forward(spec, c * w, x))
        target = c**spec.degree * base
        err = np.abs(scaled - target) / (np.abs(target) + EPS_ABS)
        per[float(c)] = float(np.max(err))
    return HomogeneityReport(max(per.values()), per)


def euler_rel_error(spec, w, x):
    """|w . grad Phi - H Phi| / (|H Phi| + eps) for one input."""
    val, g = value_and_grad(spec, w, x)
    target = spec.degree * val
    return abs(float(np.dot(w, g)) - target) / (abs(target) + EPS_ABS)


def init_weights(n_params, rng):
    """Gaussian weights rescaled to unit Euclidean norm."""
    w = rng.standard_normal(n_params)
    return w / np.linalg.norm(w)
