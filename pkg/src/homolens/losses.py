"""Losses on weights and on the unit sphere, plus estimators of landscape constants.

Network losses act on the scalar output z = Phi(w; x):

* max_margin        l(z) = max(-y z, 0)
* power_max_margin  l(z) = max(-y z, 0)^u
* hinge             l(z) = max(0, 1 - y z)

``example1`` ignores data and the network and is a function of the weight
vector itself: l(w) = (w_1^2 + 2 sum_{i>=2} w_i^2)^(degree/2).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from . import homognet as hn
from .errors import DimensionMismatch, InvalidSpec, UndefinedRatio, ZeroWeightNorm

ZERO_WEIGHT = 1e-150
# a minimized sphere loss this small relative to the sup counts as a zero floor
ZERO_BAYES_REL = 1e-3
_KINDS = ("max_margin", "power_max_margin", "hinge", "example1")


@dataclass(frozen=True)
class LossKind:
    name: str
    u: float = 1.0
    dim: int = 2
    degree: float = 3.0

    def __post_init__(self):
        if self.name not in _KINDS:
            raise InvalidSpec(f"unknown loss {self.name!r}")
        if self.name == "power_max_margin" and not self.u >= 1.0:
            raise InvalidSpec("power_max_margin needs u >= 1")
        if self.name == "example1" and (self.dim < 2 or not self.degree >= 2.0):
            raise InvalidSpec("example1 needs dim >= 2 and degree >= 2")

    @classmethod
    def max_margin(cls):
        return cls("max_margin")

    @classmethod
    def power_max_margin(cls, u=2.0):
        return cls("power_max_margin", u=float(u))

    @classmethod
    def hinge(cls):
        return cls("hinge")

    @classmethod
    def example1(cls, dim=2, degree=3.0):
        return cls("example1", dim=int(dim), degree=float(degree))

    @property
    def uses_network(self):
        return self.name != "example1"

    @property
    def outer_degree(self):
        """Homogeneity degree of z -> l(z) (k2 in the alignment-ratio analysis); None for hinge."""
        if self.name == "hinge":
            return None
        if self.name == "power_max_margin":
            return self.u
        return 1.0

    @property
    def smooth(self):
        return self.name == "example1" or (self.name == "power_max_margin" and self.u >= 2.0)

    def to_dict(self):
        d = {"kind": self.name}
        if self.name == "power_max_margin":
            d["u"] = self.u
        if self.name == "example1":
            d.update(dim=self.dim, degree=self.degree)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        name = d.pop("kind")
        extra = set(d) - {"u", "dim", "degree"}
        if extra:
            raise InvalidSpec(f"unknown loss fields {sorted(extra)}")
        return cls(name, **d)


def outer(kind, z, y):
    """Loss l(z) and derivative l'(z) for network losses; derivative is 0 at the kink."""
    z = np.asarray(z, dtype=float)
    y = np.asarray(y, dtype=float)
    if kind.name == "hinge":
        r = 1.0 - y * z
    else:
        r = -y * z
    active = r > 0
    rp = np.where(active, r, 0.0)
    if kind.name == "power_max_margin" and kind.u != 1.0:
        val = rp**kind.u
        dval = np.where(active, -y * kind.u * rp ** (kind.u - 1.0), 0.0)
    else:
        val = rp
        dval = np.where(active, -y, 0.0)
    return val, dval


# ---------------------------------------------------------------- example1


def _ex1_weights(dim):
    a = np.full(dim, 2.0)
    a[0] = 1.0
    return a


def example1_value(w, degree=3.0):
    """Works on one vector or on rows of a 2-D array."""
    w = np.asarray(w, dtype=float)
    q = np.sum(_ex1_weights(w.shape[-1]) * w * w, axis=-1)
    return q ** (degree / 2.0)


def example1_grad(w, degree=3.0):
    w = np.asarray(w, dtype=float)
    a = _ex1_weights(w.shape[-1])
    q = np.sum(a * w * w, axis=-1)
    p = degree / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        coef = np.where(q > 0, 2.0 * p * q ** (p - 1.0), 0.0)
    return np.asarray(coef)[..., None] * (a * w) if w.ndim > 1 else coef * (a * w)


def example1_hessian(v, degree=3.0):
    v = np.asarray(v, dtype=float)
    a = _ex1_weights(v.shape[0])
    q = float(np.sum(a * v * v))
    p = degree / 2.0
    av = a * v
    return 2 * p * q ** (p - 1) * np.diag(a) + 4 * p * (p - 1) * q ** (p - 2) * np.outer(av, av)


def example1_excess(w, degree=3.0):
    """l(w/|w|) - 1 computed without cancellation (the minimum on the sphere is 1)."""
    w = np.asarray(w, dtype=float)
    tail = np.sum(w[..., 1:] ** 2, axis=-1)
    s = tail / np.sum(w * w, axis=-1)
    return np.expm1((degree / 2.0) * np.log1p(s))


def example1_pl_constant(degree=3.0):
    """inf over the sphere of |grad l|^2 / (2 (l - 1)); attained on the far axis for degree 3."""
    p = degree / 2.0

    def ratio(s):
        g2 = 4 * p * p * (1 + s) ** (2 * p - 2) * (1 + 3 * s)
        return 0.5 * g2 / math.expm1(p * math.log1p(s))

    res = minimize_scalar(ratio, bounds=(1e-6, 1.0), method="bounded", options={"xatol": 1e-12})
    return float(min(res.fun, ratio(1.0)))


# ---------------------------------------------------------------- per-sample losses


def _check_sample(kind, spec, w, sample):
    w = np.asarray(w, dtype=float)
    if not kind.uses_network:
        if w.shape != (kind.dim,):
            raise DimensionMismatch(f"example1 expects {kind.dim} weights, got {w.shape}")
        return w, None, None
    if spec is None:
        raise InvalidSpec("network losses need a NetworkSpec")
    x, y = sample
    if y not in (-1, 1, -1.0, 1.0):
        raise ValueError("labels must be -1 or +1")
    return w, np.asarray(x, dtype=float), float(y)


def loss_value(kind, spec, w, sample=None):
    w, x, y = _check_sample(kind, spec, w, sample)
    if x is None:
        return float(example1_value(w, kind.degree))
    val, _ = outer(kind, hn.forward(spec, w, x), y)
    return float(val)


def loss_grad(kind, spec, w, sample=None):
    w, x, y = _check_sample(kind, spec, w, sample)
    if x is None:
        return example1_grad(w, kind.degree)
    z, g = hn.value_and_grad(spec, w, x)
    _, d = outer(kind, z, y)
    return float(d) * g


def _unit(w):
    w = np.asarray(w, dtype=float)
    nrm = float(np.linalg.norm(w))
    if nrm < ZERO_WEIGHT:
        raise ZeroWeightNorm(f"weight norm {nrm:.3g} too small to project onto the sphere")
    return w / nrm, nrm


def sphere_loss(kind, spec, w, dataset=None):
    """Empirical loss at v = w/|w| averaged over the dataset."""
    v, _ = _unit(w)
    if not kind.uses_network:
        return float(example1_value(v, kind.degree))
    z = hn.forward(spec, v, dataset.X)
    val, _ = outer(kind, z, dataset.y)
    return float(np.mean(val))


def sphere_pop_loss(kind, spec, w, sampler, n_mc, rng):
    """Monte-Carlo population loss at v = w/|w|; returns (mean, standard error)."""
    v, _ = _unit(w)
    if not kind.uses_network:
        return float(example1_value(v, kind.degree)), 0.0
    data = sampler.sample(n_mc, rng)
    val, _ = outer(kind, hn.forward(spec, v, data.X), data.y)
    se = float(np.std(val, ddof=1) / math.sqrt(n_mc)) if n_mc > 1 else float("nan")
    return float(np.mean(val)), se


def rho_ratio(kind, spec, w, sample=None):
    """l'(Phi(w)) / l'(Phi(w/|w|)); raises UndefinedRatio when the denominator vanishes."""
    w, x, y = _check_sample(kind, spec, w, sample)
    if x is None:
        return 1.0
    v, nrm = _unit(w)
    _, dw = outer(kind, hn.forward(spec, w, x), y)
    _, dv = outer(kind, hn.forward(spec, v, x), y)
    if float(dv) == 0.0:
        raise UndefinedRatio("loss derivative vanishes at the unit-norm point")
    if kind.name == "max_margin" and float(dw) != 0.0:
        return 1.0
    return float(dw) / float(dv)


# ---------------------------------------------------------------- training context


class LossContext:
    """A loss bound to a network and a training dataset; the object SGD works against."""

    def __init__(self, kind, spec=None, dataset=None):
        if kind.uses_network:
            if spec is None or dataset is None:
                raise InvalidSpec("network losses need a spec and a dataset")
            if dataset.X.shape[1] != spec.input_dim:
                raise DimensionMismatch("dataset dimension does not match the network input")
        self.kind = kind
        self.spec = spec
        self.dataset = dataset
        if kind.uses_network:
            self.H = spec.degree
            self.n_params = spec.n_params
            self.n = dataset.n
        else:
            self.H = kind.degree
            self.n_params = kind.dim
            self.n = dataset.n if dataset is not None else 1
        k2 = kind.outer_degree
        self.euler_degree = None if k2 is None else (self.H * k2 if kind.uses_network else self.H)

    def with_dataset(self, dataset):
        return LossContext(self.kind, self.spec, dataset)

    def sample_step_terms(self, w, i, w_norm):
        """Gradient at w for sample i, the loss at v = w/|w|, and the alignment ratio.

        Returns (grad_w, loss_at_v, rho, rho_defined).
        """
        kind = self.kind
        if not kind.uses_network:
            g = example1_grad(w, kind.degree)
            return g, float(example1_value(w / w_norm, kind.degree)), 1.0, True
        x = self.dataset.X[i]
        y = self.dataset.y[i]
        z, gphi = hn.value_and_grad(self.spec, w, x)
        z_v = z / w_norm**self.H
        val_v, d_v = outer(kind, z_v, y)
        _, d_w = outer(kind, z, y)
        d_w = float(d_w)
        d_v = float(d_v)
        if kind.name == "max_margin":
            rho, ok = 1.0, True
        elif d_v != 0.0:
            rho, ok = d_w / d_v, True
        else:
            rho, ok = 1.0, False
        return d_w * gphi, float(val_v), rho, ok

    def value_grad_at(self, v, i):
        """Per-sample loss and gradient at an arbitrary point (used on the sphere)."""
        if not self.kind.uses_network:
            return float(example1_value(v, self.kind.degree)), example1_grad(v, self.kind.degree)
        z, g = hn.value_and_grad(self.spec, v, self.dataset.X[i])
        val, d = outer(self.kind, z, self.dataset.y[i])
        return float(val), float(d) * g

    def all_grads(self, w):
        """Per-sample losses (n,) and gradients (n, P) at w for every training sample."""
        if not self.kind.uses_network:
            return np.atleast_1d(example1_value(w, self.kind.degree)), example1_grad(w, self.kind.degree)[None, :]
        y = self.dataset.y
        out, coef, G = hn.forward_with_grads(self.spec, w, self.dataset.X, lambda z: outer(self.kind, z, y)[1])
        val, _ = outer(self.kind, out, y)
        return val, G

    def sphere_loss(self, w):
        return sphere_loss(self.kind, self.spec, w, self.dataset)


# ---------------------------------------------------------------- constants


@dataclass
class ConstantsEstimate:
    sigma_bar_sq: float
    sigma_lower_sq: float
    lipschitz_L: float
    smooth_beta: float
    approx_gamma: float
    method: str
    samples: int | None = None
    seed: int | None = None
    flags: tuple = ()
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.sigma_lower_sq > self.sigma_bar_sq:
            # finite-sample artefact: the minimiser was evaluated on a fresh sample
            self.flags = tuple(self.flags) + ("lower_above_upper",)

    def tag(self):
        if self.method == "analytic":
            return {"method": "Analytic"}
        return {"method": "MonteCarlo", "samples": self.samples, "seed": self.seed}

    def to_dict(self):
        direction = {
            "sigma_bar_sq": "lower estimate of a supremum",
            "sigma_lower_sq": "upper estimate of an infimum",
            "lipschitz_L": "lower estimate of a supremum",
            "smooth_beta": "lower estimate of a supremum",
            "approx_gamma": "lower estimate of a supremum",
        }
        out = {}
        for key, note in direction.items():
            entry = {"value": float(getattr(self, key))}
            entry.update(self.tag())
            if self.method != "analytic":
                entry["direction"] = note
            out[key] = entry
        out["flags"] = list(self.flags)
        out["extras"] = {k: float(v) for k, v in self.extras.items()}
        return out


def example1_constants(dim=2, degree=3.0):
    """Closed-form landscape constants of the example1 loss on the unit sphere."""
    p = degree / 2.0
    return ConstantsEstimate(
        sigma_bar_sq=2.0**p,
        sigma_lower_sq=1.0,
        lipschitz_L=p * 2.0 ** (p + 1),
        smooth_beta=p * 2.0 ** (p + 1) + p * (p - 1) * 2.0 ** (p + 2),
        approx_gamma=0.0,
        method="analytic",
        extras={"mu": example1_pl_constant(degree), "B": 1.0},
    )


def _random_unit(rng, n, dim):
    V = rng.standard_normal((n, dim))
    return V / np.linalg.norm(V, axis=1, keepdims=True)


def _tangent_pgd(f_and_g, v0, iters, step0=1.0):
    """Projected gradient descent on the unit sphere with Armijo backtracking."""
    v = v0 / np.linalg.norm(v0)
    f, g = f_and_g(v)
    step = step0
    for _ in range(iters):
        gt = g - np.dot(g, v) * v
        gn2 = float(np.dot(gt, gt))
        if gn2 == 0.0:
            break
        accepted = False
        for _ in range(30):
            cand = v - step * gt
            cand /= np.linalg.norm(cand)
            fc, gc = f_and_g(cand)
            if fc <= f - 1e-4 * step * gn2:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        v, f, g = cand, fc, gc
        step *= 1.5
    return v, f


def _estimate_example1_mc(kind, n_probe, seed, n_starts, pgd_iters, power_iters, h):
    rng = np.random.default_rng(seed)
    deg = kind.degree
    V = _random_unit(rng, n_probe, kind.dim)
    vals = example1_value(V, deg)
    grads = example1_grad(V, deg)
    U = _random_unit(rng, n_probe, kind.dim)
    for _ in range(power_iters):
        HU = (example1_grad(V + h * U, deg) - example1_grad(V - h * U, deg)) / (2 * h)
        U = HU / np.linalg.norm(HU, axis=1, keepdims=True)
    ratios = np.linalg.norm(example1_grad(V + h * U, deg) - grads, axis=1) / h

    def fg(v):
        return float(example1_value(v, deg)), example1_grad(v, deg)

    best = math.inf
    for v0 in _random_unit(rng, n_starts, kind.dim):
        _, fv = _tangent_pgd(fg, v0, pgd_iters)
        best = min(best, fv)
    return ConstantsEstimate(
        sigma_bar_sq=float(np.max(vals)),
        sigma_lower_sq=float(best),
        lipschitz_L=float(np.max(np.linalg.norm(grads, axis=1))),
        smooth_beta=float(np.max(ratios)),
        approx_gamma=0.0,
        method="monte_carlo",
        samples=int(n_probe),
        seed=int(seed),
    )


def _pattern(kind, spec, w, X, y):
    """Kink signature of network and loss; constant on each smooth piece."""
    pat = hn.kink_pattern(spec, w, X)
    if kind.smooth:
        return pat
    z = hn.forward(spec, w, X)
    r = (1.0 - y * z) if kind.name == "hinge" else (-y * z)
    return np.concatenate([pat, (r > 0)[:, None], (r < 0)[:, None]], axis=1)


def estimate_constants(kind, spec=None, sampler=None, n_probe=256, seed=0, *, method="monte_carlo",
                       batch=32, n_starts=16, pgd_iters=100, n_mc=2048, power_iters=6,
                       h=1e-5, kink_step=0.05, extra_probes=None, extra_starts=None):
    """Estimate the sphere-landscape constants of a loss.

    sigma_bar_sq, lipschitz_L: maxima over random sphere probes (each paired with a
    data batch). smooth_beta: maximum gradient-difference ratio over close probe
    pairs, with the pair direction refined by power iteration on finite-difference
    Hessian-vector products and pairs that cross a kink discarded.
    approx_gamma: 0 for smooth losses, otherwise the largest gradient jump beyond
    the smooth part seen across kink-crossing pairs. sigma_lower_sq: best
    held-out Monte-Carlo population loss reached by multi-start projected
    gradient descent on the sphere.
    """
    if n_probe < 1:
        raise ValueError("n_probe must be >= 1")
    if not kind.uses_network:
        if method == "analytic":
            return example1_constants(kind.dim, kind.degree)
        return _estimate_example1_mc(kind, n_probe, seed, n_starts, pgd_iters, power_iters, h)
    if spec is None or sampler is None:
        raise InvalidSpec("network losses need a spec and a data sampler")

    rng = np.random.default_rng(seed)
    P = spec.n_params
    probes = list(_random_unit(rng, n_probe, P))
    if extra_probes is not None:
        probes += [np.asarray(v) / np.linalg.norm(v) for v in extra_probes]

    def coef_of(y):
        return lambda z: outer(kind, z, y)[1]

    sig_bar = 0.0
    lip = 0.0
    beta = 0.0
    crossings = []
    for v in probes:
        data = sampler.sample(batch, rng)
        out, coef, G = hn.forward_with_grads(spec, v, data.X, coef_of(data.y))
        vals, _ = outer(kind, out, data.y)
        sig_bar = max(sig_bar, float(np.max(vals)))
        gnorm = np.linalg.norm(G, axis=1)
        lip = max(lip, float(np.max(gnorm)))

        # smoothness ratio along a power-iterated direction for the worst sample
        j = int(np.argmax(vals + gnorm))
        xj, yj = data.X[j:j + 1], data.y[j:j + 1]
        base_pat = _pattern(kind, spec, v, xj, yj)

        def g_at(p):
            return hn.forward_with_grads(spec, p, xj, coef_of(yj))[2][0]

        u = rng.standard_normal(P)
        u /= np.linalg.norm(u)
        smooth_piece = True
        for _ in range(power_iters):
            plus, minus = v + h * u, v - h * u
            if not (np.array_equal(_pattern(kind, spec, plus, xj, yj), base_pat)
                    and np.array_equal(_pattern(kind, spec, minus, xj, yj), base_pat)):
                smooth_piece = False
                break
            hu = (g_at(plus) - g_at(minus)) / (2 * h)
            nrm = np.linalg.norm(hu)
            if nrm == 0.0:
                break
            u = hu / nrm
        pair = v + h * u
        if smooth_piece and np.array_equal(_pattern(kind, spec, pair, xj, yj), base_pat):
            beta = max(beta, float(np.linalg.norm(g_at(pair) - G[j]) / h))

        if not kind.smooth:
            d = rng.standard_normal(P)
            d *= kink_step / np.linalg.norm(d)
            far = v + d
            _, _, G2 = hn.forward_with_grads(spec, far, data.X, coef_of(data.y))
            crossed = np.any(_pattern(kind, spec, far, data.X, data.y)
                             != _pattern(kind, spec, v, data.X, data.y), axis=1)
            if np.any(crossed):
                crossings.append(np.linalg.norm(G2[crossed] - G[crossed], axis=1))

    gamma = 0.0
    if not kind.smooth and crossings:
        jumps = np.concatenate(crossings) - beta * kink_step
        gamma = float(max(0.0, np.max(jumps)) / 2.0)

    fit = sampler.sample(n_mc, rng)
    held = sampler.sample(n_mc, rng)

    def fg(v):
        out, cache = hn._forward(spec, spec.unflatten(v), fit.X)
        val, d = outer(kind, out, fit.y)
        g = hn._backward(spec, cache, d / fit.n, per_sample=False)
        return float(np.mean(val)), g

    starts = list(_random_unit(rng, n_starts, P))
    if extra_starts is not None:
        starts += [np.asarray(s, dtype=float) for s in extra_starts]
    finals = []
    for v0 in starts:
        v_end, _ = _tangent_pgd(fg, v0, pgd_iters)
        hv, _ = outer(kind, hn.forward(spec, v_end, held.X), held.y)
        finals.append(float(np.mean(hv)))
    sig_low = float(min(finals))

    flags = []
    if sig_low <= ZERO_BAYES_REL * sig_bar:
        flags.append("zero_bayes")
    return ConstantsEstimate(
        sigma_bar_sq=sig_bar,
        sigma_lower_sq=sig_low,
        lipschitz_L=lip,
        smooth_beta=beta,
        approx_gamma=gamma,
        method="monte_carlo",
        samples=int(len(probes) * batch),
        seed=int(seed),
        flags=tuple(flags),
        extras={"pgd_spread": float(max(finals) - min(finals))},
    )
