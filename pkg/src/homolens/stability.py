"""Coupled-trajectory stability measurements and closed-form generalization bounds."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from . import dynamics as dyn
from .errors import IndexOutOfRange, InvalidConstants
from .losses import LossContext, outer
from . import homognet as hn
from .parallel import parallel_map

MAX_INDEX_SUBSAMPLE = 32


# ---------------------------------------------------------------- coupling


def make_neighbor(dataset, i, task, rng):
    """Copy of dataset with sample i replaced by a fresh draw from task."""
    if not 0 <= i < dataset.n:
        raise IndexOutOfRange(f"index {i} outside [0, {dataset.n})")
    fresh = task.sample(1, rng)
    return dataset.replaced(i, fresh.X[0], fresh.y[0])


def conditional_stream(n, T, t0, i, rng):
    """Index stream whose first t0 draws avoid i (uniform on the other n-1), rest uniform on [0, n)."""
    t0 = int(min(t0, T))
    if t0 > 0 and n < 2:
        raise ValueError("conditioning needs n >= 2")
    head = rng.integers(0, n - 1, size=t0) if t0 else np.empty(0, dtype=np.int64)
    head = head + (head >= i)
    tail = rng.integers(0, n, size=T - t0)
    return np.concatenate([head, tail]).astype(np.int64)


@dataclass
class CoupledRun:
    i: int
    seed: int | None
    t0: int
    probe_t: np.ndarray
    delta: np.ndarray
    v_T: np.ndarray
    v_T_prime: np.ndarray
    w_T: np.ndarray = None
    w_T_prime: np.ndarray = None

    @property
    def delta_T(self):
        return float(np.linalg.norm(self.v_T - self.v_T_prime))

    @property
    def delta_T_sq(self):
        d = self.v_T - self.v_T_prime
        return float(np.dot(d, d))


def run_coupled(ctx, ctx_prime, w0, schedule, T, i, t0=0, seed=None, *, indices=None, probe_every=None):
    """Train on S and S^(i) in lockstep with one shared index stream and one w0."""
    if not 0 <= t0 <= T:
        raise ValueError("need 0 <= t0 <= T")
    if indices is None:
        indices = conditional_stream(ctx.n, T, t0, i, np.random.default_rng(seed))
    probes = set(dyn.probe_schedule(T, probe_every).tolist())
    w = np.array(w0, dtype=float)
    wp = w.copy()
    pt, dl = [], []
    for t in range(T + 1):
        if t in probes:
            d = w / np.linalg.norm(w) - wp / np.linalg.norm(wp)
            pt.append(t)
            dl.append(math.sqrt(float(np.dot(d, d))))
        if t == T:
            break
        j = int(indices[t])
        w = dyn._advance(w, t, ctx, schedule, j)[0]
        wp = dyn._advance(wp, t, ctx_prime, schedule, j)[0]
    return CoupledRun(int(i), seed, int(t0), np.array(pt), np.array(dl), w / np.linalg.norm(w),
                      wp / np.linalg.norm(wp), w, wp)


@dataclass
class Estimate:
    value: float
    stderr: float
    samples: np.ndarray = field(default=None, repr=False)
    extras: dict = field(default_factory=dict)


def _mean_se(x):
    x = np.asarray(x, dtype=float)
    if x.size < 2:
        return float(x.mean()), math.nan
    return float(math.fsum(x) / x.size), float(np.std(x, ddof=1) / math.sqrt(x.size))


@dataclass(frozen=True)
class _StabilityJob:
    task: object
    kind: object
    spec: object
    schedule: object
    n: int
    T: int
    t0: int
    seed: int
    replica: int
    max_indices: int


def _stability_replica(job):
    rng = dyn.replica_rng(job.seed, job.replica)
    S = job.task.sample(job.n, rng)
    ctx = LossContext(job.kind, job.spec, S)
    w0 = hn.init_weights(ctx.n_params, rng)
    k = min(job.n, job.max_indices)
    idx = rng.choice(job.n, size=k, replace=False) if k < job.n else np.arange(job.n)
    out = np.empty(k)
    for a, i in enumerate(idx):
        Sp = make_neighbor(S, int(i), job.task, rng)
        stream = conditional_stream(job.n, job.T, job.t0, int(i), rng)
        run = run_coupled(ctx, ctx.with_dataset(Sp), w0, job.schedule, job.T, int(i), job.t0,
                          indices=stream, probe_every=0)
        out[a] = run.delta_T_sq
    return out


def conditional_on_avg_stability(task, kind, spec, schedule, n, T, t0, replicas, seed, *,
                                 max_indices=MAX_INDEX_SUBSAMPLE, workers=None):
    """Average of |v_T - v_T^(i)|^2 given that i is not drawn during the first t0 steps.

    Each replica draws its own dataset, initialization and index subsample; the
    stderr is taken across replica means, so it covers both levels of sampling.
    """
    if replicas < 1:
        raise ValueError("replicas must be >= 1")
    jobs = [_StabilityJob(task, kind, spec, schedule, n, T, t0, seed, r, max_indices) for r in range(replicas)]
    per = parallel_map(_stability_replica, jobs, workers)
    means = np.array([p.mean() for p in per])
    if replicas >= 2:
        val, se = _mean_se(means)
    else:
        val, se = _mean_se(per[0])
        val = float(means[0])
    return Estimate(val, se, np.concatenate(per), {"n": n, "T": T, "t0": t0, "replicas": replicas})


@dataclass(frozen=True)
class _GapJob:
    task: object
    kind: object
    spec: object
    schedule: object
    n: int
    T: int
    heldout: int
    seed: int
    replica: int
    twin: bool = True


def _gap_replica(job):
    rng = dyn.replica_rng(job.seed, job.replica)
    S = job.task.sample(job.n, rng)
    Q = job.task.sample(job.heldout, rng)
    ctx = LossContext(job.kind, job.spec, S)
    test = ctx.with_dataset(Q)
    w0 = hn.init_weights(ctx.n_params, rng)
    g0 = test.sphere_loss(w0) - ctx.sphere_loss(w0)
    stream = rng.integers(0, job.n, size=job.T)
    rec = dyn.run_trajectory(w0, ctx, job.schedule, job.T, indices=stream, probe_every=0)
    tr = ctx.sphere_loss(rec.w_final)
    te = test.sphere_loss(rec.w_final)
    twin = np.nan
    if job.twin:
        # same w0 and stream on an independent dataset: its gap on S has mean exactly 0
        S2 = job.task.sample(job.n, rng)
        rec2 = dyn.run_trajectory(w0, ctx.with_dataset(S2), job.schedule, job.T, indices=stream, probe_every=0)
        twin = test.sphere_loss(rec2.w_final) - ctx.sphere_loss(rec2.w_final)
    return te - tr, g0, tr, te, twin


def empirical_gap(task, kind, spec, schedule, n, T, replicas, seed, heldout_size=None, *, twin=True,
                  workers=None):
    """Held-out minus training sphere loss at v_T, averaged over replicas.

    With twin=True each replica also trains a twin (same w0 and index stream) on
    an independent dataset; the twin's held-out minus S-training loss has mean
    exactly 0, so subtracting it leaves the mean unchanged and cancels most of
    the dataset sampling noise. ``value`` is then the adjusted estimate and
    extras["raw"] the plain one. extras["gap0"] is the gap at the initialization.
    """
    heldout = 50 * n if heldout_size is None else int(heldout_size)
    jobs = [_GapJob(task, kind, spec, schedule, n, T, heldout, seed, r, twin) for r in range(replicas)]
    res = np.array(parallel_map(_gap_replica, jobs, workers))
    raw, raw_se = _mean_se(res[:, 0])
    g0, g0se = _mean_se(res[:, 1])
    extras = {"raw": raw, "raw_stderr": raw_se, "gap0": g0, "gap0_stderr": g0se, "train": res[:, 2],
              "test": res[:, 3], "n": n, "T": T, "heldout": heldout}
    if twin:
        adj = res[:, 0] - res[:, 4]
        val, se = _mean_se(adj)
        return Estimate(val, se, adj, extras)
    return Estimate(raw, raw_se, res[:, 0], extras)


# ---------------------------------------------------------------- recursion check


def next_states_all(ctx, schedule, w, t):
    """Weights after step t for every possible sample index, shape (n, P)."""
    norm = float(np.linalg.norm(w))
    _, G = ctx.all_grads(w)
    if ctx.kind.uses_network:
        z = hn.forward(ctx.spec, w, ctx.dataset.X)
        _, dw = outer(ctx.kind, z, ctx.dataset.y)
        _, dv = outer(ctx.kind, z / norm**ctx.H, ctx.dataset.y)
        if ctx.kind.name == "max_margin":
            rho = np.ones_like(z)
        else:
            with np.errstate(divide="ignore", invalid="ignore"):
                rho = np.where(dv != 0, dw / dv, 1.0)
            rho = np.where(rho > 0, rho, 1.0)
    else:
        rho = np.ones(G.shape[0])
    eta = np.array([schedule.realize(t, norm, r)[0] for r in rho])
    return w[None, :] - eta[:, None] * G


@dataclass
class RecursionTrace:
    t: np.ndarray
    delta_sq: np.ndarray
    expected_next: np.ndarray
    rhs: np.ndarray


def recursion_trace(ctx, ctx_prime, w0, schedule, T, i, t0, consts, seed=None, *, t_max=None, indices=None):
    """Exact E_I |v_(t+1) - v'_(t+1)|^2 (enumerating all n indices) against the one-step divergence recursion.

    For each t in (t0, t_max) returns Delta_t^2, the exact next-step mean, and
    exp(m1'/(t+2) + 1/T) Delta_t^2 + m2' (1 + T/n) / (n (t+2)^2).
    """
    t_max = T if t_max is None else min(T, t_max)
    if indices is None:
        indices = conditional_stream(ctx.n, T, t0, i, np.random.default_rng(seed))
    w = np.array(w0, dtype=float)
    wp = w.copy()
    ts, d2, en, rhs = [], [], [], []
    m1p, m2p, n = consts.m1p, consts.m2p, ctx.n
    for t in range(t_max):
        if t > t0:
            A = next_states_all(ctx, schedule, w, t)
            B = next_states_all(ctx_prime, schedule, wp, t)
            A /= np.linalg.norm(A, axis=1, keepdims=True)
            B /= np.linalg.norm(B, axis=1, keepdims=True)
            d = w / np.linalg.norm(w) - wp / np.linalg.norm(wp)
            dsq = float(np.dot(d, d))
            ts.append(t)
            d2.append(dsq)
            en.append(float(np.mean(np.sum((A - B) ** 2, axis=1))))
            rhs.append(math.exp(m1p / (t + 2) + 1.0 / T) * dsq + m2p * (1 + T / n) / (n * (t + 2) ** 2))
        j = int(indices[t])
        w = dyn._advance(w, t, ctx, schedule, j)[0]
        wp = dyn._advance(wp, t, ctx_prime, schedule, j)[0]
    return RecursionTrace(np.array(ts), np.array(d2), np.array(en), np.array(rhs))


# ---------------------------------------------------------------- bounds


@dataclass(frozen=True)
class BoundConstants:
    H: float
    sigma_bar_sq: float
    sigma_lower_sq: float
    L: float
    beta: float
    gamma: float = 0.0
    c2: float = 1.0
    k1: float = 1.0
    k2: float = 1.0
    n: int = 1
    T: int = 1
    t0: int = 0
    zeta: float | None = None
    mu: float | None = None
    B: float | None = None
    alpha: float = 0.0

    def _check(self):
        if not self.sigma_lower_sq > 0:
            raise InvalidConstants("sigma_lower_sq must be > 0")
        for name in ("H", "sigma_bar_sq", "L", "beta", "gamma", "c2", "k1", "k2"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise InvalidConstants(f"{name} must be finite and >= 0, got {v}")

    @property
    def m1(self):
        self._check()
        return 4 * self.c2 * self.k1 / self.sigma_lower_sq * (self.k1 * self.k2 * self.sigma_bar_sq + self.beta / self.H)

    @property
    def m2(self):
        self._check()
        return 8 * self.c2 * self.k1 / (self.H * self.sigma_lower_sq) * (self.L + self.gamma * self.n)

    @property
    def m1p(self):
        self._check()
        return 8 * self.c2 * self.sigma_bar_sq / self.sigma_lower_sq + 4 * self.c2 * self.beta / (self.H * self.sigma_lower_sq)

    @property
    def m2p(self):
        """n-free; the 1/n is applied where the recursion and bound use it."""
        self._check()
        return 32 * math.e * self.c2**2 * self.beta * self.sigma_bar_sq / (self.H**2 * self.sigma_lower_sq**2)

    @property
    def lam(self):
        if self.mu is None or self.B is None:
            raise InvalidConstants("separation constants need mu and B")
        return self.mu / self.B**2 - 4 * self.H**2 * self.sigma_bar_sq * (1 + self.alpha)

    def replace(self, **kw):
        d = asdict(self)
        d.update(kw)
        return BoundConstants(**d)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise InvalidConstants(f"unknown constants fields {sorted(extra)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    @classmethod
    def from_estimate(cls, est, H, **kw):
        return cls(H=float(H), sigma_bar_sq=est.sigma_bar_sq, sigma_lower_sq=est.sigma_lower_sq,
                   L=est.lipschitz_L, beta=est.smooth_beta, gamma=est.approx_gamma, **kw)


@dataclass
class BoundValue:
    value: float
    valid: bool
    violations: tuple = ()
    extras: dict = field(default_factory=dict)


def bound_thm31(c):
    """[L m2]^(1/(m1+1)) (1 + 1/m1) T^(m1/(m1+1)) / n; valid when L m2 < T and t0 < T."""
    m1, m2 = c.m1, c.m2
    if not m1 > 0:
        raise InvalidConstants("m1 must be > 0")
    viol = []
    if not c.L * m2 < c.T:
        viol.append("L*m2 >= T")
    if not c.t0 < c.T:
        viol.append("t0 >= T")
    val = (c.L * m2) ** (1 / (m1 + 1)) * (1 + 1 / m1) * c.T ** (m1 / (m1 + 1)) / c.n
    return BoundValue(float(val), not viol, tuple(viol), {"m1": m1, "m2": m2})


def divergence_constant(c):
    """K_{n,T} = e/(m1'+1) (1 + T/n) m2'/n."""
    return math.e / (c.m1p + 1) * (1 + c.T / c.n) * c.m2p / c.n


def _exp(x):
    return math.exp(x) if x < 709.0 else math.inf


def _log_A(c):
    # log of K_{n,T} T^m1' / 2, the coefficient of t0^-(m1'+1) in the relaxed objective
    m = c.m1p
    return (1.0 - math.log(m + 1) + math.log1p(c.T / c.n) + math.log(c.m2p) - math.log(c.n)
            + m * math.log(c.T) - math.log(2.0))


def _log_t0_relaxed(c, la):
    m = c.m1p
    lb, ls = math.log(c.beta), math.log(c.sigma_bar_sq)
    return 2.0 / (m + 3) * (math.log(m + 1) + math.log(c.n) + 0.5 * (la + lb + ls) - ls)


def _log_zeta(c, la, log_t0):
    return 0.5 * (math.log(c.beta) + math.log(c.sigma_bar_sq) - la + (c.m1p + 1) * log_t0)


def bound_thm52(c):
    """Closed form of the non-Lipschitz bound (the minimum of its relaxation over t0 and zeta)."""
    m = c.m1p
    if not m > 0:
        raise InvalidConstants("m1' must be > 0")
    if c.beta == 0 or c.sigma_bar_sq == 0:
        return BoundValue(0.0, True, (), {"t0": 0.0, "zeta": math.inf, "m1p": m, "m2p": c.m2p})
    q = m + 3
    log_val = (math.log(q) - (m + 2) / q * math.log(m + 1) + math.log(c.beta * math.e * c.m2p / 2) / q
               + (m + 2) / q * math.log(c.sigma_bar_sq) - (m + 2) / q * math.log(c.n)
               + math.log1p(c.T / c.n) / q + m / q * math.log(c.T))
    la = _log_A(c)
    # minimizer of the relaxed objective (the A*beta*t0^-(m+1) term dropped)
    lt = _log_t0_relaxed(c, la)
    t0 = _exp(lt)
    viol = [] if t0 < c.T else ["t0* >= T"]
    return BoundValue(_exp(log_val), not viol, tuple(viol),
                      {"t0": t0, "zeta": _exp(_log_zeta(c, la, lt)), "m1p": m, "m2p": c.m2p})


def bound_thm52_exact(c):
    """Exact minimum over (t0, zeta) of the objective the closed form relaxes; zeta is analytic given t0.

    (zeta + beta) A t0^-(m1'+1) + beta s_bar^2 / zeta + s_bar^2 t0 / n, minimized in log space.
    """
    m = c.m1p
    if not m > 0:
        raise InvalidConstants("m1' must be > 0")
    if c.beta == 0 or c.sigma_bar_sq == 0:
        return BoundValue(0.0, True, (), {"t0": 0.0, "zeta": math.inf})
    la = _log_A(c)
    lb, ls, ln = math.log(c.beta), math.log(c.sigma_bar_sq), math.log(c.n)

    def log_g(s):
        la_t = la - (m + 1) * s
        return float(np.logaddexp.reduce([la_t + lb, math.log(2.0) + 0.5 * (la_t + lb + ls), ls + s - ln]))

    centre = _log_t0_relaxed(c, la)
    res = minimize_scalar(log_g, bounds=(centre - 40.0, centre + 40.0), method="bounded",
                          options={"xatol": 1e-12})
    t0 = _exp(res.x)
    viol = [] if t0 < c.T else ["t0* >= T"]
    return BoundValue(_exp(log_g(res.x)), not viol, tuple(viol), {"t0": t0, "zeta": _exp(_log_zeta(c, la, res.x))})


def bound_lemma51(c, eps2, zeta=None):
    """(t0/n + beta/zeta) s_bar^2 + (beta + zeta)/2 eps2; zeta defaults to its minimizer sqrt(2 beta s_bar^2 / eps2)."""
    if eps2 < 0:
        raise InvalidConstants("eps2 must be >= 0")
    sb, b = c.sigma_bar_sq, c.beta
    if zeta is None:
        if eps2 == 0 or b == 0:
            zeta = math.inf
            val = c.t0 / c.n * sb + b * eps2 / 2
        else:
            zeta = math.sqrt(2 * b * sb / eps2)
            val = c.t0 / c.n * sb + b * eps2 / 2 + math.sqrt(2 * b * sb * eps2)
    else:
        val = (c.t0 / c.n + b / zeta) * sb + (b + zeta) / 2 * eps2
    viol = [] if c.t0 < c.T else ["t0 >= T"]
    return BoundValue(float(val), not viol, tuple(viol), {"zeta": zeta, "t0": c.t0})


def classic_bounds(c, etas, step_c=None):
    """Reference stability bounds for SGD with observed stepsizes etas (t = 1..T).

    convex: (2 L^2 / n) sum eta_t, needs eta_T <= 2/beta.
    nonconvex: (1 + 1/(beta c)) / (n - 1) (2 c L^2)^(1/(beta c + 1)) T^(beta c/(beta c + 1)),
    needs non-increasing eta_t <= c/t; c defaults to the smallest such constant.
    """
    etas = np.asarray(etas, dtype=float)
    T = etas.size
    ts = np.arange(1, T + 1)
    convex = 2 * c.L**2 / c.n * math.fsum(etas)
    cv_viol = [] if (c.beta == 0 or etas[-1] <= 2 / c.beta) else ["eta_T > 2/beta"]
    if step_c is None:
        step_c = float(np.max(etas * ts))
    bc = c.beta * step_c
    nc_viol = []
    if np.any(np.diff(etas) > 0):
        nc_viol.append("stepsizes increase")
    if np.any(etas > step_c / ts * (1 + 1e-12)):
        nc_viol.append("eta_t > c/t")
    if c.n < 2 or bc <= 0:
        nonconvex = math.inf
        nc_viol.append("needs n >= 2 and beta*c > 0")
    else:
        nonconvex = (1 + 1 / bc) / (c.n - 1) * (2 * step_c * c.L**2) ** (1 / (bc + 1)) * T ** (bc / (bc + 1))
    return {
        "convex": BoundValue(float(convex), not cv_viol, tuple(cv_viol)),
        "nonconvex": BoundValue(float(nonconvex), not nc_viol, tuple(nc_viol), {"c": step_c}),
    }


def separation_rates(c, rate_c, T):
    """Excess-loss envelopes T^(-c lam) and (log T)^(-c lam) for the two effective schedules."""
    lam = c.lam
    if not lam > 0:
        raise InvalidConstants(f"separation needs lambda > 0, got {lam:.6g}")
    return {"lambda": lam, "harmonic": T ** (-rate_c * lam), "log_damped": math.log(T) ** (-rate_c * lam)}


@dataclass
class GapFloor:
    flags: np.ndarray
    floor: float

    @property
    def any(self):
        return bool(np.any(self.flags))


def gap_lower_bound_diag(train_sphere_loss, sigma_lower_sq):
    """Flags entries with training sphere loss <= s^2/2, where |gap| >= s^2/2 must follow."""
    if not sigma_lower_sq > 0:
        raise InvalidConstants("sigma_lower_sq must be > 0")
    x = np.atleast_1d(np.asarray(train_sphere_loss, dtype=float))
    return GapFloor(x <= 0.5 * sigma_lower_sq, 0.5 * sigma_lower_sq)
