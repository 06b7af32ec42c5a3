"""Single-sample SGD in weight space with the norm/direction bookkeeping.

For an H-homogeneous network the update w <- w - eta * grad l_t(w) moves the
direction v = w/|w| exactly like a step of size eta_eff = rho |w|^(H-2) eta
taken at v, where rho = l'(Phi(w)) / l'(Phi(v)). Schedules are specified
either on eta (observed) or on eta_eff (effective); the other is derived from
the current norm.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidSpec, NonFiniteUpdate, WeightCollapse
from .homognet import init_weights  # noqa: F401  (re-exported for callers of the engine)

COLLAPSE = 1e-150
DROP_NORM_FACTOR = "drop_norm_factor"
MUTATIONS = (DROP_NORM_FACTOR,)

OBSERVED_POWER = "observed_power"
EFFECTIVE_HARMONIC = "effective_harmonic"
EFFECTIVE_LOG_DAMPED = "effective_log_damped"


def replica_rng(master_seed, replica_id, stream=0):
    """Independent generator for one replica, derived from (master seed, replica id)."""
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(int(replica_id), int(stream)))
    return np.random.default_rng(ss)


def stepsize_caps(H, sigma_lower_sq, lipschitz_L, smooth_beta, strong_growth_B=None):
    """min{H s^2 / (2 L^2), H / (2 beta), 1 / (beta B^2)}, ignoring terms with a zero denominator."""
    caps = []
    if lipschitz_L > 0:
        caps.append(H * sigma_lower_sq / (2.0 * lipschitz_L**2))
    if smooth_beta > 0:
        caps.append(H / (2.0 * smooth_beta))
        if strong_growth_B:
            caps.append(1.0 / (smooth_beta * strong_growth_B**2))
    return min(caps) if caps else math.inf


@dataclass(frozen=True)
class ScheduleSpec:
    """Stepsize policy.

    observed_power:        eta_t = c (t + offset)^exponent
    effective_harmonic:    eta_eff_t = 2 c / (H s^2 (t + offset)), c >= 1;
                           offset None picks the smallest integer with eta_eff_0 <= cap
    effective_log_damped:  eta_eff_t = c / ((t + offset) ln(t + offset));
                           c None means 4 / (H s^2)
    """

    kind: str
    c: float | None = 1.0
    exponent: float = -0.5
    offset: float | None = None
    apply_caps: bool = True

    def __post_init__(self):
        if self.kind not in (OBSERVED_POWER, EFFECTIVE_HARMONIC, EFFECTIVE_LOG_DAMPED):
            raise InvalidSpec(f"unknown schedule {self.kind!r}")
        if self.kind == EFFECTIVE_HARMONIC:
            if self.c is None or self.c < 1.0:
                raise InvalidSpec("effective_harmonic needs c2 >= 1")
            if self.offset is not None and (self.offset < 1 or int(self.offset) != self.offset):
                raise InvalidSpec("effective_harmonic offset must be an integer >= 1")
        elif self.kind == OBSERVED_POWER:
            if self.c is None or self.c <= 0:
                raise InvalidSpec("observed_power needs c > 0")
        else:
            if self.c is not None and self.c <= 0:
                raise InvalidSpec("effective_log_damped needs c > 0")
            if self.offset is not None and self.offset <= 1:
                raise InvalidSpec("effective_log_damped offset must exceed 1")

    @classmethod
    def observed_power(cls, c, exponent, offset=1.0, apply_caps=True):
        return cls(OBSERVED_POWER, float(c), float(exponent), float(offset), apply_caps)

    @classmethod
    def effective_harmonic(cls, c2=1.0, offset=None, apply_caps=True):
        return cls(EFFECTIVE_HARMONIC, float(c2), -1.0, None if offset is None else int(offset), apply_caps)

    @classmethod
    def effective_log_damped(cls, c=None, offset=2.0, apply_caps=True):
        return cls(EFFECTIVE_LOG_DAMPED, None if c is None else float(c), -1.0, float(offset), apply_caps)

    @property
    def effective(self):
        return self.kind != OBSERVED_POWER

    def bind(self, H, sigma_lower_sq, lipschitz_L, smooth_beta, strong_growth_B=None):
        if self.kind != OBSERVED_POWER and not sigma_lower_sq > 0:
            raise InvalidSpec("effective schedules need sigma_lower_sq > 0")
        raw_cap = stepsize_caps(H, sigma_lower_sq, lipschitz_L, smooth_beta, strong_growth_B)
        cap = raw_cap if self.apply_caps else math.inf
        c, offset = self.c, self.offset
        if self.kind == EFFECTIVE_HARMONIC and offset is None:
            x = 2.0 * c / (H * sigma_lower_sq * raw_cap) if math.isfinite(raw_cap) else 1.0
            offset = max(1, math.ceil(x * (1.0 - 1e-12)))
        if self.kind == EFFECTIVE_LOG_DAMPED:
            if c is None:
                c = 4.0 / (H * sigma_lower_sq)
            if offset is None:
                offset = 2.0
        if self.kind == OBSERVED_POWER and offset is None:
            offset = 1.0
        return BoundSchedule(self, float(H), float(sigma_lower_sq), float(c), float(offset), cap)

    def bind_constants(self, H, constants, strong_growth_B=None):
        if strong_growth_B is None:
            strong_growth_B = constants.extras.get("B")
        return self.bind(H, constants.sigma_lower_sq, constants.lipschitz_L, constants.smooth_beta, strong_growth_B)

    def to_dict(self):
        return {"kind": self.kind, "c": self.c, "exponent": self.exponent, "offset": self.offset,
                "apply_caps": self.apply_caps}


@dataclass(frozen=True)
class BoundSchedule:
    spec: ScheduleSpec
    H: float
    sigma_lower_sq: float
    c: float
    offset: float
    cap: float

    def effective_raw(self, t):
        if self.spec.kind == EFFECTIVE_HARMONIC:
            return 2.0 * self.c / (self.H * self.sigma_lower_sq * (t + self.offset))
        if self.spec.kind == EFFECTIVE_LOG_DAMPED:
            s = t + self.offset
            return self.c / (s * math.log(s))
        raise InvalidSpec("observed schedules have no predetermined effective stepsize")

    def effective_sequence(self, T):
        """The clipped effective stepsizes for t = 0..T-1 (effective kinds only)."""
        return np.array([min(self.effective_raw(t), self.cap) for t in range(T)])

    def realize(self, t, w_norm, rho):
        """(eta, eta_eff, clipped) at step t for the current norm and alignment ratio."""
        scale = rho * w_norm ** (self.H - 2.0)
        if self.spec.kind == OBSERVED_POWER:
            eta = self.c * (t + self.offset) ** self.spec.exponent
            eta_eff = eta * scale
            if eta_eff > self.cap:
                return self.cap / scale, self.cap, True
            return eta, eta_eff, False
        eta_eff = self.effective_raw(t)
        clipped = eta_eff > self.cap * (1.0 + 1e-12)
        if eta_eff > self.cap:
            eta_eff = self.cap
        return eta_eff / scale, eta_eff, clipped

    def to_dict(self):
        d = self.spec.to_dict()
        d.update(resolved_c=self.c, resolved_offset=self.offset, cap=self.cap, H=self.H,
                 sigma_lower_sq=self.sigma_lower_sq)
        return d


@dataclass
class StepLog:
    t: int
    idx: int
    eta: float
    eta_eff: float
    rho: float
    w_norm: float
    inst_loss: float
    clipped: bool = False
    rho_fallback: bool = False


def _advance(w, t, ctx, sched, i, mutation=None):
    norm = math.sqrt(float(np.dot(w, w)))
    if norm < COLLAPSE:
        raise WeightCollapse(f"|w_t| = {norm:.3g} at t={t}", t)
    g, inst, rho, rho_ok = ctx.sample_step_terms(w, i, norm)
    if rho <= 0.0:
        # l'(Phi(w)) = 0 with l'(Phi(v)) != 0: the gradient vanishes, any eta gives the same step
        rho, rho_ok = 1.0, False
    eta, eta_eff, clipped = sched.realize(t, norm, rho)
    if mutation == DROP_NORM_FACTOR:
        eta = eta_eff / rho
    elif mutation is not None:
        raise InvalidSpec(f"unknown mutation {mutation!r}")
    with np.errstate(over="ignore", invalid="ignore"):
        w_next = w - eta * g
    if not np.all(np.isfinite(w_next)):
        raise NonFiniteUpdate(f"non-finite weights after step t={t}", t)
    nn = math.sqrt(float(np.dot(w_next, w_next)))
    if nn < COLLAPSE:
        raise WeightCollapse(f"|w_(t+1)| = {nn:.3g} after step t={t}", t)
    return w_next, eta, eta_eff, rho, rho_ok, clipped, inst, norm, nn


def sgd_step(w, t, ctx, schedule, rng=None, idx=None, mutation=None):
    """One SGD step from state (w, t). Returns (w_next, StepLog).

    The sample index is ``idx`` when given, otherwise drawn uniformly from rng.
    ``schedule`` must be bound (``ScheduleSpec.bind``).
    """
    if idx is None:
        idx = int(rng.integers(0, ctx.n))
    w = np.asarray(w, dtype=float)
    w_next, eta, eta_eff, rho, rho_ok, clipped, inst, norm, _ = _advance(w, t, ctx, schedule, idx, mutation)
    return w_next, StepLog(t, idx, eta, eta_eff, rho, norm, inst, clipped, not rho_ok)


def norm_identity_rhs(w_norm_sq, eta_eff, grad_v, loss_v, euler_degree):
    """Predicted |w_(t+1)|^2 from |w_t|^2 and quantities evaluated at v_t."""
    return w_norm_sq * (1.0 + eta_eff**2 * float(np.dot(grad_v, grad_v)) - 2.0 * euler_degree * eta_eff * loss_v)


def check_norm_identity(w_t, w_next, eta_eff, v_t, ctx, idx):
    """|LHS - RHS| / (LHS + 1e-12) for the norm iteration of one step on sample idx.

    Gradient and loss are recomputed at v_t, independently of the weight-space step.
    """
    if ctx.euler_degree is None:
        raise InvalidSpec("the norm identity needs a homogeneous loss")
    loss_v, grad_v = ctx.value_grad_at(np.asarray(v_t, dtype=float), idx)
    lhs = float(np.dot(w_next, w_next))
    w_t = np.asarray(w_t, dtype=float)
    rhs = norm_identity_rhs(float(np.dot(w_t, w_t)), eta_eff, grad_v, loss_v, ctx.euler_degree)
    return abs(lhs - rhs) / (lhs + 1e-12)


def ratio_bound(t, c2, sigma_bar_sq, sigma_lower_sq):
    return 1.0 + 4.0 * c2 * sigma_bar_sq / (sigma_lower_sq * (t + 2.0))


@dataclass
class TrajectoryRecord:
    """Per-step log of one run. Step arrays have length T; w_norm has length T + 1."""

    t: np.ndarray
    idx: np.ndarray
    eta: np.ndarray
    eta_eff: np.ndarray
    rho: np.ndarray
    w_norm: np.ndarray
    inst_loss: np.ndarray
    norm_residual: np.ndarray
    clipped: np.ndarray
    probe_t: np.ndarray
    probe_train: np.ndarray
    probe_test: np.ndarray
    w_final: np.ndarray
    ratio_ok: np.ndarray | None = None
    rho_fallbacks: int = 0
    assumption_violations: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def T(self):
        return int(self.t.shape[0])

    @property
    def v_final(self):
        return self.w_final / np.linalg.norm(self.w_final)

    @property
    def clip_count(self):
        return int(np.sum(self.clipped))

    def write_csv(self, path, comment=None):
        """One row per t = 0..T; ``comment`` goes on a leading '#' line when given."""
        train = dict(zip(self.probe_t.tolist(), self.probe_train.tolist()))
        cols = ["t", "idx", "eta", "eta_eff", "rho", "w_norm", "inst_loss", "train_sphere_loss",
                "norm_residual", "ratio_bound_ok"]

        def fmt(x):
            return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(x)

        with open(path, "w", newline="") as fh:
            if comment:
                fh.write(f"# {comment}\n")
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(cols)
            for k in range(self.T + 1):
                step = k < self.T
                ok = ""
                if step and self.ratio_ok is not None:
                    ok = "1" if self.ratio_ok[k] else "0"
                wr.writerow([
                    k,
                    int(self.idx[k]) if step else "",
                    fmt(float(self.eta[k])) if step else "",
                    fmt(float(self.eta_eff[k])) if step else "",
                    fmt(float(self.rho[k])) if step else "",
                    fmt(float(self.w_norm[k])),
                    fmt(float(self.inst_loss[k])) if step else "",
                    fmt(train.get(k)),
                    fmt(float(self.norm_residual[k])) if step else "",
                    ok,
                ])


def probe_schedule(T, probe_every=None):
    """Probe steps: 0, every max(1, T // 1000) steps, and T."""
    every = max(1, T // 1000) if probe_every is None else int(probe_every)
    if every <= 0:
        return np.array([0, T]) if T > 0 else np.array([0])
    pts = list(range(0, T + 1, every))
    if pts[-1] != T:
        pts.append(T)
    return np.array(pts)


def run_trajectory(w0, ctx, schedule, T, seed=None, *, indices=None, probe_every=None, test_ctx=None,
                   track_identity=False, ratio_constants=None, mutation=None, sigma_lower_sq=None):
    """Run T SGD steps from w0.

    indices: a precomputed index stream (length T); otherwise drawn from
    default_rng(seed) in one block. ratio_constants = (c2, sigma_bar_sq,
    sigma_lower_sq) fills the per-step norm-ratio check. sigma_lower_sq, when
    given, counts probes where the training sphere loss falls below half of it.
    """
    if T < 0:
        raise ValueError("T must be >= 0")
    if indices is None:
        indices = np.random.default_rng(seed).integers(0, ctx.n, size=T)
    indices = np.asarray(indices, dtype=np.int64)
    if indices.shape != (T,):
        raise ValueError("index stream length must equal T")
    w = np.array(w0, dtype=float)
    eta = np.empty(T)
    eta_eff = np.empty(T)
    rho = np.empty(T)
    inst = np.empty(T)
    wn = np.empty(T + 1)
    resid = np.full(T, np.nan)
    clipped = np.zeros(T, dtype=bool)
    probes = probe_schedule(T, probe_every)
    probe_set = set(probes.tolist())
    p_train, p_test = [], []
    fallbacks = 0
    violations = 0

    def probe(wcur):
        nonlocal violations
        tr = ctx.sphere_loss(wcur)
        p_train.append(tr)
        p_test.append(test_ctx.sphere_loss(wcur) if test_ctx is not None else np.nan)
        if sigma_lower_sq is not None and tr < 0.5 * sigma_lower_sq:
            violations += 1

    wn[0] = math.sqrt(float(np.dot(w, w)))
    for t in range(T):
        if t in probe_set:
            probe(w)
        i = int(indices[t])
        try:
            w_next, e, ee, r, ok, cl, il, nrm, nn = _advance(w, t, ctx, schedule, i, mutation)
        except (WeightCollapse, NonFiniteUpdate) as exc:
            exc.t = t
            raise
        eta[t], eta_eff[t], rho[t], inst[t], clipped[t] = e, ee, r, il, cl
        fallbacks += not ok
        if track_identity and ctx.euler_degree is not None:
            resid[t] = check_norm_identity(w, w_next, ee, w / nrm, ctx, i)
        wn[t + 1] = nn
        w = w_next
    if T in probe_set:
        probe(w)
    ratio_ok = None
    if ratio_constants is not None:
        c2, sb, sl = ratio_constants
        ts = np.arange(T)
        ratio_ok = wn[:-1] / wn[1:] <= 1.0 + 4.0 * c2 * sb / (sl * (ts + 2.0))
    return TrajectoryRecord(
        t=np.arange(T), idx=indices.copy(), eta=eta, eta_eff=eta_eff, rho=rho, w_norm=wn,
        inst_loss=inst, norm_residual=resid, clipped=clipped, probe_t=probes,
        probe_train=np.array(p_train), probe_test=np.array(p_test), w_final=w,
        ratio_ok=ratio_ok, rho_fallbacks=fallbacks, assumption_violations=violations,
        meta={"schedule": schedule.to_dict(), "seed": None if seed is None else int(seed)},
    )


def check_norm_ratio(record, sigma_bar_sq, sigma_lower_sq, c2):
    """Steps t > 8 c2 s_bar^2 / s^2 where |w_t| / |w_(t+1)| exceeds 1 + 4 c2 s_bar^2 / (s^2 (t+2)).

    ``record`` is a TrajectoryRecord or the array of norms |w_0|, ..., |w_T|.
    """
    t0 = 8.0 * c2 * sigma_bar_sq / sigma_lower_sq
    wn = np.asarray(getattr(record, "w_norm", record), dtype=float)
    ts = np.arange(wn.shape[0] - 1)
    bad = (ts > t0) & (wn[:-1] / wn[1:] > 1.0 + 4.0 * c2 * sigma_bar_sq / (sigma_lower_sq * (ts + 2.0)))
    return [int(t) for t in ts[bad]]


@dataclass
class HittingTime:
    T_a: int | None
    tau: float
    window: int

    @property
    def reached(self):
        return self.T_a is not None


def detect_hitting_time(probe_t, values, sigma_lower_sq, tau, window=1):
    """First probe time whose trailing windowed mean is <= sigma_lower_sq + tau (None if never)."""
    values = np.asarray(values, dtype=float)
    probe_t = np.asarray(probe_t)
    if window < 1:
        raise ValueError("window must be >= 1")
    csum = np.concatenate([[0.0], np.cumsum(values)])
    for k in range(values.shape[0]):
        lo = max(0, k - window + 1)
        if (csum[k + 1] - csum[lo]) / (k + 1 - lo) <= sigma_lower_sq + tau:
            return HittingTime(int(probe_t[k]), float(tau), int(window))
    return HittingTime(None, float(tau), int(window))


@dataclass
class ContractionProbe:
    t: int
    w_norm_sq: float
    mean_next_sq: float
    stderr: float
    bound: float
    eta_eff: float
    train_loss: float

    @property
    def holds(self):
        return self.mean_next_sq <= self.bound + 3.0 * self.stderr


def one_step_contraction(w, t, ctx, schedule, replicas, rng):
    """Monte-Carlo E|w_(t+1)|^2 at a fixed state over fresh index draws, against |w_t|^2 (1 - H s^2 eta_eff / 2)."""
    w = np.asarray(w, dtype=float)
    idx = rng.integers(0, ctx.n, size=replicas)
    nxt = np.empty(replicas)
    eff = None
    for r, i in enumerate(idx):
        w_next, log = sgd_step(w, t, ctx, schedule, idx=int(i))
        nxt[r] = float(np.dot(w_next, w_next))
        eff = log.eta_eff
    wsq = float(np.dot(w, w))
    bound = wsq * (1.0 - 0.5 * ctx.H * schedule.sigma_lower_sq * eff)
    se = float(np.std(nxt, ddof=1) / math.sqrt(replicas))
    return ContractionProbe(int(t), wsq, float(np.mean(nxt)), se, bound, float(eff), ctx.sphere_loss(w))
