"""Identity suite: homogeneity, Euler, gradients, norm iteration, stepsize relation, norm ratio."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import dynamics as dyn
from . import homognet as hn
from . import losses
from .data import SyntheticTask

SCALES = (0.5, 2.0, 10.0)


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float
    detail: dict = field(default_factory=dict)

    def line(self):
        tag = "PASS" if self.passed else "FAIL"
        return f"{tag} {self.name}: {self.value:.3e} (threshold {self.threshold:.1e})"

    def to_dict(self):
        return {"name": self.name, "passed": self.passed, "value": self.value, "threshold": self.threshold,
                "detail": self.detail}


def random_mixed_network(rng, max_dim=8):
    """Random stack: 0-2 normalized layers then 1-3 unnormalized ones, mixed activations."""
    d = int(rng.integers(2, max_dim + 1))
    layers = []
    prev = d
    for _ in range(int(rng.integers(0, 3))):
        residual = bool(rng.random() < 0.3)
        out = prev if residual else int(rng.integers(2, max_dim + 1))
        act = [hn.sigmoid(), hn.relu(), hn.linear(), hn.leaky_relu(0.2)][int(rng.integers(0, 4))]
        mode = hn.ROWWISE if rng.random() < 0.6 else hn.FROBENIUS
        layers.append(hn.normalized(prev, out, act, norm_mode=mode, residual=residual))
        prev = out
    depth = int(rng.integers(1, 4))
    for k in range(depth):
        out = 1 if k == depth - 1 else int(rng.integers(1, max_dim + 1))
        pick = int(rng.integers(0, 4))
        act = [hn.relu(), hn.leaky_relu(float(rng.uniform(0.05, 0.5))), hn.linear(),
               hn.power_relu(float(rng.choice([2.0, 3.0])))][pick]
        layers.append(hn.unnormalized(prev, out, act))
        prev = out
    return hn.NetworkSpec(layers)


def check_homogeneity(n_nets=100, seed=0, scales=SCALES, tol=1e-9):
    """Scaling identity and w . grad = H value, for the network output and the max-margin loss."""
    rng = np.random.default_rng(seed)
    worst_scale = worst_euler = 0.0
    kind = losses.LossKind.max_margin()
    for _ in range(n_nets):
        spec = random_mixed_network(rng)
        w = hn.init_weights(spec.n_params, rng) * float(rng.uniform(0.5, 2.0))
        x = rng.standard_normal(spec.input_dim)
        worst_scale = max(worst_scale, hn.verify_homogeneity(spec, w, x, scales).max_rel_error)
        worst_euler = max(worst_euler, hn.euler_rel_error(spec, w, x))
        y = -np.sign(hn.forward(spec, w, x)) or 1.0  # active branch so the loss is not identically 0
        base = losses.loss_value(kind, spec, w, (x, y))
        for c in scales:
            val = losses.loss_value(kind, spec, c * w, (x, y))
            worst_scale = max(worst_scale, abs(val - c**spec.degree * base) / (abs(c**spec.degree * base) + hn.EPS_ABS))
        g = losses.loss_grad(kind, spec, w, (x, y))
        worst_euler = max(worst_euler, abs(float(w @ g) - spec.degree * base) / (abs(spec.degree * base) + hn.EPS_ABS))
    return [
        CheckResult("homogeneity", worst_scale <= tol, worst_scale, tol, {"nets": n_nets, "scales": list(scales)}),
        CheckResult("euler", worst_euler <= tol, worst_euler, tol, {"nets": n_nets}),
    ]


def check_gradients(n_nets=10, seed=1, h=1e-6, tol=1e-6):
    """Analytic backward pass against central finite differences on smooth random networks."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_nets):
        d = int(rng.integers(2, 6))
        spec = hn.NetworkSpec([
            hn.normalized(d, d, hn.sigmoid(), norm_mode=hn.ROWWISE, residual=bool(rng.random() < 0.5)),
            hn.unnormalized(d, 4, hn.power_relu(2.0)),
            hn.unnormalized(4, 1, hn.linear()),
        ])
        w = hn.init_weights(spec.n_params, rng)
        x = rng.standard_normal(d)
        _, g = hn.value_and_grad(spec, w, x)
        fd = np.empty_like(w)
        for k in range(w.size):
            e = np.zeros_like(w)
            e[k] = h
            fd[k] = (hn.forward(spec, w + e, x) - hn.forward(spec, w - e, x)) / (2 * h)
        worst = max(worst, float(np.max(np.abs(fd - g)) / (np.max(np.abs(g)) + 1e-12)))
    return [CheckResult("gradient_fd", worst <= tol, worst, tol, {"nets": n_nets, "h": h})]


def _example1_ctx():
    return losses.LossContext(losses.LossKind.example1(2, 3.0))


def _mlp_ctx(seed, n=64):
    spec = hn.desk_network(16)
    ds = SyntheticTask(16, 0.3, 1.0).sample(n, np.random.default_rng(seed))
    return losses.LossContext(losses.LossKind.max_margin(), spec, ds)


def stepsize_relation_error(rec, H):
    """max |eta_eff - rho |w_t|^(H-2) eta| / eta_eff over the steps of a record."""
    pred = rec.rho * rec.w_norm[:-1] ** (H - 2.0) * rec.eta
    return float(np.max(np.abs(rec.eta_eff - pred) / np.abs(rec.eta_eff))) if rec.T else 0.0


def check_norm_iteration(T=10_000, seed=2, mutation=None, tol=1e-10, rel_tol=1e-12):
    """Norm-iteration residual and the effective-stepsize relation on example1 and a max-margin MLP."""
    out = []
    worst_res = worst_rel = 0.0
    details = {}
    ex = _example1_ctx()
    sched = dyn.ScheduleSpec.effective_harmonic(1.0).bind_constants(3.0, losses.example1_constants())
    w0 = hn.init_weights(2, np.random.default_rng(seed))
    rec = dyn.run_trajectory(w0, ex, sched, T, seed=seed, probe_every=0, track_identity=True, mutation=mutation)
    details["example1"] = float(np.max(rec.norm_residual))
    worst_res = max(worst_res, details["example1"])
    worst_rel = max(worst_rel, stepsize_relation_error(rec, 3.0))

    ctx = _mlp_ctx(seed)
    obs = dyn.ScheduleSpec.observed_power(0.5, -0.5, apply_caps=False).bind(ctx.H, 0.0, 0.0, 0.0)
    w0 = hn.init_weights(ctx.n_params, np.random.default_rng(seed + 1))
    rec = dyn.run_trajectory(w0, ctx, obs, T, seed=seed, probe_every=0, track_identity=True, mutation=mutation)
    details["max_margin_mlp"] = float(np.max(rec.norm_residual))
    worst_res = max(worst_res, details["max_margin_mlp"])
    worst_rel = max(worst_rel, stepsize_relation_error(rec, ctx.H))
    out.append(CheckResult("norm_iteration", worst_res <= tol, worst_res, tol, details | {"steps": T}))
    out.append(CheckResult("effective_stepsize", worst_rel <= rel_tol, worst_rel, rel_tol, {"steps": T}))
    return out


def check_norm_ratio(seeds=64, T=10_000, seed=3, c2=1.0, mutation=None):
    """No step beyond 8 c2 s_bar^2/s^2 shrinks |w| by more than the ratio bound (example1, offset 2)."""
    const = losses.example1_constants()
    ex = _example1_ctx()
    sched = dyn.ScheduleSpec.effective_harmonic(c2, offset=2).bind_constants(3.0, const)
    bad = 0
    worst = 0.0
    t0 = 8 * c2 * const.sigma_bar_sq / const.sigma_lower_sq
    for s in range(seeds):
        w0 = hn.init_weights(2, dyn.replica_rng(seed, s))
        rec = dyn.run_trajectory(w0, ex, sched, T, probe_every=0, mutation=mutation)
        bad += len(dyn.check_norm_ratio(rec, const.sigma_bar_sq, const.sigma_lower_sq, c2))
        ts = np.arange(rec.T)
        m = ts > t0
        ratio = rec.w_norm[:-1][m] / rec.w_norm[1:][m]
        excess = ratio / dyn.ratio_bound(ts[m], c2, const.sigma_bar_sq, const.sigma_lower_sq)
        worst = max(worst, float(np.max(excess)))
    return [CheckResult("norm_ratio", bad == 0, float(bad), 0.0,
                        {"seeds": seeds, "steps": T, "T0": t0, "max_ratio_over_bound": worst})]


def run_identity_suite(quick=False, seed=0, mutation=None):
    if quick:
        res = check_homogeneity(20, seed)
        res += check_gradients(3, seed + 1)
        res += check_norm_iteration(2000, seed + 2, mutation)
        res += check_norm_ratio(8, 2000, seed + 3, mutation=mutation)
    else:
        res = check_homogeneity(100, seed)
        res += check_gradients(10, seed + 1)
        res += check_norm_iteration(10_000, seed + 2, mutation)
        res += check_norm_ratio(64, 10_000, seed + 3, mutation=mutation)
    return res


def suite_passed(results):
    return all(r.passed for r in results) and not any(math.isnan(r.value) for r in results)
