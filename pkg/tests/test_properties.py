import math

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st_

from homolens import dynamics as dyn
from homolens import homognet as hn
from homolens import losses
from homolens import stability as st
from homolens import verify
from homolens.data import SyntheticTask

seeds = st_.integers(0, 2**32 - 1)
scales = st_.floats(0.05, 20.0)
FAST = settings(max_examples=40, deadline=None)


@FAST
@given(seeds, scales)
def test_network_homogeneity(seed, c):
    rng = np.random.default_rng(seed)
    spec = verify.random_mixed_network(rng)
    w = hn.init_weights(spec.n_params, rng)
    x = rng.standard_normal(spec.input_dim)
    assert hn.verify_homogeneity(spec, w, x, [c]).max_rel_error <= 1e-9


@FAST
@given(seeds)
def test_euler_identity(seed):
    rng = np.random.default_rng(seed)
    spec = verify.random_mixed_network(rng)
    w = hn.init_weights(spec.n_params, rng)
    assert hn.euler_rel_error(spec, w, rng.standard_normal(spec.input_dim)) <= 1e-9


@FAST
@given(seeds, st_.floats(0.1, 10.0), st_.integers(0, 10_000), st_.floats(0.2, 5.0), st_.sampled_from([1.0, 2.0, 3.0, 4.0]))
def test_effective_relation(seed, w_norm, t, rho, H):
    for spec in (dyn.ScheduleSpec.effective_harmonic(1.5), dyn.ScheduleSpec.effective_log_damped(),
                 dyn.ScheduleSpec.observed_power(0.3, -0.5)):
        b = spec.bind(H, 0.8, 1.3, 2.0)
        eta, eff, _ = b.realize(t, w_norm, rho)
        assert abs(eff - rho * w_norm ** (H - 2) * eta) <= 1e-12 * eff
        assert eff <= b.cap * (1 + 1e-15)


@FAST
@given(seeds, st_.floats(1e-4, 0.5), st_.integers(2, 5))
def test_norm_identity_example1(seed, eff, D):
    rng = np.random.default_rng(seed)
    ctx = losses.LossContext(losses.LossKind.example1(D, 3.0))
    w = rng.standard_normal(D) * rng.uniform(0.1, 3.0)
    b = dyn.ScheduleSpec.observed_power(eff / np.linalg.norm(w), 0.0, apply_caps=False).bind(3.0, 1.0, 0.0, 0.0)
    w1, log = dyn.sgd_step(w, 0, ctx, b, idx=0)
    assert dyn.check_norm_identity(w, w1, log.eta_eff, w / np.linalg.norm(w), ctx, 0) <= 1e-12


@settings(max_examples=15, deadline=None)
@given(seeds)
def test_same_seed_same_trajectory(seed):
    task = SyntheticTask(4, 0.3, 1.0)
    spec = hn.mlp(4, (4, 1), hn.relu())
    ds = task.sample(10, np.random.default_rng(seed))
    ctx = losses.LossContext(losses.LossKind.hinge(), spec, ds)
    b = dyn.ScheduleSpec.effective_harmonic(1.0).bind(2.0, 0.9, 0.5, 1.0)
    w0 = hn.init_weights(spec.n_params, np.random.default_rng(seed + 1))
    r1 = dyn.run_trajectory(w0, ctx, b, 60, seed=seed)
    r2 = dyn.run_trajectory(w0, ctx, b, 60, seed=seed)
    assert r1.w_final.tobytes() == r2.w_final.tobytes()
    assert r1.idx.tobytes() == r2.idx.tobytes()


@settings(max_examples=15, deadline=None)
@given(seeds, st_.integers(0, 40))
def test_identical_coupling_zero(seed, t0):
    task = SyntheticTask(4, 0.3, 1.0)
    spec = hn.mlp(4, (4, 1), hn.relu())
    ds = task.sample(8, np.random.default_rng(seed))
    ctx = losses.LossContext(losses.LossKind.hinge(), spec, ds)
    b = dyn.ScheduleSpec.effective_harmonic(1.0).bind(2.0, 0.9, 0.5, 1.0)
    run = st.run_coupled(ctx, ctx.with_dataset(ds), hn.init_weights(spec.n_params, np.random.default_rng(seed)),
                         b, 40, 3, t0=t0, seed=seed, probe_every=1)
    assert np.all(run.delta == 0.0)


@FAST
@given(seeds, st_.integers(2, 30), st_.integers(0, 200), st_.data())
def test_conditional_stream_support(seed, n, T, data):
    i = data.draw(st_.integers(0, n - 1))
    t0 = data.draw(st_.integers(0, T))
    s = st.conditional_stream(n, T, t0, i, np.random.default_rng(seed))
    assert s.shape == (T,)
    assert np.all((s >= 0) & (s < n))
    assert not np.any(s[:t0] == i)


pos = st_.floats(0.05, 5.0)


@FAST
@given(pos, pos, pos, pos, st_.integers(16, 4096), st_.integers(100, 10**6))
def test_bounds_monotone(sb, frac, L, beta, n, T):
    c = st.BoundConstants(H=2.0, sigma_bar_sq=sb, sigma_lower_sq=sb * min(frac, 1.0), L=L, beta=beta, n=n, T=T)
    for f in (st.bound_thm31, st.bound_thm52, st.bound_thm52_exact):
        v = f(c).value
        assert v > 0
        assert f(c.replace(T=2 * T)).value >= v * (1 - 1e-9)
        assert f(c.replace(n=2 * n)).value <= v * (1 + 1e-9)
    assert st.bound_thm52_exact(c).value >= st.bound_thm52(c).value * (1 - 1e-9)


@FAST
@given(st_.floats(0.0, 10.0), pos)
def test_gap_floor_threshold(loss, s):
    d = st.gap_lower_bound_diag(loss, s)
    assert bool(d.flags[0]) == (loss <= s / 2)


@FAST
@given(st_.floats(1.0, 6.0), st_.integers(2, 6))
def test_analytic_constants_ordered(deg, D):
    c = losses.example1_constants(D, deg)
    assert c.sigma_lower_sq <= c.sigma_bar_sq
    rng = np.random.default_rng(0)
    V = rng.standard_normal((200, D))
    V /= np.linalg.norm(V, axis=1, keepdims=True)
    vals = losses.example1_value(V, deg)
    assert vals.min() >= c.sigma_lower_sq - 1e-12 and vals.max() <= c.sigma_bar_sq + 1e-12
    g = np.linalg.norm(losses.example1_grad(V, deg), axis=1)
    assert g.max() <= c.lipschitz_L + 1e-9
