import math

import numpy as np
import pytest
from scipy import optimize

from homolens import dynamics as dyn
from homolens import homognet as hn
from homolens import losses
from homolens import stability as st
from homolens.data import SyntheticTask
from homolens.errors import IndexOutOfRange, InvalidConstants

TASK = SyntheticTask(6, 0.3, 1.0)
HINGE = losses.LossKind.hinge()
SPEC = hn.mlp(6, (6, 1), hn.relu())
EX1 = losses.example1_constants()


def _sched():
    return dyn.ScheduleSpec.effective_harmonic(1.0).bind(SPEC.degree, 0.9, 0.5, 1.0)


def ex1_constants(**kw):
    return st.BoundConstants(H=3.0, sigma_bar_sq=2**1.5, sigma_lower_sq=1.0, L=6 * math.sqrt(2),
                             beta=12 * math.sqrt(2), **kw)


# ---------------------------------------------------------------- coupling


def test_make_neighbor_single_row(rng):
    S = TASK.sample(8, rng)
    Sp = st.make_neighbor(S, 5, TASK, rng)
    keep = np.arange(8) != 5
    assert S.X[keep].tobytes() == Sp.X[keep].tobytes()
    assert S.y[keep].tobytes() == Sp.y[keep].tobytes()
    assert not np.array_equal(S.X[5], Sp.X[5])
    with pytest.raises(IndexOutOfRange):
        st.make_neighbor(S, 8, TASK, rng)
    with pytest.raises(IndexOutOfRange):
        st.make_neighbor(S, -1, TASK, rng)


def test_neighbor_of_singleton_shares_nothing(rng):
    S = TASK.sample(1, rng)
    Sp = st.make_neighbor(S, 0, TASK, rng)
    assert not np.array_equal(S.X[0], Sp.X[0])


def test_conditional_stream_avoids_index(rng):
    s = st.conditional_stream(5, 200, 150, 2, rng)
    assert s.shape == (200,)
    assert not np.any(s[:150] == 2)
    assert set(s[:150].tolist()) == {0, 1, 3, 4}
    assert np.all((s >= 0) & (s < 5))


def test_unconditioned_frequency(rng):
    s = st.conditional_stream(10, 20_000, 0, 3, rng)
    assert abs(np.mean(s == 3) - 0.1) < 4 * math.sqrt(0.09 / 20_000)


def test_identical_datasets_bitwise_zero(rng):
    S = TASK.sample(16, rng)
    ctx = losses.LossContext(HINGE, SPEC, S)
    w0 = hn.init_weights(SPEC.n_params, rng)
    run = st.run_coupled(ctx, ctx.with_dataset(S), w0, _sched(), 300, 4, t0=0, seed=1, probe_every=10)
    assert np.all(run.delta == 0.0)
    assert run.w_T.tobytes() == run.w_T_prime.tobytes()


def test_conditioning_through_T_gives_zero(rng):
    S = TASK.sample(16, rng)
    Sp = st.make_neighbor(S, 7, TASK, rng)
    ctx = losses.LossContext(HINGE, SPEC, S)
    w0 = hn.init_weights(SPEC.n_params, rng)
    run = st.run_coupled(ctx, ctx.with_dataset(Sp), w0, _sched(), 200, 7, t0=200, seed=2)
    assert run.delta_T_sq == 0.0
    run2 = st.run_coupled(ctx, ctx.with_dataset(Sp), w0, _sched(), 200, 7, t0=0, seed=2)
    assert run2.delta_T_sq > 0.0


def test_stability_estimate_zero_when_T_equals_t0():
    est = st.conditional_on_avg_stability(TASK, HINGE, SPEC, _sched(), 12, 40, 40, 3, seed=0, max_indices=4)
    assert est.value == 0.0 and np.all(est.samples == 0.0)


def test_stability_estimate_positive():
    est = st.conditional_on_avg_stability(TASK, HINGE, SPEC, _sched(), 12, 48, 0, 3, seed=0, max_indices=4)
    assert est.value > 0 and est.samples.shape == (12,)
    again = st.conditional_on_avg_stability(TASK, HINGE, SPEC, _sched(), 12, 48, 0, 3, seed=0, max_indices=4)
    assert again.samples.tobytes() == est.samples.tobytes()


def test_gap_without_training_is_null():
    g = st.empirical_gap(TASK, HINGE, SPEC, _sched(), 32, 0, 40, seed=3, heldout_size=400, twin=False)
    assert abs(g.value) <= 3 * g.stderr
    t = st.empirical_gap(TASK, HINGE, SPEC, _sched(), 32, 0, 40, seed=3, heldout_size=400)
    # with T = 0 the twin sits at the same w0, so the adjusted gap is exactly 0
    assert t.value == 0.0


def test_gap_on_training_set_is_zero(rng):
    S = TASK.sample(20, rng)
    ctx = losses.LossContext(HINGE, SPEC, S)
    w = hn.init_weights(SPEC.n_params, rng)
    assert ctx.with_dataset(S).sphere_loss(w) - ctx.sphere_loss(w) == 0.0


def test_recursion_trace_identical_datasets(rng):
    S = TASK.sample(10, rng)
    ctx = losses.LossContext(HINGE, SPEC, S)
    c = st.BoundConstants(H=2.0, sigma_bar_sq=1.0, sigma_lower_sq=0.9, L=0.5, beta=1.0, n=10, T=50, t0=3)
    tr = st.recursion_trace(ctx, ctx, hn.init_weights(SPEC.n_params, rng), _sched(), 50, 2, 3, c, seed=0)
    assert tr.t[0] == 4 and np.all(tr.delta_sq == 0) and np.all(tr.expected_next == 0)
    assert np.all(tr.rhs > 0)


def test_next_states_match_sgd_step(rng):
    S = TASK.sample(6, rng)
    ctx = losses.LossContext(HINGE, SPEC, S)
    w = hn.init_weights(SPEC.n_params, rng) * 1.7
    A = st.next_states_all(ctx, _sched(), w, 5)
    for i in range(6):
        w1, _ = dyn.sgd_step(w, 5, ctx, _sched(), idx=i)
        assert np.allclose(A[i], w1, rtol=1e-12, atol=1e-15)


# ---------------------------------------------------------------- bounds


def test_m1_example1_closed_form():
    c = ex1_constants()
    assert abs(c.m1 - 24 * math.sqrt(2)) <= 1e-12 * 24 * math.sqrt(2)
    assert c.m1 == pytest.approx(4 * (2**1.5 + 4 * math.sqrt(2)), rel=1e-15)


def test_m_constants_formulas():
    c = st.BoundConstants(H=2.0, sigma_bar_sq=1.5, sigma_lower_sq=0.5, L=0.7, beta=2.0, gamma=0.1, c2=1.5,
                          n=100)
    assert c.m2 == pytest.approx(8 * 1.5 / (2 * 0.5) * (0.7 + 0.1 * 100), rel=1e-15)
    assert c.m1p == pytest.approx(8 * 1.5 * 1.5 / 0.5 + 4 * 1.5 * 2.0 / (2 * 0.5), rel=1e-15)
    assert c.m2p == pytest.approx(32 * math.e * 1.5**2 * 2.0 * 1.5 / (4 * 0.25), rel=1e-15)
    k = c.replace(k1=2.0, k2=3.0)
    assert k.m1 == pytest.approx(4 * 1.5 * 2 / 0.5 * (6 * 1.5 + 1.0), rel=1e-15)


def test_bound31_value_and_limit():
    c = ex1_constants(n=1000, T=10_000)
    m1, m2 = c.m1, c.m2
    ref = (c.L * m2) ** (1 / (m1 + 1)) * (1 + 1 / m1) * 10_000 ** (m1 / (m1 + 1)) / 1000
    b = st.bound_thm31(c)
    assert b.value == pytest.approx(ref, rel=1e-14) and b.valid
    vals = [st.bound_thm31(c.replace(L=L)).value for L in (1e-2, 1e-8, 1e-64)]
    assert vals[0] > vals[1] > vals[2] and vals[2] < 1e-2
    assert st.bound_thm31(c.replace(L=0.0)).value == 0.0


def test_bound31_validity_flags():
    c = ex1_constants(n=10, T=5)
    b = st.bound_thm31(c)
    assert not b.valid and "L*m2 >= T" in b.violations
    b = st.bound_thm31(ex1_constants(n=10, T=10_000, t0=10_000))
    assert "t0 >= T" in b.violations


def _relaxed(c, t0, zeta):
    A = math.e / (c.m1p + 1) * (1 + c.T / c.n) * c.m2p / c.n * c.T**c.m1p / 2
    return A * zeta * t0 ** (-(c.m1p + 1)) + c.beta * c.sigma_bar_sq / zeta + c.sigma_bar_sq * t0 / c.n


def test_bound52_closed_form_is_min_of_relaxation():
    c = st.BoundConstants(H=2.0, sigma_bar_sq=1.03, sigma_lower_sq=0.98, L=0.34, beta=0.99, n=512, T=2048)
    b = st.bound_thm52(c)
    res = optimize.minimize(lambda p: _relaxed(c, math.exp(p[0]), math.exp(p[1])),
                            x0=[math.log(100.0), 0.0], method="Nelder-Mead",
                            options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 20_000})
    assert b.value == pytest.approx(res.fun, rel=1e-6)
    assert b.extras["t0"] == pytest.approx(math.exp(res.x[0]), rel=1e-3)
    assert st.bound_thm52_exact(c).value >= b.value


def test_bound52_exact_matches_brute_force():
    c = st.BoundConstants(H=2.0, sigma_bar_sq=1.03, sigma_lower_sq=0.98, L=0.34, beta=0.99, n=256, T=1024)
    ex = st.bound_thm52_exact(c)
    A = st.divergence_constant(c) * c.T**c.m1p / 2
    t0 = np.geomspace(1e-3, 1e6, 200_001)
    zeta = np.sqrt(c.beta * c.sigma_bar_sq / (A * t0 ** (-(c.m1p + 1))))
    g = A * (zeta + c.beta) * t0 ** (-(c.m1p + 1)) + c.beta * c.sigma_bar_sq / zeta + c.sigma_bar_sq * t0 / c.n
    assert ex.value == pytest.approx(g.min(), rel=1e-6)


def test_lemma51_zeta_minimizes():
    c = ex1_constants(n=100, T=1000, t0=5)
    eps2 = 0.01
    b = st.bound_lemma51(c, eps2)
    assert b.extras["zeta"] == pytest.approx(math.sqrt(2 * c.beta * c.sigma_bar_sq / eps2), rel=1e-15)
    res = optimize.minimize_scalar(lambda z: st.bound_lemma51(c, eps2, zeta=z).value, bounds=(1.0, 1e4),
                                   method="bounded", options={"xatol": 1e-8})
    assert b.value == pytest.approx(res.fun, rel=1e-9)
    assert st.bound_lemma51(c, 0.0).value == pytest.approx(5 / 100 * c.sigma_bar_sq, rel=1e-15)
    with pytest.raises(InvalidConstants):
        st.bound_lemma51(c, -1.0)


def test_classic_convex_sum():
    c = ex1_constants(n=1000, T=100)
    etas = 0.1 / np.arange(1, 101)
    cb = st.classic_bounds(c, etas)
    ref = 2 * c.L**2 / 1000 * math.fsum(etas)
    assert abs(cb["convex"].value - ref) <= 1e-12 * ref
    assert cb["nonconvex"].extras["c"] == pytest.approx(0.1, rel=1e-14)
    assert not st.classic_bounds(c, np.linspace(0.1, 0.2, 100))["nonconvex"].valid


def test_separation_lambda():
    c = ex1_constants(mu=losses.example1_pl_constant(), B=1.0)
    assert c.lam == pytest.approx(losses.example1_pl_constant() - 36 * 2**1.5, rel=1e-14)
    with pytest.raises(InvalidConstants):
        st.separation_rates(c, 1.0, 10_000)
    ok = ex1_constants(mu=400.0, B=1.0)
    r = st.separation_rates(ok, 0.5, 10_000)
    assert r["harmonic"] == pytest.approx(10_000 ** (-0.5 * ok.lam)) and r["harmonic"] < r["log_damped"]


def test_gap_floor_diag():
    d = st.gap_lower_bound_diag([1.0, 0.4, 0.5], 1.0)
    assert list(d.flags) == [False, True, True] and d.floor == 0.5
    assert not st.gap_lower_bound_diag(1.0, 1.0).any
    with pytest.raises(InvalidConstants):
        st.gap_lower_bound_diag(0.1, 0.0)


def test_constants_strict_parsing(tmp_path):
    with pytest.raises(InvalidConstants):
        st.BoundConstants.from_dict({"H": 3, "sigma_bar_sq": 1, "sigma_lower_sq": 1, "L": 1, "beta": 1, "bogus": 2})
    with pytest.raises(InvalidConstants):
        st.BoundConstants(H=3, sigma_bar_sq=1, sigma_lower_sq=0.0, L=1, beta=1).m1
    with pytest.raises(InvalidConstants):
        st.BoundConstants(H=3, sigma_bar_sq=1, sigma_lower_sq=1, L=-1, beta=1).m1
    c = ex1_constants(n=7)
    assert st.BoundConstants.from_dict(c.to_dict()) == c
