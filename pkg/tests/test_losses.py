import math

import numpy as np
import pytest

from homolens import homognet as hn
from homolens import losses
from homolens.data import Dataset, SyntheticTask
from homolens.errors import DimensionMismatch, InvalidSpec, UndefinedRatio

EX1 = losses.LossKind.example1(2, 3.0)
MM = losses.LossKind.max_margin()


def test_example1_floor_and_ceiling():
    assert losses.loss_value(EX1, None, np.array([1.0, 0.0])) == 1.0
    assert losses.loss_value(EX1, None, np.array([0.0, 1.0])) == pytest.approx(2**1.5, rel=1e-15)
    g = losses.loss_grad(EX1, None, np.array([0.0, 1.0]))
    assert np.linalg.norm(g) == pytest.approx(6 * math.sqrt(2), rel=1e-15)


def test_example1_sphere_projection():
    assert losses.sphere_loss(EX1, None, np.array([2.0, 0.0])) == 1.0


def test_example1_gradient_fd(rng):
    for D in (2, 3, 5):
        for _ in range(5):
            w = rng.standard_normal(D)
            g = losses.example1_grad(w)
            h = 1e-6
            fd = np.array([(losses.example1_value(w + h * e) - losses.example1_value(w - h * e)) / (2 * h)
                           for e in np.eye(D)])
            assert np.linalg.norm(fd - g) <= 1e-7 * np.linalg.norm(g)


def test_example1_hessian_fd(rng):
    v = rng.standard_normal(3)
    h = 1e-6
    fd = np.array([(losses.example1_grad(v + h * e) - losses.example1_grad(v - h * e)) / (2 * h) for e in np.eye(3)])
    assert np.allclose(fd, losses.example1_hessian(v), rtol=1e-6, atol=1e-7)


def test_example1_excess_no_cancellation():
    w = np.array([1.0, 1e-9])
    assert losses.example1_excess(w) == pytest.approx(1.5 * 1e-18, rel=1e-6)


def test_max_margin_inactive_branch(rng):
    spec = hn.mlp(3, (4, 1), hn.relu())
    w = rng.standard_normal(spec.n_params)
    x, y = _active_sample(spec, w, rng, sign=1.0)
    assert losses.loss_value(MM, spec, w, (x, y)) == 0.0
    assert not np.any(losses.loss_grad(MM, spec, w, (x, y)))


def test_kink_gradient_zero():
    _, d = losses.outer(MM, np.array([0.0]), np.array([1.0]))
    assert d[0] == 0.0
    _, d = losses.outer(losses.LossKind.hinge(), np.array([1.0]), np.array([1.0]))
    assert d[0] == 0.0


def test_loss_homogeneity(rng):
    spec = hn.mlp(4, (5, 1), hn.relu(), front=hn.sigmoid())
    pm = losses.LossKind.power_max_margin(2.0)
    w = rng.standard_normal(spec.n_params)
    x = rng.standard_normal(4)
    y = -float(np.sign(hn.forward(spec, w, x)))
    for c in (0.5, 2.0, 10.0):
        assert losses.loss_value(MM, spec, c * w, (x, y)) == pytest.approx(
            c**2 * losses.loss_value(MM, spec, w, (x, y)), rel=1e-12)
        assert losses.loss_value(pm, spec, c * w, (x, y)) == pytest.approx(
            c**4 * losses.loss_value(pm, spec, w, (x, y)), rel=1e-12)
    assert losses.loss_value(EX1, None, 3 * np.array([0.3, -0.8])) == pytest.approx(
        27 * losses.loss_value(EX1, None, np.array([0.3, -0.8])), rel=1e-13)


def _active_sample(spec, w, rng, sign=-1.0):
    while True:
        x = rng.standard_normal(spec.input_dim)
        z = hn.forward(spec, w, x)
        if abs(z) > 1e-3:
            return x, sign * float(np.sign(z))


def test_rho_max_margin_is_one(rng):
    spec = hn.mlp(3, (3, 3, 1), hn.relu())
    w = hn.init_weights(spec.n_params, rng) * 2.0
    x, y = _active_sample(spec, w, rng)
    assert losses.rho_ratio(MM, spec, w, (x, y)) == 1.0


def test_rho_power_max_margin_is_eight(rng):
    spec = hn.mlp(3, (3, 3, 1), hn.relu())
    w = hn.init_weights(spec.n_params, rng) * 2.0
    x, y = _active_sample(spec, w, rng)
    rho = losses.rho_ratio(losses.LossKind.power_max_margin(2.0), spec, w, (x, y))
    assert rho == pytest.approx(8.0, rel=1e-12)


def test_rho_hinge_active_is_one(rng):
    spec = hn.mlp(3, (3, 1), hn.relu())
    w = hn.init_weights(spec.n_params, rng) * 1.5
    x, y = _active_sample(spec, w, rng)
    assert losses.rho_ratio(losses.LossKind.hinge(), spec, w, (x, y)) == 1.0


def test_rho_undefined(rng):
    spec = hn.mlp(3, (3, 1), hn.relu())
    w = hn.init_weights(spec.n_params, rng)
    x, y = _active_sample(spec, w, rng, sign=1.0)
    with pytest.raises(UndefinedRatio):
        losses.rho_ratio(MM, spec, w, (x, y))


def test_analytic_constants():
    c = losses.example1_constants()
    assert c.sigma_lower_sq == 1.0
    assert c.sigma_bar_sq == pytest.approx(2**1.5, rel=1e-15)
    assert c.lipschitz_L == pytest.approx(6 * math.sqrt(2), rel=1e-15)
    assert c.smooth_beta == pytest.approx(12 * math.sqrt(2), rel=1e-15)
    assert c.approx_gamma == 0.0
    assert c.tag() == {"method": "Analytic"}


def test_example1_pl_constant():
    # infimum over the sphere and the far-axis value
    assert losses.example1_pl_constant() == pytest.approx(19.459, abs=1e-3)
    v = np.array([0.0, 1.0])
    g = losses.example1_grad(v)
    far = float(g @ g) / (2 * (losses.example1_value(v) - 1))
    assert far == pytest.approx(19.7, abs=0.05)
    s = np.linspace(1e-3, 1, 2000)
    ratio = 0.5 * 9 * (1 + s) * (1 + 3 * s) / ((1 + s) ** 1.5 - 1)
    assert losses.example1_pl_constant() <= ratio.min() + 1e-9


def test_mc_sigma_bar_bracketed():
    est = losses.estimate_constants(EX1, n_probe=10_000, seed=3, n_starts=4, pgd_iters=50)
    assert 1.0 <= est.sigma_bar_sq <= 2**1.5
    assert est.tag()["method"] == "MonteCarlo"


def test_mc_converges_to_analytic():
    est = losses.estimate_constants(EX1, n_probe=100_000, seed=4)
    ref = losses.example1_constants()
    for a in ("sigma_bar_sq", "sigma_lower_sq", "lipschitz_L", "smooth_beta"):
        assert getattr(est, a) == pytest.approx(getattr(ref, a), rel=0.02), a
    # one-sided: suprema from below, infima from above
    assert est.sigma_bar_sq <= ref.sigma_bar_sq + 1e-12
    assert est.sigma_lower_sq >= ref.sigma_lower_sq - 1e-12


def test_zero_bayes_flagged():
    task = SyntheticTask(4, 0.0, 1.0)
    spec = hn.mlp(4, (1,), hn.linear())
    est = losses.estimate_constants(MM, spec, task, n_probe=32, seed=0, n_starts=4, pgd_iters=60, n_mc=512)
    assert "zero_bayes" in est.flags
    assert est.sigma_lower_sq <= 1e-3


def test_context_checks():
    spec = hn.mlp(3, (1,), hn.linear())
    with pytest.raises(InvalidSpec):
        losses.LossContext(MM, spec)
    ds = Dataset(np.ones((2, 4)), np.array([1.0, -1.0]))
    with pytest.raises(DimensionMismatch):
        losses.LossContext(MM, spec, ds)
