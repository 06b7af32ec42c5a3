import math

import numpy as np
import pytest

from homolens import homognet as hn
from homolens.errors import DimensionMismatch, InvalidSpec, ZeroNormalizedLayer


def naive_forward(mats, kinds, x):
    # independent oracle: per-unit loops, activation first, then the matrix
    a = list(x)
    for (kind, act, mode, resid), W in zip(kinds, mats):
        s = [act(v) for v in a]
        W = np.array(W, dtype=float)
        if kind == "n":
            if mode == "row":
                W = np.array([r / math.sqrt(sum(q * q for q in r)) for r in W])
            else:
                W = W / math.sqrt(float((W * W).sum()))
        z = [sum(W[o, k] * s[k] for k in range(len(s))) for o in range(W.shape[0])]
        if resid:
            z = [zi + ai for zi, ai in zip(z, a)]
        a = z
    return a[0]


relu_s = lambda v: max(v, 0.0)
sig_s = lambda v: 1.0 / (1.0 + math.exp(-v))
lin_s = lambda v: v


def test_single_linear_layer_is_dot_product(rng):
    spec = hn.NetworkSpec([hn.unnormalized(4, 1, hn.linear())])
    w = rng.standard_normal(4)
    x = rng.standard_normal(4)
    assert spec.degree == 1.0
    assert hn.forward(spec, w, x) == pytest.approx(float(w @ x), rel=1e-15)


def test_relu_mlp_half_scale(rng):
    spec = hn.mlp(5, (6, 4, 1), hn.relu())
    assert spec.degree == 3.0
    w = rng.standard_normal(spec.n_params)
    x = rng.standard_normal(5)
    assert hn.forward(spec, 0.5 * w, x) == pytest.approx(0.125 * hn.forward(spec, w, x), rel=1e-12)


def test_forward_matches_naive_oracle(rng):
    spec = hn.NetworkSpec([
        hn.normalized(3, 3, hn.sigmoid(), residual=True),
        hn.normalized(3, 4, hn.sigmoid(), norm_mode=hn.FROBENIUS),
        hn.unnormalized(4, 2, hn.relu()),
        hn.unnormalized(2, 1, hn.linear()),
    ])
    kinds = [("n", sig_s, "row", True), ("n", sig_s, "fro", False), ("u", relu_s, None, False),
             ("u", lin_s, None, False)]
    for _ in range(5):
        w = rng.standard_normal(spec.n_params)
        x = rng.standard_normal(3)
        ref = naive_forward(spec.unflatten(w), kinds, x)
        assert hn.forward(spec, w, x) == pytest.approx(ref, rel=1e-12, abs=1e-14)


def test_degree_recursion():
    # d <- u d + 1 over unnormalized layers
    spec = hn.mlp(3, (3, 3, 1), hn.power_relu(2.0))
    assert spec.degree == 2 * (2 * 1 + 1) + 1
    assert hn.desk_network(16).degree == 3.0
    assert hn.desk_network(16, smooth=True).degree == 3.0
    with pytest.raises(InvalidSpec):
        hn.NetworkSpec([hn.unnormalized(3, 1, hn.relu())], degree=2.0)


def test_scale_one_is_exact(rng):
    spec = hn.desk_network(6)
    w = rng.standard_normal(spec.n_params)
    rep = hn.verify_homogeneity(spec, w, rng.standard_normal(6), [1.0])
    assert rep.max_rel_error == 0.0


def test_homogeneity_three_layer_relu(rng):
    spec = hn.mlp(8, (8, 8, 1), hn.relu())
    w = rng.standard_normal(spec.n_params)
    X = rng.standard_normal((20, 8))
    assert hn.verify_homogeneity(spec, w, X, [0.5, 2.0, 10.0]).max_rel_error <= 1e-9


def test_layer_invariants():
    with pytest.raises(InvalidSpec):
        hn.unnormalized(3, 1, hn.sigmoid())
    with pytest.raises(InvalidSpec):
        hn.normalized(3, 4, hn.sigmoid(), residual=True)
    with pytest.raises(InvalidSpec):
        hn.NetworkSpec([hn.unnormalized(3, 3), hn.normalized(3, 3), hn.unnormalized(3, 1)])
    with pytest.raises(InvalidSpec):
        hn.NetworkSpec([hn.normalized(3, 1)])
    with pytest.raises(InvalidSpec):
        hn.leaky_relu(1.5)
    with pytest.raises(InvalidSpec):
        hn.power_relu(0.5)


def test_errors(rng):
    spec = hn.desk_network(4)
    w = rng.standard_normal(spec.n_params)
    with pytest.raises(DimensionMismatch):
        hn.forward(spec, w, np.ones(5))
    with pytest.raises(DimensionMismatch):
        hn.forward(spec, w[:-1], np.ones(4))
    w0 = w.copy()
    w0[spec.layer_slice(0)] = 0.0
    with pytest.raises(ZeroNormalizedLayer):
        hn.forward(spec, w0, np.ones(4))


def test_layout_roundtrip(rng):
    spec = hn.desk_network(5)
    assert spec.n_params == sum(l.in_dim * l.out_dim for l in spec.layers)
    w = rng.standard_normal(spec.n_params)
    assert np.array_equal(spec.flatten(spec.unflatten(w)), w)
    assert hn.NetworkSpec.from_json(spec.to_json()) == spec


def test_kink_subgradient_zero():
    a = hn.relu()
    assert a.deriv(np.array([0.0]))[0] == 0.0
    assert hn.leaky_relu(0.2).deriv(np.array([0.0]))[0] == 0.0
    assert hn.power_relu(2.0).deriv(np.array([0.0]))[0] == 0.0
    assert not hn.power_relu(2.0).has_kink


def test_gradient_against_central_differences(rng):
    spec = hn.NetworkSpec([
        hn.normalized(4, 4, hn.sigmoid(), residual=True),
        hn.normalized(4, 3, hn.sigmoid(), norm_mode=hn.FROBENIUS),
        hn.unnormalized(3, 3, hn.power_relu(2.0)),
        hn.unnormalized(3, 1, hn.linear()),
    ])
    w = rng.standard_normal(spec.n_params)
    x = rng.standard_normal(4)
    _, g = hn.value_and_grad(spec, w, x)
    h = 1e-6
    fd = np.array([(hn.forward(spec, w + h * e, x) - hn.forward(spec, w - h * e, x)) / (2 * h)
                   for e in np.eye(spec.n_params)])
    assert np.max(np.abs(fd - g)) <= 1e-6 * max(1.0, np.max(np.abs(g)))


def test_batch_gradients_match_single(rng):
    spec = hn.desk_network(4)
    w = rng.standard_normal(spec.n_params)
    X = rng.standard_normal((6, 4))
    G = hn.grad(spec, w, X)
    for m in range(6):
        assert np.allclose(G[m], hn.grad(spec, w, X[m]), rtol=1e-12, atol=1e-14)
    coef = rng.standard_normal(6)
    _, wg = hn.weighted_grad(spec, w, X, coef)
    assert np.allclose(wg, coef @ G, rtol=1e-12, atol=1e-13)


def test_euler_identity_network(rng):
    spec = hn.mlp(5, (4, 3, 1), hn.leaky_relu(0.3), front=hn.sigmoid())
    for _ in range(10):
        w = rng.standard_normal(spec.n_params)
        assert hn.euler_rel_error(spec, w, rng.standard_normal(5)) <= 1e-10
