import numpy as np
import pytest

from homolens.data import Dataset, EmpiricalSampler, SyntheticTask, gen_task
from homolens.errors import IndexOutOfRange, InvalidNoiseRate


def clean_labels(ds, task):
    return np.where(ds.X @ task.w_star >= 0, 1.0, -1.0)


def test_noiseless_labels_agree():
    task = SyntheticTask(5, 0.0, 1.0)
    ds = gen_task(5, 0.0, 1.0, seed=1, n=500)
    assert np.array_equal(ds.y, clean_labels(ds, task))


def test_flip_rate_binomial_window():
    task = SyntheticTask(16, 0.3, 1.0)
    ds = gen_task(16, 0.3, 1.0, seed=7, n=10_000)
    rate = np.mean(ds.y != clean_labels(ds, task))
    assert 0.285 <= rate <= 0.315


def test_same_seed_same_dataset():
    a = gen_task(8, 0.2, 2.0, seed=3, n=50)
    b = gen_task(8, 0.2, 2.0, seed=3, n=50)
    assert a.X.tobytes() == b.X.tobytes() and a.y.tobytes() == b.y.tobytes()


def test_inputs_on_sphere():
    ds = gen_task(6, 0.1, 2.5, seed=0, n=100)
    assert np.allclose(np.linalg.norm(ds.X, axis=1), 2.5, rtol=1e-14)


def test_invalid_noise_rate():
    with pytest.raises(InvalidNoiseRate):
        SyntheticTask(4, 0.5)
    with pytest.raises(InvalidNoiseRate):
        SyntheticTask(4, -0.1)


def test_replaced_touches_one_row(rng):
    ds = gen_task(4, 0.3, 1.0, seed=2, n=10)
    new = ds.replaced(3, np.ones(4) * 0.5, -1.0)
    keep = np.arange(10) != 3
    assert np.array_equal(new.X[keep], ds.X[keep]) and np.array_equal(new.y[keep], ds.y[keep])
    assert new.y[3] == -1.0
    with pytest.raises(IndexOutOfRange):
        ds.replaced(10, np.zeros(4), 1.0)


def test_empirical_sampler_draws_rows(rng):
    ds = gen_task(3, 0.3, 1.0, seed=5, n=7)
    out = EmpiricalSampler(ds).sample(40, rng)
    rows = {tuple(r) for r in ds.X}
    assert all(tuple(r) in rows for r in out.X)


def test_dataset_shape_check():
    with pytest.raises(ValueError):
        Dataset(np.zeros((3, 2)), np.zeros(4))
