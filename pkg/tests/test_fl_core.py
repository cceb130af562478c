import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dagafl.fl_core import (
    Dataset,
    DivergenceError,
    ModelDims,
    PartitionMode,
    PartitionSpec,
    class_entropy,
    evaluate_accuracy,
    init_params,
    load_toy_digits,
    local_train,
    loss,
    loss_and_grad,
    make_synthetic,
    partition,
    partition_indices,
    split_train_val_test,
)

DIMS = ModelDims(5, 4, 3)


def toy(n=40, seed=0, dims=DIMS):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, dims.d)), rng.integers(0, dims.c, size=n)


def numeric_grad(w, dims, X, y):
    g = np.zeros_like(w)
    for i in range(len(w)):
        h = 1e-6 * max(1.0, abs(w[i]))
        up, dn = w.copy(), w.copy()
        up[i] += h
        dn[i] -= h
        g[i] = (loss(up, dims, X, y) - loss(dn, dims, X, y)) / (2 * h)
    return g


def rel_error(a, b, floor=1e-6):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor))


def test_param_count():
    assert ModelDims(64, 64, 10).n_params == 64 * 64 + 64 + 64 * 10 + 10
    w = init_params(ModelDims(64, 64, 10), np.random.default_rng(0))
    assert w.shape == (4810,)
    assert np.all(np.abs(w[:64 * 64]) <= 1 / 8)


@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    w = init_params(DIMS, rng)
    X, y = toy(7, seed)
    _, g = loss_and_grad(w, DIMS, X, y)
    assert rel_error(g, numeric_grad(w, DIMS, X, y)) < 1e-5


def test_zero_lr_is_identity():
    X, y = toy()
    w = init_params(DIMS, np.random.default_rng(1))
    out = local_train(w, DIMS, X, y, epochs=3, lr=0.0, seed=0)
    assert np.array_equal(out, w) and out is not w


def test_single_step_decreases_loss():
    X, y = toy(1)
    w = init_params(DIMS, np.random.default_rng(2))
    before = loss(w, DIMS, X, y)
    after = loss(local_train(w, DIMS, X, y, epochs=1, lr=0.1, seed=0, batch_size=1), DIMS, X, y)
    assert after < before


def test_training_is_deterministic_and_pure():
    X, y = toy(100)
    w = init_params(DIMS, np.random.default_rng(3))
    snapshot = w.copy()
    a = local_train(w, DIMS, X, y, 2, 0.05, seed=[7, 1])
    b = local_train(w, DIMS, X, y, 2, 0.05, seed=[7, 1])
    c = local_train(w, DIMS, X, y, 2, 0.05, seed=[7, 2])
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert np.array_equal(w, snapshot)


def test_divergence_is_reported():
    X, y = toy()
    X = X * 1e6
    w = init_params(DIMS, np.random.default_rng(4))
    with pytest.raises(DivergenceError, match="divergence"):
        local_train(w, DIMS, X, y, 20, 1e6, seed=0)


def test_zero_model_ties_break_to_class_zero():
    dims = ModelDims(2, 3, 2)
    X = np.random.default_rng(0).normal(size=(50, 2))
    y = np.array([0, 1] * 25)
    assert evaluate_accuracy(np.zeros(dims.n_params), dims, X, y) == 0.5


def test_memorizes_separable_points():
    rng = np.random.default_rng(5)
    dims = ModelDims(2, 8, 2)
    X = np.vstack([rng.normal(-2, 0.3, size=(10, 2)), rng.normal(2, 0.3, size=(10, 2))])
    y = np.array([0] * 10 + [1] * 10)
    w = local_train(init_params(dims, rng), dims, X, y, epochs=200, lr=0.1, seed=0, batch_size=4)
    assert evaluate_accuracy(w, dims, X, y) == 1.0


def test_accuracy_bounds():
    X, y = toy()
    for s in range(5):
        acc = evaluate_accuracy(init_params(DIMS, np.random.default_rng(s)), DIMS, X, y)
        assert 0.0 <= acc <= 1.0
    with pytest.raises(ValueError):
        evaluate_accuracy(np.zeros(DIMS.n_params), DIMS, X[:0], y[:0])


def test_iid_partition_even():
    ds = make_synthetic(0, n_samples=1000)
    parts = partition(ds, PartitionSpec(PartitionMode.IID, 10), np.random.default_rng(0))
    assert [len(p) for p in parts] == [100] * 10


def test_single_client_gets_everything():
    ds = make_synthetic(0, n_samples=300)
    for spec in (PartitionSpec(PartitionMode.IID, 1), PartitionSpec(PartitionMode.DIRICHLET, 1, 0.1)):
        (only,) = partition(ds, spec, np.random.default_rng(1))
        assert np.array_equal(np.sort(only.index), np.arange(300))


def test_more_clients_than_samples():
    with pytest.raises(ValueError):
        partition_indices(np.zeros(3, dtype=int), 1, PartitionSpec(PartitionMode.IID, 4),
                          np.random.default_rng(0))


def test_large_beta_is_nearly_uniform():
    labels = np.repeat(np.arange(10), 500)
    shares = []
    for seed in range(5):
        parts = partition_indices(labels, 10, PartitionSpec(PartitionMode.DIRICHLET, 10, 1000.0),
                                  np.random.default_rng(seed))
        for p in parts:
            shares.append(np.bincount(labels[p], minlength=10) / len(p))
    assert np.max(np.abs(np.mean(shares, axis=0) - 0.1)) < 0.05
    assert np.max(np.abs(np.array(shares) - 0.1)) < 0.05


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 20), st.sampled_from([None, 0.05, 0.5, 5.0]), st.integers(0, 10**6))
def test_partition_conserves_samples(k, beta, seed):
    labels = np.random.default_rng(seed).integers(0, 4, size=200)
    spec = PartitionSpec(PartitionMode.IID, k) if beta is None else \
        PartitionSpec(PartitionMode.DIRICHLET, k, beta, min_samples=0)
    parts = partition_indices(labels, 4, spec, np.random.default_rng(seed))
    assert len(parts) == k
    assert np.array_equal(np.sort(np.concatenate(parts)), np.arange(200))


def test_heterogeneity_ordering():
    ds = load_toy_digits()

    def mean_entropy(text):
        vals = []
        for seed in range(10):
            parts = partition(ds, PartitionSpec.parse(text, 10), np.random.default_rng(seed))
            vals += [class_entropy(p.y, 10) for p in parts]
        return np.mean(vals)

    e005, e01, iid = mean_entropy("dirichlet:0.05"), mean_entropy("dirichlet:0.1"), mean_entropy("iid")
    assert e005 <= e01 <= iid


def test_split_ratios():
    ds = make_synthetic(1, n_samples=1000)
    tr, va, te = split_train_val_test(ds, np.random.default_rng(0))
    assert (len(tr), len(va), len(te)) == (800, 100, 100)
    assert np.array_equal(np.sort(np.concatenate([tr.index, va.index, te.index])), np.arange(1000))


def test_dataset_csv_roundtrip(tmp_path):
    ds = make_synthetic(2, n_samples=30, d=4, c=3)
    ds.to_csv(tmp_path / "d.csv")
    back = Dataset.from_csv(tmp_path / "d.csv", n_classes=3)
    assert np.array_equal(back.X, ds.X) and np.array_equal(back.y, ds.y)


def test_partition_spec_parse():
    assert PartitionSpec.parse("iid", 3).mode is PartitionMode.IID
    assert PartitionSpec.parse("dirichlet:0.05", 3).beta == 0.05
    with pytest.raises(ValueError):
        PartitionSpec.parse("dirichlet:0", 3)
    with pytest.raises(ValueError):
        PartitionSpec.parse("zipf", 3)
