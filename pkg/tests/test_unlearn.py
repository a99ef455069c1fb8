import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import central_diff, grad_errors
from regunlearn.data import (
    LabelBand,
    RegressionDataset,
    SplitDataset,
    SplitSpec,
    generate_synthetic,
    split,
)
from regunlearn.metrics import error_on
from regunlearn.nn import Layer, ModelSpec, RegressionModel, TrainConfig, forward_batch, init_model, train
from regunlearn.unlearn import (
    AmnesiacConfig,
    BlindspotConfig,
    amnesiac_relabel,
    attn_loss,
    blindspot_batch,
    blindspot_step_loss,
    blindspot_unlearn,
    finetune,
    gaussian_amnesiac,
    neggrad,
    retrain_oracle,
    sequential_unlearn,
    train_blindspot,
    uniform_amnesiac,
    unlearn,
)

SPEC = ModelSpec.mlp([4, 8, 4, 1])


@pytest.fixture(scope="module")
def small():
    ds = generate_synthetic(0, 400, 4, noise_std=2.0)
    sp = split(ds, SplitSpec(LabelBand(None, 42.0), 0.2, 0))
    original = train(SPEC, sp.train, TrainConfig(epochs=40, learning_rate=0.01))
    return ds, sp, original


def _snapshot(m):
    return np.array(m.params)


# -- retrain ------------------------------------------------------------------

def test_retrain_differs_from_original_and_is_deterministic(small):
    _, sp, original = small
    cfg = TrainConfig(epochs=40, learning_rate=0.01)
    r1 = retrain_oracle(SPEC, sp, cfg)
    assert not r1 == original
    assert r1 == retrain_oracle(SPEC, sp, cfg)


def test_retrain_recovers_generator_weights_on_linear_data():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(400, 2))
    w_true = np.array([3.0, -1.0])
    ds = RegressionDataset(X, X @ w_true)
    sp = split(ds, SplitSpec(LabelBand(1.0, None), 0.2, 0))
    lin = ModelSpec((Layer(2, 1, "identity"),))
    m = retrain_oracle(lin, sp, TrainConfig(epochs=300, learning_rate=0.01, loss="mse"))
    w_ls = np.linalg.lstsq(sp.retain.X, sp.retain.y, rcond=None)[0]
    assert np.allclose(w_ls, w_true, atol=1e-9)
    assert np.max(np.abs(m.params[:2] - w_true)) <= 5e-2


def test_retrain_empty_retain():
    ds = RegressionDataset(np.zeros((5, 1)), np.ones(5))
    empty = ds.subset([])
    with pytest.raises(ValueError):
        retrain_oracle(ModelSpec.mlp([1, 1]), SplitDataset(empty, ds, empty, empty), TrainConfig(epochs=1))


# -- finetune -----------------------------------------------------------------

def test_finetune_pure_and_descends(small):
    _, sp, original = small
    before = _snapshot(original)
    n = len(sp.retain)
    cfg = TrainConfig(epochs=1, learning_rate=1e-4, batch_size=n, optimizer="sgd")
    out = finetune(original, sp, cfg)
    assert np.array_equal(original.params, before)
    assert error_on(out.model, sp.retain) <= error_on(original, sp.retain)
    assert out.method == "finetune" and out.wall_time_seconds >= 0


def test_finetune_zero_epochs():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0, learning_rate=1e-3)


# -- neggrad ------------------------------------------------------------------

def test_neggrad_hand_trace():
    lin = RegressionModel(ModelSpec((Layer(1, 1, "identity"),)), [1.0, 0.0])
    ds = RegressionDataset([[1.0]], [0.0])
    sp = SplitDataset(ds, ds, ds, ds)
    out = neggrad(lin, sp, TrainConfig(epochs=1, learning_rate=0.1, batch_size=1, loss="mse", optimizer="sgd"))
    assert out.model.params[0] == pytest.approx(1.2)
    assert lin.params[0] == 1.0


def test_neggrad_tiny_step_does_not_decrease_forget_loss():
    spec = ModelSpec.mlp([4, 6, 1], "tanh")
    ds = generate_synthetic(1, 100, 4)
    sp = split(ds, SplitSpec(LabelBand(None, 45.0), 0.2, 1))
    m = init_model(spec, 1)
    cfg = TrainConfig(epochs=1, learning_rate=1e-6, batch_size=len(sp.forget), loss="mse", optimizer="sgd")
    out = neggrad(m, sp, cfg)
    assert error_on(out.model, sp.forget, "mse") >= error_on(m, sp.forget, "mse")


# -- amnesiac -----------------------------------------------------------------

def test_relabel_size_and_retain_labels(small):
    _, sp, _ = small
    d = amnesiac_relabel(sp, AmnesiacConfig(seed=3))
    assert len(d) == len(sp.retain) + len(sp.forget)
    lookup = dict(zip(d.ids.tolist(), d.y.tolist()))
    assert all(lookup[i] == y for i, y in zip(sp.retain.ids.tolist(), sp.retain.y.tolist()))


def test_relabel_constant_labels_gives_mu():
    X = np.zeros((10, 1))
    ds = RegressionDataset(X, np.full(10, 7.0))
    sp = SplitDataset(ds.subset(range(5)), ds.subset(range(5, 10)), ds.subset([]), ds.subset([]))
    d = amnesiac_relabel(sp, AmnesiacConfig())
    assert np.all(d.y == 7.0)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), dist=st.sampled_from(["gaussian", "uniform"]))
def test_property_relabel_invariants(seed, dist):
    ds = generate_synthetic(seed % 7, 60, 2)
    sp = split(ds, SplitSpec(LabelBand(None, 50.0), 0.2, seed % 5))
    d = amnesiac_relabel(sp, AmnesiacConfig(distribution=dist, seed=seed))
    assert len(d) == len(sp.retain) + len(sp.forget)
    assert sorted(d.ids.tolist()) == sorted(sp.retain.ids.tolist() + sp.forget.ids.tolist())
    keep = np.isin(d.ids, sp.retain.ids)
    by_id = dict(zip(sp.retain.ids.tolist(), sp.retain.y.tolist()))
    assert all(by_id[i] == y for i, y in zip(d.ids[keep].tolist(), d.y[keep].tolist()))
    if dist == "uniform":
        assert np.all((d.y[~keep] >= 1.0) & (d.y[~keep] < 101.0))


def test_gaussian_decoy_mean_matches_training_labels():
    rng = np.random.default_rng(0)
    y = rng.normal(50, 15, size=20000)
    ds = RegressionDataset(np.zeros((20000, 1)), y)
    sp = SplitDataset(ds.subset(range(10000)), ds.subset(range(10000, 20000)), ds.subset([]), ds.subset([]))
    d = amnesiac_relabel(sp, AmnesiacConfig(fit_on="all", seed=1))
    decoys = d.y[np.isin(d.ids, sp.forget.ids)]
    mu, sigma = y.mean(), y.std()
    assert abs(decoys.mean() - mu) <= 3 * sigma / math.sqrt(10000)


def test_amnesiac_config_validation():
    with pytest.raises(ValueError):
        AmnesiacConfig(distribution="laplace")
    with pytest.raises(ValueError):
        AmnesiacConfig(distribution="uniform", uniform_range=(5, 5))
    with pytest.raises(ValueError):
        AmnesiacConfig(fit_on="retain")


def test_gaussian_amnesiac_deterministic_and_raises_forget_error(small):
    _, sp, original = small
    cfg = AmnesiacConfig(epochs=5, learning_rate=1e-2)
    a = gaussian_amnesiac(original, sp, cfg)
    b = gaussian_amnesiac(original, sp, cfg)
    assert a.model == b.model
    assert error_on(a.model, sp.forget) > error_on(original, sp.forget)


def test_uniform_amnesiac_is_the_uniform_arm(small):
    _, sp, original = small
    out = uniform_amnesiac(original, sp, AmnesiacConfig(seed=2))
    assert out.method == "uniform_amnesiac"
    assert out.config["distribution"] == "uniform"


# -- attention loss and step loss ---------------------------------------------

def test_attn_loss_examples():
    phi = [np.array([0.0, 1.0]), np.array([0.3])]
    theta = [np.array([1.0, 1.0]), np.array([0.9])]
    assert attn_loss(phi, phi, 50.0) == 0.0
    assert attn_loss(phi, theta, 0.0) == 0.0
    expected = 50 * np.linalg.norm(np.array([0.0, 1.0]) - np.array([1.0, 1.0]) / math.sqrt(2))
    assert attn_loss(phi, theta, 50.0, 1) == pytest.approx(expected, abs=1e-12)
    assert attn_loss(phi, theta, 50.0, 1) == pytest.approx(38.268, abs=1e-3)


def test_attn_loss_zero_vector_left_as_is():
    phi = [np.zeros(3), np.array([0.0])]
    theta = [np.array([0.0, 3.0, 4.0]), np.array([0.0])]
    assert attn_loss(phi, theta, 1.0) == pytest.approx(1.0)


def test_attn_loss_k_out_of_range():
    tr = [np.ones(2), np.ones(1)]
    with pytest.raises(ValueError):
        attn_loss(tr, tr, 1.0, k=2)


def test_step_loss_examples():
    phi = [np.array([0.0, 1.0]), np.array([3.0])]
    theta = [np.array([1.0, 1.0]), np.array([0.0])]
    assert blindspot_step_loss(5.0, 99.0, 3.0, phi, theta, False, "mae") == 2.0
    d = attn_loss(phi, theta, 1.0)
    assert blindspot_step_loss(3.0, 0.0, 42.0, phi, theta, True, "mae", lam=0.5 / d) == pytest.approx(3.5)
    assert blindspot_step_loss(1.5, 1.5, 9.0, phi, phi, True, "mae") == 0.0


@settings(max_examples=50, deadline=None)
@given(out=st.floats(-50, 50), label=st.floats(-50, 50), b=st.floats(-50, 50),
       lam=st.floats(0, 500), k=st.integers(1, 2), noise=st.floats(-3, 3))
def test_property_retain_loss_ignores_blindspot_terms(out, label, b, lam, k, noise):
    phi = [np.array([1.0, 2.0]), np.array([0.5, 0.1]), np.array([out])]
    theta = [phi[0] + noise, phi[1] - noise, np.array([b])]
    base = blindspot_step_loss(out, 0.0, label, phi, phi, False, "mae", 50.0, 1)
    assert blindspot_step_loss(out, b, label, phi, theta, False, "mae", lam, k) == base


def test_blindspot_batch_gradient_matches_finite_differences():
    spec = ModelSpec.mlp([3, 5, 4, 1], "tanh")
    model = init_model(spec, 4)
    blind = init_model(spec, 9)
    rng = np.random.default_rng(2)
    X, y = rng.normal(size=(6, 3)), rng.normal(size=6)
    f = np.array([1, 0, 1, 1, 0, 1], bool)
    for k in (1, 2):
        _, g = blindspot_batch(model, blind, X, y, f, "mse", 7.0, k)
        numeric = central_diff(lambda p: blindspot_batch(model.with_params(p), blind, X, y, f, "mse", 7.0, k)[0],
                               model.params)
        rel, ab = grad_errors(g, numeric)
        assert rel <= 1e-4 and ab <= 1e-8


def test_blindspot_batch_loss_is_mean_of_step_losses():
    spec = ModelSpec.mlp([3, 5, 1], "relu")
    model, blind = init_model(spec, 1), init_model(spec, 2)
    rng = np.random.default_rng(0)
    X, y = rng.normal(size=(4, 3)), rng.normal(size=4)
    f = np.array([0, 1, 0, 1], bool)
    total, _ = blindspot_batch(model, blind, X, y, f, "mae", 50.0, 1)
    p, tp = forward_batch(model, X, capture=True)
    b, tb = forward_batch(blind, X, capture=True)
    per = [blindspot_step_loss(p[i], b[i], y[i], [a[i] for a in tp], [a[i] for a in tb], f[i], "mae", 50.0, 1)
           for i in range(4)]
    assert total == pytest.approx(np.mean(per), abs=1e-12)


# -- blindspot ----------------------------------------------------------------

def test_train_blindspot_preconditions(small):
    _, sp, _ = small
    with pytest.raises(ValueError):
        train_blindspot(SPEC, sp.retain, BlindspotConfig(retain_fraction=0.0))
    with pytest.raises(ValueError):
        BlindspotConfig(blindspot_epochs=0)
    with pytest.raises(ValueError):
        BlindspotConfig(lam=-1)


def test_blindspot_frozen_and_deterministic(small):
    _, sp, original = small
    cfg = BlindspotConfig(blindspot_epochs=2, unlearn_epochs=1)
    helper = train_blindspot(SPEC, sp.retain, cfg)
    helper_params = _snapshot(helper)
    before = _snapshot(original)
    out = blindspot_unlearn(original, sp, cfg, blindspot=helper)
    assert np.array_equal(helper.params, helper_params)
    assert np.array_equal(original.params, before)
    fresh = blindspot_unlearn(original, sp, cfg)
    assert fresh.aux["blindspot"] == helper
    assert fresh.model == out.model


def test_blindspot_retain_fraction_subsets(small):
    _, sp, _ = small
    a = train_blindspot(SPEC, sp.retain, BlindspotConfig(retain_fraction=0.1))
    b = train_blindspot(SPEC, sp.retain, BlindspotConfig(retain_fraction=1.0))
    assert not a == b


# -- dispatch and sequential --------------------------------------------------

def test_unknown_method(small):
    _, sp, original = small
    with pytest.raises(ValueError):
        unlearn("sisa", original, sp, None)


def test_sequential_chain_of_one_equals_single_call(small):
    ds, _, _ = small
    req = SplitSpec(LabelBand(None, 42.0), 0.2, 0)
    sp = split(ds, req)
    original = train(SPEC, sp.train, TrainConfig(epochs=10))
    cfg = BlindspotConfig()
    [seq] = sequential_unlearn(original, ds, [req], "blindspot", cfg)
    assert seq.model == blindspot_unlearn(original, sp, cfg).model


def test_sequential_three_requests_disjoint(small):
    ds, _, _ = small
    reqs = [SplitSpec(LabelBand(None, 35.0)), SplitSpec(LabelBand(35.0, 42.0)), SplitSpec(LabelBand(42.0, 48.0))]
    sp0 = split(ds, reqs[0])
    original = train(SPEC, sp0.train, TrainConfig(epochs=10))
    outs = sequential_unlearn(original, ds, reqs, "finetune", TrainConfig(epochs=1, learning_rate=1e-3))
    assert len(outs) == 3
    with pytest.raises(ValueError):
        sequential_unlearn(original, ds, [reqs[0], SplitSpec(LabelBand(30.0, 40.0))], "finetune",
                           TrainConfig(epochs=1))

