import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import central_diff, grad_errors, random_small_spec, straight_line_forward
from regunlearn.nn import (
    Layer,
    ModelSpec,
    OptimizerState,
    RegressionModel,
    ShapeError,
    TrainConfig,
    UnsupportedArchitectureError,
    forward,
    forward_batch,
    grad,
    init_model,
    loss,
    optimizer_step,
    per_sample_penultimate_grad,
    train,
)


def linear(w, b=0.0):
    return RegressionModel(ModelSpec((Layer(1, 1, "identity"),)), [w, b])


# -- forward ------------------------------------------------------------------

def test_identity_layer():
    assert forward(linear(1.0), [3.0])[0] == 3.0


def test_affine_by_hand():
    assert forward(linear(2.0, 1.0), [3.0])[0] == 7.0


def test_forward_matches_straight_line_reevaluation():
    rng = np.random.default_rng(5)
    spec = ModelSpec.mlp([3, 5, 1])
    for seed in range(20):
        m = init_model(spec, seed)
        x = rng.normal(size=3)
        assert abs(forward(m, x)[0] - straight_line_forward(m, x)) <= 1e-12


def test_trace_length_and_last_entry_is_prediction():
    m = init_model(ModelSpec.mlp([4, 6, 3, 1], "tanh"), 0)
    pred, trace = forward(m, np.ones(4), capture=True)
    assert len(trace) == 3
    assert trace[-1][0] == pred
    assert forward(m, np.ones(4))[1] is None


def test_forward_shape_error():
    m = init_model(ModelSpec.mlp([4, 1]), 0)
    with pytest.raises(ShapeError):
        forward(m, np.ones(3))
    with pytest.raises(ShapeError):
        forward_batch(m, np.ones((2, 5)))


def test_spec_validation():
    with pytest.raises(ShapeError):
        ModelSpec((Layer(2, 3, "relu"), Layer(4, 1, "identity")))
    with pytest.raises(ShapeError):
        ModelSpec((Layer(2, 2, "identity"),))
    with pytest.raises(ValueError):
        ModelSpec(())
    with pytest.raises(ValueError):
        Layer(2, 1, "gelu")


def test_param_count_and_layout():
    spec = ModelSpec.mlp([8, 32, 16, 1])
    assert spec.n_params == 8 * 32 + 32 + 32 * 16 + 16 + 16 + 1
    assert spec.param_layout[1] == (8 * 32 + 32, 8 * 32 + 32 + 32 * 16)
    with pytest.raises(ShapeError):
        RegressionModel(spec, np.zeros(3))


def test_params_are_read_only():
    m = init_model(ModelSpec.mlp([2, 1]), 0)
    with pytest.raises(ValueError):
        m.params[0] = 1.0


def test_spec_dict_round_trip():
    spec = ModelSpec.mlp([3, 4, 1], "tanh")
    assert ModelSpec.from_dict(spec.to_dict()) == spec


# -- loss ---------------------------------------------------------------------

def test_loss_examples():
    assert loss(2.0, 3.0, "mae") == 1.0
    assert loss(2.0, 3.0, "mse") == 1.0
    assert loss(4.5, 4.5, "mae") == 0.0
    with pytest.raises(ValueError):
        loss(1.0, 2.0, "huber")


# -- gradients ----------------------------------------------------------------

def test_grad_hand_chain_rule():
    m = RegressionModel(ModelSpec((Layer(1, 1, "identity"),)), [1.0, 0.0])
    g = grad(m, [[1.0]], [0.0], "mse")
    assert g[0] == 2.0


def test_grad_zero_loss_batch_is_zero():
    m = init_model(ModelSpec.mlp([3, 4, 1], "tanh"), 2)
    X = np.random.default_rng(0).normal(size=(6, 3))
    y = forward_batch(m, X)[0]
    assert np.all(grad(m, X, y, "mse") == 0.0)


def test_grad_empty_batch():
    m = init_model(ModelSpec.mlp([3, 1]), 0)
    with pytest.raises(ValueError):
        grad(m, np.zeros((0, 3)), np.zeros(0))


def _fd_check(spec, seed, kind="mse", n=4):
    rng = np.random.default_rng([seed, 999])
    m = init_model(spec, seed)
    X = rng.normal(size=(n, spec.input_dim))
    y = rng.normal(size=n)

    def f(p):
        return float(np.mean(loss(forward_batch(m.with_params(p), X)[0], y, kind)))
    return grad_errors(grad(m, X, y, kind), central_diff(f, m.params))


def test_grad_matches_finite_differences_two_layer():
    rel, ab = _fd_check(ModelSpec.mlp([3, 5, 1], "relu"), 7)
    assert rel <= 1e-4 and ab <= 1e-8


def test_grad_matches_finite_differences_mae_smooth_region():
    # away from the |.| kink MAE is smooth too
    rel, ab = _fd_check(ModelSpec.mlp([2, 3, 1], "tanh"), 3, kind="mae")
    assert rel <= 1e-4 and ab <= 1e-8


def test_penultimate_grad_length_and_zero_loss():
    m = init_model(ModelSpec.mlp([3, 4, 1]), 0)
    x = np.array([0.1, -0.2, 0.3])
    g = per_sample_penultimate_grad(m, x, 1.0, "mse")
    assert g.shape == (5,)
    assert np.all(per_sample_penultimate_grad(m, x, forward(m, x)[0], "mse") == 0.0)


def test_penultimate_grad_matches_final_layer_finite_differences():
    spec = ModelSpec.mlp([3, 4, 1], "tanh")
    m = init_model(spec, 11)
    x, y = np.array([0.5, -1.0, 0.25]), 2.0
    start = spec.param_layout[-1][0]

    def f(tail):
        p = np.array(m.params)
        p[start:] = tail
        return loss(forward(m.with_params(p), x)[0], y, "mse")
    numeric = central_diff(f, m.params[start:])
    rel, ab = grad_errors(per_sample_penultimate_grad(m, x, y, "mse"), numeric)
    assert rel <= 1e-4 and ab <= 1e-8


def test_penultimate_grad_single_layer_unsupported():
    with pytest.raises(UnsupportedArchitectureError):
        per_sample_penultimate_grad(linear(1.0), [1.0], 0.0)


# -- optimizer ----------------------------------------------------------------

def test_sgd_step():
    assert optimizer_step(OptimizerState("sgd", 0.1), np.array([1.0]), np.array([2.0]))[0] == pytest.approx(0.8)


def test_adam_first_step():
    st_ = OptimizerState("adam", 0.001)
    p = optimizer_step(st_, np.array([0.0]), np.array([1.0]))
    assert abs(p[0] + 0.001) <= 1e-8
    assert st_.t == 1


def test_zero_gradient_leaves_params():
    for kind in ("sgd", "adam"):
        p = np.array([0.3, -1.2])
        assert np.array_equal(optimizer_step(OptimizerState(kind, 0.1), p, np.zeros(2)), p)


def test_optimizer_length_mismatch():
    with pytest.raises(ShapeError):
        optimizer_step(OptimizerState("sgd", 0.1), np.zeros(2), np.zeros(3))


def test_adam_counter_increments_by_one():
    s = OptimizerState("adam", 0.01)
    p = np.zeros(3)
    for k in range(1, 6):
        p = optimizer_step(s, p, np.ones(3))
        assert s.t == k


# -- training -----------------------------------------------------------------

def test_train_recovers_least_squares_slope():
    x = np.linspace(-1, 1, 50)[:, None]
    y = 2.0 * x[:, 0]
    w_ls = np.linalg.lstsq(x, y, rcond=None)[0][0]
    m = train(ModelSpec((Layer(1, 1, "identity"),)), (x, y),
              TrainConfig(epochs=200, learning_rate=0.05, batch_size=10, loss="mse"))
    assert abs(m.params[0] - w_ls) <= 1e-2
    assert abs(m.params[0] - 2.0) <= 1e-2


def test_zero_epochs_rejected():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)


def test_train_empty_dataset():
    with pytest.raises(ValueError):
        train(ModelSpec.mlp([2, 1]), (np.zeros((0, 2)), np.zeros(0)), TrainConfig(epochs=1))


def test_train_is_deterministic():
    rng = np.random.default_rng(0)
    X, y = rng.normal(size=(40, 3)), rng.normal(size=40)
    cfg = TrainConfig(epochs=3, seed=4)
    a = train(ModelSpec.mlp([3, 4, 1]), (X, y), cfg)
    b = train(ModelSpec.mlp([3, 4, 1]), (X, y), cfg)
    assert a == b


# -- properties ---------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_property_gradient_check(seed):
    spec = random_small_spec(np.random.default_rng(seed), acts=("identity", "tanh"))
    rel, ab = _fd_check(spec, seed)
    assert rel <= 1e-4 and ab <= 1e-8


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_property_tiny_sgd_step_does_not_increase_loss(seed):
    rng = np.random.default_rng(seed)
    spec = random_small_spec(rng, acts=("identity", "tanh"))
    m = init_model(spec, seed)
    X, y = rng.normal(size=(5, spec.input_dim)), rng.normal(size=5)
    before = float(np.mean(loss(forward_batch(m, X)[0], y, "mse")))
    p = optimizer_step(OptimizerState("sgd", 1e-6), m.params, grad(m, X, y, "mse"))
    after = float(np.mean(loss(forward_batch(m.with_params(p), X)[0], y, "mse")))
    assert after <= before + 1e-9


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_property_trace_ends_in_prediction_and_is_finite(seed):
    rng = np.random.default_rng(seed)
    spec = random_small_spec(rng)
    m = init_model(spec, seed)
    X = rng.normal(size=(3, spec.input_dim))
    pred, trace = forward_batch(m, X, capture=True)
    assert len(trace) == spec.n_layers
    assert np.array_equal(trace[-1][:, 0], pred)
    assert all(np.isfinite(a).all() for a in trace)
