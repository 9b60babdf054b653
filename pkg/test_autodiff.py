import numpy as np
import pytest

from autodiff import (
    NonFiniteError,
    ParameterStore,
    ShapeError,
    Tape,
    Tensor,
    cross_entropy,
    embedding,
    gradient,
    hvp,
    kl_divergence,
    layer_norm,
    log_softmax,
    matmul,
    mean,
    mul,
    scale,
    softmax,
    total,
    value_and_grad,
)
from transformer import ModelConfig, init_params, make_loss_fn


def quadratic(matrix: np.ndarray):
    """0.5 w^T A w over a single (d, 1) region named 'w'."""
    a = Tensor(matrix)

    def loss_fn(weights):
        w = weights["w"]
        return scale(total(mul(w, matmul(a, w))), 0.5)

    return loss_fn


def column_store(values) -> ParameterStore:
    values = np.asarray(values, dtype=np.float64)
    return ParameterStore.from_shapes({"w": (values.size, 1)}, values=values)


def finite_difference(loss_fn, params: ParameterStore, indices, h=1e-5) -> np.ndarray:
    out = []
    for i in indices:
        plus = params.flat.copy()
        minus = params.flat.copy()
        plus[i] += h
        minus[i] -= h
        f_plus = loss_fn(params.with_flat(plus).bind()).item()
        f_minus = loss_fn(params.with_flat(minus).bind()).item()
        out.append((f_plus - f_minus) / (2 * h))
    return np.array(out)


def test_two_layer_gradient_matches_finite_differences():
    config = ModelConfig(vocab_size=11, context_length=6, d_model=8, n_heads=2, n_layers=2, init_scale=0.5)
    rng = np.random.default_rng(0)
    for draw in range(20):
        params = init_params(config, seed=draw)
        batch = rng.integers(0, config.vocab_size, size=(3, config.context_length))
        loss_fn = make_loss_fn(config, batch)
        _, grad = value_and_grad(loss_fn, params)
        indices = rng.choice(len(params), size=40, replace=False)
        numeric = finite_difference(loss_fn, params, indices)
        error = np.max(np.abs(numeric - grad[indices])) / max(np.max(np.abs(grad)), 1e-8)
        assert error <= 1e-4, f"draw {draw}: relative error {error:.2e}"


def test_layer_norm_and_softmax_gradients():
    rng = np.random.default_rng(1)
    x0 = rng.normal(size=(2, 3, 5))
    shapes = {"x": x0.shape, "affine": (2, 5)}
    values = np.concatenate([x0.ravel(), rng.normal(size=10)])
    params = ParameterStore.from_shapes(shapes, values=values)
    weights_probe = rng.normal(size=(2, 3, 5))

    def loss_fn(weights):
        y = softmax(layer_norm(weights["x"], weights["affine"]))
        return total(mul(log_softmax(y), Tensor(weights_probe)))

    _, grad = value_and_grad(loss_fn, params)
    numeric = finite_difference(loss_fn, params, range(len(params)))
    assert np.allclose(grad, numeric, atol=1e-7)


def test_softmax_rows_sum_to_one_and_are_stable():
    x = Tensor(np.array([[1000.0, 1000.0, -1000.0], [0.0, 1.0, 2.0]]))
    y = softmax(x).data
    assert np.allclose(y.sum(axis=-1), 1.0)
    assert np.all(np.isfinite(y))
    assert y[0, 0] == pytest.approx(0.5)


def test_layer_norm_of_constant_row_is_bias():
    affine = Tensor(np.stack([np.full(4, 3.0), np.zeros(4)]))
    out = layer_norm(Tensor(np.full((1, 4), 7.0)), affine).data
    assert np.allclose(out, 0.0)


def test_cross_entropy_of_uniform_logits_is_log_vocab():
    logits = Tensor(np.zeros((2, 3, 7)))
    loss = cross_entropy(logits, np.zeros((2, 3), dtype=int))
    assert loss.item() == pytest.approx(np.log(7))
    per_position = cross_entropy(logits, np.ones((2, 3), dtype=int), reduction="none")
    assert per_position.shape == (2, 3)


def test_kl_divergence_is_zero_for_matching_distributions():
    logits = np.random.default_rng(2).normal(size=(4, 6))
    probs = np.exp(logits) / np.exp(logits).sum(axis=-1, keepdims=True)
    assert kl_divergence(probs, Tensor(logits)).item() == pytest.approx(0.0, abs=1e-12)
    assert kl_divergence(probs, Tensor(np.zeros((4, 6)))).item() > 0


def test_shape_errors_name_the_primitive():
    with pytest.raises(ShapeError, match="matmul"):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
    with pytest.raises(ShapeError, match="embedding"):
        embedding(Tensor(np.zeros((4, 2))), np.array([0, 4]))
    with pytest.raises(ShapeError, match="cross_entropy"):
        cross_entropy(Tensor(np.zeros((2, 3))), np.zeros(3, dtype=int))
    with pytest.raises(ShapeError):
        mean(Tensor(np.zeros(0)))


def test_embedding_gradient_accumulates_repeated_ids():
    params = ParameterStore.from_shapes({"table": (3, 2)}, values=np.arange(6.0))

    def loss_fn(weights):
        return total(embedding(weights["table"], np.array([[1, 1, 2]])))

    _, grad = value_and_grad(loss_fn, params)
    assert grad.reshape(3, 2).tolist() == [[0, 0], [2, 2], [1, 1]]


def test_gradient_is_zero_for_unbound_regions():
    params = ParameterStore.from_shapes({"a": (2,), "b": (3,)}, values=np.arange(5.0))
    tape = Tape()
    weights = {"a": tape.watch("a", params.view("a"))}
    loss = total(mul(weights["a"], weights["a"]))
    grad = gradient(loss, params)
    assert grad.tolist() == [0.0, 2.0, 0.0, 0.0, 0.0]


def test_operands_on_different_tapes_are_rejected():
    a = Tape().watch("a", np.ones(2))
    b = Tape().watch("b", np.ones(2))
    with pytest.raises(ValueError, match="different tapes"):
        mul(a, b)


def test_parameter_store_is_read_only_and_derives_copies():
    params = ParameterStore.from_shapes({"a": (2, 2), "b": (3,)}, values=np.arange(7.0))
    with pytest.raises(ValueError):
        params.flat[0] = 5.0
    updated = params.with_regions({"b": [9, 9, 9]})
    assert updated.view("b").tolist() == [9, 9, 9]
    assert params.view("b").tolist() == [4, 5, 6]
    assert params.indices(["b", "a"]).tolist() == list(range(7))
    with pytest.raises(KeyError):
        params.indices(["missing"])


def test_hvp_matches_matrix_product_on_quadratic():
    rng = np.random.default_rng(3)
    b = rng.normal(size=(6, 6))
    a = b + b.T
    params = column_store(rng.normal(size=6))
    v = rng.normal(size=6)
    assert np.allclose(hvp(quadratic(a), params, v), a @ v, atol=1e-6)


def test_hvp_reports_non_finite_entries():
    params = column_store(np.zeros(3))

    def loss_fn(weights):
        return total(mul(weights["w"], Tensor(np.array([[np.nan], [1.0], [1.0]]))))

    with pytest.raises(NonFiniteError) as info:
        hvp(loss_fn, params, np.ones(3))
    assert info.value.index == 0
