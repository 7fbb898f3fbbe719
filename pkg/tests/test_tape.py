import numpy as np
import pytest

from ssfl_sim.errors import DomainError, NonFiniteError, ShapeError
from ssfl_sim.tape import (
    ComputeTape,
    backpropagate,
    evaluate,
    gradient_check,
    gradient_check_terminals,
    relative_error,
)


def test_affine_forward_and_gradients_match_numpy(rng) -> None:
    x = rng.normal(size=(4, 3))
    w = rng.normal(size=(3, 2))
    b = rng.normal(size=2)
    tape = ComputeTape()
    out = tape.affine(tape.input("x", x), tape.param("w", w), tape.param("b", b))
    loss = tape.sum(out)
    np.testing.assert_allclose(tape.value(out), x @ w + b)

    grads = backpropagate(tape, loss)
    np.testing.assert_allclose(grads["w"], x.T @ np.ones((4, 2)))
    np.testing.assert_allclose(grads["b"], np.full(2, 4.0))


def test_shape_mismatch_names_node_and_shapes() -> None:
    tape = ComputeTape()
    x = tape.input("x", np.ones((2, 3)))
    w = tape.param("w", np.ones((4, 2)))
    b = tape.param("b", np.ones(2))
    with pytest.raises(ShapeError) as err:
        tape.affine(x, w, b)
    assert err.value.node == 3
    assert err.value.kind == "affine"
    assert (2, 3) in err.value.actual and (4, 2) in err.value.actual


def test_non_finite_value_is_reported() -> None:
    tape = ComputeTape()
    x = tape.input("x", np.array([0.0, 1.0]))
    with pytest.raises(NonFiniteError) as err:
        tape.log(x)
    assert err.value.kind == "log"


def test_backpropagate_needs_scalar_terminal() -> None:
    tape = ComputeTape()
    tape.exp(tape.param("p", np.ones(3)))
    with pytest.raises(DomainError):
        backpropagate(tape)


def test_cross_entropy_rejects_bad_labels() -> None:
    tape = ComputeTape()
    logits = tape.param("z", np.zeros((2, 3)))
    with pytest.raises(DomainError):
        tape.softmax_cross_entropy(logits, [0, 3])


def test_cosine_of_zero_row_is_rejected() -> None:
    tape = ComputeTape()
    a = tape.input("a", np.array([[0.0, 0.0]]))
    b = tape.input("b", np.array([[1.0, 0.0]]))
    with pytest.raises(DomainError):
        tape.cosine_similarity(a, b)


def test_duplicate_leaf_names_are_rejected() -> None:
    tape = ComputeTape()
    tape.param("w", np.ones(2))
    with pytest.raises(DomainError):
        tape.param("w", np.ones(2))


def test_evaluate_replays_with_rebound_inputs() -> None:
    tape = ComputeTape()
    x = tape.input("x", np.array([[1.0, 2.0]]))
    y = tape.sum(tape.scale(x, 3.0))
    assert float(tape.value(y)) == pytest.approx(9.0)
    assert float(evaluate(tape, {"x": np.array([[2.0, 2.0]])}, y)) == pytest.approx(12.0)


def test_evaluate_rejects_parameter_of_wrong_shape() -> None:
    tape = ComputeTape()
    tape.sum(tape.param("w", np.ones(3)))
    with pytest.raises(ShapeError):
        evaluate(tape, {"w": np.ones(4)})


def test_subtract_and_concatenate_gradients(rng) -> None:
    tape = ComputeTape()
    a = tape.param("a", rng.normal(size=(2, 3)))
    b = tape.param("b", rng.normal(size=(1, 3)))
    joined = tape.concatenate([a, b], axis=0)
    loss = tape.sum(tape.multiply(joined, joined))
    grads = backpropagate(tape, loss)
    np.testing.assert_allclose(grads["a"], 2 * tape.value(a))
    np.testing.assert_allclose(grads["b"], 2 * tape.value(b))


def test_conv_pool_network_passes_gradient_check(rng) -> None:
    tape = ComputeTape()
    x = tape.input("x", rng.normal(size=(3, 2, 12)))
    w = tape.param("w", rng.normal(size=(4, 2, 3)) * 0.5)
    b = tape.param("b", rng.normal(size=4) * 0.1)
    h = tape.max_pool1d(tape.relu(tape.conv1d(x, w, b, padding=1)), 2)
    pooled = tape.global_mean_pool(h)
    wc = tape.param("wc", rng.normal(size=(4, 3)))
    bc = tape.param("bc", np.zeros(3))
    logits = tape.affine(pooled, wc, bc)
    loss = tape.mean(tape.softmax_cross_entropy(logits, [0, 1, 2]))

    report = gradient_check(tape, terminal=loss)
    assert report.passed, report.flagged
    assert report.max_rel_error <= 1e-4
    assert sum(p.checked for p in report.params.values()) > 0


def test_l2_normalize_gradient_check(rng) -> None:
    tape = ComputeTape()
    p = tape.param("p", rng.normal(size=(3, 4)))
    target = tape.const(rng.normal(size=(3, 4)))
    loss = tape.sum(tape.multiply(tape.l2_normalize(p), target))
    assert gradient_check(tape, terminal=loss).passed


def test_shared_replays_check_each_terminal_on_its_own(rng) -> None:
    tape = ComputeTape()
    p = tape.param("p", rng.normal(size=(2, 3)))
    q = tape.param("q", rng.normal(size=(1, 3)))
    first = tape.sum(tape.multiply(p, p))
    second = tape.sum(tape.l2_normalize(q))

    reports = gradient_check_terminals(tape, {"first": first, "second": second})
    assert set(reports) == {"first", "second"}
    assert all(r.passed for r in reports.values())
    assert reports["first"].params["p"].checked == 6
    assert reports["second"].params["q"].checked == 3
    single = gradient_check(tape, terminal=first)
    assert single.params["p"].max_rel_error == pytest.approx(reports["first"].params["p"].max_rel_error)

    with pytest.raises(DomainError):
        gradient_check_terminals(tape, {})


def test_relative_error_uses_floor() -> None:
    assert relative_error(0.0, 1e-9) == pytest.approx(1e-4)
    assert relative_error(2.0, 1.0) == pytest.approx(0.5)
