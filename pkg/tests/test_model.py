import numpy as np

from ssfl_sim.model import (
    HEAD_BIAS,
    bind_parameters,
    copy_parameters,
    forward,
    infer,
    init_parameters,
    parameter_count,
    parameter_shapes,
    payload_bytes,
)
from ssfl_sim.optim import AdamState
from ssfl_sim.snapshot import encode_snapshot
from ssfl_sim.tape import ComputeTape, backpropagate


def test_parameter_layout(cfg) -> None:
    shapes = parameter_shapes(cfg.model, 1, 3)
    assert shapes["encoder.conv0.weight"] == (4, 1, 3)
    assert shapes["encoder.conv1.weight"] == (4, 4, 3)
    assert shapes["classifier.weight"] == (4, 3)
    assert shapes["head.fc2.weight"] == (8, 4)


def test_init_is_seeded_and_biases_fixed(cfg) -> None:
    a = init_parameters(cfg.model, 1, 3, np.random.default_rng(0))
    b = init_parameters(cfg.model, 1, 3, np.random.default_rng(0))
    for name in a:
        np.testing.assert_array_equal(a[name], b[name])
    assert not a["classifier.bias"].any()
    assert not a["encoder.conv0.bias"].any()
    assert (a["head.fc1.bias"] == HEAD_BIAS).all() and (a["head.fc2.bias"] == HEAD_BIAS).all()
    limit = np.sqrt(6.0 / 3)
    assert np.abs(a["encoder.conv0.weight"]).max() <= limit


def test_dead_projection_hidden_layer_still_normalizes(cfg, rng) -> None:
    params = init_parameters(cfg.model, 1, 3, rng)
    params["head.fc1.weight"] = np.zeros_like(params["head.fc1.weight"])
    params["head.fc1.bias"] = np.full_like(params["head.fc1.bias"], -1.0)
    x = rng.normal(size=(4, 1, cfg.dataset.length))

    _, emb = infer(params, x, cfg.model)
    np.testing.assert_allclose(emb, np.tile(params["head.fc2.bias"], (4, 1)))

    tape = ComputeTape()
    _, node = forward(tape, bind_parameters(tape, params), tape.input("x", x), cfg.model)
    unit = tape.value(tape.l2_normalize(node))
    np.testing.assert_allclose(np.linalg.norm(unit, axis=1), 1.0)


def test_forward_shapes_and_probabilities(cfg, rng) -> None:
    params = init_parameters(cfg.model, 1, 3, rng)
    x = rng.normal(size=(5, 1, cfg.dataset.length))
    probs, emb = infer(params, x, cfg.model)
    assert probs.shape == (5, 3) and emb.shape == (5, cfg.model.embed_dim)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0)


def test_payload_is_snapshot_size(cfg, rng) -> None:
    params = init_parameters(cfg.model, 1, 3, rng)
    assert payload_bytes(params) == len(encode_snapshot(params))
    assert payload_bytes(params) > 8 * parameter_count(params)


def test_adam_step_lowers_loss(cfg, rng) -> None:
    params = init_parameters(cfg.model, 1, 3, rng)
    before = copy_parameters(params)
    x = rng.normal(size=(6, 1, cfg.dataset.length))
    y = np.array([0, 1, 2, 0, 1, 2])
    opt = AdamState(lr=0.01)

    def loss_of(p):
        tape = ComputeTape()
        logits, _ = forward(tape, bind_parameters(tape, p), tape.input("x", x), cfg.model)
        return tape, tape.mean(tape.softmax_cross_entropy(logits, y))

    tape, node = loss_of(params)
    start = float(tape.value(node))
    for _ in range(20):
        tape, node = loss_of(params)
        opt.apply(params, backpropagate(tape, node))
    tape, node = loss_of(params)
    assert float(tape.value(node)) < start
    assert opt.step == 20
    assert not np.array_equal(before["classifier.weight"], params["classifier.weight"])
