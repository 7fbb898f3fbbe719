import dataclasses
import math

import numpy as np
import pytest

from conftest import small_config
from ssfl_sim.client import (
    Objective,
    evaluate,
    fine_tune,
    local_train_round,
    make_batches,
    supervised_score,
)
from ssfl_sim.federation import build_federation, run_training
from ssfl_sim.metrics import read_metrics
from ssfl_sim.weighting import ScheduleConfig


@pytest.mark.parametrize("n_labeled, n_unlabeled, batch_size", [(13, 40, 8), (3, 40, 8), (16, 0, 16), (0, 9, 4)])
def test_batches_cover_every_index_once(n_labeled, n_unlabeled, batch_size, rng) -> None:
    batches = make_batches(n_labeled, n_unlabeled, batch_size, rng)
    assert len(batches) == math.ceil((n_labeled + n_unlabeled) / batch_size)
    lab = np.concatenate([b[0] for b in batches])
    unl = np.concatenate([b[1] for b in batches])
    np.testing.assert_array_equal(np.sort(lab), np.arange(n_labeled))
    np.testing.assert_array_equal(np.sort(unl), np.arange(n_unlabeled))
    assert all(0 < len(l) + len(u) <= batch_size for l, u in batches)


def test_last_batch_is_partial(rng) -> None:
    sizes = [len(l) + len(u) for l, u in make_batches(13, 40, 8, rng)]
    assert sizes == [8, 8, 8, 8, 8, 7, 6]
    assert make_batches(0, 0, 8, rng) == []


def test_objective_per_method() -> None:
    full = Objective.from_config(small_config())
    assert full.weighting == "tlaw" and full.lcl and full.gcl and full.share_prototypes

    supervised = Objective.from_config(small_config(run={"method": "fedavg-supervised"}))
    assert not supervised.use_unlabeled and not supervised.share_prototypes

    fixmatch = Objective.from_config(small_config(run={"method": "fixmatch-threshold"}, weighting={"theta_c": 0.8}))
    assert fixmatch.weighting == "threshold" and fixmatch.threshold == 0.8
    assert not fixmatch.lcl and not fixmatch.gcl


def test_zero_finetune_epochs_leave_parameters_untouched(cfg, rng) -> None:
    client = build_federation(cfg, 0).clients[0]
    before = {k: v.copy() for k, v in client.params.items()}
    fine_tune(client, 0, rng)
    for name, value in before.items():
        np.testing.assert_array_equal(client.params[name], value)


def test_finetune_lowers_labeled_cross_entropy(cfg, rng) -> None:
    client = build_federation(cfg, 0).clients[0]
    loss_before, _ = supervised_score(client)
    fine_tune(client, 10, rng)
    loss_after, acc_after = supervised_score(client)
    assert loss_after <= loss_before
    assert 0.0 <= acc_after <= 1.0


def test_finetune_without_labels_is_skipped(cfg, rng) -> None:
    client = build_federation(cfg, 0).clients[0]
    client.data = dataclasses.replace(
        client.data, x_labeled=client.data.x_labeled[:0], y_labeled=client.data.y_labeled[:0]
    )
    before = {k: v.copy() for k, v in client.params.items()}
    fine_tune(client, 3, rng)
    for name, value in before.items():
        np.testing.assert_array_equal(client.params[name], value)


def test_fully_labeled_client_trains_without_unlabeled_terms(rng) -> None:
    cfg = small_config(federation={"chi": 1.0})
    client = build_federation(cfg, 0).clients[0]
    assert len(client.data.x_unlabeled) == 0 and len(client.data.y_labeled) > 0

    _, bank, stats = local_train_round(
        client,
        None,
        1,
        ScheduleConfig.from_config(cfg),
        Objective.from_config(cfg),
        rng,
        np.random.default_rng(7),
    )
    assert stats.loss_u == 0.0 and stats.loss_lc == 0.0 and stats.loss_gc == 0.0
    assert stats.loss_s > 0.0
    assert stats.samples == len(client.data.y_labeled)
    assert math.isnan(stats.mean_lambda)
    assert bank is not None and len(bank) > 0


def test_fully_labeled_run_completes(tmp_path) -> None:
    artifact = run_training(small_config(federation={"chi": 1.0}), tmp_path, seed=0)
    assert 0.0 <= artifact.accuracy <= 1.0
    rows = read_metrics(artifact.metrics_path)
    assert rows
    assert all(float(r["loss_u"]) == 0.0 and float(r["loss_lc"]) == 0.0 for r in rows)


def test_global_contrastive_starts_once_a_global_bank_exists(cfg, tmp_path) -> None:
    rows = read_metrics(run_training(cfg, tmp_path, seed=0).metrics_path)
    assert all(float(r["loss_gc"]) == 0.0 for r in rows if r["round"] == "1")
    assert any(float(r["loss_gc"]) > 0.0 for r in rows if r["round"] != "1")


def test_evaluate_perfect_predictions(cfg, monkeypatch) -> None:
    client = build_federation(cfg, 0).clients[0]
    y = client.data.y_test
    monkeypatch.setattr(
        "ssfl_sim.client.infer",
        lambda params, x, model: (np.eye(client.data.n_classes)[y], np.ones((len(y), model.embed_dim))),
    )
    result = evaluate(client)
    assert result.accuracy == 1.0
    assert result.total == len(y)
    assert np.count_nonzero(result.confusion - np.diag(np.diag(result.confusion))) == 0
    assert all(v == 1.0 for v in result.per_class.values())


def test_evaluate_constant_predictor_scores_one_over_classes(cfg) -> None:
    client = build_federation(cfg, 0).clients[0]
    n_classes = client.data.n_classes
    per_class = 4
    client.data = dataclasses.replace(
        client.data,
        x_test=np.repeat(client.data.x_labeled[:1], n_classes * per_class, axis=0),
        y_test=np.repeat(np.arange(n_classes), per_class),
    )
    client.params["classifier.weight"] = np.zeros_like(client.params["classifier.weight"])
    client.params["classifier.bias"] = np.eye(n_classes)[0]

    result = evaluate(client)
    assert result.accuracy == pytest.approx(1.0 / n_classes)
    assert result.per_class == {0: 1.0, **{c: 0.0 for c in range(1, n_classes)}}
    np.testing.assert_array_equal(result.confusion[:, 0], per_class)


def test_evaluate_without_test_data(cfg) -> None:
    client = build_federation(cfg, 0).clients[0]
    client.data = dataclasses.replace(client.data, x_test=client.data.x_test[:0], y_test=client.data.y_test[:0])
    result = evaluate(client)
    assert math.isnan(result.accuracy)
    assert result.total == 0 and result.per_class == {}
