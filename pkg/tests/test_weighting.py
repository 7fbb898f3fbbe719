import math

import numpy as np
import pytest

from ssfl_sim.errors import DomainError
from ssfl_sim.weighting import (
    ConfidenceEMA,
    ScheduleConfig,
    WeightingConfig,
    batch_confidence_stats,
    ema_update,
    ema_variance_ratio,
    eta,
    iota,
    pseudo_labels,
    quality_oracle,
    quantity_oracle,
    sample_weight,
    threshold_weights,
    verify_weighting_bounds,
)

W = WeightingConfig(lambda_max=1.0)


def _ema(mu: float, b: float, n_classes: int = 3) -> ConfidenceEMA:
    return ConfidenceEMA.from_stats(n_classes, mu, 2.0 * b * b)


def test_confident_sample_gets_full_weight() -> None:
    assert sample_weight([0.9, 0.05, 0.05], _ema(0.8, 0.1), W) == 1.0


def test_below_mean_follows_laplace_tail() -> None:
    assert sample_weight([0.6, 0.3, 0.1], _ema(0.8, 0.1), W) == pytest.approx(math.exp(-2.0), rel=1e-12)
    assert sample_weight([0.6, 0.3, 0.1], _ema(0.8, 0.1), W) == pytest.approx(0.13534, abs=1e-5)


def test_weight_is_continuous_at_the_mean() -> None:
    just_below = sample_weight([0.8 - 1e-9, 0.2 + 1e-9, 0.0], _ema(0.8, 0.1), W)
    assert just_below == pytest.approx(1.0, abs=1e-7)


def test_weight_bounded_and_nondecreasing() -> None:
    ema = _ema(0.7, 0.15)
    conf = np.linspace(0.34, 1.0, 200)
    P = np.column_stack([conf, (1 - conf) / 2, (1 - conf) / 2])
    _, w = pseudo_labels(P, ema, WeightingConfig(lambda_max=2.0))
    assert np.all((w >= 0) & (w <= 2.0))
    assert np.all(np.diff(w) >= 0)


def test_invalid_probability_vectors_are_rejected() -> None:
    with pytest.raises(DomainError):
        sample_weight([0.5, 0.6], _ema(0.5, 0.1, 2), W)
    with pytest.raises(DomainError):
        sample_weight([1.2, -0.2], _ema(0.5, 0.1, 2), W)


def test_degenerate_spread_becomes_hard_threshold() -> None:
    ema = ConfidenceEMA.from_stats(2, 0.7, 0.0)
    assert sample_weight([0.8, 0.2], ema, W) == 1.0
    assert sample_weight([0.6, 0.4], ema, W) == 0.0


def test_batch_stats() -> None:
    assert batch_confidence_stats([[0.7, 0.3], [0.7, 0.3]]) == pytest.approx((0.7, 0.0))
    mu, var = batch_confidence_stats([[0.5, 0.5], [0.9, 0.1]])
    assert mu == pytest.approx(0.7)
    assert var == pytest.approx(0.04)
    assert batch_confidence_stats([[0.6, 0.4]]) == pytest.approx((0.6, 0.0))
    with pytest.raises(DomainError):
        batch_confidence_stats(np.empty((0, 3)))


def test_fresh_ema_state() -> None:
    ema = ConfidenceEMA(n_classes=3)
    assert ema.mu == pytest.approx(1 / 3)
    assert ema.var == 1.0
    assert ema.b == pytest.approx(math.sqrt(0.5))


def test_zero_momentum_takes_corrected_batch_stats() -> None:
    ema = ema_update(ConfidenceEMA(3, momentum=0.0), 0.6, 0.03, batch_size=4)
    assert ema.mu == pytest.approx(0.6)
    assert ema.var == pytest.approx(0.04)


def test_unit_momentum_freezes_state() -> None:
    ema = ema_update(ConfidenceEMA(3, momentum=1.0), 0.9, 0.2, batch_size=4)
    assert ema.mu == pytest.approx(1 / 3)
    assert ema.var == 1.0


def test_single_row_batch_skips_variance() -> None:
    ema = ema_update(ConfidenceEMA(2, momentum=0.5), 0.9, 0.0, batch_size=1)
    assert ema.mu == pytest.approx(0.5 * 0.5 + 0.5 * 0.9)
    assert ema.var == 1.0


def test_ema_contracts_towards_batch_mean() -> None:
    ema = ConfidenceEMA(3, momentum=0.9)
    before = abs(ema.mu - 0.8)
    ema.update(0.8, 0.01)
    assert abs(ema.mu - 0.8) == pytest.approx(0.9 * before)


def test_eta_schedule_points() -> None:
    schedule = ScheduleConfig(total_rounds=100, eta_f=3.0)
    assert eta(10, schedule) == 0.0
    assert eta(50, schedule) == pytest.approx(1.5)
    assert eta(90, schedule) == 3.0
    values = [eta(t, schedule) for t in range(101)]
    assert all(b >= a for a, b in zip(values, values[1:]))
    with pytest.raises(DomainError):
        eta(101, schedule)


def test_schedule_rejects_bad_ramp() -> None:
    with pytest.raises(DomainError):
        ScheduleConfig(total_rounds=10, t1_fraction=0.7, t2_fraction=0.3)


def test_iota() -> None:
    assert iota(16, 16) == 1.0
    assert iota(0, 16) == 0.0
    assert iota(4, 16) == 0.25
    with pytest.raises(DomainError):
        iota(5, 4)


def test_pseudo_labels_and_tie_break() -> None:
    ema = _ema(0.8, 0.1)
    labels, weights = pseudo_labels([[0.0, 0.0, 1.0]], ema, W)
    assert labels.tolist() == [2] and weights.tolist() == [1.0]

    labels, weights = pseudo_labels([[1 / 3, 1 / 3, 1 / 3]], ema, W)
    assert labels.tolist() == [0]
    assert weights[0] == pytest.approx(math.exp(-abs(1 / 3 - 0.8) / 0.1))


def test_pseudo_label_weights_match_single_sample_weights() -> None:
    ema = _ema(0.7, 0.12)
    P = np.array([[0.9, 0.05, 0.05], [0.5, 0.3, 0.2], [0.2, 0.4, 0.4], [0.1, 0.2, 0.7]])
    labels, weights = pseudo_labels(P, ema, W)
    assert labels.tolist() == [0, 0, 1, 2]
    for p, w in zip(P, weights):
        assert w == pytest.approx(sample_weight(p, ema, W))


def test_threshold_weights_extremes() -> None:
    P = np.array([[0.6, 0.4], [0.99, 0.01]])
    assert threshold_weights(P, 0.0, W)[1].tolist() == [1.0, 1.0]
    assert threshold_weights(P, 1.0 + 1e-9, W)[1].tolist() == [0.0, 0.0]


def test_quantity_oracle() -> None:
    ema = _ema(0.6, 0.1)
    P = np.array([[0.7, 0.3], [0.9, 0.1]])
    assert quantity_oracle(P, ema, W) == 1.0
    with pytest.raises(DomainError):
        quantity_oracle(np.empty((0, 2)), ema, W)


def test_quantity_approaches_half_on_split_boundary_pool() -> None:
    ema = ConfidenceEMA.from_stats(2, 0.9, 1e-4)
    P = np.array([[0.95, 0.05]] * 50 + [[0.85, 0.15]] * 50)
    f = quantity_oracle(P, ema, W)
    assert 0.5 < f < 0.501


def test_quality_oracle() -> None:
    ema = _ema(0.6, 0.1)
    P = np.array([[0.8, 0.2], [0.3, 0.7], [0.55, 0.45]])
    assert quality_oracle(P, [0, 1, 0], ema, W) == 1.0
    assert quality_oracle(P, [1, 0, 1], ema, W) == 0.0
    with pytest.raises(DomainError):
        quality_oracle(P, [0, 1, 0], ConfidenceEMA.from_stats(2, 0.99, 0.0), W)


def test_bounds_hold_on_random_pools() -> None:
    report = verify_weighting_bounds(trials=1000, pool_size=256, seed=0, n_classes=3)
    assert report.passed, report.violations[:3]
    assert set(report.by_mode) == {"quantile", "mirrored", "above"}


@pytest.mark.parametrize("n_classes", [2, 5])
def test_bounds_hold_for_other_class_counts(n_classes) -> None:
    assert verify_weighting_bounds(trials=150, pool_size=64, seed=3, n_classes=n_classes).passed


def test_unbiased_ema_tracks_true_variance() -> None:
    assert abs(ema_variance_ratio(unbiased=True) - 1.0) <= 0.05


def test_biased_ema_underestimates_variance() -> None:
    assert ema_variance_ratio(unbiased=False, batch_size=4) == pytest.approx(0.75, abs=0.04)
