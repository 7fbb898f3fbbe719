import math

import numpy as np
import pytest

from ssfl_sim.errors import DomainError, NonFiniteLossError
from ssfl_sim.experiments import loss_heads_tape
from ssfl_sim.losses import (
    ContrastiveConfig,
    EmbeddingBatch,
    LossTerms,
    global_contrastive_loss,
    local_contrastive_loss,
    loss_coefficients,
    positive_mask,
    supervised_loss,
    total_loss,
    unsupervised_loss,
)
from ssfl_sim.tape import ComputeTape, backpropagate, gradient_check
from ssfl_sim.weighting import ScheduleConfig

FIXED = ContrastiveConfig(tau=1.0, alpha=0.0, dynamic=False)


def _reference_lcl(weak, strong, pseudo, temp, select_pairs=True):
    def unit(v):
        return v / np.linalg.norm(v)

    n = len(weak)
    total = 0.0
    for i in range(n):
        sims = [math.exp(unit(weak[i]) @ unit(strong[j]) / temp) for j in range(n)]
        pos = [j for j in range(n) if (pseudo[j] == pseudo[i] if select_pairs else j == i)]
        total += math.log(sum(sims[j] for j in pos) / sum(sims))
    return -total / n


def _lcl(weak, strong, pseudo, cfg=FIXED, sigma=0.0, select_pairs=True):
    tape = ComputeTape()
    batch = EmbeddingBatch(tape.param("weak", weak), tape.param("strong", strong), np.asarray(pseudo))
    node = local_contrastive_loss(tape, batch, cfg, sigma, select_pairs)
    return tape, node


def test_supervised_loss_uniform_logits_is_log_c() -> None:
    tape = ComputeTape()
    node = supervised_loss(tape, tape.param("z", np.zeros((4, 5))), [0, 1, 2, 4])
    assert float(tape.value(node)) == pytest.approx(math.log(5))


def test_supervised_loss_hand_computed() -> None:
    tape = ComputeTape()
    node = supervised_loss(tape, tape.param("z", np.array([[2.0, 0.0], [0.0, 1.0]])), [0, 1])
    expected = (math.log(1 + math.exp(-2)) + math.log(1 + math.exp(-1))) / 2
    assert float(tape.value(node)) == pytest.approx(expected)


def test_supervised_loss_confident_and_correct_is_near_zero() -> None:
    tape = ComputeTape()
    node = supervised_loss(tape, tape.param("z", np.array([[50.0, 0.0, 0.0]])), [0])
    assert float(tape.value(node)) < 1e-12


def test_unsupervised_loss_weights_each_row() -> None:
    z = np.array([[1.0, 0.0], [0.0, 2.0], [3.0, 0.0]])
    tape = ComputeTape()
    node = unsupervised_loss(tape, tape.param("z", z), [0, 0, 1], [1.0, 0.5, 0.0], 3)
    ce = [math.log(1 + math.exp(-1)), math.log(1 + math.exp(2))]
    assert float(tape.value(node)) == pytest.approx((ce[0] + 0.5 * ce[1]) / 3)


def test_unsupervised_loss_with_zero_weights_is_zero() -> None:
    tape = ComputeTape()
    node = unsupervised_loss(tape, tape.param("z", np.ones((3, 2))), [0, 1, 0], np.zeros(3), 3)
    assert float(tape.value(node)) == 0.0
    with pytest.raises(DomainError):
        unsupervised_loss(tape, tape.param("z2", np.ones((1, 2))), [0], [1.0], 0)


def test_pseudo_labels_carry_no_gradient_to_weak_view() -> None:
    tape = ComputeTape()
    weak = tape.param("weak", np.array([[2.0, 0.0], [0.0, 1.0]]))
    strong = tape.param("strong", np.array([[0.5, 0.1], [0.2, 0.3]]))
    pseudo = np.argmax(tape.value(weak), axis=1)
    node = unsupervised_loss(tape, strong, pseudo, [1.0, 1.0], 2)
    grads = backpropagate(tape, node)
    assert not grads["weak"].any()
    assert grads["strong"].any()


def test_positive_mask() -> None:
    np.testing.assert_array_equal(positive_mask([0, 1, 0]), [[1, 0, 1], [0, 1, 0], [1, 0, 1]])
    np.testing.assert_array_equal(positive_mask([0, 1, 0], select_pairs=False), np.eye(3))


def test_local_contrastive_single_row_is_zero() -> None:
    tape, node = _lcl(np.array([[1.0, 2.0]]), np.array([[0.3, -1.0]]), [0])
    assert float(tape.value(node)) == pytest.approx(0.0, abs=1e-15)


def test_local_contrastive_single_pseudo_class_is_zero() -> None:
    rng = np.random.default_rng(5)
    tape, node = _lcl(rng.normal(size=(4, 3)), rng.normal(size=(4, 3)), [2, 2, 2, 2])
    assert float(tape.value(node)) == pytest.approx(0.0, abs=1e-15)


def test_local_contrastive_matches_reference() -> None:
    weak = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [-1.0, 0.5]])
    strong = np.array([[0.9, 0.1], [0.2, 1.0], [1.0, 0.7], [-0.8, 0.4]])
    pseudo = [0, 1, 0, 1]
    cfg = ContrastiveConfig(tau=0.5, alpha=1.0)
    tape, node = _lcl(weak, strong, pseudo, cfg, sigma=0.2)
    temp = 0.5 * (1 + 0.2)
    assert float(tape.value(node)) == pytest.approx(_reference_lcl(weak, strong, pseudo, temp))

    tape, node = _lcl(weak, strong, pseudo, cfg, sigma=0.2, select_pairs=False)
    assert float(tape.value(node)) == pytest.approx(
        _reference_lcl(weak, strong, pseudo, temp, select_pairs=False)
    )


def test_local_contrastive_is_permutation_invariant() -> None:
    rng = np.random.default_rng(9)
    weak, strong = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    pseudo = np.array([0, 1, 1, 2, 0])
    perm = rng.permutation(5)
    a_tape, a = _lcl(weak, strong, pseudo)
    b_tape, b = _lcl(weak[perm], strong[perm], pseudo[perm])
    assert float(a_tape.value(a)) == pytest.approx(float(b_tape.value(b)))


def test_temperature_without_spread_is_tau() -> None:
    assert ContrastiveConfig(tau=0.5, alpha=1.0).temperature(0.0) == 0.5
    assert ContrastiveConfig(tau=0.5, alpha=1.0).temperature(0.3) == pytest.approx(0.65)
    assert ContrastiveConfig(tau=0.5, alpha=1.0, dynamic=False).temperature(0.3) == 0.5
    with pytest.raises(DomainError):
        ContrastiveConfig(tau=0.0)


def _gcl(local, local_classes, glob, global_classes, cfg=FIXED):
    tape = ComputeTape()
    node = global_contrastive_loss(tape, tape.param("p", local), local_classes, glob, global_classes, cfg, 0.0)
    return float(tape.value(node))


def test_global_contrastive_on_orthogonal_prototypes() -> None:
    eye = np.eye(2)
    assert _gcl(eye, [0, 1], eye, [0, 1]) == pytest.approx(-2.0)


def test_global_contrastive_single_shared_class_is_zero() -> None:
    assert _gcl(np.array([[1.0, 0.0]]), [0], np.eye(2), [0, 1]) == 0.0
    assert _gcl(np.eye(2), [0, 1], np.array([[1.0, 0.0]]), [0]) == 0.0


def test_global_contrastive_is_scale_invariant() -> None:
    rng = np.random.default_rng(2)
    local, glob = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    base = _gcl(local, [0, 1, 2], glob, [0, 1, 2])
    assert _gcl(3.0 * local, [0, 1, 2], glob, [0, 1, 2]) == pytest.approx(base)
    assert _gcl(local, [0, 1, 2], 0.2 * glob, [0, 1, 2]) == pytest.approx(base)


def test_global_contrastive_skips_classes_missing_globally() -> None:
    rng = np.random.default_rng(4)
    local, glob = rng.normal(size=(3, 4)), rng.normal(size=(2, 4))
    assert _gcl(local, [0, 1, 2], glob, [0, 2]) == pytest.approx(_gcl(local[[0, 2]], [0, 2], glob, [0, 2]))


def _terms(tape, s=1.0, u=2.0, lc=3.0, gc=4.0):
    return LossTerms(tape.const(s), tape.const(u), tape.const(lc), tape.const(gc))


@pytest.mark.parametrize(
    "t, labeled, expected",
    [
        (2, 0, 1.0 + 0.0 + 3.0 + 0.0),
        (9, 8, 1.0 + 3.0 * 2.0 + 3.0 + 4.0),
        (5, 4, 1.0 + 1.5 * 2.0 + 3.0 + 0.5 * 4.0),
    ],
)
def test_total_loss_coefficients(t, labeled, expected) -> None:
    schedule = ScheduleConfig(total_rounds=10, eta_f=3.0)
    tape = ComputeTape()
    node = total_loss(tape, _terms(tape), t, labeled, 8, schedule)
    assert float(tape.value(node)) == pytest.approx(expected)


def test_loss_coefficients_at_ramp_midpoint() -> None:
    assert loss_coefficients(5, 4, 8, ScheduleConfig(total_rounds=10)) == pytest.approx((1.5, 0.5))


def test_non_finite_component_is_named() -> None:
    tape = ComputeTape()
    terms = _terms(tape)
    terms.local = tape.const(np.inf)
    with pytest.raises(NonFiniteLossError) as err:
        total_loss(tape, terms, 1, 1, 2, ScheduleConfig(total_rounds=4), round_id=3, client_id=1)
    assert err.value.component == "loss_lc"
    assert (err.value.round_id, err.value.client_id) == (3, 1)


@pytest.mark.parametrize("seed", range(4))
def test_loss_heads_match_finite_differences(seed) -> None:
    tape, heads = loss_heads_tape(seed)
    assert set(heads) == {"loss_s", "loss_u", "loss_lc", "loss_gc", "total"}
    for head, node in heads.items():
        report = gradient_check(tape, terminal=node, max_entries=4, rng=np.random.default_rng(seed))
        assert report.passed, (head, report.flagged, report.max_rel_error)
