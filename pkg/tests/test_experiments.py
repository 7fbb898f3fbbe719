import pytest

from conftest import small_config
from ssfl_sim.experiments import (
    ABLATION_LADDER,
    FAULTS,
    ablation_configs,
    ablation_rows,
    ablation_trend,
    check_aggregation,
    check_ema_unbiased,
    check_gradients,
    check_schedules,
    check_weighting_bounds,
    ladder_trend_holds,
    payload_report,
    run_ablation,
    run_verification,
)
from ssfl_sim.federation import TrialResult


def test_ablation_ladder_adds_one_component_at_a_time(cfg) -> None:
    variants = ablation_configs(cfg)
    assert [name for name, _ in variants] == [name for name, _ in ABLATION_LADDER]
    enabled = [sum(v.ablation.model_dump()[k] for k in ("tlaw", "lcl", "gcl", "spnp", "dt")) for _, v in variants]
    assert enabled == [0, 1, 2, 3, 4, 5]
    assert variants[-1][1].ablation.dt and not variants[-2][1].ablation.dt
    assert all(v.run.method == "ssfl-dcsl" for _, v in variants)


def test_ablation_rows_format() -> None:
    rows = ablation_rows([TrialResult("PTA", [0, 1], [0.5, 0.7])])
    assert rows == [
        {"variant": "PTA", "mean": "0.600000", "std": "0.141421", "median": "0.600000", "accuracies": "0.500000 0.700000"}
    ]


def test_ablation_runs_every_variant_on_shared_seeds(tmp_path) -> None:
    cfg = small_config(federation={"rounds": 1})
    results = run_ablation(cfg, tmp_path)
    assert [r.label for r in results] == [name for name, _ in ABLATION_LADDER]
    assert all(r.seeds == [0] for r in results)
    for label in (
        "pta",
        "pta_lcl_naive",
        "pta_gcl_lcl_naive",
        "pta_gcl_tlaw_lcl_naive",
        "pta_gcl_tlaw_lcl_spnp",
        "ssfl-dcsl",
    ):
        assert (tmp_path / label / "seed_0" / "metrics.csv").is_file(), label


@pytest.mark.parametrize(
    "medians, holds",
    [
        ([0.90, 0.88, 0.85, 0.80], True),
        ([0.90, 0.90, 0.90, 0.90], True),
        ([0.90, 0.903, 0.85, 0.80], True),
        ([0.90, 0.91, 0.85, 0.80], False),
        ([0.90, 0.903, 0.85, 0.853], False),
        ([0.80, 0.85, 0.88, 0.90], False),
    ],
)
def test_ladder_trend_allows_one_small_tie(medians, holds) -> None:
    assert ladder_trend_holds(medians) is holds


def test_ablation_trend_reads_medians_by_variant() -> None:
    results = [
        TrialResult(name, [0], [acc])
        for name, acc in zip([n for n, _ in ABLATION_LADDER], [0.70, 0.75, 0.76, 0.78, 0.79, 0.82])
    ]
    holds, medians = ablation_trend(results)
    assert holds
    assert medians == [0.82, 0.78, 0.75, 0.70]

    with pytest.raises(ValueError, match="PTA"):
        ablation_trend(results[1:])


def test_individual_checks_pass(cfg) -> None:
    assert check_weighting_bounds(cfg).passed
    assert check_ema_unbiased().passed
    assert check_gradients(cfg).passed
    assert check_aggregation(cfg).passed
    assert check_schedules().passed


def test_gradient_check_covers_every_entry_by_default(cfg) -> None:
    full = check_gradients(cfg)
    assert full.passed
    assert "all entries" in full.detail
    assert "5 heads" in full.detail

    sampled = check_gradients(small_config(verify={"grad_seeds": 1, "grad_entries": 2}))
    assert sampled.passed
    assert "2 entries per parameter" in sampled.detail


def test_verification_passes_and_catches_fault(cfg) -> None:
    clean = run_verification(cfg)
    assert [c.name for c in clean] == ["weighting-bounds", "ema-unbiased", "gradients", "aggregation", "schedules"]
    assert all(c.passed for c in clean)

    faulty = {c.name: c.passed for c in run_verification(cfg, inject_fault=FAULTS[0])}
    assert not faulty["ema-unbiased"]
    assert sum(not ok for ok in faulty.values()) == 1


def test_unknown_fault_is_rejected(cfg) -> None:
    with pytest.raises(ValueError):
        run_verification(cfg, inject_fault="flipped-sign")


def test_full_scale_prototype_payload_is_under_one_percent(cfg) -> None:
    rows = {r.label: r for r in payload_report(cfg)}
    full = rows["full-scale"]
    assert full.ratio < 0.01
    # 3 classes x (64 + 2) float64 values plus framing
    assert full.prototype_bytes >= 3 * 66 * 8
    assert full.model_bytes >= full.parameters * 8
    assert rows["config"].prototype_bytes == full.prototype_bytes - 3 * (64 - cfg.model.embed_dim) * 8
