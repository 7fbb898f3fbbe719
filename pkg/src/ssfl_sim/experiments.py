#!/usr/bin/env python3
#
# Copyright (c) 2025 SnapFS, LLC
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.


"""
Experiment orchestration beyond a single run: the ablation ladder, the
verification checklist and the payload comparison.
"""

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .config import ModelSection, RunConfig
from .federation import TrialResult, run_trials
from .log import get_logger
from .losses import (
    ContrastiveConfig,
    EmbeddingBatch,
    LossTerms,
    global_contrastive_loss,
    local_contrastive_loss,
    supervised_loss,
    total_loss,
    unsupervised_loss,
)
from .metrics import mean_std
from .model import bind_parameters, forward, init_parameters, parameter_count, payload_bytes
from .prototypes import (
    PrototypeBank,
    RoundMessage,
    aggregate_prototypes,
    batch_prototypes,
    full_bank,
    momentum_update,
)
from .seeds import derive_rng
from .tape import ComputeTape, gradient_check_terminals
from .weighting import ScheduleConfig, ema_variance_ratio, eta, iota, verify_weighting_bounds

log = get_logger()

# --- ablation ladder -------------------------------------------------------

_OFF = {"tlaw": False, "lcl": False, "gcl": False, "spnp": False, "dt": False}

ABLATION_LADDER: List[Tuple[str, Dict[str, bool]]] = [
    ("PTA", dict(_OFF)),
    ("PTA+LCL(Naive)", {**_OFF, "lcl": True}),
    ("PTA+GCL+LCL(Naive)", {**_OFF, "lcl": True, "gcl": True}),
    ("PTA+GCL+TLAW+LCL(Naive)", {**_OFF, "lcl": True, "gcl": True, "tlaw": True}),
    ("PTA+GCL+TLAW+LCL(+SPNP)", {**_OFF, "lcl": True, "gcl": True, "tlaw": True, "spnp": True}),
    ("SSFL-DCSL", {"tlaw": True, "lcl": True, "gcl": True, "spnp": True, "dt": True}),
]


def ablation_configs(cfg: RunConfig) -> List[Tuple[str, RunConfig]]:
    base = cfg.with_updates(run={"method": "ssfl-dcsl"})
    return [(name, base.with_updates(ablation=toggles)) for name, toggles in ABLATION_LADDER]


def _slug(name: str) -> str:
    """Directory label for a ladder variant: ``PTA+LCL(Naive)`` becomes ``pta_lcl_naive``."""
    return re.sub(r"[^a-z0-9-]+", "_", name.lower()).strip("_")


def run_ablation(
    cfg: RunConfig,
    out_dir: Union[str, Path],
    seed_offset: int = 0,
    sequential: Optional[bool] = None,
) -> List[TrialResult]:
    """Every variant runs on the same seeds, hence the same partitions."""
    results = []
    for name, variant in ablation_configs(cfg):
        log.info(f"ablation variant {name}")
        result = run_trials(variant, out_dir, label=_slug(name), seed_offset=seed_offset, sequential=sequential)
        result.label = name
        results.append(result)
    return results


def ablation_rows(results: Sequence[TrialResult]) -> List[Dict[str, str]]:
    rows = []
    for r in results:
        s = mean_std(r.accuracies)
        rows.append(
            {
                "variant": r.label,
                "mean": f"{s['mean']:.6f}",
                "std": f"{s['std']:.6f}",
                "median": f"{r.median:.6f}",
                "accuracies": " ".join(f"{a:.6f}" for a in r.accuracies),
            }
        )
    return rows


# full method first, each step removes components
ABLATION_TREND = ("SSFL-DCSL", "PTA+GCL+TLAW+LCL(Naive)", "PTA+LCL(Naive)", "PTA")


def ladder_trend_holds(medians: Sequence[float], tie: float = 0.005) -> bool:
    """
    True when ``medians`` never increase, except that one adjacent pair may
    invert by at most ``tie``.
    """
    inverted = False
    for upper, lower in zip(medians, medians[1:]):
        if upper >= lower:
            continue
        if inverted or lower - upper > tie:
            return False
        inverted = True
    return True


def ablation_trend(results: Sequence[TrialResult], tie: float = 0.005) -> Tuple[bool, List[float]]:
    by_label = {r.label: r.median for r in results}
    missing = [name for name in ABLATION_TREND if name not in by_label]
    if missing:
        raise ValueError(f"ablation results lack {', '.join(missing)}")
    medians = [by_label[name] for name in ABLATION_TREND]
    return ladder_trend_holds(medians, tie), medians


# --- verification ----------------------------------------------------------

FAULTS = ("biased-ema",)


@dataclass
class VerifyCheck:
    name: str
    passed: bool
    detail: str = ""


def check_weighting_bounds(cfg: RunConfig, seed: int = 0) -> VerifyCheck:
    v = cfg.verify
    report = verify_weighting_bounds(v.bound_trials, v.pool_size, seed, v.pool_classes, cfg.weighting.lambda_max)
    detail = f"{report.trials} pools of {report.pool_size}, {len(report.violations)} violation(s)"
    for bad in report.violations[:3]:
        detail += f"; trial {bad.trial} ({bad.mode}) {bad.check}: {bad.value:.6g} vs {bad.bound:.6g}"
    return VerifyCheck("weighting-bounds", report.passed, detail)


def check_ema_unbiased(unbiased: bool = True, seed: int = 0, tolerance: float = 0.05) -> VerifyCheck:
    ratio = ema_variance_ratio(unbiased=unbiased, seed=seed)
    return VerifyCheck(
        "ema-unbiased",
        abs(ratio - 1.0) <= tolerance,
        f"tracked/true variance = {ratio:.4f} (tolerance {tolerance})",
    )


GRAD_MODEL = ModelSection(
    conv_channels=[2, 3, 3], kernel_size=3, padding=1, pool=2, proj_hidden=4, embed_dim=3
)


def loss_heads_tape(seed: int, n_classes: int = 3, length: int = 16) -> Tuple[ComputeTape, Dict[str, int]]:
    """
    A randomized three-layer encoder with every loss head on one tape:
    supervised, weighted unsupervised, local contrastive (pair selection and
    dynamic temperature on), global contrastive and their weighted total.
    """
    rng = derive_rng(seed, "verify", "gradients")
    tape = ComputeTape()
    params = init_parameters(GRAD_MODEL, 1, n_classes, rng)
    for name in params:
        if name.endswith(".bias"):
            params[name] = rng.normal(0.0, 0.1, params[name].shape)
    bound = bind_parameters(tape, params)

    n_lab, n_unl = 3, 4
    y = rng.integers(0, n_classes, n_lab)
    y[:2] = [0, 1]
    lab_logits, lab_emb = forward(tape, bound, tape.input("x_labeled", rng.normal(size=(n_lab, 1, length))), GRAD_MODEL)
    xu = rng.normal(size=(n_unl, 1, length))
    weak_logits, weak_emb = forward(tape, bound, tape.input("x_weak", xu), GRAD_MODEL)
    strong_logits, strong_emb = forward(
        tape, bound, tape.input("x_strong", xu + 0.1 * rng.normal(size=xu.shape)), GRAD_MODEL
    )
    pseudo = np.array([0, 1, 1, 2])[:n_unl]
    weights = rng.uniform(0.2, 1.0, n_unl)
    ccfg = ContrastiveConfig(tau=0.5, alpha=1.0)
    sigma = float(rng.uniform(0.05, 0.3))

    heads = LossTerms(
        supervised=supervised_loss(tape, lab_logits, y),
        unsupervised=unsupervised_loss(tape, strong_logits, pseudo, weights, n_unl),
        local=local_contrastive_loss(tape, EmbeddingBatch(weak_emb, strong_emb, pseudo, weights), ccfg, sigma),
    )
    joined = tape.concatenate([lab_emb, weak_emb], axis=0)
    protos, classes = batch_prototypes(tape, joined, np.concatenate([y, pseudo]))
    g_classes = np.arange(n_classes)
    heads.global_ = global_contrastive_loss(
        tape, protos, classes, rng.normal(size=(n_classes, GRAD_MODEL.embed_dim)), g_classes, ccfg, sigma
    )
    schedule = ScheduleConfig(total_rounds=10)
    total = total_loss(tape, heads, 5, n_lab, n_lab + n_unl, schedule)
    return tape, {
        "loss_s": heads.supervised,
        "loss_u": heads.unsupervised,
        "loss_lc": heads.local,
        "loss_gc": heads.global_,
        "total": total,
    }


def check_gradients(cfg: RunConfig) -> VerifyCheck:
    """Every loss head against central differences; ``grad_entries=0`` checks every parameter entry."""
    v = cfg.verify
    max_entries = v.grad_entries or None
    worst, checked, kinks, failures = 0.0, 0, 0, []
    for seed in range(v.grad_seeds):
        tape, heads = loss_heads_tape(seed)
        reports = gradient_check_terminals(
            tape,
            heads,
            step=v.grad_step,
            tolerance=v.grad_tolerance,
            max_entries=max_entries,
            rng=derive_rng(seed, "verify", "entries"),
        )
        for head, report in reports.items():
            worst = max(worst, report.max_rel_error)
            if not report.passed:
                failures.append(f"seed {seed} {head}: {', '.join(report.flagged)}")
        first = next(iter(reports.values()))
        checked += sum(p.checked for p in first.params.values())
        kinks += sum(p.kinks for p in first.params.values())
    coverage = "all entries" if max_entries is None else f"{max_entries} entries per parameter"
    detail = (
        f"{v.grad_seeds} seeds x {len(heads)} heads, {coverage} ({checked} compared, {kinks} on kinks), "
        f"max relative error {worst:.2e}"
    )
    if failures:
        detail += "; " + "; ".join(failures[:3])
    return VerifyCheck("gradients", not failures, detail)


def _brute_mean(banks: Sequence[PrototypeBank], c: int) -> np.ndarray:
    total = sum(b.counts[c] for b in banks if c in b.counts)
    acc = np.zeros(banks[0].dim)
    for b in banks:
        if c in b.counts:
            for i in range(acc.shape[0]):
                acc[i] += b.counts[c] * b.vectors[c][i]
    return acc / total


def check_aggregation(cfg: RunConfig, seed: int = 0) -> VerifyCheck:
    rng = derive_rng(seed, "verify", "aggregation")
    problems = []
    for trial in range(cfg.verify.aggregation_instances):
        k, c, d = (int(rng.integers(1, 5)), int(rng.integers(1, 5)), int(rng.integers(1, 9)))
        banks = []
        for _ in range(k):
            held = [j for j in range(c) if rng.uniform() < 0.7] or [int(rng.integers(0, c))]
            banks.append(
                PrototypeBank(
                    {j: rng.normal(size=d) for j in held},
                    {j: int(rng.integers(1, 20)) for j in held},
                )
            )
        merged = aggregate_prototypes(banks)
        for j in merged.classes:
            if np.max(np.abs(merged.vectors[j] - _brute_mean(banks, j))) > 1e-12:
                problems.append(f"instance {trial} class {j}")
        prev = PrototypeBank({j: rng.normal(size=d) for j in merged.classes}, dict(merged.counts))
        for kappa in (0.0, 0.5, 1.0):
            blended = momentum_update(prev, merged, kappa)
            for j in merged.classes:
                expect = kappa * prev.vectors[j] + (1.0 - kappa) * merged.vectors[j]
                if not np.array_equal(blended.vectors[j], expect):
                    problems.append(f"instance {trial} kappa {kappa} class {j}")
            if kappa == 0.0 and any(not np.array_equal(blended.vectors[j], merged.vectors[j]) for j in merged.classes):
                problems.append(f"instance {trial} kappa 0 identity")
            if kappa == 1.0 and any(not np.array_equal(blended.vectors[j], prev.vectors[j]) for j in merged.classes):
                problems.append(f"instance {trial} kappa 1 identity")
    detail = f"{cfg.verify.aggregation_instances} instances, {len(problems)} mismatch(es)"
    if problems:
        detail += ": " + ", ".join(problems[:3])
    return VerifyCheck("aggregation", not problems, detail)


def check_schedules() -> VerifyCheck:
    schedule = ScheduleConfig(total_rounds=100, eta_f=3.0)
    got = (eta(10, schedule), eta(50, schedule), eta(90, schedule))
    ok = got == (0.0, 1.5, 3.0)
    for b in range(1, 17):
        for e in range(0, b + 1):
            ok = ok and iota(e, b) == e / b
    return VerifyCheck("schedules", ok, f"eta(0.1T, 0.5T, 0.9T) = {got}")


def run_verification(cfg: RunConfig, inject_fault: Optional[str] = None) -> List[VerifyCheck]:
    if inject_fault is not None and inject_fault not in FAULTS:
        raise ValueError(f"unknown fault {inject_fault!r}; choose from {FAULTS}")
    if inject_fault:
        log.warning(f"verification running with injected fault: {inject_fault}")
    return [
        check_weighting_bounds(cfg),
        check_ema_unbiased(unbiased=inject_fault != "biased-ema"),
        check_gradients(cfg),
        check_aggregation(cfg),
        check_schedules(),
    ]


# --- payload ---------------------------------------------------------------

FULL_SCALE_MODEL = ModelSection(
    conv_channels=[32, 64, 256], kernel_size=8, padding=4, pool=2, proj_hidden=128, embed_dim=64
)


@dataclass
class PayloadRow:
    label: str
    parameters: int
    model_bytes: int
    prototype_bytes: int
    extra: Dict[str, float] = field(default_factory=dict)

    @property
    def ratio(self) -> float:
        return self.prototype_bytes / self.model_bytes


def payload_row(label: str, model: ModelSection, channels: int, n_classes: int) -> PayloadRow:
    params = init_parameters(model, channels, n_classes, np.random.default_rng(0))
    full = full_bank(n_classes, model.embed_dim)
    return PayloadRow(
        label=label,
        parameters=parameter_count(params),
        model_bytes=payload_bytes(params),
        prototype_bytes=RoundMessage(0, 0, full).uplink_bytes,
    )


def payload_report(cfg: RunConfig) -> List[PayloadRow]:
    ds = cfg.dataset
    return [
        payload_row("config", cfg.model, ds.channels, ds.n_classes),
        payload_row("full-scale", FULL_SCALE_MODEL, ds.channels, ds.n_classes),
    ]
