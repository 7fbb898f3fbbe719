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


import csv
from pathlib import Path
from typing import Optional

from .config import RunConfig, load_config, settings
from .datagen import SyntheticSpec, dirichlet_partition, export_dataset, generate_dataset, label_split
from .experiments import ablation_rows, ablation_trend, payload_report, run_ablation, run_verification
from .federation import run_trials
from .log import get_logger
from .metrics import format_mean_std
from .seeds import derive_rng

log = get_logger()


def _config(path: Optional[str]) -> RunConfig:
    if not path:
        log.info("no --config given; using built-in defaults")
        return RunConfig()
    return load_config(path)


def _out(path: Optional[str]) -> Path:
    return Path(path or settings.out_dir)


def cmd_train(config: Optional[str], out: Optional[str], seed_offset: int = 0, sequential: bool = False) -> int:
    """
    Run the configured method once per trial seed and print the accuracy.

    Usage:
        ssfl-sim train --config run.ini --out runs/
    """
    cfg = _config(config)
    result = run_trials(cfg, _out(out), seed_offset=seed_offset, sequential=sequential or None)
    for seed, artifact in zip(result.seeds, result.artifacts):
        s = artifact.summary
        print(
            f"seed {seed}: accuracy {s.accuracy:.4f}  uplink {s.uplink_bytes_total} B  "
            f"csv {s.metrics_sha256[:16]}  -> {artifact.run_dir}"
        )
    print(f"{cfg.run.method}: {format_mean_std(result.accuracies)} % over {len(result.seeds)} seed(s)")
    return 0


def cmd_ablate(config: Optional[str], out: Optional[str], seed_offset: int = 0, sequential: bool = False) -> int:
    cfg = _config(config)
    out_dir = _out(out)
    results = run_ablation(cfg, out_dir, seed_offset=seed_offset, sequential=sequential or None)
    rows = ablation_rows(results)
    out_dir.mkdir(parents=True, exist_ok=True)
    with (out_dir / "ablation.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    width = max(len(r["variant"]) for r in rows)
    for r in rows:
        print(
            f"{r['variant']:<{width}}  {float(r['mean']) * 100:6.2f} ± {float(r['std']) * 100:5.2f}"
            f"  (median {float(r['median']) * 100:.2f})"
        )
    holds, medians = ablation_trend(results)
    trend = " >= ".join(f"{m * 100:.2f}" for m in medians)
    print(f"median trend {trend}: {'holds' if holds else 'broken'}")
    return 0


def cmd_verify(config: Optional[str], inject_fault: Optional[str] = None) -> int:
    checks = run_verification(_config(config), inject_fault=inject_fault)
    for check in checks:
        print(f"[{'PASS' if check.passed else 'FAIL'}] {check.name:<17} {check.detail}")
    failed = [c.name for c in checks if not c.passed]
    print("all checks passed" if not failed else f"{len(failed)} check(s) failed: {', '.join(failed)}")
    return 0 if not failed else 1


def cmd_payload_report(config: Optional[str]) -> int:
    print(f"{'model':<11} {'params':>9} {'model B':>10} {'uplink B':>9} {'ratio':>8}")
    for row in payload_report(_config(config)):
        print(
            f"{row.label:<11} {row.parameters:>9} {row.model_bytes:>10} "
            f"{row.prototype_bytes:>9} {row.ratio * 100:>7.3f}%"
        )
    return 0


def cmd_gen_data(config: Optional[str], out: Optional[str], seed_offset: int = 0) -> int:
    cfg = _config(config)
    fed = cfg.federation
    seed = cfg.trials.seeds[0] + seed_offset
    data = generate_dataset(SyntheticSpec.from_config(cfg.dataset), derive_rng(seed, "data"))
    parts = dirichlet_partition(
        data.labels, fed.clients, fed.nu, derive_rng(seed, "partition"), min_per_client=fed.min_client_samples
    )
    splits = [
        label_split(p, data.labels, fed.chi, derive_rng(seed, "split", k), nu=fed.nu)
        for k, p in enumerate(parts)
    ]
    manifest = export_dataset(_out(out) / f"dataset_seed_{seed}", data, splits)
    print(f"wrote {len(data)} windows, manifest {manifest}")
    return 0
