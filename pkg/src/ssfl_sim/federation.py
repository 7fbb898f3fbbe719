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
The federated round loop.

Per round every client trains locally against the current global prototype
bank. Survivors send their fresh local prototypes, which the server
aggregates and blends into the global bank. Stragglers still train and
still receive the global bank; only their uplink is dropped. The two
baselines reuse the same loop but exchange full model parameters through
FedAvg instead of prototypes.

Clients within a round run concurrently on a thread pool unless the run is
sequential. Every client draws only from its own seed streams and results
are re-ordered by client id, so both modes give the same numbers.
"""

import asyncio
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Set, Tuple, TypeVar, Union

import numpy as np

from .client import (
    ClientState,
    Objective,
    RoundStats,
    evaluate,
    fine_tune,
    local_train_round,
)
from .config import RunConfig, dump_config, render_config, settings
from .datagen import (
    ClientDataset,
    ClientSplit,
    SignalDataset,
    SyntheticSpec,
    dirichlet_partition,
    generate_dataset,
    label_split,
)
from .errors import DomainError
from .log import get_logger
from .metrics import (
    ClientResult,
    MetricsRecord,
    MetricsWriter,
    RunSummary,
    weighted_accuracy,
)
from .model import Params, copy_parameters, init_parameters, payload_bytes
from .prototypes import (
    PrototypeBank,
    RoundMessage,
    aggregate_prototypes,
    full_bank,
    momentum_update,
    save_bank,
)
from .seeds import derive_rng, file_digest
from .snapshot import save_snapshot
from .weighting import ScheduleConfig

log = get_logger()

T = TypeVar("T")


@dataclass
class Federation:
    data: SignalDataset
    splits: List[ClientSplit]
    clients: List[ClientState]
    init: Params


def build_federation(cfg: RunConfig, seed: int) -> Federation:
    """
    Data, partition, splits and initial weights depend on the seed only, so
    every method and ablation variant run with one seed sees the same
    clients.
    """
    fed = cfg.federation
    data = generate_dataset(SyntheticSpec.from_config(cfg.dataset), derive_rng(seed, "data"))
    parts = dirichlet_partition(
        data.labels,
        fed.clients,
        fed.nu,
        derive_rng(seed, "partition"),
        min_per_client=fed.min_client_samples,
    )
    splits = [
        label_split(p, data.labels, fed.chi, derive_rng(seed, "split", k), nu=fed.nu)
        for k, p in enumerate(parts)
    ]
    init = init_parameters(cfg.model, cfg.dataset.channels, cfg.dataset.n_classes, derive_rng(seed, "init"))
    clients = [
        ClientState.create(k, ClientDataset.from_split(k, data, s), init, cfg)
        for k, s in enumerate(splits)
    ]
    for c in clients:
        log.debug(
            f"client {c.client_id}: {len(c.data.y_labeled)} labeled, "
            f"{len(c.data.x_unlabeled)} unlabeled, {len(c.data.y_test)} test"
        )
    return Federation(data=data, splits=splits, clients=clients, init=init)


def pick_stragglers(cfg: RunConfig, seed: int, t: int) -> Set[int]:
    s, k = cfg.federation.stragglers, cfg.federation.clients
    if s >= k:
        raise DomainError(f"{s} stragglers would leave no client out of {k}")
    if s == 0:
        return set()
    return {int(i) for i in derive_rng(seed, "stragglers", t).choice(k, s, replace=False)}


def fedavg(params: Sequence[Params], weights: Sequence[float]) -> Params:
    """Sample-count-weighted parameter average; equal weights if all are zero."""
    w = np.asarray(weights, dtype=np.float64)
    w = np.full(len(params), 1.0 / len(params)) if w.sum() <= 0 else w / w.sum()
    return {name: sum(wk * p[name] for wk, p in zip(w, params)) for name in params[0]}


async def _gather(items: Sequence[T], fn: Callable[[T], object], workers: int) -> list:
    loop = asyncio.get_running_loop()
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [loop.run_in_executor(pool, fn, item) for item in items]
        return list(await asyncio.gather(*futures))


def run_clients(clients: Sequence[ClientState], fn: Callable[[ClientState], tuple], sequential: bool) -> list:
    if sequential or len(clients) <= 1:
        return [fn(c) for c in clients]
    workers = settings.threads or len(clients)
    results = asyncio.run(_gather(clients, fn, workers))
    return sorted(results, key=lambda r: r[0].client_id)


@dataclass
class RunArtifact:
    run_dir: Path
    summary: RunSummary
    clients: List[ClientState] = field(repr=False)
    global_bank: Optional[PrototypeBank] = None
    global_params: Optional[Params] = field(default=None, repr=False)

    @property
    def metrics_path(self) -> Path:
        return self.run_dir / "metrics.csv"

    @property
    def accuracy(self) -> float:
        return self.summary.accuracy


def _run_dir(out_dir: Union[str, Path], label: str, seed: int) -> Path:
    return Path(out_dir) / label / f"seed_{seed}"


def run_training(
    cfg: RunConfig,
    out_dir: Union[str, Path],
    seed: Optional[int] = None,
    label: Optional[str] = None,
    sequential: Optional[bool] = None,
) -> RunArtifact:
    seed = cfg.trials.seeds[0] if seed is None else seed
    label = label or cfg.run.method
    sequential = cfg.run.sequential if sequential is None else sequential
    run_dir = _run_dir(out_dir, label, seed)
    dump_config(cfg, run_dir / "config.ini")

    fed_cfg = cfg.federation
    objective = Objective.from_config(cfg)
    shares_params = cfg.run.method != "ssfl-dcsl"
    schedule = ScheduleConfig.from_config(cfg)
    federation = build_federation(cfg, seed)
    clients = federation.clients
    global_bank = PrototypeBank()
    global_params = copy_parameters(federation.init) if shares_params else None
    model_bytes = payload_bytes(federation.init)
    if cfg.run.method == "fedavg-supervised":
        fedavg_weights = [len(c.data.y_labeled) for c in clients]
    else:
        fedavg_weights = [c.data.n_train for c in clients]

    log.info(
        f"run {label} seed={seed}: {fed_cfg.clients} clients, {fed_cfg.rounds} rounds, "
        f"chi={fed_cfg.chi}, stragglers={fed_cfg.stragglers}, "
        f"{'sequential' if sequential else 'concurrent'}"
    )
    started = time.perf_counter()
    skipped = 0
    uplink_total = 0
    train_ms = 0.0
    train_samples = 0

    with MetricsWriter(run_dir, label, cfg.run.method, seed, render_config(cfg)) as writer:
        for t in range(1, fed_cfg.rounds + 1):
            stragglers = pick_stragglers(cfg, seed, t)
            if shares_params:
                for c in clients:
                    c.params = copy_parameters(global_params)
            snapshot = global_bank

            def step(c: ClientState) -> Tuple[ClientState, Optional[PrototypeBank], RoundStats]:
                return local_train_round(
                    c,
                    snapshot,
                    t,
                    schedule,
                    objective,
                    derive_rng(seed, "train", c.client_id, t),
                    derive_rng(seed, "prototype", c.client_id, t),
                )

            results = run_clients(clients, step, sequential)
            survivors = [r for r in results if r[0].client_id not in stragglers]

            received: List[PrototypeBank] = []
            for client, bank, stats in results:
                train_ms += stats.wall_ms
                train_samples += stats.samples
                if client.client_id in stragglers:
                    continue
                if shares_params:
                    stats.uplink_bytes = model_bytes
                elif bank is not None:
                    message = RoundMessage(client.client_id, t, bank)
                    wire = message.encode_uplink()
                    stats.uplink_bytes = len(wire)
                    received.append(RoundMessage.decode_uplink(wire, client.client_id, t).uplink)
                uplink_total += stats.uplink_bytes

            if not survivors:
                log.warning(f"round {t}: no client reached the server; round skipped")
                skipped += 1
            elif shares_params:
                ids = [c.client_id for c, _, _ in survivors]
                global_params = fedavg([clients[k].params for k in ids], [fedavg_weights[k] for k in ids])
            elif received:
                fresh = aggregate_prototypes(received, literal=cfg.ablation.literal_aggregation, round=t)
                global_bank = momentum_update(global_bank, fresh, fed_cfg.kappa)

            for client, _, stats in results:
                writer.append(MetricsRecord.from_stats(stats, straggler=client.client_id in stragglers))
            accs = [s.accuracy for _, _, s in results]
            log.info(
                f"round {t}/{fed_cfg.rounds}: mean client accuracy {np.nanmean(accs):.4f}, "
                f"uplinks {len(survivors)}/{len(results)}, global classes {global_bank.classes}"
            )

        if shares_params:
            for c in clients:
                c.params = copy_parameters(global_params)
        for c in clients:
            fine_tune(c, fed_cfg.finetune_epochs, derive_rng(seed, "finetune", c.client_id))

        test_started = time.perf_counter()
        results_by_client = []
        for c in clients:
            ev = evaluate(c)
            results_by_client.append(
                ClientResult(client=c.client_id, accuracy=ev.accuracy, test_samples=ev.total, per_class=ev.per_class)
            )
        test_ms = (time.perf_counter() - test_started) * 1000.0
        accuracy = weighted_accuracy(results_by_client)
        writer.finish(accuracy, time.time())

    for c in clients:
        save_snapshot(run_dir / "params" / f"client_{c.client_id}.bin", c.params)
        if c.local_bank is not None:
            save_bank(run_dir / "prototypes" / f"client_{c.client_id}.bin", c.local_bank)
    if len(global_bank):
        save_bank(run_dir / "prototypes" / "global.bin", global_bank)

    n_test = sum(r.test_samples for r in results_by_client)
    proto_bytes = RoundMessage(0, 0, full_bank(cfg.dataset.n_classes, cfg.model.embed_dim)).uplink_bytes
    summary = RunSummary(
        label=label,
        method=cfg.run.method,
        seed=seed,
        rounds=fed_cfg.rounds,
        rounds_skipped=skipped,
        accuracy=accuracy,
        clients=results_by_client,
        uplink_bytes_total=uplink_total,
        model_bytes=model_bytes,
        prototype_bytes=proto_bytes,
        metrics_sha256=file_digest(run_dir / "metrics.csv"),
        wall_ms=(time.perf_counter() - started) * 1000.0,
        train_ms_per_sample=train_ms / train_samples if train_samples else 0.0,
        test_ms_per_sample=test_ms / n_test if n_test else 0.0,
    )
    (run_dir / "summary.json").write_text(summary.model_dump_json(indent=2), encoding="utf-8")
    log.info(f"run {label} seed={seed}: accuracy {accuracy:.4f} -> {run_dir}")
    return RunArtifact(run_dir, summary, clients, global_bank if len(global_bank) else None, global_params)


def baseline_fedavg_supervised(cfg: RunConfig, out_dir, seed: Optional[int] = None, **kwargs) -> RunArtifact:
    return run_training(cfg.with_updates(run={"method": "fedavg-supervised"}), out_dir, seed, **kwargs)


def baseline_fixmatch_threshold(cfg: RunConfig, out_dir, seed: Optional[int] = None, **kwargs) -> RunArtifact:
    return run_training(cfg.with_updates(run={"method": "fixmatch-threshold"}), out_dir, seed, **kwargs)


def simulate_stragglers(cfg: RunConfig, stragglers: int, out_dir, seed: Optional[int] = None, **kwargs) -> RunArtifact:
    if stragglers >= cfg.federation.clients:
        raise DomainError(f"{stragglers} stragglers would leave no client out of {cfg.federation.clients}")
    kwargs.setdefault("label", f"{cfg.run.method}-s{stragglers}")
    return run_training(cfg.with_updates(federation={"stragglers": stragglers}), out_dir, seed, **kwargs)


@dataclass
class TrialResult:
    label: str
    seeds: List[int]
    accuracies: List[float]
    artifacts: List[RunArtifact] = field(repr=False, default_factory=list)

    @property
    def median(self) -> float:
        return float(np.median(self.accuracies))


def run_trials(
    cfg: RunConfig,
    out_dir: Union[str, Path],
    label: Optional[str] = None,
    seed_offset: int = 0,
    sequential: Optional[bool] = None,
    runner: Callable[..., RunArtifact] = run_training,
) -> TrialResult:
    """One run per trial seed; partitions and initialization are redrawn per seed."""
    label = label or cfg.run.method
    seeds = [s + seed_offset for s in cfg.trials.seeds]
    artifacts = [runner(cfg, out_dir, seed=s, label=label, sequential=sequential) for s in seeds]
    return TrialResult(label, seeds, [a.accuracy for a in artifacts], artifacts)
