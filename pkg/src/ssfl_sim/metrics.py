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
Per-round metrics: a replayable CSV plus a SQLite ledger, and the JSON run
summary.

The CSV has a fixed header and no wall-clock column, so two replays of the
same seed produce identical bytes. The ledger additionally keeps wall-clock
time and straggler flags.
"""

import csv
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, Field
from sqlalchemy.orm import Session

from .db import init_db, make_engine, make_session_factory
from .models import Base, RoundMetric, Run
from .seeds import sha256_hex

CSV_COLUMNS = (
    "round",
    "client",
    "loss_s",
    "loss_u",
    "loss_lc",
    "loss_gc",
    "loss_total",
    "accuracy",
    "quantity_f",
    "quality_g",
    "ema_mu",
    "ema_var",
    "mean_lambda",
    "uplink_bytes",
)


class MetricsRecord(BaseModel):
    round: int
    client: int
    loss_s: float = 0.0
    loss_u: float = 0.0
    loss_lc: float = 0.0
    loss_gc: float = 0.0
    loss_total: float = 0.0
    accuracy: float = float("nan")
    quantity_f: float = float("nan")
    quality_g: float = float("nan")
    ema_mu: float = float("nan")
    ema_var: float = float("nan")
    mean_lambda: float = float("nan")
    uplink_bytes: int = 0
    wall_ms: float = 0.0
    straggler: bool = False

    @classmethod
    def from_stats(cls, stats, straggler: bool = False) -> "MetricsRecord":
        values = {name: getattr(stats, name) for name in cls.model_fields if hasattr(stats, name)}
        values["straggler"] = straggler
        return cls(**values)

    def csv_row(self) -> List[str]:
        return [_fmt(getattr(self, c)) for c in CSV_COLUMNS]


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _nullable(value: float) -> Optional[float]:
    return None if value is None or math.isnan(value) else float(value)


def get_or_create_run(
    session: Session,
    label: str,
    method: str,
    seed: int,
    config_text: str,
) -> Run:
    """Get or create a Run by (label, seed); a rerun replaces its rounds."""
    digest = sha256_hex(config_text.encode("utf-8"))
    run = session.query(Run).filter_by(label=label, seed=seed).one_or_none()
    if run is None:
        run = Run(label=label, method=method, seed=seed, config_digest=digest, config_text=config_text)
        session.add(run)
    else:
        run.method = method
        run.config_digest = digest
        run.config_text = config_text
        run.rounds.clear()
        run.accuracy = None
        run.finished_at = None
    session.flush()
    return run


def ingest_record(session: Session, run: Run, record: MetricsRecord) -> RoundMetric:
    """Upsert one (round, client) row of the ledger."""
    row = (
        session.query(RoundMetric)
        .filter_by(run_id=run.id, round=record.round, client=record.client)
        .one_or_none()
    )
    if row is None:
        row = RoundMetric(run=run, round=record.round, client=record.client)
        session.add(row)
    row.loss_s = record.loss_s
    row.loss_u = record.loss_u
    row.loss_lc = record.loss_lc
    row.loss_gc = record.loss_gc
    row.loss_total = record.loss_total
    row.accuracy = _nullable(record.accuracy)
    row.quantity_f = _nullable(record.quantity_f)
    row.quality_g = _nullable(record.quality_g)
    row.ema_mu = _nullable(record.ema_mu)
    row.ema_var = _nullable(record.ema_var)
    row.mean_lambda = _nullable(record.mean_lambda)
    row.uplink_bytes = record.uplink_bytes
    row.wall_ms = record.wall_ms
    row.straggler = record.straggler
    return row


class MetricsWriter:
    """Append-only writer for one run's metrics.csv and ledger.sqlite."""

    def __init__(self, run_dir: Union[str, Path], label: str, method: str, seed: int, config_text: str):
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.csv_path = self.run_dir / "metrics.csv"
        self._fh = self.csv_path.open("w", newline="", encoding="utf-8")
        self._csv = csv.writer(self._fh, lineterminator="\n")
        self._csv.writerow(CSV_COLUMNS)

        self.engine = make_engine(self.run_dir / "ledger.sqlite")
        init_db(self.engine, Base)
        self.session = make_session_factory(self.engine)()
        self.run = get_or_create_run(self.session, label, method, seed, config_text)
        self.records = 0

    def append(self, record: MetricsRecord) -> None:
        self._csv.writerow(record.csv_row())
        ingest_record(self.session, self.run, record)
        self.records += 1

    def finish(self, accuracy: Optional[float], finished_at: float) -> None:
        self.run.accuracy = _nullable(accuracy)
        self.run.finished_at = finished_at
        self.close()

    def close(self) -> None:
        if self._fh.closed:
            return
        self._fh.close()
        self.session.commit()
        self.session.close()
        self.engine.dispose()

    def __enter__(self) -> "MetricsWriter":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        if exc_type is not None:
            self.session.rollback()
        self.close()


def read_metrics(path: Union[str, Path]) -> List[Dict[str, str]]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


class ClientResult(BaseModel):
    client: int
    accuracy: float
    test_samples: int
    per_class: Dict[int, float] = Field(default_factory=dict)


class RunSummary(BaseModel):
    label: str
    method: str
    seed: int
    rounds: int
    rounds_skipped: int = 0
    accuracy: float
    clients: List[ClientResult] = Field(default_factory=list)
    uplink_bytes_total: int = 0
    model_bytes: int = 0
    prototype_bytes: int = 0
    metrics_sha256: str = ""
    wall_ms: float = 0.0
    train_ms_per_sample: float = 0.0
    test_ms_per_sample: float = 0.0


def weighted_accuracy(results: Sequence[ClientResult]) -> float:
    total = sum(r.test_samples for r in results)
    if total == 0:
        return float("nan")
    return sum(r.accuracy * r.test_samples for r in results) / total


def mean_std(values: Sequence[float]) -> Dict[str, float]:
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return {"mean": float(arr.mean()), "std": std}


def format_mean_std(values: Sequence[float], scale: float = 100.0) -> str:
    """'96.71 ± 0.42' style, in percent by default."""
    s = mean_std(values)
    return f"{s['mean'] * scale:.2f} ± {s['std'] * scale:.2f}"
