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


from __future__ import annotations

from typing import Optional

import time

from sqlalchemy import (
    Boolean,
    Float,
    ForeignKey,
    Index,
    Integer,
    String,
    Text,
    UniqueConstraint,
)
from sqlalchemy.orm import DeclarativeBase, Mapped, mapped_column, relationship


class Base(DeclarativeBase):
    pass


class Run(Base):
    """One training run: a method, a seed and the config it ran with"""

    __tablename__ = "runs"

    id: Mapped[int] = mapped_column(Integer, primary_key=True, autoincrement=True)

    label: Mapped[str] = mapped_column(String(255), nullable=False)
    method: Mapped[str] = mapped_column(String(32), nullable=False)
    seed: Mapped[int] = mapped_column(Integer, nullable=False)

    # sha256 of the rendered config
    config_digest: Mapped[str] = mapped_column(String(64), nullable=False)
    config_text: Mapped[Optional[str]] = mapped_column(Text, nullable=True)

    accuracy: Mapped[Optional[float]] = mapped_column(Float, nullable=True)

    created_at: Mapped[float] = mapped_column(
        Float, nullable=False, default=lambda: time.time()
    )
    finished_at: Mapped[Optional[float]] = mapped_column(Float, nullable=True)

    rounds: Mapped[list["RoundMetric"]] = relationship(
        back_populates="run",
        cascade="all, delete-orphan",
    )

    __table_args__ = (
        UniqueConstraint("label", "seed", name="uq_runs_label_seed"),
    )


class RoundMetric(Base):
    """Per (round, client) losses, pseudo-label statistics and payload"""

    __tablename__ = "round_metrics"

    id: Mapped[int] = mapped_column(Integer, primary_key=True, autoincrement=True)

    run_id: Mapped[int] = mapped_column(
        Integer, ForeignKey("runs.id", ondelete="CASCADE"), nullable=False
    )
    run: Mapped[Run] = relationship(back_populates="rounds")

    round: Mapped[int] = mapped_column(Integer, nullable=False)
    client: Mapped[int] = mapped_column(Integer, nullable=False)

    loss_s: Mapped[float] = mapped_column(Float, nullable=False, default=0.0)
    loss_u: Mapped[float] = mapped_column(Float, nullable=False, default=0.0)
    loss_lc: Mapped[float] = mapped_column(Float, nullable=False, default=0.0)
    loss_gc: Mapped[float] = mapped_column(Float, nullable=False, default=0.0)
    loss_total: Mapped[float] = mapped_column(Float, nullable=False, default=0.0)

    # NaN is stored as NULL
    accuracy: Mapped[Optional[float]] = mapped_column(Float, nullable=True)
    quantity_f: Mapped[Optional[float]] = mapped_column(Float, nullable=True)
    quality_g: Mapped[Optional[float]] = mapped_column(Float, nullable=True)
    ema_mu: Mapped[Optional[float]] = mapped_column(Float, nullable=True)
    ema_var: Mapped[Optional[float]] = mapped_column(Float, nullable=True)
    mean_lambda: Mapped[Optional[float]] = mapped_column(Float, nullable=True)

    uplink_bytes: Mapped[int] = mapped_column(Integer, nullable=False, default=0)

    # wall clock lives here only; the CSV stays replayable
    wall_ms: Mapped[float] = mapped_column(Float, nullable=False, default=0.0)
    straggler: Mapped[bool] = mapped_column(Boolean, nullable=False, default=False)

    __table_args__ = (
        UniqueConstraint(
            "run_id",
            "round",
            "client",
            name="uq_round_metrics_run_round_client",
        ),
        Index("ix_round_metrics_run", "run_id"),
    )
