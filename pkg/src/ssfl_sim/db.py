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


from pathlib import Path
from typing import Union

from sqlalchemy import Engine, create_engine, text
from sqlalchemy.orm import Session, sessionmaker


def make_engine(path: Union[str, Path]) -> Engine:
    """One SQLite ledger per run directory."""
    return create_engine(f"sqlite:///{Path(path)}", future=True)


def make_session_factory(engine: Engine) -> "sessionmaker[Session]":
    return sessionmaker(bind=engine, expire_on_commit=False, class_=Session)


def init_db(engine: Engine, Base) -> None:
    """
    Create tables and views if they don't exist yet.
    """
    with engine.begin() as conn:
        Base.metadata.create_all(conn)

        # Round-level view: client-averaged accuracy and payload
        conn.execute(
            text(
                """
                CREATE VIEW IF NOT EXISTS round_summary AS
                SELECT
                    r.label AS label,
                    r.seed AS seed,
                    m.round AS round,
                    AVG(m.accuracy) AS mean_accuracy,
                    AVG(m.loss_total) AS mean_loss,
                    SUM(m.uplink_bytes) AS uplink_bytes,
                    SUM(m.wall_ms) AS wall_ms
                FROM round_metrics m
                JOIN runs r ON m.run_id = r.id
                GROUP BY r.label, r.seed, m.round;
            """
            )
        )
