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
Class prototypes: per-class mean embeddings, the only thing a client sends.
"""

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DomainError
from .log import get_logger
from .snapshot import decode_snapshot, encode_snapshot, save_snapshot
from .tape import ComputeTape

log = get_logger()

ZERO_NORM = 1e-12


@dataclass
class PrototypeBank:
    vectors: Dict[int, np.ndarray] = field(default_factory=dict)
    counts: Dict[int, int] = field(default_factory=dict)
    round: int = 0

    def __post_init__(self):
        if set(self.vectors) != set(self.counts):
            raise DomainError("prototype vectors and counts must cover the same classes")
        dims = {v.shape for v in self.vectors.values()}
        if len(dims) > 1:
            raise DomainError(f"prototype dimension must be uniform, got {sorted(dims)}")
        for c, n in self.counts.items():
            if n <= 0:
                raise DomainError(f"class {c} has count {n}; entries need a positive count")
            if not np.all(np.isfinite(self.vectors[c])):
                raise DomainError(f"class {c} prototype is not finite")

    def __len__(self) -> int:
        return len(self.vectors)

    @property
    def classes(self) -> List[int]:
        return sorted(self.vectors)

    @property
    def dim(self) -> Optional[int]:
        for v in self.vectors.values():
            return int(v.shape[0])
        return None

    def usable_classes(self) -> List[int]:
        """Classes whose prototype can be L2-normalized."""
        return [c for c in self.classes if np.linalg.norm(self.vectors[c]) > ZERO_NORM]

    def matrix(self, classes: Optional[Iterable[int]] = None) -> Tuple[np.ndarray, np.ndarray]:
        classes = self.classes if classes is None else list(classes)
        if not classes:
            return np.empty(0, dtype=np.int64), np.empty((0, self.dim or 0))
        return np.asarray(classes, dtype=np.int64), np.stack([self.vectors[c] for c in classes])

    def to_arrays(self) -> Dict[str, np.ndarray]:
        out: Dict[str, np.ndarray] = {}
        for c in self.classes:
            out[f"class.{c}.prototype"] = self.vectors[c]
            out[f"class.{c}.count"] = np.array([float(self.counts[c])])
        return out

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray], round: int = 0) -> "PrototypeBank":
        vectors, counts = {}, {}
        for name, value in arrays.items():
            _, c, kind = name.split(".")
            if kind == "prototype":
                vectors[int(c)] = value
            else:
                counts[int(c)] = int(value[0])
        return cls(vectors, counts, round)


def compute_local_prototypes(
    embeddings: np.ndarray,
    labels: Sequence[int],
    weights: Optional[Sequence[float]] = None,
    round: int = 0,
) -> PrototypeBank:
    """
    Mean embedding per (true or pseudo) label. With ``weights`` each row
    contributes in proportion to its weight; counts stay sample counts.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(embeddings) != len(labels):
        raise DomainError("one label per embedding row")
    w = np.ones(len(labels)) if weights is None else np.asarray(weights, dtype=np.float64)
    vectors, counts = {}, {}
    for c in np.unique(labels):
        rows = labels == c
        mass = w[rows].sum()
        if mass <= 0:
            continue
        vec = (w[rows, None] * embeddings[rows]).sum(axis=0) / mass
        if np.linalg.norm(vec) <= ZERO_NORM:
            log.warning(f"class {int(c)} prototype collapsed to zero; skipped from alignment")
        vectors[int(c)] = vec
        counts[int(c)] = int(rows.sum())
    return PrototypeBank(vectors, counts, round)


def batch_prototypes(tape: ComputeTape, embedding: int, labels: Sequence[int]) -> Tuple[Optional[int], List[int]]:
    """
    Per-class means of an embedding node, kept on the tape so the global
    alignment loss reaches the encoder. Degenerate (zero) means are dropped.
    """
    labels = np.asarray(labels, dtype=np.int64)
    values = tape.value(embedding)
    rows, classes = [], []
    for c in np.unique(labels):
        a = (labels == c) / float((labels == c).sum())
        if np.linalg.norm(a @ values) > ZERO_NORM:
            rows.append(a)
            classes.append(int(c))
    if not rows:
        return None, []
    avg = tape.const(np.stack(rows))
    return tape.affine(avg, embedding, tape.const(np.zeros(values.shape[1]))), classes


def aggregate_prototypes(banks: Sequence[PrototypeBank], literal: bool = False, round: int = 0) -> PrototypeBank:
    """
    Count-weighted mean per class over the banks that hold it. ``literal``
    additionally divides by the number of contributing clients.
    """
    holders: Dict[int, List[PrototypeBank]] = {}
    for bank in banks:
        for c in bank.classes:
            holders.setdefault(c, []).append(bank)
    vectors, counts = {}, {}
    for c in sorted(holders):
        total = sum(b.counts[c] for b in holders[c])
        if total <= 0:
            continue
        vec = sum((b.counts[c] / total) * b.vectors[c] for b in holders[c])
        if literal:
            vec = vec / len(holders[c])
        vectors[c], counts[c] = vec, total
    return PrototypeBank(vectors, counts, round)


def momentum_update(prev: PrototypeBank, fresh: PrototypeBank, kappa: float) -> PrototypeBank:
    if not 0.0 <= kappa <= 1.0:
        raise DomainError(f"kappa must lie in [0, 1], got {kappa}")
    vectors, counts = {}, {}
    for c in sorted(set(prev.classes) | set(fresh.classes)):
        if c in prev.vectors and c in fresh.vectors:
            vectors[c] = kappa * prev.vectors[c] + (1.0 - kappa) * fresh.vectors[c]
            counts[c] = fresh.counts[c]
        elif c in prev.vectors:
            vectors[c], counts[c] = prev.vectors[c].copy(), prev.counts[c]
        else:
            vectors[c], counts[c] = fresh.vectors[c].copy(), fresh.counts[c]
    return PrototypeBank(vectors, counts, max(prev.round, fresh.round))


def save_bank(path, bank: PrototypeBank) -> int:
    return save_snapshot(path, bank.to_arrays())


@dataclass
class RoundMessage:
    """
    Uplink: one row per class, ``[class id, count, vector...]``.
    Downlink: the global bank every client uses in the next round.
    """

    client_id: int
    round: int
    uplink: PrototypeBank
    downlink: Optional[PrototypeBank] = None

    def uplink_rows(self) -> np.ndarray:
        classes, mat = self.uplink.matrix()
        counts = np.array([self.uplink.counts[c] for c in classes], dtype=np.float64)
        return np.column_stack([classes.astype(np.float64), counts, mat]) if len(classes) else np.empty((0, 2))

    def encode_uplink(self) -> bytes:
        return encode_snapshot({"uplink": self.uplink_rows()})

    @property
    def uplink_bytes(self) -> int:
        return len(self.encode_uplink())

    @classmethod
    def decode_uplink(cls, data: bytes, client_id: int, round: int) -> "RoundMessage":
        rows = decode_snapshot(data)["uplink"]
        vectors = {int(r[0]): r[2:].copy() for r in rows}
        counts = {int(r[0]): int(r[1]) for r in rows}
        return cls(client_id, round, PrototypeBank(vectors, counts, round))


def full_bank(n_classes: int, dim: int) -> PrototypeBank:
    """A bank holding every class; its uplink is the largest a client can send."""
    return PrototypeBank({j: np.ones(dim) for j in range(n_classes)}, {j: 1 for j in range(n_classes)})
