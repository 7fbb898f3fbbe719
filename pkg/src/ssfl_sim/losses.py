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
The four training losses, recorded on a ComputeTape.

Every function takes node ids and returns the node id of a scalar loss so
the caller can add terms and backpropagate once. Pseudo-labels, weights,
pair masks and the global prototype bank enter as constants: gradients
only flow through the current client's logits and embeddings.
"""

from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .config import RunConfig
from .errors import DomainError, NonFiniteLossError
from .log import get_logger
from .tape import ComputeTape
from .weighting import ScheduleConfig, eta, iota

log = get_logger()


@dataclass(frozen=True)
class ContrastiveConfig:
    tau: float = 0.5
    alpha: float = 1.0
    dynamic: bool = True

    def __post_init__(self):
        if self.tau <= 0 or self.alpha < 0:
            raise DomainError(f"need tau > 0 and alpha >= 0, got tau={self.tau}, alpha={self.alpha}")

    def temperature(self, sigma: float) -> float:
        if not self.dynamic:
            return self.tau
        return self.tau * (1.0 + self.alpha * max(sigma, 0.0))

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "ContrastiveConfig":
        return cls(tau=cfg.contrastive.tau, alpha=cfg.contrastive.alpha, dynamic=cfg.ablation.dt)


@dataclass
class EmbeddingBatch:
    weak: int  # node (B, d)
    strong: int  # node (B, d)
    pseudo: np.ndarray
    weights: Optional[np.ndarray] = None


def _rows(tape: ComputeTape, node: int) -> int:
    return tape.value(node).shape[0]


def supervised_loss(tape: ComputeTape, logits: int, labels: Sequence[int]) -> int:
    if _rows(tape, logits) < 1:
        raise DomainError("supervised loss needs at least one labeled row")
    return tape.mean(tape.softmax_cross_entropy(logits, labels))


def unsupervised_loss(
    tape: ComputeTape, strong_logits: int, pseudo: Sequence[int], weights: Sequence[float], count: int
) -> int:
    """sum_i w_i * CE(pseudo_i, strong_i) / count."""
    if count <= 0:
        raise DomainError("pseudo-label count must be positive")
    ce = tape.softmax_cross_entropy(strong_logits, pseudo)
    weighted = tape.multiply(ce, tape.const(np.asarray(weights, dtype=np.float64)))
    return tape.scale(tape.sum(weighted), 1.0 / count)


def positive_mask(pseudo: np.ndarray, select_pairs: bool = True) -> np.ndarray:
    pseudo = np.asarray(pseudo)
    if not select_pairs:
        return np.eye(len(pseudo))
    return (pseudo[:, None] == pseudo[None, :]).astype(np.float64)


def local_contrastive_loss(
    tape: ComputeTape,
    batch: EmbeddingBatch,
    cfg: ContrastiveConfig,
    sigma: float,
    select_pairs: bool = True,
) -> int:
    """
    Weak view i is the anchor; strong views sharing its pseudo-label are
    positives (its own strong view always is), all other strong views are
    negatives. With ``select_pairs`` off only the own strong view is
    positive.
    """
    n = _rows(tape, batch.weak)
    if n < 1 or _rows(tape, batch.strong) != n or len(batch.pseudo) != n:
        raise DomainError("weak, strong and pseudo-label rows must align")
    temp = cfg.temperature(sigma)
    mask = positive_mask(batch.pseudo, select_pairs)
    if mask.all():
        log.debug("local contrastive: no negatives in batch, loss is 0")

    logits = tape.scale(tape.cosine_similarity(batch.weak, batch.strong), 1.0 / temp)
    e = tape.exp(logits)
    num = tape.sum(tape.multiply(e, tape.const(mask)), axis=1)
    den = tape.sum(e, axis=1)
    ratio = tape.subtract(tape.log(num), tape.log(den))
    return tape.scale(tape.sum(ratio), -1.0 / n)


def global_contrastive_loss(
    tape: ComputeTape,
    local_protos: int,
    local_classes: Sequence[int],
    global_protos: np.ndarray,
    global_classes: Sequence[int],
    cfg: ContrastiveConfig,
    sigma: float,
) -> int:
    """
    Pull each local class prototype towards its global counterpart and away
    from the other global classes. Classes missing on either side are
    skipped; the denominator excludes the matching global class.
    """
    local_classes = [int(c) for c in local_classes]
    global_classes = [int(c) for c in global_classes]
    present = [c for c in local_classes if c in set(global_classes)]
    if len(present) < 2 or len(global_classes) < 2:
        log.debug(f"global contrastive: {len(present)} shared class(es), loss is 0")
        return tape.const(0.0)

    d = tape.value(local_protos).shape[1]
    select = np.zeros((len(present), len(local_classes)))
    for r, c in enumerate(present):
        select[r, local_classes.index(c)] = 1.0
    picked = tape.affine(tape.const(select), local_protos, tape.const(np.zeros(d)))

    match = np.array([[1.0 if g == c else 0.0 for g in global_classes] for c in present])
    temp = cfg.temperature(sigma)
    logits = tape.scale(tape.cosine_similarity(picked, tape.const(global_protos)), 1.0 / temp)
    pos = tape.sum(tape.multiply(logits, tape.const(match)), axis=1)
    neg = tape.log(tape.sum(tape.multiply(tape.exp(logits), tape.const(1.0 - match)), axis=1))
    return tape.scale(tape.sum(tape.subtract(pos, neg)), -1.0)


@dataclass
class LossTerms:
    supervised: Optional[int] = None
    unsupervised: Optional[int] = None
    local: Optional[int] = None
    global_: Optional[int] = None

    def values(self, tape: ComputeTape) -> Dict[str, float]:
        return {
            name: 0.0 if node is None else float(tape.value(node))
            for name, node in (
                ("loss_s", self.supervised),
                ("loss_u", self.unsupervised),
                ("loss_lc", self.local),
                ("loss_gc", self.global_),
            )
        }


def loss_coefficients(t: float, labeled: int, batch: int, schedule: ScheduleConfig) -> Tuple[float, float]:
    return eta(t, schedule), iota(labeled, batch)


def total_loss(
    tape: ComputeTape,
    terms: LossTerms,
    t: float,
    labeled: int,
    batch: int,
    schedule: ScheduleConfig,
    round_id: Optional[int] = None,
    client_id: Optional[int] = None,
) -> int:
    """L_s + eta(t) * L_u + L_lc + iota * L_gc; absent terms count as 0."""
    for name, value in terms.values(tape).items():
        if not np.isfinite(value):
            raise NonFiniteLossError(name, round_id, client_id)
    eta_t, iota_b = loss_coefficients(t, labeled, batch, schedule)
    parts = []
    if terms.supervised is not None:
        parts.append(terms.supervised)
    if terms.unsupervised is not None:
        parts.append(tape.scale(terms.unsupervised, eta_t))
    if terms.local is not None:
        parts.append(terms.local)
    if terms.global_ is not None:
        parts.append(tape.scale(terms.global_, iota_b))
    if not parts:
        return tape.const(0.0)
    total = parts[0]
    for p in parts[1:]:
        total = tape.add(total, p)
    return total
