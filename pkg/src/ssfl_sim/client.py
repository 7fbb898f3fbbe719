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
One client: its data, personal model, confidence EMA and optimizer, and the
three things it does (train a round, fine-tune, evaluate).
"""

import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
from scipy.special import softmax

from .augment import strong_batch, weak_batch
from .config import RunConfig
from .datagen import ClientDataset
from .errors import NonFiniteError, NonFiniteLossError
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
from .model import Params, bind_parameters, copy_parameters, forward, infer
from .optim import AdamState
from .prototypes import PrototypeBank, batch_prototypes, compute_local_prototypes
from .tape import ComputeTape, backpropagate
from .weighting import (
    ConfidenceEMA,
    ScheduleConfig,
    WeightingConfig,
    batch_confidence_stats,
    flat_weights,
    pseudo_labels,
    quality_oracle,
    quantity_oracle,
    threshold_weights,
)

log = get_logger()


@dataclass(frozen=True)
class Objective:
    """Which loss terms and which pseudo-label weighting a method trains with."""

    use_unlabeled: bool = True
    weighting: str = "tlaw"  # tlaw | flat | threshold
    lcl: bool = True
    gcl: bool = True
    select_pairs: bool = True
    weighted_prototypes: bool = False
    threshold: float = 0.95
    share_prototypes: bool = True

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "Objective":
        method, ab = cfg.run.method, cfg.ablation
        if method == "fedavg-supervised":
            return cls(
                use_unlabeled=False,
                weighting="flat",
                lcl=False,
                gcl=False,
                share_prototypes=False,
            )
        if method == "fixmatch-threshold":
            return cls(
                weighting="threshold",
                lcl=False,
                gcl=False,
                threshold=cfg.weighting.theta_c,
                share_prototypes=False,
            )
        return cls(
            weighting="tlaw" if ab.tlaw else "flat",
            lcl=ab.lcl,
            gcl=ab.gcl,
            select_pairs=ab.spnp,
            weighted_prototypes=ab.weighted_prototypes,
        )


@dataclass
class RoundStats:
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
    samples: int = 0


@dataclass
class EvalResult:
    accuracy: float
    per_class: Dict[int, float]
    confusion: np.ndarray
    total: int


@dataclass
class ClientState:
    client_id: int
    data: ClientDataset
    params: Params
    ema: ConfidenceEMA
    optimizer: AdamState
    cfg: RunConfig = field(repr=False)
    local_bank: Optional[PrototypeBank] = None

    @classmethod
    def create(cls, client_id: int, data: ClientDataset, params: Params, cfg: RunConfig) -> "ClientState":
        o = cfg.optim
        return cls(
            client_id=client_id,
            data=data,
            params=copy_parameters(params),
            ema=ConfidenceEMA(
                n_classes=data.n_classes,
                momentum=cfg.weighting.ema_momentum,
                batch_size=o.batch_size,
            ),
            optimizer=AdamState(lr=o.learning_rate, beta1=o.beta1, beta2=o.beta2, eps=o.eps),
            cfg=cfg,
        )


def make_batches(
    n_labeled: int, n_unlabeled: int, batch_size: int, rng: np.random.Generator
) -> List[Tuple[np.ndarray, np.ndarray]]:
    """
    Shuffle both pools and deal them into ceil(N / B) batches so every batch
    carries roughly the client's labeled share. Labeled rows come first.
    """
    total = n_labeled + n_unlabeled
    if total == 0:
        return []
    n_batches = math.ceil(total / batch_size)
    lab = np.array_split(rng.permutation(n_labeled), n_batches)
    unl = np.array_split(rng.permutation(n_unlabeled), n_batches)
    return [(l, u) for l, u in zip(lab, unl) if len(l) + len(u)]


@contextmanager
def _component(name: str, round_id: int, client_id: int) -> Iterator[None]:
    try:
        yield
    except NonFiniteError as e:
        raise NonFiniteLossError(name, round_id, client_id) from e


def _weigh(probs: np.ndarray, client: ClientState, objective: Objective) -> Tuple[np.ndarray, np.ndarray]:
    wcfg = WeightingConfig(client.cfg.weighting.lambda_max)
    if objective.weighting == "tlaw":
        return pseudo_labels(probs, client.ema, wcfg)
    if objective.weighting == "threshold":
        return threshold_weights(probs, objective.threshold, wcfg)
    return flat_weights(probs, wcfg)


def _train_batch(
    client: ClientState,
    lab: np.ndarray,
    unl: np.ndarray,
    global_bank: Optional[PrototypeBank],
    t: int,
    schedule: ScheduleConfig,
    objective: Objective,
    rng: np.random.Generator,
) -> Tuple[Dict[str, float], np.ndarray]:
    cfg, data, k = client.cfg, client.data, client.client_id
    use_unl = objective.use_unlabeled and len(unl) > 0
    ccfg = ContrastiveConfig.from_config(cfg)
    tape = ComputeTape()
    bound = bind_parameters(tape, client.params)
    terms = LossTerms()
    emb_nodes, emb_labels = [], []
    weights = np.empty(0)

    with _component("forward", t, k):
        if len(lab):
            xl = tape.input("x_labeled", weak_batch(data.x_labeled[lab], cfg.augment, rng))
            lab_logits, lab_emb = forward(tape, bound, xl, cfg.model)
            emb_nodes.append(lab_emb)
            emb_labels.append(data.y_labeled[lab])
        if use_unl:
            xu = data.x_unlabeled[unl]
            xw = tape.input("x_weak", weak_batch(xu, cfg.augment, rng))
            xs = tape.input("x_strong", strong_batch(xu, cfg.augment, rng))
            weak_logits, weak_emb = forward(tape, bound, xw, cfg.model)
            strong_logits, strong_emb = forward(tape, bound, xs, cfg.model)

    if len(lab):
        with _component("loss_s", t, k):
            terms.supervised = supervised_loss(tape, lab_logits, data.y_labeled[lab])
    if use_unl:
        probs = softmax(tape.value(weak_logits), axis=1)
        client.ema.update(*batch_confidence_stats(probs), batch_size=len(unl))
        pseudo, weights = _weigh(probs, client, objective)
        with _component("loss_u", t, k):
            terms.unsupervised = unsupervised_loss(tape, strong_logits, pseudo, weights, len(unl))
        if objective.lcl:
            with _component("loss_lc", t, k):
                batch = EmbeddingBatch(weak_emb, strong_emb, pseudo, weights)
                terms.local = local_contrastive_loss(
                    tape, batch, ccfg, client.ema.sigma, select_pairs=objective.select_pairs
                )
        emb_nodes.append(weak_emb)
        emb_labels.append(pseudo)

    if objective.gcl and global_bank is not None and len(global_bank.usable_classes()) >= 2 and len(lab):
        with _component("loss_gc", t, k):
            joined = emb_nodes[0] if len(emb_nodes) == 1 else tape.concatenate(emb_nodes, axis=0)
            protos, classes = batch_prototypes(tape, joined, np.concatenate(emb_labels))
            if protos is not None:
                g_classes, g_mat = global_bank.matrix(global_bank.usable_classes())
                terms.global_ = global_contrastive_loss(
                    tape, protos, classes, g_mat, g_classes, ccfg, client.ema.sigma
                )

    total = total_loss(tape, terms, t, len(lab), len(lab) + len(unl), schedule, t, k)
    grads = backpropagate(tape, total)
    client.optimizer.apply(client.params, grads)

    values = terms.values(tape)
    values["loss_total"] = float(tape.value(total))
    log.debug(f"client {k} round {t}: " + " ".join(f"{n}={v:.4f}" for n, v in values.items()))
    return values, weights


def _pool_pseudo_stats(
    client: ClientState, objective: Objective, rng: np.random.Generator
) -> Tuple[Dict[str, float], Optional[PrototypeBank]]:
    """
    Weak-view predictions over the whole unlabeled pool: quantity and quality
    of the current pseudo-labels plus this round's local prototypes.
    """
    cfg, data = client.cfg, client.data
    stats = {"ema_mu": client.ema.mu, "ema_var": client.ema.var}
    emb_parts, label_parts, weight_parts = [], [], []
    if len(data.y_labeled):
        _, lab_emb = infer(client.params, data.x_labeled, cfg.model)
        emb_parts.append(lab_emb)
        label_parts.append(data.y_labeled)
        weight_parts.append(np.ones(len(data.y_labeled)))
    if objective.use_unlabeled and len(data.x_unlabeled):
        probs, unl_emb = infer(client.params, weak_batch(data.x_unlabeled, cfg.augment, rng), cfg.model)
        pseudo, w = _weigh(probs, client, objective)
        wcfg = WeightingConfig(cfg.weighting.lambda_max)
        if objective.weighting == "tlaw":
            stats["quantity_f"] = quantity_oracle(probs, client.ema, wcfg)
            if w.sum() > 0:
                stats["quality_g"] = quality_oracle(probs, data.unlabeled_truth, client.ema, wcfg)
        else:
            stats["quantity_f"] = float(w.mean())
            if w.sum() > 0:
                stats["quality_g"] = float(((pseudo == data.unlabeled_truth) * w).sum() / w.sum())
        emb_parts.append(unl_emb)
        label_parts.append(pseudo)
        weight_parts.append(w if objective.weighted_prototypes else np.ones(len(w)))
    if not objective.share_prototypes or not emb_parts:
        return stats, None
    bank = compute_local_prototypes(
        np.concatenate(emb_parts),
        np.concatenate(label_parts),
        np.concatenate(weight_parts),
    )
    return stats, bank


def local_train_round(
    client: ClientState,
    global_bank: Optional[PrototypeBank],
    t: int,
    schedule: ScheduleConfig,
    objective: Objective,
    rng: np.random.Generator,
    proto_rng: np.random.Generator,
) -> Tuple[ClientState, Optional[PrototypeBank], RoundStats]:
    started = time.perf_counter()
    cfg, data = client.cfg, client.data
    n_unl = len(data.x_unlabeled) if objective.use_unlabeled else 0
    sums: Dict[str, float] = {}
    lambdas: List[np.ndarray] = []
    n_batches = 0
    for _ in range(cfg.federation.local_epochs):
        for lab, unl in make_batches(len(data.y_labeled), n_unl, cfg.optim.batch_size, rng):
            values, weights = _train_batch(client, lab, unl, global_bank, t, schedule, objective, rng)
            for name, v in values.items():
                sums[name] = sums.get(name, 0.0) + v
            lambdas.append(weights)
            n_batches += 1

    stats = RoundStats(round=t, client=client.client_id)
    for name, v in sums.items():
        setattr(stats, name, v / n_batches)
    seen = np.concatenate(lambdas) if lambdas else np.empty(0)
    if len(seen):
        stats.mean_lambda = float(seen.mean())
    stats.samples = cfg.federation.local_epochs * (len(data.y_labeled) + n_unl)
    stats.wall_ms = (time.perf_counter() - started) * 1000.0

    pool, bank = _pool_pseudo_stats(client, objective, proto_rng)
    for name, v in pool.items():
        setattr(stats, name, v)
    if bank is not None:
        bank.round = t
    client.local_bank = bank
    stats.accuracy = evaluate(client).accuracy
    return client, bank, stats


def fine_tune(client: ClientState, epochs: int, rng: np.random.Generator) -> ClientState:
    """Supervised-only epochs over the client's labeled set."""
    data = client.data
    if epochs <= 0:
        return client
    if len(data.y_labeled) == 0:
        log.warning(f"client {client.client_id} has no labeled samples; fine-tuning skipped")
        return client
    for _ in range(epochs):
        for lab, _ in make_batches(len(data.y_labeled), 0, client.cfg.optim.batch_size, rng):
            tape = ComputeTape()
            bound = bind_parameters(tape, client.params)
            logits, _ = forward(tape, bound, tape.input("x", data.x_labeled[lab]), client.cfg.model)
            with _component("loss_s", -1, client.client_id):
                loss = supervised_loss(tape, logits, data.y_labeled[lab])
            client.optimizer.apply(client.params, backpropagate(tape, loss))
    return client


def supervised_score(client: ClientState) -> Tuple[float, float]:
    """(mean cross-entropy, accuracy) on the labeled set, without augmentation."""
    data = client.data
    probs, _ = infer(client.params, data.x_labeled, client.cfg.model)
    picked = probs[np.arange(len(data.y_labeled)), data.y_labeled]
    loss = float(-np.log(np.clip(picked, 1e-300, None)).mean())
    return loss, float((probs.argmax(axis=1) == data.y_labeled).mean())


def evaluate(client: ClientState) -> EvalResult:
    data = client.data
    n_classes = data.n_classes
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    if len(data.y_test) == 0:
        return EvalResult(float("nan"), {}, confusion, 0)
    probs, _ = infer(client.params, data.x_test, client.cfg.model)
    pred = probs.argmax(axis=1)
    np.add.at(confusion, (data.y_test, pred), 1)
    per_class = {
        int(c): float(confusion[c, c] / confusion[c].sum())
        for c in range(n_classes)
        if confusion[c].sum() > 0
    }
    return EvalResult(
        accuracy=float((pred == data.y_test).mean()),
        per_class=per_class,
        confusion=confusion,
        total=len(data.y_test),
    )
