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
Truncated-Laplace adaptive sample weighting (TLAW).

A pseudo-label whose confidence max(p) reaches the running mean confidence
gets the full weight lambda_max. Below the mean the weight decays like the
left half of a Laplace density centred on the mean, with scale
b = sqrt(var / 2) taken from the same running statistics. Mean and variance
are exponential moving averages over unlabeled batches.
"""

import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .config import RunConfig
from .errors import DomainError
from .log import get_logger

log = get_logger()

DEGENERATE_B = 1e-12
PROB_TOLERANCE = 1e-9


@dataclass(frozen=True)
class WeightingConfig:
    lambda_max: float = 1.0

    def __post_init__(self):
        if self.lambda_max <= 0:
            raise DomainError(f"lambda_max must be positive, got {self.lambda_max}")

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "WeightingConfig":
        return cls(lambda_max=cfg.weighting.lambda_max)


@dataclass(frozen=True)
class ScheduleConfig:
    total_rounds: int
    eta_f: float = 3.0
    t1_fraction: float = 0.3
    t2_fraction: float = 0.7

    def __post_init__(self):
        if not 0.0 <= self.t1_fraction < self.t2_fraction <= 1.0:
            raise DomainError(
                f"need 0 <= T1 < T2 <= T, got fractions {self.t1_fraction}, {self.t2_fraction}"
            )

    @property
    def t1(self) -> float:
        return self.t1_fraction * self.total_rounds

    @property
    def t2(self) -> float:
        return self.t2_fraction * self.total_rounds

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "ScheduleConfig":
        w = cfg.weighting
        return cls(
            total_rounds=cfg.federation.rounds,
            eta_f=w.eta_f,
            t1_fraction=w.t1_fraction,
            t2_fraction=w.t2_fraction,
        )


@dataclass
class ConfidenceEMA:
    """
    Running mean and variance of max-probabilities for one client.

    ``unbiased`` applies the B_U/(B_U-1) correction to each batch variance
    before it enters the average. Turning it off exists only so the
    verification suite can show the biased estimate being caught.
    """

    n_classes: int
    momentum: float = 0.95
    batch_size: int = 16
    unbiased: bool = True
    mu: float = field(init=False)
    var: float = field(init=False)
    updates: int = field(init=False, default=0)
    _warned: bool = field(init=False, default=False, repr=False)

    def __post_init__(self):
        if self.n_classes < 2:
            raise DomainError("confidence tracking needs at least two classes")
        if not 0.0 <= self.momentum <= 1.0:
            raise DomainError(f"EMA momentum must lie in [0, 1], got {self.momentum}")
        self.mu = 1.0 / self.n_classes
        self.var = 1.0

    @classmethod
    def from_stats(cls, n_classes: int, mu: float, var: float, **kwargs) -> "ConfidenceEMA":
        ema = cls(n_classes, **kwargs)
        if var < 0:
            raise DomainError(f"variance must be >= 0, got {var}")
        ema.mu, ema.var = float(mu), float(var)
        return ema

    @property
    def sigma(self) -> float:
        return math.sqrt(max(self.var, 0.0))

    @property
    def b(self) -> float:
        return math.sqrt(max(self.var, 0.0) / 2.0)

    def update(self, mu_b: float, var_b: float, batch_size: Optional[int] = None) -> "ConfidenceEMA":
        n = self.batch_size if batch_size is None else batch_size
        m = self.momentum
        self.mu = m * self.mu + (1.0 - m) * mu_b
        if n > 1:
            correction = n / (n - 1.0) if self.unbiased else 1.0
            self.var = max(m * self.var + (1.0 - m) * correction * var_b, 0.0)
        self.updates += 1
        return self

    def warn_degenerate(self) -> None:
        if not self._warned:
            log.warning(
                f"confidence spread collapsed (b={self.b:.3g}); "
                f"weighting falls back to a hard threshold at {self.mu:.4f}"
            )
            self._warned = True


def _as_probs(P) -> np.ndarray:
    P = np.atleast_2d(np.asarray(P, dtype=np.float64))
    if P.ndim != 2:
        raise DomainError(f"expected a batch of probability vectors, got shape {P.shape}")
    if len(P) and (np.any(P < -PROB_TOLERANCE) or np.any(np.abs(P.sum(axis=1) - 1.0) > PROB_TOLERANCE)):
        raise DomainError("probability vectors must be nonnegative and sum to 1")
    return P


def weights_from_confidence(conf: np.ndarray, ema: ConfidenceEMA, cfg: WeightingConfig) -> np.ndarray:
    conf = np.asarray(conf, dtype=np.float64)
    b = ema.b
    above = conf >= ema.mu
    if b < DEGENERATE_B:
        ema.warn_degenerate()
        return np.where(above, cfg.lambda_max, 0.0)
    decay = np.exp(-np.abs(conf - ema.mu) / b)
    return np.where(above, cfg.lambda_max, cfg.lambda_max * decay)


def sample_weight(p, ema: ConfidenceEMA, cfg: WeightingConfig) -> float:
    P = _as_probs(p)
    if len(P) != 1:
        raise DomainError("sample_weight takes a single probability vector")
    return float(weights_from_confidence(P.max(axis=1), ema, cfg)[0])


def batch_confidence_stats(P) -> Tuple[float, float]:
    P = _as_probs(P)
    if len(P) == 0:
        raise DomainError("empty batch has no confidence statistics")
    conf = P.max(axis=1)
    return float(conf.mean()), float(conf.var())


def ema_update(ema: ConfidenceEMA, mu_b: float, var_b: float, batch_size: Optional[int] = None) -> ConfidenceEMA:
    return ema.update(mu_b, var_b, batch_size)


def eta(t: float, cfg: ScheduleConfig) -> float:
    if not 0 <= t <= cfg.total_rounds:
        raise DomainError(f"round {t} outside [0, {cfg.total_rounds}]")
    if t < cfg.t1:
        return 0.0
    if t < cfg.t2:
        return cfg.eta_f * (t - cfg.t1) / (cfg.t2 - cfg.t1)
    return cfg.eta_f


def iota(labeled: int, batch: int) -> float:
    if batch <= 0 or not 0 <= labeled <= batch:
        raise DomainError(f"need 0 <= E <= B and B > 0, got E={labeled}, B={batch}")
    return labeled / batch


def pseudo_labels(P, ema: ConfidenceEMA, cfg: WeightingConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Hard labels (ties go to the lowest class id) and their TLAW weights."""
    P = _as_probs(P)
    return np.argmax(P, axis=1), weights_from_confidence(P.max(axis=1), ema, cfg)


def flat_weights(P, cfg: WeightingConfig) -> Tuple[np.ndarray, np.ndarray]:
    P = _as_probs(P)
    return np.argmax(P, axis=1), np.full(len(P), cfg.lambda_max)


def threshold_weights(P, threshold: float, cfg: WeightingConfig) -> Tuple[np.ndarray, np.ndarray]:
    P = _as_probs(P)
    keep = P.max(axis=1) >= threshold
    return np.argmax(P, axis=1), np.where(keep, cfg.lambda_max, 0.0)


def quantity_oracle(P, ema: ConfidenceEMA, cfg: WeightingConfig) -> float:
    P = _as_probs(P)
    if len(P) == 0:
        raise DomainError("quantity is undefined on an empty pool")
    return float(weights_from_confidence(P.max(axis=1), ema, cfg).mean())


def quality_oracle(P, truth, ema: ConfidenceEMA, cfg: WeightingConfig) -> float:
    P = _as_probs(P)
    truth = np.asarray(truth)
    if len(P) == 0 or len(truth) != len(P):
        raise DomainError("quality needs one true label per pool entry")
    w = weights_from_confidence(P.max(axis=1), ema, cfg)
    total = w.sum()
    if total <= 0:
        raise DomainError("quality is undefined when every weight is zero")
    return float(((np.argmax(P, axis=1) == truth) * w).sum() / total)


# --- brute-force bound verification ---------------------------------------

@dataclass
class BoundViolation:
    trial: int
    check: str
    value: float
    bound: float
    mode: str
    mu: float
    var: float
    confidences: np.ndarray = field(repr=False)


@dataclass
class BoundsReport:
    trials: int
    pool_size: int
    by_mode: dict = field(default_factory=dict)
    violations: List[BoundViolation] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations


POOL_MODES = ("quantile", "mirrored", "above")


def _probs_with_confidence(conf: np.ndarray, top: np.ndarray, n_classes: int) -> np.ndarray:
    rest = (1.0 - conf) / (n_classes - 1)
    P = np.repeat(rest[:, None], n_classes, axis=1)
    P[np.arange(len(conf)), top] = conf
    return P


def make_pool(
    mode: str, pool_size: int, n_classes: int, rng: np.random.Generator
) -> Tuple[np.ndarray, np.ndarray, float, float]:
    """
    Draw a pool of probability vectors, true labels and EMA statistics.

    Confidences lie strictly inside (1/C, 1). In every mode at most half the
    pool falls below the mean, which is the regime the lower bounds on
    quantity and quality cover.
    """
    floor = 1.0 / n_classes
    if mode == "mirrored":
        centre = rng.uniform(floor + 0.05, 0.95)
        half = pool_size // 2
        reach = min(centre - floor, 1.0 - centre)
        delta = rng.uniform(0.0, 1.0, half) * reach * 0.999
        conf = np.concatenate([centre - delta, centre + delta])
        if pool_size % 2:
            conf = np.append(conf, centre)
        mu = centre
    else:
        a, b = rng.uniform(0.5, 5.0, 2)
        conf = floor + (1.0 - floor) * np.clip(rng.beta(a, b, pool_size), 1e-9, 1.0 - 1e-9)
        ranked = np.sort(conf)
        if mode == "quantile":
            mu = float(ranked[int(np.floor(rng.uniform(0.1, 0.5) * pool_size))])
        elif mode == "above":
            mu = float(ranked[0])
        else:
            raise DomainError(f"unknown pool mode {mode!r}")
    conf = rng.permutation(conf)
    top = rng.integers(0, n_classes, len(conf))
    correct = rng.uniform(size=len(conf)) < conf
    shift = rng.integers(1, n_classes, len(conf))
    truth = np.where(correct, top, (top + shift) % n_classes)
    var = float(conf.var(ddof=1)) if len(conf) > 1 else 0.0
    return _probs_with_confidence(conf, top, n_classes), truth, float(mu), var


def verify_weighting_bounds(
    trials: int = 1000,
    pool_size: int = 256,
    seed: int = 0,
    n_classes: int = 3,
    lambda_max: float = 1.0,
    tolerance: float = 0.0,
) -> BoundsReport:
    cfg = WeightingConfig(lambda_max)
    rng = np.random.default_rng(seed)
    report = BoundsReport(trials=trials, pool_size=pool_size)
    for trial in range(trials):
        mode = POOL_MODES[trial % len(POOL_MODES)]
        P, truth, mu, var = make_pool(mode, pool_size, n_classes, rng)
        ema = ConfidenceEMA.from_stats(n_classes, mu, var)
        conf = P.max(axis=1)
        above = conf >= mu
        f = quantity_oracle(P, ema, cfg)
        g = quality_oracle(P, truth, ema, cfg)

        def flag(check: str, value: float, bound: float) -> None:
            report.violations.append(
                BoundViolation(trial, check, value, bound, mode, mu, var, conf.copy())
            )

        if ema.b >= DEGENERATE_B:
            e0 = math.exp(-abs(1.0 / n_classes - mu) / ema.b)
        else:
            e0 = 0.0
        lower_f = lambda_max / 2.0 * (1.0 + e0)
        if above.all():
            if abs(f - lambda_max) > tolerance:
                flag("quantity == lambda_max", f, lambda_max)
        else:
            if f < lower_f - tolerance:
                flag("quantity lower bound", f, lower_f)
            if not lambda_max / 2.0 < f < lambda_max:
                flag("quantity strictly inside (lambda_max/2, lambda_max)", f, lambda_max)
        n_above = int(above.sum())
        lower_g = float((np.argmax(P, axis=1) == truth)[above].sum()) / (2.0 * n_above)
        if g < lower_g - tolerance:
            flag("quality lower bound", g, lower_g)
        report.by_mode[mode] = report.by_mode.get(mode, 0) + 1
    if report.violations:
        log.warning(f"weighting bounds: {len(report.violations)} violation(s) in {trials} trials")
    return report


def ema_variance_ratio(
    unbiased: bool = True, batches: int = 5000, batch_size: int = 4, seed: int = 0
) -> float:
    """
    Feed uniform(0, 1) batches through a zero-momentum EMA and return the
    mean tracked variance divided by the true variance 1/12. A correct
    estimator gives a ratio near 1; the uncorrected one drifts to
    (B - 1) / B.
    """
    rng = np.random.default_rng(seed)
    ema = ConfidenceEMA(n_classes=2, momentum=0.0, batch_size=batch_size, unbiased=unbiased)
    total = 0.0
    for _ in range(batches):
        x = rng.uniform(size=batch_size)
        ema.update(float(x.mean()), float(x.var()))
        total += ema.var
    return total / batches * 12.0
