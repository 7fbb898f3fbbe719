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
Weak and strong views of a signal window.

Weak: gaussian jitter, then one random gain per window.
Strong: cut the window into 1..M segments at random interior points,
shuffle the segments, then add gaussian jitter.

Neither view ever looks at a label. The jitter is always drawn last, so two
calls with the same seed and different jitter levels rearrange or scale the
window identically.
"""

from typing import Tuple, Union

import numpy as np

from .config import AugmentSection
from .datagen import SeedLike, SignalSample
from .errors import DomainError

Window = Union[np.ndarray, SignalSample]


def _unwrap(u: Window) -> np.ndarray:
    return u.window if isinstance(u, SignalSample) else np.asarray(u, dtype=np.float64)


def _rewrap(u: Window, out: np.ndarray) -> Window:
    return SignalSample(out, None) if isinstance(u, SignalSample) else out


def weak_augment(
    u: Window,
    jitter_std: float = 0.05,
    scale_range: Tuple[float, float] = (0.9, 1.1),
    seed: SeedLike = None,
) -> Window:
    lo, hi = scale_range
    if lo <= 0 or hi < lo:
        raise DomainError(f"scale range must be a positive interval, got {scale_range}")
    rng = np.random.default_rng(seed)
    x = _unwrap(u)
    scale = rng.uniform(lo, hi) if hi > lo else lo
    noise = rng.standard_normal(x.shape) * jitter_std
    return _rewrap(u, (x + noise) * scale)


def segment_permutation(length: int, max_segments: int, rng: np.random.Generator) -> np.ndarray:
    if not 1 <= max_segments <= length:
        raise DomainError(f"max_segments must lie in [1, {length}], got {max_segments}")
    n_seg = int(rng.integers(1, max_segments + 1))
    steps = np.arange(length)
    if n_seg == 1:
        return steps
    cuts = np.sort(rng.choice(np.arange(1, length), n_seg - 1, replace=False))
    segments = np.split(steps, cuts)
    return np.concatenate([segments[i] for i in rng.permutation(n_seg)])


def strong_augment(
    u: Window,
    max_segments: int = 8,
    jitter_std: float = 0.05,
    seed: SeedLike = None,
) -> Window:
    rng = np.random.default_rng(seed)
    x = _unwrap(u)
    order = segment_permutation(x.shape[-1], max_segments, rng)
    noise = rng.standard_normal(x.shape) * jitter_std
    return _rewrap(u, x[..., order] + noise)


def weak_batch(x: np.ndarray, cfg: AugmentSection, rng: np.random.Generator) -> np.ndarray:
    if len(x) == 0:
        return x.copy()
    return np.stack([weak_augment(w, cfg.jitter_std, (cfg.scale_low, cfg.scale_high), rng) for w in x])


def strong_batch(x: np.ndarray, cfg: AugmentSection, rng: np.random.Generator) -> np.ndarray:
    if len(x) == 0:
        return x.copy()
    return np.stack([strong_augment(w, cfg.max_segments, cfg.strong_jitter_std, rng) for w in x])
