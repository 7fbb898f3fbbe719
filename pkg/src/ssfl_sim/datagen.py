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
Synthetic multichannel fault signals, non-IID partitioning and label splits.

Class 0 is a healthy machine (one pure tone); every other class adds
amplitude-modulated harmonics on top of its own base tone, which is the
shape bearing-fault spectra take. Base frequencies are whole cycles per
window and distinct per class, so the classes are separable by
construction and the base tone lands exactly on a DFT bin.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .config import DatasetSection
from .errors import DomainError
from .log import get_logger

log = get_logger()

TEST_SHARE = 0.2  # 4:1 train/test

SeedLike = Union[int, np.random.Generator, None]


@dataclass(frozen=True)
class ClassRecipe:
    base_frequency: int
    harmonic_amplitudes: Tuple[float, ...] = ()
    modulation_depth: float = 0.0


@dataclass(frozen=True)
class SyntheticSpec:
    recipes: Tuple[ClassRecipe, ...]
    noise_std: float = 0.8
    samples_per_class: int = 300
    length: int = 256
    channels: int = 1
    modulation_frequency: int = 2

    @property
    def n_classes(self) -> int:
        return len(self.recipes)

    @classmethod
    def from_config(cls, cfg: DatasetSection) -> "SyntheticSpec":
        recipes = [ClassRecipe(base_frequency=cfg.base_frequency)]
        amps = tuple(cfg.harmonic_amplitude * 0.5 ** h for h in range(cfg.harmonics))
        for j in range(1, cfg.n_classes):
            recipes.append(
                ClassRecipe(
                    base_frequency=cfg.base_frequency + j * cfg.frequency_step,
                    harmonic_amplitudes=amps,
                    modulation_depth=cfg.modulation_depth,
                )
            )
        return cls(
            recipes=tuple(recipes),
            noise_std=cfg.noise_std,
            samples_per_class=cfg.samples_per_class,
            length=cfg.length,
            channels=cfg.channels,
            modulation_frequency=cfg.modulation_frequency,
        )


@dataclass(frozen=True)
class SignalSample:
    window: np.ndarray  # (channels, length)
    label: Optional[int] = None


@dataclass
class SignalDataset:
    windows: np.ndarray  # (N, channels, length)
    labels: np.ndarray  # (N,)
    n_classes: int

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> SignalSample:
        return SignalSample(self.windows[i], int(self.labels[i]))

    def __iter__(self) -> Iterator[SignalSample]:
        return (self[i] for i in range(len(self)))


def _tone(freq: float, t: np.ndarray, phase: float) -> np.ndarray:
    return np.sin(2.0 * np.pi * freq * t + phase)


def generate_dataset(spec: SyntheticSpec, seed: SeedLike = 0) -> SignalDataset:
    if spec.n_classes < 2:
        raise DomainError("need at least two classes")
    if spec.noise_std < 0:
        raise DomainError("noise_std must be >= 0")
    if spec.samples_per_class <= 0:
        raise DomainError(f"samples_per_class must be positive, got {spec.samples_per_class}")
    freqs = [r.base_frequency for r in spec.recipes]
    if len(set(freqs)) != len(freqs):
        raise DomainError(f"class base frequencies must be distinct, got {freqs}")

    rng = np.random.default_rng(seed)
    t = np.arange(spec.length) / spec.length
    n = spec.samples_per_class * spec.n_classes
    windows = np.empty((n, spec.channels, spec.length))
    labels = np.repeat(np.arange(spec.n_classes), spec.samples_per_class)

    for i, label in enumerate(labels):
        recipe = spec.recipes[label]
        for c in range(spec.channels):
            phases = rng.uniform(0.0, 2.0 * np.pi, 2 + len(recipe.harmonic_amplitudes))
            x = _tone(recipe.base_frequency, t, phases[0])
            envelope = 1.0 + recipe.modulation_depth * _tone(spec.modulation_frequency, t, phases[1])
            for h, amp in enumerate(recipe.harmonic_amplitudes, start=2):
                x = x + amp * envelope * _tone(h * recipe.base_frequency, t, phases[h])
            windows[i, c] = x + spec.noise_std * rng.standard_normal(spec.length)
    return SignalDataset(windows=windows, labels=labels, n_classes=spec.n_classes)


def dirichlet_partition(
    labels: Sequence[int],
    n_clients: int,
    nu: float,
    seed: SeedLike = 0,
    min_per_client: int = 1,
    max_attempts: int = 1000,
) -> List[np.ndarray]:
    """
    Split sample indices across clients with per-class Dirichlet(nu) shares.

    If any client ends up with fewer than ``min_per_client`` samples all
    proportion vectors are redrawn.
    """
    labels = np.asarray(labels)
    if n_clients < 1:
        raise DomainError("need at least one client")
    if nu <= 0:
        raise DomainError("Dirichlet concentration must be positive")
    if n_clients * max(min_per_client, 1) > len(labels):
        raise DomainError(
            f"{n_clients} clients cannot each get {max(min_per_client, 1)} of {len(labels)} samples"
        )

    rng = np.random.default_rng(seed)
    for attempt in range(max_attempts):
        parts: List[List[int]] = [[] for _ in range(n_clients)]
        for c in np.unique(labels):
            idx = np.flatnonzero(labels == c)
            rng.shuffle(idx)
            props = rng.dirichlet(np.full(n_clients, nu))
            cuts = (np.cumsum(props) * len(idx)).astype(int)[:-1]
            for k, chunk in enumerate(np.split(idx, cuts)):
                parts[k].extend(chunk.tolist())
        sizes = [len(p) for p in parts]
        if min(sizes) >= max(min_per_client, 1):
            log.debug(f"dirichlet partition sizes {sizes} after {attempt + 1} draw(s)")
            return [np.sort(np.asarray(p, dtype=np.int64)) for p in parts]
    raise DomainError(
        f"no Dirichlet({nu}) draw gave every client {min_per_client} samples "
        f"in {max_attempts} attempts"
    )


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def _largest_remainder(counts: np.ndarray, total: int) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.int64)
    raw = counts * total / counts.sum()
    quota = np.floor(raw).astype(np.int64)
    short = total - int(quota.sum())
    order = np.lexsort((np.arange(len(counts)), -(raw - quota)))
    quota[order[:short]] += 1
    return quota


@dataclass
class ClientSplit:
    labeled: np.ndarray
    unlabeled: np.ndarray
    test: np.ndarray
    chi: float
    nu: Optional[float] = None

    @property
    def train_size(self) -> int:
        return len(self.labeled) + len(self.unlabeled)

    def all_indices(self) -> np.ndarray:
        return np.concatenate([self.labeled, self.unlabeled, self.test])


def label_split(
    client_indices: Sequence[int],
    labels: Sequence[int],
    chi: float,
    seed: SeedLike = 0,
    nu: Optional[float] = None,
) -> ClientSplit:
    """
    Stratified 4:1 train/test split, then a stratified labeled/unlabeled
    split of the train part at label rate ``chi``.
    """
    if not 0.0 < chi <= 1.0:
        raise DomainError(f"label rate must lie in (0, 1], got {chi}")
    idx = np.asarray(client_indices, dtype=np.int64)
    if len(idx) < 5:
        raise DomainError(f"a client needs at least 5 samples for a 4:1 split, got {len(idx)}")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)

    own = labels[idx]
    classes = np.unique(own)
    per_class = []
    for c in classes:
        members = idx[own == c].copy()
        rng.shuffle(members)
        per_class.append(members)

    n_test = max(1, _round_half_up(len(idx) * TEST_SHARE))
    test_quota = _largest_remainder(np.array([len(m) for m in per_class]), n_test)
    train_parts = [m[q:] for m, q in zip(per_class, test_quota)]
    test = np.concatenate([m[:q] for m, q in zip(per_class, test_quota)])

    n_train = len(idx) - n_test
    n_labeled = min(n_train, max(1, _round_half_up(chi * n_train)))
    lab_quota = _largest_remainder(np.array([len(m) for m in train_parts]), n_labeled)
    labeled = np.concatenate([m[:q] for m, q in zip(train_parts, lab_quota)])
    unlabeled = np.concatenate([m[q:] for m, q in zip(train_parts, lab_quota)])

    return ClientSplit(
        labeled=np.sort(labeled),
        unlabeled=np.sort(unlabeled),
        test=np.sort(test),
        chi=chi,
        nu=nu,
    )


@dataclass
class ClientDataset:
    """
    One client's view of the data. ``unlabeled_truth`` exists only so the
    pseudo-label quality can be measured; training never reads it.
    """

    client_id: int
    x_labeled: np.ndarray
    y_labeled: np.ndarray
    x_unlabeled: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    n_classes: int
    unlabeled_truth: np.ndarray = field(repr=False, default_factory=lambda: np.empty(0, np.int64))

    @property
    def n_train(self) -> int:
        return len(self.y_labeled) + len(self.x_unlabeled)

    @classmethod
    def from_split(cls, client_id: int, data: SignalDataset, split: ClientSplit) -> "ClientDataset":
        return cls(
            client_id=client_id,
            x_labeled=data.windows[split.labeled],
            y_labeled=data.labels[split.labeled].astype(np.int64),
            x_unlabeled=data.windows[split.unlabeled],
            x_test=data.windows[split.test],
            y_test=data.labels[split.test].astype(np.int64),
            n_classes=data.n_classes,
            unlabeled_truth=data.labels[split.unlabeled].astype(np.int64),
        )


# --- export / import -------------------------------------------------------

MANIFEST = "manifest.txt"


@dataclass
class ManifestEntry:
    file: str
    client: int
    split: str  # labeled | unlabeled | test
    label: Optional[int]


def export_dataset(out_dir: Union[str, Path], data: SignalDataset, splits: Sequence[ClientSplit]) -> Path:
    """
    Write one raw little-endian float64 file per window plus a manifest line
    ``<file> <client> <split> <label|?>``. Unlabeled windows are written
    with ``?`` so the export never leaks their labels.
    """
    out = Path(out_dir)
    (out / "windows").mkdir(parents=True, exist_ok=True)
    _, channels, length = data.windows.shape
    lines = [f"# ssfl-sim dataset channels={channels} length={length} classes={data.n_classes}"]
    for k, split in enumerate(splits):
        for name, members in (("labeled", split.labeled), ("unlabeled", split.unlabeled), ("test", split.test)):
            for i in members:
                fname = f"windows/{int(i):06d}.bin"
                (out / fname).write_bytes(np.asarray(data.windows[i], dtype="<f8").tobytes())
                label = "?" if name == "unlabeled" else str(int(data.labels[i]))
                lines.append(f"{fname} {k} {name} {label}")
    path = out / MANIFEST
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    log.info(f"exported {len(lines) - 1} windows to {out}")
    return path


def import_dataset(in_dir: Union[str, Path]) -> Tuple[np.ndarray, List[ManifestEntry]]:
    """Read an exported dataset back; returns windows in manifest order."""
    root = Path(in_dir)
    text = (root / MANIFEST).read_text(encoding="utf-8").splitlines()
    if not text or not text[0].startswith("#"):
        raise DomainError(f"{root / MANIFEST}: missing header line")
    meta = dict(tok.split("=", 1) for tok in text[0].split() if "=" in tok)
    channels, length = int(meta["channels"]), int(meta["length"])

    entries: List[ManifestEntry] = []
    windows = []
    for line in text[1:]:
        if not line.strip():
            continue
        fname, client, split, label = line.split()
        entries.append(ManifestEntry(fname, int(client), split, None if label == "?" else int(label)))
        raw = np.frombuffer((root / fname).read_bytes(), dtype="<f8")
        windows.append(raw.reshape(channels, length).astype(np.float64))
    return np.stack(windows) if windows else np.empty((0, channels, length)), entries
