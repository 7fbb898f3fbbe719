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
Seed streams.

Every random draw in a run comes from a Generator derived from the run seed
plus a tuple of tags, e.g. ``derive_rng(seed, "train", client, round)``.
Streams with different tags are independent, so adding a draw in one place
never shifts the numbers seen anywhere else.
"""

from pathlib import Path
from typing import Union

import numpy as np
from cryptography.hazmat.primitives import hashes

Tag = Union[int, str]


def sha256_hex(data: bytes) -> str:
    digest = hashes.Hash(hashes.SHA256())
    digest.update(data)
    return digest.finalize().hex()


def file_digest(path: Union[str, Path]) -> str:
    return sha256_hex(Path(path).read_bytes())


def _tag_word(tag: Tag) -> int:
    if isinstance(tag, (int, np.integer)):
        if tag < 0:
            raise ValueError(f"seed tags must be non-negative, got {tag}")
        return int(tag)
    return int(sha256_hex(str(tag).encode("utf-8"))[:16], 16)


def derive_seed_sequence(seed: int, *tags: Tag) -> np.random.SeedSequence:
    return np.random.SeedSequence([_tag_word(seed)] + [_tag_word(t) for t in tags])


def derive_rng(seed: int, *tags: Tag) -> np.random.Generator:
    return np.random.default_rng(derive_seed_sequence(seed, *tags))
