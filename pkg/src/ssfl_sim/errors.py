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


"""Exception hierarchy shared by every module of the simulator."""

from typing import Optional, Sequence


class SimError(Exception):
    """Base class for all simulator failures."""


class ConfigError(SimError):
    pass


class DomainError(SimError):
    """An argument is outside the domain an operation is defined on."""


class SnapshotError(SimError):
    pass


class ShapeError(SimError):
    def __init__(
        self,
        node: int,
        kind: str,
        expected: str,
        actual: Sequence[Sequence[int]],
    ):
        self.node = node
        self.kind = kind
        self.expected = expected
        self.actual = [tuple(s) for s in actual]
        super().__init__(
            f"node {node} ({kind}): expected {expected}, got shapes {self.actual}"
        )


class NonFiniteError(SimError):
    def __init__(self, node: int, kind: str):
        self.node = node
        self.kind = kind
        super().__init__(f"node {node} ({kind}) produced a non-finite value")


class NonFiniteLossError(SimError):
    def __init__(
        self,
        component: str,
        round_id: Optional[int] = None,
        client_id: Optional[int] = None,
    ):
        self.component = component
        self.round_id = round_id
        self.client_id = client_id
        super().__init__(
            f"loss component {component} is non-finite "
            f"(round={round_id}, client={client_id})"
        )
