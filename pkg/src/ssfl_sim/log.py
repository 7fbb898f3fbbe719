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


import sys

from loguru import logger

from .config import settings

PREFIX = "ssfl-sim"

_configured = False


def setup_logging(level: str = "") -> None:
    """Route loguru to stderr with the project prefix. Safe to call twice."""
    global _configured
    logger.remove()
    logger.add(
        sys.stderr,
        level=(level or settings.log_level).upper(),
        format="[" + PREFIX + "] {level: <7} {message}",
    )
    _configured = True


def get_logger():
    if not _configured:
        setup_logging()
    return logger
