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


import argparse
import sys
from typing import List, Optional

from .cli import cmd_ablate, cmd_gen_data, cmd_payload_report, cmd_train, cmd_verify
from .errors import SimError
from .experiments import FAULTS
from .log import get_logger, setup_logging


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ssfl-sim",
        description="Semi-supervised federated learning simulator with prototype exchange.",
    )
    parser.add_argument("--log-level", default="", help="loguru level (default: SSFL_LOG_LEVEL or INFO)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, out: bool = True, seeds: bool = True) -> None:
        p.add_argument("--config", help="INI-style config file (defaults when omitted)")
        if out:
            p.add_argument("--out", help="output directory (default: SSFL_OUT_DIR or ./runs)")
        if seeds:
            p.add_argument("--seed-offset", type=int, default=0, help="added to every trial seed")

    p = sub.add_parser("train", help="run the configured method for every trial seed")
    common(p)
    p.add_argument("--sequential", action="store_true", help="run clients one after another")
    p.set_defaults(func=lambda a: cmd_train(a.config, a.out, a.seed_offset, a.sequential))

    p = sub.add_parser("ablate", help="run the ablation ladder on shared seeds")
    common(p)
    p.add_argument("--sequential", action="store_true", help="run clients one after another")
    p.set_defaults(func=lambda a: cmd_ablate(a.config, a.out, a.seed_offset, a.sequential))

    p = sub.add_parser("verify", help="property checks: bounds, gradients, aggregation, schedules")
    common(p, out=False, seeds=False)
    p.add_argument("--inject-fault", choices=FAULTS, help="break one component to show a check catching it")
    p.set_defaults(func=lambda a: cmd_verify(a.config, a.inject_fault))

    p = sub.add_parser("payload-report", help="prototype uplink vs full model snapshot bytes")
    common(p, out=False, seeds=False)
    p.set_defaults(func=lambda a: cmd_payload_report(a.config))

    p = sub.add_parser("gen-data", help="export the synthetic dataset with a manifest")
    common(p)
    p.set_defaults(func=lambda a: cmd_gen_data(a.config, a.out, a.seed_offset))
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    try:
        return args.func(args)
    except SimError as e:
        get_logger().error(str(e))
        return 1


if __name__ == "__main__":
    sys.exit(main())
