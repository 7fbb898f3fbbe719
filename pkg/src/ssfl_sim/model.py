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
Reduced 1-D convolutional encoder recorded on a ComputeTape.

    x -> [conv -> relu -> maxpool] * n -> global mean pool -> h
    h -> classifier                     -> logits
    h -> fc1 -> relu -> fc2             -> embedding (projection head)

Parameters live in a flat dict keyed by dotted names so snapshots, FedAvg
and the optimizer all treat them uniformly.
"""

from typing import Dict, Tuple

import numpy as np
from scipy.special import softmax

from .config import ModelSection
from .snapshot import snapshot_size
from .tape import ComputeTape

Params = Dict[str, np.ndarray]


def parameter_shapes(cfg: ModelSection, channels: int, n_classes: int) -> Dict[str, Tuple[int, ...]]:
    shapes: Dict[str, Tuple[int, ...]] = {}
    c_in = channels
    for i, c_out in enumerate(cfg.conv_channels):
        shapes[f"encoder.conv{i}.weight"] = (c_out, c_in, cfg.kernel_size)
        shapes[f"encoder.conv{i}.bias"] = (c_out,)
        c_in = c_out
    shapes["classifier.weight"] = (c_in, n_classes)
    shapes["classifier.bias"] = (n_classes,)
    shapes["head.fc1.weight"] = (c_in, cfg.proj_hidden)
    shapes["head.fc1.bias"] = (cfg.proj_hidden,)
    shapes["head.fc2.weight"] = (cfg.proj_hidden, cfg.embed_dim)
    shapes["head.fc2.bias"] = (cfg.embed_dim,)
    return shapes


def _fan_in(name: str, shape: Tuple[int, ...]) -> int:
    if name.startswith("encoder."):
        return shape[1] * shape[2]
    return shape[0]


# projection head biases start positive so an all-dead hidden layer still
# yields a nonzero, normalizable embedding
HEAD_BIAS = 0.01


def init_parameters(cfg: ModelSection, channels: int, n_classes: int, rng: np.random.Generator) -> Params:
    """He-uniform weights; zero biases except the projection head's ``HEAD_BIAS``."""
    params: Params = {}
    for name, shape in parameter_shapes(cfg, channels, n_classes).items():
        if name.startswith("head.") and name.endswith(".bias"):
            params[name] = np.full(shape, HEAD_BIAS)
        elif name.endswith(".bias"):
            params[name] = np.zeros(shape)
        else:
            limit = np.sqrt(6.0 / _fan_in(name, shape))
            params[name] = rng.uniform(-limit, limit, shape)
    return params


def parameter_count(params: Params) -> int:
    return int(sum(v.size for v in params.values()))


def payload_bytes(params: Params) -> int:
    return snapshot_size(params)


def copy_parameters(params: Params) -> Params:
    return {k: v.copy() for k, v in params.items()}


def bind_parameters(tape: ComputeTape, params: Params) -> Dict[str, int]:
    return {name: tape.param(name, value) for name, value in params.items()}


def forward(tape: ComputeTape, bound: Dict[str, int], x: int, cfg: ModelSection) -> Tuple[int, int]:
    """Record one pass over input node ``x``; returns (logits, embedding) node ids."""
    h = x
    for i in range(len(cfg.conv_channels)):
        h = tape.conv1d(
            h,
            bound[f"encoder.conv{i}.weight"],
            bound[f"encoder.conv{i}.bias"],
            stride=cfg.stride,
            padding=cfg.padding,
        )
        h = tape.relu(h)
        h = tape.max_pool1d(h, cfg.pool)
    h = tape.global_mean_pool(h)
    logits = tape.affine(h, bound["classifier.weight"], bound["classifier.bias"])
    z = tape.relu(tape.affine(h, bound["head.fc1.weight"], bound["head.fc1.bias"]))
    embedding = tape.affine(z, bound["head.fc2.weight"], bound["head.fc2.bias"])
    return logits, embedding


def infer(params: Params, x: np.ndarray, cfg: ModelSection) -> Tuple[np.ndarray, np.ndarray]:
    """Class probabilities and embeddings for a batch, outside any training tape."""
    tape = ComputeTape()
    logits, embedding = forward(tape, bind_parameters(tape, params), tape.input("x", x), cfg)
    return softmax(tape.value(logits), axis=1), tape.value(embedding)
