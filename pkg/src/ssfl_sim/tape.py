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
Reverse-mode automatic differentiation over float64 numpy arrays.

A ComputeTape is an append-only list of nodes. Leaves are named inputs,
named trainable parameters and anonymous constants; every other node is one
operator from OPERATORS applied to earlier nodes, so the list is always in
topological order. Recording a node evaluates it immediately; ``evaluate``
replays the whole tape with rebound leaves, which is what the
finite-difference checker uses.

Only bias-add broadcasts. Every other shape change is an explicit reshape.
"""

from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import logsumexp

from .errors import DomainError, NonFiniteError, ShapeError

LEAVES = ("input", "param", "const")


@dataclass
class Node:
    kind: str
    parents: Tuple[int, ...]
    attrs: Dict[str, Any] = field(default_factory=dict)
    name: Optional[str] = None
    value: Optional[np.ndarray] = None
    adjoint: Optional[np.ndarray] = None
    cache: Any = None


@dataclass(frozen=True)
class Operator:
    forward: Callable[..., Tuple[np.ndarray, Any]]
    # (upstream grad, node value, cache, parent values, attrs) -> grad per parent
    adjoint: Callable[..., Tuple[np.ndarray, ...]]
    # pattern of branch choices (relu masks, pool argmax); a change between
    # two evaluations means a kink was crossed
    kink: Optional[Callable[[Any], np.ndarray]] = None


OPERATORS: Dict[str, Operator] = {}


def register(kind: str, kink: Optional[Callable[[Any], np.ndarray]] = None):
    def wrap(fns):
        forward, adjoint = fns
        OPERATORS[kind] = Operator(forward=forward, adjoint=adjoint, kink=kink)
        return fns

    return wrap


class _Mismatch(Exception):
    def __init__(self, expected: str):
        self.expected = expected


def _require(ok: bool, expected: str) -> None:
    if not ok:
        raise _Mismatch(expected)


# --- operators -------------------------------------------------------------


def _affine_fwd(x, w, b):
    _require(
        x.ndim == 2 and w.ndim == 2 and b.ndim == 1
        and x.shape[1] == w.shape[0] and b.shape[0] == w.shape[1],
        "x (N, i), weight (i, o), bias (o,)",
    )
    return x @ w + b, None


def _affine_adj(g, y, cache, x, w, b):
    return g @ w.T, x.T @ g, g.sum(axis=0)


register("affine")((_affine_fwd, _affine_adj))


def _conv_windows(x, kernel, stride, padding):
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding)))
    win = sliding_window_view(xp, kernel, axis=2)[:, :, ::stride, :]
    return xp.shape, win


def _conv1d_fwd(x, w, b, stride=1, padding=0):
    _require(
        x.ndim == 3 and w.ndim == 3 and b.ndim == 1
        and x.shape[1] == w.shape[1] and b.shape[0] == w.shape[0]
        and x.shape[2] + 2 * padding >= w.shape[2],
        "x (N, Cin, L), weight (Cout, Cin, K), bias (Cout,), L + 2*padding >= K",
    )
    padded_shape, win = _conv_windows(x, w.shape[2], stride, padding)
    # (N, Lout, Cout) -> (N, Cout, Lout)
    y = np.tensordot(win, w, axes=([1, 3], [1, 2])).transpose(0, 2, 1)
    return y + b[None, :, None], (padded_shape, win)


def _conv1d_adj(g, y, cache, x, w, b, stride=1, padding=0):
    padded_shape, win = cache
    kernel = w.shape[2]
    n_out = g.shape[2]
    gw = np.tensordot(g, win, axes=([0, 2], [0, 2]))
    gb = g.sum(axis=(0, 2))
    # (N, Lout, Cin, K) -> (N, Cin, Lout, K)
    gwin = np.tensordot(g, w, axes=([1], [0])).transpose(0, 2, 1, 3)
    gxp = np.zeros(padded_shape)
    span = stride * (n_out - 1) + 1
    for k in range(kernel):
        gxp[:, :, k : k + span : stride] += gwin[:, :, :, k]
    gx = gxp[:, :, padding : padded_shape[2] - padding]
    return gx, gw, gb


register("conv1d")((_conv1d_fwd, _conv1d_adj))


def _relu_fwd(x):
    mask = x > 0
    return np.where(mask, x, 0.0), mask


def _relu_adj(g, y, mask, x):
    # subgradient at 0 is 0
    return (g * mask,)


register("relu", kink=lambda mask: mask)((_relu_fwd, _relu_adj))


def _maxpool_fwd(x, size=2, stride=2):
    _require(x.ndim == 3 and x.shape[2] >= size, "x (N, C, L) with L >= pool size")
    win = sliding_window_view(x, size, axis=2)[:, :, ::stride, :]
    idx = win.argmax(axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return y, idx


def _maxpool_adj(g, y, idx, x, size=2, stride=2):
    gx = np.zeros_like(x)
    span = stride * (idx.shape[2] - 1) + 1
    for s in range(size):
        gx[:, :, s : s + span : stride] += g * (idx == s)
    return (gx,)


register("max_pool1d", kink=lambda idx: idx)((_maxpool_fwd, _maxpool_adj))


def _gmp_fwd(x):
    _require(x.ndim == 3, "x (N, C, L)")
    return x.mean(axis=2), x.shape[2]


def _gmp_adj(g, y, length, x):
    return (np.repeat(g[:, :, None] / length, length, axis=2),)


register("global_mean_pool")((_gmp_fwd, _gmp_adj))


def _softmax_ce_fwd(logits, labels):
    _require(logits.ndim == 2 and labels.shape == (logits.shape[0],), "logits (N, C), labels (N,)")
    n, c = logits.shape
    if n and (labels.min() < 0 or labels.max() >= c):
        raise DomainError(f"labels must lie in [0, {c}), got {labels.min()}..{labels.max()}")
    # row max is subtracted inside logsumexp
    logp = logits - logsumexp(logits, axis=1, keepdims=True)
    probs = np.exp(logp)
    return -logp[np.arange(n), labels], probs


def _softmax_ce_adj(g, y, probs, logits, labels):
    d = probs.copy()
    d[np.arange(len(labels)), labels] -= 1.0
    return (d * g[:, None],)


register("softmax_cross_entropy")((_softmax_ce_fwd, _softmax_ce_adj))


def _row_norms(x):
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    if np.any(norms == 0.0):
        raise DomainError("cannot normalize a zero row")
    return norms


def _l2n_fwd(x):
    _require(x.ndim == 2, "x (N, d)")
    norms = _row_norms(x)
    return x / norms, norms


def _l2n_back(g, unit, norms):
    return (g - unit * (g * unit).sum(axis=1, keepdims=True)) / norms


def _l2n_adj(g, y, norms, x):
    return (_l2n_back(g, y, norms),)


register("l2_normalize")((_l2n_fwd, _l2n_adj))


def _cos_fwd(a, b):
    _require(a.ndim == 2 and b.ndim == 2 and a.shape[1] == b.shape[1], "a (N, d), b (M, d)")
    na, nb = _row_norms(a), _row_norms(b)
    ua, ub = a / na, b / nb
    return ua @ ub.T, (ua, ub, na, nb)


def _cos_adj(g, y, cache, a, b):
    ua, ub, na, nb = cache
    return _l2n_back(g @ ub, ua, na), _l2n_back(g.T @ ua, ub, nb)


register("cosine_similarity")((_cos_fwd, _cos_adj))


def _same_shape(a, b):
    _require(a.shape == b.shape, "operands of identical shape")


def _add_fwd(a, b):
    _same_shape(a, b)
    return a + b, None


register("add")((_add_fwd, lambda g, y, c, a, b: (g, g)))


def _mul_fwd(a, b):
    _same_shape(a, b)
    return a * b, None


register("multiply")((_mul_fwd, lambda g, y, c, a, b: (g * b, g * a)))

register("scale")(
    (
        lambda x, factor=1.0: (x * factor, None),
        lambda g, y, c, x, factor=1.0: (g * factor,),
    )
)

register("exp")((lambda x: (np.exp(x), None), lambda g, y, c, x: (g * y,)))


def _log_fwd(x):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.log(x), None


register("log")((_log_fwd, lambda g, y, c, x: (g / x,)))


def _sum_fwd(x, axis=None):
    return np.asarray(x.sum(axis=axis)), None


def _sum_adj(g, y, c, x, axis=None):
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape).copy(),)


register("sum")((_sum_fwd, _sum_adj))


def _mean_fwd(x, axis=None):
    _require(x.size > 0, "a non-empty operand")
    return np.asarray(x.mean(axis=axis)), None


def _mean_adj(g, y, c, x, axis=None):
    count = x.size if axis is None else x.shape[axis]
    (gx,) = _sum_adj(g, y, c, x, axis=axis)
    return (gx / count,)


register("mean")((_mean_fwd, _mean_adj))


def _concat_fwd(*xs, axis=0):
    _require(
        len(xs) > 0
        and all(x.ndim == xs[0].ndim for x in xs)
        and all(
            x.shape[:axis] + x.shape[axis + 1 :] == xs[0].shape[:axis] + xs[0].shape[axis + 1 :]
            for x in xs
        ),
        f"operands matching on every axis except {axis}",
    )
    return np.concatenate(xs, axis=axis), [x.shape[axis] for x in xs]


def _concat_adj(g, y, sizes, *xs, axis=0):
    cuts = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, cuts, axis=axis))


register("concatenate")((_concat_fwd, _concat_adj))


def _reshape_fwd(x, shape=()):
    _require(int(np.prod(shape)) == x.size, f"target shape {tuple(shape)} with {x.size} entries")
    return x.reshape(shape), None


register("reshape")((_reshape_fwd, lambda g, y, c, x, shape=(): (g.reshape(x.shape),)))


# --- tape ------------------------------------------------------------------


class ComputeTape:
    def __init__(self):
        self.nodes: List[Node] = []
        self._names: Dict[str, int] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    # leaves

    def _leaf(self, kind: str, value, name: Optional[str]) -> int:
        if name is not None:
            if name in self._names:
                raise DomainError(f"tape already has a leaf named '{name}'")
            self._names[name] = len(self.nodes)
        arr = np.array(value, dtype=np.float64)
        self.nodes.append(Node(kind=kind, parents=(), name=name, value=arr))
        return len(self.nodes) - 1

    def input(self, name: str, value) -> int:
        return self._leaf("input", value, name)

    def param(self, name: str, value) -> int:
        return self._leaf("param", value, name)

    def const(self, value) -> int:
        return self._leaf("const", value, None)

    @property
    def parameters(self) -> Dict[str, int]:
        return {n: i for n, i in self._names.items() if self.nodes[i].kind == "param"}

    def value(self, node: int) -> np.ndarray:
        return self.nodes[node].value

    def cache(self, node: int) -> Any:
        return self.nodes[node].cache

    # operators

    def _record(self, kind: str, parents: Sequence[int], **attrs) -> int:
        for p in parents:
            if not 0 <= p < len(self.nodes):
                raise DomainError(f"{kind}: unknown parent node {p}")
        self.nodes.append(Node(kind=kind, parents=tuple(parents), attrs=attrs))
        node = len(self.nodes) - 1
        self._forward(node)
        return node

    def _forward(self, node: int) -> None:
        n = self.nodes[node]
        op = OPERATORS[n.kind]
        args = [self.nodes[p].value for p in n.parents]
        try:
            value, cache = op.forward(*args, **n.attrs)
        except _Mismatch as e:
            raise ShapeError(node, n.kind, e.expected, [a.shape for a in args]) from None
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(node, n.kind)
        n.value, n.cache = value, cache

    def affine(self, x: int, w: int, b: int) -> int:
        return self._record("affine", (x, w, b))

    def conv1d(self, x: int, w: int, b: int, stride: int = 1, padding: int = 0) -> int:
        return self._record("conv1d", (x, w, b), stride=stride, padding=padding)

    def relu(self, x: int) -> int:
        return self._record("relu", (x,))

    def max_pool1d(self, x: int, size: int = 2, stride: Optional[int] = None) -> int:
        return self._record("max_pool1d", (x,), size=size, stride=stride or size)

    def global_mean_pool(self, x: int) -> int:
        return self._record("global_mean_pool", (x,))

    def softmax_cross_entropy(self, logits: int, labels) -> int:
        """Per-row cross-entropy; softmax probabilities are kept in the node cache."""
        return self._record(
            "softmax_cross_entropy", (logits,), labels=np.asarray(labels, dtype=np.int64)
        )

    def l2_normalize(self, x: int) -> int:
        return self._record("l2_normalize", (x,))

    def cosine_similarity(self, a: int, b: int) -> int:
        return self._record("cosine_similarity", (a, b))

    def add(self, a: int, b: int) -> int:
        return self._record("add", (a, b))

    def subtract(self, a: int, b: int) -> int:
        return self.add(a, self.scale(b, -1.0))

    def multiply(self, a: int, b: int) -> int:
        return self._record("multiply", (a, b))

    def scale(self, x: int, factor: float) -> int:
        return self._record("scale", (x,), factor=float(factor))

    def exp(self, x: int) -> int:
        return self._record("exp", (x,))

    def log(self, x: int) -> int:
        return self._record("log", (x,))

    def sum(self, x: int, axis: Optional[int] = None) -> int:
        return self._record("sum", (x,), axis=axis)

    def mean(self, x: int, axis: Optional[int] = None) -> int:
        return self._record("mean", (x,), axis=axis)

    def concatenate(self, xs: Sequence[int], axis: int = 0) -> int:
        return self._record("concatenate", tuple(xs), axis=axis)

    def reshape(self, x: int, shape: Sequence[int]) -> int:
        return self._record("reshape", (x,), shape=tuple(int(s) for s in shape))

    def kink_signature(self) -> List[np.ndarray]:
        out = []
        for n in self.nodes:
            op = OPERATORS.get(n.kind)
            if op is not None and op.kink is not None:
                out.append(np.asarray(op.kink(n.cache)).copy())
        return out


def evaluate(
    tape: ComputeTape,
    inputs: Optional[Mapping[str, np.ndarray]] = None,
    terminal: Optional[int] = None,
) -> np.ndarray:
    """
    Replay the tape with named leaves rebound from ``inputs``.

    Unnamed leaves keep their recorded values. Every intermediate value is
    cached on the tape; the terminal node's value (default: last node) is
    returned.
    """
    inputs = inputs or {}
    for name in inputs:
        if name not in tape._names:
            raise DomainError(f"tape has no leaf named '{name}'")
    for i, n in enumerate(tape.nodes):
        if n.kind in LEAVES:
            if n.name in inputs:
                arr = np.array(inputs[n.name], dtype=np.float64)
                if n.kind == "param" and arr.shape != n.value.shape:
                    raise ShapeError(i, n.kind, f"shape {n.value.shape}", [arr.shape])
                n.value = arr
            continue
        tape._forward(i)
    if terminal is None:
        terminal = len(tape.nodes) - 1
    return tape.nodes[terminal].value


def backpropagate(tape: ComputeTape, terminal: Optional[int] = None) -> Dict[str, np.ndarray]:
    """Gradient of a scalar terminal node with respect to every parameter."""
    if terminal is None:
        terminal = len(tape.nodes) - 1
    out = tape.nodes[terminal].value
    if out is None or out.size != 1:
        raise DomainError(
            f"backpropagate needs a scalar terminal, node {terminal} has shape "
            f"{None if out is None else out.shape}"
        )
    for n in tape.nodes:
        n.adjoint = np.zeros_like(n.value)
    tape.nodes[terminal].adjoint = np.ones_like(out)

    for i in range(terminal, -1, -1):
        n = tape.nodes[i]
        if n.kind in LEAVES or not n.adjoint.any():
            continue
        parents = [tape.nodes[p].value for p in n.parents]
        grads = OPERATORS[n.kind].adjoint(n.adjoint, n.value, n.cache, *parents, **n.attrs)
        for p, g in zip(n.parents, grads):
            tape.nodes[p].adjoint = tape.nodes[p].adjoint + np.reshape(g, tape.nodes[p].value.shape)

    return {name: tape.nodes[i].adjoint.copy() for name, i in tape.parameters.items()}


@dataclass
class ParameterCheck:
    name: str
    max_rel_error: float
    checked: int
    kinks: int
    passed: bool


@dataclass
class GradientReport:
    tolerance: float
    step: float
    params: Dict[str, ParameterCheck] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(p.passed for p in self.params.values())

    @property
    def max_rel_error(self) -> float:
        return max((p.max_rel_error for p in self.params.values()), default=0.0)

    @property
    def flagged(self) -> List[str]:
        return [name for name, p in self.params.items() if not p.passed]


def relative_error(analytic: float, numeric: float, floor: float = 1e-5) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradient_check(
    tape: ComputeTape,
    inputs: Optional[Mapping[str, np.ndarray]] = None,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    terminal: Optional[int] = None,
    max_entries: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> GradientReport:
    """
    Compare analytic parameter gradients against central differences.

    Entries whose +/-step replays change a relu mask or a pool argmax sit on
    a kink; they are counted but not compared. With ``max_entries`` only a
    random subset of each parameter is checked.
    """
    key = len(tape.nodes) - 1 if terminal is None else terminal
    reports = gradient_check_terminals(tape, {"loss": key}, inputs, step, tolerance, max_entries, rng)
    return reports["loss"]


def gradient_check_terminals(
    tape: ComputeTape,
    terminals: Mapping[str, int],
    inputs: Optional[Mapping[str, np.ndarray]] = None,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    max_entries: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> Dict[str, GradientReport]:
    """
    ``gradient_check`` for several scalar nodes of one tape at once. Each
    perturbed replay is shared by every terminal, so checking all loss heads
    costs the same number of replays as checking one.
    """
    if step <= 0:
        raise DomainError("step must be positive")
    if not terminals:
        raise DomainError("no terminals to check")
    base = dict(inputs or {})
    for name, i in tape.parameters.items():
        base.setdefault(name, tape.nodes[i].value.copy())

    def losses_at(bindings) -> Dict[str, float]:
        evaluate(tape, bindings)
        out = {}
        for label, i in terminals.items():
            out[label] = float(np.reshape(tape.nodes[i].value, ()))
        return out

    losses_at(base)
    reference = tape.kink_signature()
    grads = {label: backpropagate(tape, i) for label, i in terminals.items()}

    reports = {label: GradientReport(tolerance=tolerance, step=step) for label in terminals}
    for name in tape.parameters:
        theta = base[name]
        flat = np.arange(theta.size)
        if max_entries is not None and theta.size > max_entries:
            flat = (rng or np.random.default_rng(0)).choice(theta.size, max_entries, replace=False)
        worst = dict.fromkeys(terminals, 0.0)
        checked, kinks = 0, 0
        for j in flat:
            idx = np.unravel_index(j, theta.shape)
            crossed = False
            values = []
            for sign in (1.0, -1.0):
                nudged = theta.copy()
                nudged[idx] += sign * step
                values.append(losses_at({**base, name: nudged}))
                sig = tape.kink_signature()
                crossed = crossed or any(not np.array_equal(a, b) for a, b in zip(sig, reference))
            if crossed:
                kinks += 1
                continue
            for label in terminals:
                numeric = (values[0][label] - values[1][label]) / (2.0 * step)
                worst[label] = max(worst[label], relative_error(float(grads[label][name][idx]), numeric))
            checked += 1
        for label, report in reports.items():
            report.params[name] = ParameterCheck(
                name=name,
                max_rel_error=worst[label],
                checked=checked,
                kinks=kinks,
                passed=worst[label] <= tolerance,
            )
    # leave the tape holding the unperturbed values
    losses_at(base)
    return reports
