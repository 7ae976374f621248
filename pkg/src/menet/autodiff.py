"""Reverse-mode automatic differentiation over a recorded tape.

A forward pass runs a *program*: a callable taking a runtime object
whose methods mirror the tensor_core operations. Two runtimes share
that interface: ``EagerRuntime`` just computes (handles are plain
arrays), ``Recorder`` additionally appends one node per operation to a
``Tape``, each node carrying a closure that maps an upstream gradient
to gradients for its parents. ``backward`` walks the tape once in
reverse; ``grad_check`` compares the result against central finite
differences.

Programs pull named tensors with ``rt.param(name)`` / ``rt.input(name)``;
only parameters actually pulled appear in the gradient map.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import losses, tensor_core
from .errors import EmptyTape, ShapeMismatch, UnknownParameter
from .tensor_core import BatchNormState, ConvSpec

GradientMap = dict[str, np.ndarray]


@dataclass
class Node:
    op: str
    parents: tuple[int, ...]
    shape: tuple[int, ...]
    # upstream gradient -> list of (parent id, gradient contribution)
    vjp: Callable[[np.ndarray], list[tuple[int, np.ndarray]]] | None = None


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)
    values: list[np.ndarray] = field(default_factory=list)
    param_leaves: dict[str, int] = field(default_factory=dict)
    input_leaves: dict[str, int] = field(default_factory=dict)
    dropout_masks: list[np.ndarray] = field(default_factory=list)
    output: int | None = None


def _tensors_of(params) -> dict:
    """Accept either a plain name->array mapping or an object exposing .tensors."""
    return getattr(params, "tensors", params)


class EagerRuntime:
    """Executes programs directly; handles are the arrays themselves."""

    def __init__(self, inputs: dict, params, mode: str = "infer",
                 rng: np.random.Generator | None = None):
        self._inputs = inputs
        self._params = _tensors_of(params)
        self.mode = mode
        self.rng = rng
        self.bn_updates: dict[str, BatchNormState] = {}

    def raw(self, name: str) -> np.ndarray:
        try:
            return self._params[name]
        except KeyError:
            raise UnknownParameter(name) from None

    def param(self, name: str):
        return self.raw(name)

    def input(self, name: str):
        try:
            return self._inputs[name]
        except KeyError:
            raise UnknownParameter(f"undeclared input {name!r}") from None

    def constant(self, value: np.ndarray):
        return value

    def value(self, h) -> np.ndarray:
        return h

    def shape(self, h) -> tuple[int, ...]:
        return h.shape

    def conv3d(self, x, w, b, spec: ConvSpec):
        return tensor_core.conv3d(x, w, b, spec)

    def conv_transpose3d(self, x, w, b, spec: ConvSpec, output_extents=None):
        return tensor_core.conv_transpose3d(x, w, b, spec, output_extents)

    def batch_norm(self, x, gamma, beta, state: BatchNormState):
        return tensor_core.batch_norm(x, gamma, beta, state, self.mode)

    def relu(self, x):
        return tensor_core.relu(x)

    def sigmoid(self, x):
        return tensor_core.sigmoid(x)

    def softmax_channels(self, x):
        return tensor_core.softmax_channels(x)

    def concat_channels(self, parts):
        return tensor_core.concat_channels(list(parts))

    def dropout(self, x, rate: float):
        y, _ = tensor_core.dropout(x, rate, self.rng, self.mode)
        return y

    def add(self, a, b):
        if a.shape != b.shape:
            raise ShapeMismatch(f"add {a.shape} vs {b.shape}")
        return a + b

    def mul(self, a, b):
        if a.shape != b.shape:
            raise ShapeMismatch(f"mul {a.shape} vs {b.shape}")
        return a * b

    def sum(self, x):
        return np.asarray(np.sum(x))

    def soft_dice(self, p, g, smooth: float = losses.SMOOTHING):
        return np.asarray(losses.soft_dice(p, g, smooth))

    def categorical_dice_loss(self, p, g, weights=losses.DEFAULT_CLASS_WEIGHTS,
                              smooth: float = losses.SMOOTHING):
        return np.asarray(losses.categorical_dice_loss(p, g, weights, smooth))


class Recorder(EagerRuntime):
    """Computes like EagerRuntime while recording a tape; handles are node ids."""

    def __init__(self, inputs: dict, params, mode: str = "infer",
                 rng: np.random.Generator | None = None):
        super().__init__(inputs, params, mode, rng)
        self.tape = Tape()

    # -- node plumbing ------------------------------------------------

    def _emit(self, op: str, value: np.ndarray, parents: tuple[int, ...], vjp) -> int:
        nid = len(self.tape.nodes)
        self.tape.nodes.append(Node(op, parents, value.shape, vjp))
        self.tape.values.append(value)
        return nid

    def value(self, h) -> np.ndarray:
        return self.tape.values[h]

    def shape(self, h) -> tuple[int, ...]:
        return self.tape.values[h].shape

    def param(self, name: str):
        if name in self.tape.param_leaves:
            return self.tape.param_leaves[name]
        nid = self._emit("param", self.raw(name), (), None)
        self.tape.param_leaves[name] = nid
        return nid

    def input(self, name: str):
        if name in self.tape.input_leaves:
            return self.tape.input_leaves[name]
        value = super().input(name)
        nid = self._emit("input", value, (), None)
        self.tape.input_leaves[name] = nid
        return nid

    def constant(self, value: np.ndarray):
        return self._emit("const", np.asarray(value), (), None)

    # -- differentiable ops -------------------------------------------

    # saved im2col matrices above this size are re-derived in backward
    COLS_CACHE_BYTES = 1 << 28

    def conv3d(self, x, w, b, spec: ConvSpec):
        xv, wv = self.value(x), self.value(w)
        bv = None if b is None else self.value(b)
        y, cols = tensor_core.conv3d_with_cols(xv, wv, bv, spec)
        if cols.nbytes > self.COLS_CACHE_BYTES:
            cols = None
        in_extents = xv.shape[1:4]

        def vjp(g):
            if cols is None:
                dw = tensor_core.conv3d_weight_grad(xv, g, spec)
            else:
                dw = tensor_core.conv3d_weight_grad_cols(cols, g, spec)
            out = [
                (x, tensor_core.conv3d_input_grad(g, wv, spec, in_extents)),
                (w, dw),
            ]
            if b is not None:
                out.append((b, g.sum(axis=(0, 1, 2, 3))))
            return out

        parents = (x, w) if b is None else (x, w, b)
        return self._emit("conv3d", y, parents, vjp)

    def conv_transpose3d(self, x, w, b, spec: ConvSpec, output_extents=None):
        xv, wv = self.value(x), self.value(w)
        bv = None if b is None else self.value(b)
        y = tensor_core.conv_transpose3d(xv, wv, bv, spec, output_extents)

        def vjp(g):
            out = [
                (x, tensor_core.conv3d(g, wv, None, spec)),
                (w, tensor_core.conv3d_weight_grad(g, xv, spec)),
            ]
            if b is not None:
                out.append((b, g.sum(axis=(0, 1, 2, 3))))
            return out

        parents = (x, w) if b is None else (x, w, b)
        return self._emit("conv_transpose3d", y, parents, vjp)

    def batch_norm(self, x, gamma, beta, state: BatchNormState):
        xv, gv, bv = self.value(x), self.value(gamma), self.value(beta)
        y, new_state = tensor_core.batch_norm(xv, gv, bv, state, self.mode)
        axes = (0, 1, 2, 3)
        if self.mode == "train":
            mean = xv.mean(axis=axes)
            inv_std = 1.0 / np.sqrt(xv.var(axis=axes) + tensor_core.BN_EPSILON)
            x_hat = (xv - mean) * inv_std

            def vjp(g):
                # batch statistics are functions of x: full backward
                dxhat = g * gv
                m = dxhat.mean(axis=axes)
                mx = (dxhat * x_hat).mean(axis=axes)
                dx = inv_std * (dxhat - m - x_hat * mx)
                return [
                    (x, dx),
                    (gamma, (g * x_hat).sum(axis=axes)),
                    (beta, g.sum(axis=axes)),
                ]
        else:
            inv_std = 1.0 / np.sqrt(state.var + tensor_core.BN_EPSILON)
            x_hat = (xv - state.mean) * inv_std

            def vjp(g):
                return [
                    (x, g * gv * inv_std),
                    (gamma, (g * x_hat).sum(axis=axes)),
                    (beta, g.sum(axis=axes)),
                ]

        return self._emit("batch_norm", y, (x, gamma, beta), vjp), new_state

    def relu(self, x):
        xv = self.value(x)
        y = tensor_core.relu(xv)
        live = xv > 0.0
        return self._emit("relu", y, (x,), lambda g: [(x, g * live)])

    def sigmoid(self, x):
        y = tensor_core.sigmoid(self.value(x))
        return self._emit("sigmoid", y, (x,), lambda g: [(x, g * y * (1.0 - y))])

    def softmax_channels(self, x):
        y = tensor_core.softmax_channels(self.value(x))

        def vjp(g):
            dot = (g * y).sum(axis=-1, keepdims=True)
            return [(x, y * (g - dot))]

        return self._emit("softmax_channels", y, (x,), vjp)

    def concat_channels(self, parts):
        parts = list(parts)
        values = [self.value(p) for p in parts]
        y = tensor_core.concat_channels(values)
        widths = [v.shape[-1] for v in values]
        offsets = np.cumsum([0] + widths)

        def vjp(g):
            return [
                (h, g[..., offsets[i]:offsets[i + 1]])
                for i, h in enumerate(parts)
            ]

        return self._emit("concat_channels", y, tuple(parts), vjp)

    def dropout(self, x, rate: float):
        y, mask = tensor_core.dropout(self.value(x), rate, self.rng, self.mode)
        self.tape.dropout_masks.append(mask)
        return self._emit("dropout", y, (x,), lambda g: [(x, g * mask)])

    def add(self, a, b):
        av, bv = self.value(a), self.value(b)
        if av.shape != bv.shape:
            raise ShapeMismatch(f"add {av.shape} vs {bv.shape}")
        return self._emit("add", av + bv, (a, b), lambda g: [(a, g), (b, g)])

    def mul(self, a, b):
        av, bv = self.value(a), self.value(b)
        if av.shape != bv.shape:
            raise ShapeMismatch(f"mul {av.shape} vs {bv.shape}")
        return self._emit("mul", av * bv, (a, b),
                          lambda g: [(a, g * bv), (b, g * av)])

    def sum(self, x):
        xv = self.value(x)
        y = np.asarray(np.sum(xv))
        return self._emit("sum", y, (x,),
                          lambda g: [(x, np.broadcast_to(g, xv.shape).copy())])

    def soft_dice(self, p, g, smooth: float = losses.SMOOTHING):
        pv, gv = self.value(p), self.value(g)
        y = np.asarray(losses.soft_dice(pv, gv, smooth))
        grad_p = None

        def vjp(up):
            nonlocal grad_p
            if grad_p is None:
                grad_p = losses.soft_dice_grad(pv, gv, smooth)
            return [(p, float(up) * grad_p)]

        return self._emit("soft_dice", y, (p, g), vjp)

    def categorical_dice_loss(self, p, g, weights=losses.DEFAULT_CLASS_WEIGHTS,
                              smooth: float = losses.SMOOTHING):
        pv, gv = self.value(p), self.value(g)
        y = np.asarray(losses.categorical_dice_loss(pv, gv, weights, smooth))

        def vjp(up):
            return [(p, float(up) * losses.categorical_dice_grad(pv, gv, weights, smooth))]

        return self._emit("categorical_dice_loss", y, (p, g), vjp)


def record_forward(program, inputs: dict, params, mode: str = "infer",
                   rng: np.random.Generator | None = None):
    """Run program under a Recorder; returns (output value, tape)."""
    rec = Recorder(inputs, params, mode=mode, rng=rng)
    out = program(rec)
    rec.tape.output = out
    return rec.value(out), rec.tape


def backward(tape: Tape, seed: np.ndarray) -> GradientMap:
    """Gradients of seed-weighted output for every parameter the tape touched."""
    if not tape.nodes or tape.output is None:
        raise EmptyTape("tape holds no recorded operations")
    seed = np.asarray(seed, dtype=np.float64)
    out_shape = tape.nodes[tape.output].shape
    if seed.shape != out_shape:
        raise ShapeMismatch(f"seed {seed.shape} vs output {out_shape}")
    grads: dict[int, np.ndarray] = {tape.output: seed}
    for nid in range(len(tape.nodes) - 1, -1, -1):
        node = tape.nodes[nid]
        if node.vjp is None:
            continue
        g = grads.pop(nid, None)
        if g is None:
            continue
        for pid, pg in node.vjp(g):
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
    out: GradientMap = {}
    for name, nid in tape.param_leaves.items():
        got = grads.get(nid)
        out[name] = got if got is not None else np.zeros(tape.nodes[nid].shape)
    return out


GRAD_CHECK_SAMPLE_THRESHOLD = 200
GRAD_CHECK_SAMPLE_SIZE = 64


def grad_check(program, inputs: dict, params, epsilon: float = 1e-5,
               mode: str = "train", rng_seed: int = 1234) -> float:
    """Max relative error between taped gradients and central differences.

    The scalar objective is the sum of the program output. Tensors with
    at least 200 elements are checked on a seeded 64-element sample,
    smaller ones exhaustively. Each forward pass re-seeds the runtime
    rng so dropout masks replay identically.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon must lie in [1e-7, 1e-3], got {epsilon}")
    tensors = {k: np.array(v, dtype=np.float64) for k, v in _tensors_of(params).items()}

    def run():
        out, tape = record_forward(program, inputs, tensors, mode=mode,
                                   rng=np.random.default_rng(rng_seed))
        return out, tape

    out, tape = run()
    grads = backward(tape, np.ones(out.shape))

    def objective() -> float:
        value, _ = run()
        return float(np.sum(value))

    sampler = np.random.default_rng(2025)
    worst = 0.0
    for name, g_ad in grads.items():
        t = tensors[name]
        if t.size >= GRAD_CHECK_SAMPLE_THRESHOLD:
            idx = sampler.choice(t.size, size=GRAD_CHECK_SAMPLE_SIZE, replace=False)
        else:
            idx = np.arange(t.size)
        flat = t.reshape(-1)
        for i in idx:
            keep = flat[i]
            flat[i] = keep + epsilon
            f_plus = objective()
            flat[i] = keep - epsilon
            f_minus = objective()
            flat[i] = keep
            g_fd = (f_plus - f_minus) / (2.0 * epsilon)
            g = float(g_ad.reshape(-1)[i])
            err = abs(g - g_fd) / max(abs(g), abs(g_fd), 1e-8)
            if err > worst:
                worst = err
    return worst
