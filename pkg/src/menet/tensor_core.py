"""Dense-tensor primitives for volumetric networks.

Feature maps are plain float64 ``numpy.ndarray`` values laid out
``(batch, depth, height, width, channels)``; kernels are
``(kd, kh, kw, in_channels, out_channels)``. Every operation here is a
pure value transformation: batch-norm running statistics and dropout
randomness are passed in and returned explicitly, so nothing hides
shared state.

Convolutions come in two bit-compatible flavours: a naive nested-loop
reference (``method="naive"``) and a vectorized windowed fast path
(``method="fast"``, the default). The fast path is what the network
runs on; the naive path exists so the fast one can be checked against
something that is obviously correct.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateBatch,
    InvalidConfig,
    InvalidRate,
    NonPositiveOutput,
    ShapeMismatch,
)

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.9

Triple = tuple[int, int, int]


def conv_output_extent(i: int, k: int, s: int, p: int) -> int:
    """Spatial output extent of a strided convolution along one axis.

    floor((i + 2p - k) / s) + 1, with zero padding p on both sides.
    """
    if i < 1 or k < 1 or s < 1 or p < 0:
        raise ShapeMismatch(f"bad conv geometry i={i} k={k} s={s} p={p}")
    if i + 2 * p < k:
        raise NonPositiveOutput(
            f"kernel {k} does not fit input {i} with padding {p}"
        )
    return (i + 2 * p - k) // s + 1


def deconv_output_extent(i: int, k: int, s: int, p: int) -> int:
    """Spatial output extent of a transposed convolution along one axis."""
    if i < 1 or k < 1 or s < 1 or p < 0:
        raise ShapeMismatch(f"bad deconv geometry i={i} k={k} s={s} p={p}")
    o = s * (i - 1) + k - 2 * p
    if o < 1:
        raise NonPositiveOutput(f"transposed conv output extent {o} < 1")
    return o


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of one (transposed) convolution layer."""

    kernel: Triple
    stride: Triple
    padding: Triple
    in_channels: int
    out_channels: int

    def __post_init__(self):
        if any(k < 1 for k in self.kernel):
            raise InvalidConfig(f"kernel extents must be >= 1: {self.kernel}")
        if any(s < 1 for s in self.stride):
            raise InvalidConfig(f"stride extents must be >= 1: {self.stride}")
        if any(p < 0 for p in self.padding):
            raise InvalidConfig(f"padding must be >= 0: {self.padding}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise InvalidConfig("channel counts must be >= 1")

    @property
    def weight_shape(self) -> tuple[int, int, int, int, int]:
        return (*self.kernel, self.in_channels, self.out_channels)

    def output_extents(self, spatial: Triple) -> Triple:
        return tuple(
            conv_output_extent(i, k, s, p)
            for i, k, s, p in zip(spatial, self.kernel, self.stride, self.padding)
        )

    def deconv_output_extents(self, spatial: Triple) -> Triple:
        return tuple(
            deconv_output_extent(i, k, s, p)
            for i, k, s, p in zip(spatial, self.kernel, self.stride, self.padding)
        )


def _check_input(x: np.ndarray, w: np.ndarray, bias: np.ndarray | None, spec: ConvSpec):
    if x.ndim != 5:
        raise ShapeMismatch(f"expected 5-D (b,d,h,w,c) input, got shape {x.shape}")
    if w.shape != spec.weight_shape:
        raise ShapeMismatch(f"weights {w.shape} do not match spec {spec.weight_shape}")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ShapeMismatch(f"bias {bias.shape} != ({spec.out_channels},)")


def _pad_spatial(x: np.ndarray, padding: Triple) -> np.ndarray:
    pd, ph, pw = padding
    if pd == ph == pw == 0:
        return x
    return np.pad(x, ((0, 0), (pd, pd), (ph, ph), (pw, pw), (0, 0)))


def _windows(xp: np.ndarray, kernel: Triple, stride: Triple, out: Triple) -> np.ndarray:
    """Strided read-only view (b, od, oh, ow, kd, kh, kw, c) over padded input."""
    b = xp.shape[0]
    c = xp.shape[4]
    sb, sd, sh, sw, sc = xp.strides
    shape = (b, *out, *kernel, c)
    strides = (sb, sd * stride[0], sh * stride[1], sw * stride[2], sd, sh, sw, sc)
    return np.lib.stride_tricks.as_strided(xp, shape, strides, writeable=False)


def _im2col(xp: np.ndarray, kernel: Triple, stride: Triple, out: Triple) -> np.ndarray:
    """Contiguous (b * prod(out), prod(kernel) * c) window matrix."""
    win = _windows(xp, kernel, stride, out)
    b, od, oh, ow = win.shape[:4]
    return win.reshape(b * od * oh * ow, -1)


def conv3d_with_cols(
    x: np.ndarray,
    w: np.ndarray,
    bias: np.ndarray | None,
    spec: ConvSpec,
) -> tuple[np.ndarray, np.ndarray]:
    """conv3d fast path that also returns its im2col matrix for reuse
    (the weight gradient is a single matmul against it)."""
    _check_input(x, w, bias, spec)
    if x.shape[4] != spec.in_channels:
        raise ShapeMismatch(
            f"input has {x.shape[4]} channels, spec expects {spec.in_channels}"
        )
    out = spec.output_extents(x.shape[1:4])
    xp = _pad_spatial(x, spec.padding)
    cols = _im2col(xp, spec.kernel, spec.stride, out)
    y = cols @ w.reshape(-1, spec.out_channels)
    y = y.reshape(x.shape[0], *out, spec.out_channels)
    if bias is not None:
        y = y + bias
    return y, cols


def conv3d(
    x: np.ndarray,
    w: np.ndarray,
    bias: np.ndarray | None,
    spec: ConvSpec,
    method: str = "fast",
) -> np.ndarray:
    """3-D cross-correlation with zero padding.

    x: (b, d, h, w, c_in); w: (kd, kh, kw, c_in, c_out); returns
    (b, d', h', w', c_out) with primed extents from conv_output_extent.
    """
    if method == "fast":
        y, _ = conv3d_with_cols(x, w, bias, spec)
        return y
    if method != "naive":
        raise ValueError(f"unknown conv method {method!r}")
    _check_input(x, w, bias, spec)
    if x.shape[4] != spec.in_channels:
        raise ShapeMismatch(
            f"input has {x.shape[4]} channels, spec expects {spec.in_channels}"
        )
    out = spec.output_extents(x.shape[1:4])
    xp = _pad_spatial(x, spec.padding)
    y = _conv3d_naive(xp, w, out, spec.stride)
    if bias is not None:
        y = y + bias
    return y


def _conv3d_naive(xp: np.ndarray, w: np.ndarray, out: Triple, stride: Triple) -> np.ndarray:
    b = xp.shape[0]
    od, oh, ow = out
    sd, sh, sw = stride
    kd, kh, kw, ci, co = w.shape
    y = np.zeros((b, od, oh, ow, co))
    for n in range(b):
        for zo in range(od):
            for yo in range(oh):
                for xo in range(ow):
                    acc = np.zeros(co)
                    for a in range(kd):
                        for bb in range(kh):
                            for cc in range(kw):
                                acc += xp[n, zo * sd + a, yo * sh + bb, xo * sw + cc] @ w[a, bb, cc]
                    y[n, zo, yo, xo] = acc
    return y


def _scatter_add(
    x: np.ndarray,
    w: np.ndarray,
    spec: ConvSpec,
    out_extents: Triple,
) -> np.ndarray:
    """Adjoint scatter (col2im): out[p*s + k - pad] += x[p] . w[k].

    One matmul against the kernel, then one strided += per kernel tap.
    """
    b = x.shape[0]
    od, oh, ow = x.shape[1:4]
    kd, kh, kw = spec.kernel
    sd, sh, sw = spec.stride
    pd, ph, pw = spec.padding
    ci = spec.in_channels
    dcols = x.reshape(-1, spec.out_channels) @ w.reshape(-1, spec.out_channels).T
    taps = dcols.reshape(b, od, oh, ow, kd, kh, kw, ci)
    buf = np.zeros(
        (b, out_extents[0] + 2 * pd, out_extents[1] + 2 * ph,
         out_extents[2] + 2 * pw, ci)
    )
    for a in range(kd):
        for bb in range(kh):
            for cc in range(kw):
                buf[:, a:a + od * sd:sd, bb:bb + oh * sh:sh,
                    cc:cc + ow * sw:sw] += taps[:, :, :, :, a, bb, cc]
    return buf[:, pd:pd + out_extents[0], ph:ph + out_extents[1],
               pw:pw + out_extents[2]]


def conv_transpose3d(
    x: np.ndarray,
    w: np.ndarray,
    bias: np.ndarray | None,
    spec: ConvSpec,
    output_extents: Triple | None = None,
    method: str = "fast",
) -> np.ndarray:
    """Transposed 3-D convolution (the exact adjoint of conv3d).

    x: (b, d, h, w, c_out); w: (kd, kh, kw, c_in, c_out); returns
    (b, d', h', w', c_in). The default output extent is
    s*(i-1) + k - 2p per axis; pass output_extents to recover an input
    shape the forward convolution truncated.
    """
    if x.ndim != 5:
        raise ShapeMismatch(f"expected 5-D input, got shape {x.shape}")
    if w.shape != spec.weight_shape:
        raise ShapeMismatch(f"weights {w.shape} do not match spec {spec.weight_shape}")
    if x.shape[4] != spec.out_channels:
        raise ShapeMismatch(
            f"input has {x.shape[4]} channels, spec expects {spec.out_channels}"
        )
    if bias is not None and bias.shape != (spec.in_channels,):
        raise ShapeMismatch(f"bias {bias.shape} != ({spec.in_channels},)")
    if output_extents is None:
        output_extents = spec.deconv_output_extents(x.shape[1:4])
    if method == "naive":
        y = _conv_transpose3d_naive(x, w, spec, output_extents)
    elif method == "fast":
        y = _scatter_add(x, w, spec, output_extents)
    else:
        raise ValueError(f"unknown conv method {method!r}")
    if bias is not None:
        y = y + bias
    return y


def _conv_transpose3d_naive(
    x: np.ndarray, w: np.ndarray, spec: ConvSpec, out_extents: Triple
) -> np.ndarray:
    b = x.shape[0]
    id_, ih, iw = x.shape[1:4]
    kd, kh, kw, ci, co = w.shape
    sd, sh, sw = spec.stride
    pd, ph, pw = spec.padding
    od, oh, ow = out_extents
    y = np.zeros((b, od, oh, ow, ci))
    for n in range(b):
        for zi in range(id_):
            for yi in range(ih):
                for xi in range(iw):
                    for a in range(kd):
                        zo = zi * sd + a - pd
                        if not 0 <= zo < od:
                            continue
                        for bb in range(kh):
                            yo = yi * sh + bb - ph
                            if not 0 <= yo < oh:
                                continue
                            for cc in range(kw):
                                xo = xi * sw + cc - pw
                                if not 0 <= xo < ow:
                                    continue
                                y[n, zo, yo, xo] += w[a, bb, cc] @ x[n, zi, yi, xi]
    return y


def conv3d_input_grad(
    dy: np.ndarray, w: np.ndarray, spec: ConvSpec, input_extents: Triple
) -> np.ndarray:
    """Gradient of conv3d w.r.t. its input: the adjoint scatter of dy."""
    return conv_transpose3d(dy, w, None, spec, output_extents=input_extents)


def conv3d_weight_grad(x: np.ndarray, dy: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Gradient of conv3d w.r.t. its weights."""
    xp = _pad_spatial(x, spec.padding)
    cols = _im2col(xp, spec.kernel, spec.stride, dy.shape[1:4])
    return conv3d_weight_grad_cols(cols, dy, spec)


def conv3d_weight_grad_cols(cols: np.ndarray, dy: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Weight gradient from a saved forward im2col matrix: one matmul."""
    dw = cols.T @ dy.reshape(-1, spec.out_channels)
    return dw.reshape(spec.weight_shape)


@dataclass
class BatchNormState:
    """Per-channel running statistics, updated by exponential moving average."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def initial(cls, channels: int) -> "BatchNormState":
        return cls(np.zeros(channels), np.ones(channels))


def batch_norm(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    state: BatchNormState,
    mode: str,
) -> tuple[np.ndarray, BatchNormState]:
    """Per-channel batch normalization over the (b, d, h, w) axes.

    Train mode normalizes by batch statistics (population variance) and
    returns the EMA-updated running state; infer mode applies the stored
    running statistics and returns the state untouched.
    """
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatch(f"gamma/beta must have shape ({c},)")
    if mode == "train":
        n = int(np.prod(x.shape[:-1]))
        if n < 2:
            raise DegenerateBatch(f"need >= 2 samples per channel, got {n}")
        mean = x.mean(axis=(0, 1, 2, 3))
        var = x.var(axis=(0, 1, 2, 3))
        y = (x - mean) / np.sqrt(var + BN_EPSILON) * gamma + beta
        new_state = BatchNormState(
            BN_MOMENTUM * state.mean + (1.0 - BN_MOMENTUM) * mean,
            BN_MOMENTUM * state.var + (1.0 - BN_MOMENTUM) * var,
        )
        return y, new_state
    if mode == "infer":
        y = (x - state.mean) / np.sqrt(state.var + BN_EPSILON) * gamma + beta
        return y, state
    raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax_channels(x: np.ndarray) -> np.ndarray:
    """Softmax over the trailing (channel) axis; sums to 1 at every voxel."""
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "softmax_channels": softmax_channels}


def activation(x: np.ndarray, kind: str) -> np.ndarray:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


def concat_channels(parts: list[np.ndarray]) -> np.ndarray:
    """Concatenate along the channel axis; all other extents must agree."""
    if not parts:
        raise ShapeMismatch("concat_channels needs at least one tensor")
    base = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != base:
            raise ShapeMismatch(
                f"cannot concat {p.shape} with leading extents {base}"
            )
    if len(parts) == 1:
        return parts[0]
    return np.concatenate(parts, axis=-1)


def dropout(
    x: np.ndarray,
    rate: float,
    rng: np.random.Generator | None,
    mode: str,
) -> tuple[np.ndarray, np.ndarray]:
    """Inverted dropout: survivors are scaled by 1/(1-rate) at train time.

    Returns (output, mask); the mask already carries the survivor scale
    so the exact backward pass is mask-multiplication.
    """
    if not 0.0 <= rate < 1.0:
        raise InvalidRate(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "infer" or rate == 0.0:
        return x, np.ones_like(x)
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    if rng is None:
        raise ValueError("train-mode dropout needs an rng stream")
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(np.float64) / (1.0 - rate)
    return x * mask, mask
