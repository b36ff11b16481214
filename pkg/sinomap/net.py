"""
Small residual CNN for sinogram enhancement, with hand-written backprop and Adam.

Layers are 3x3 same-padded convolutions; hidden layers use the chosen activation and
the last layer is linear. With residual on, the network output is x + correction.

Tensors are channel-first: a sinogram x of shape (H, W) enters as (1, H, W).
"""

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Literal, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel, ConfigDict, Field

from sinomap.errors import (
    BadMagicError,
    NonFiniteError,
    ShapeMismatchError,
    TruncatedPayloadError,
    UnsupportedVersionError,
    ValidationError,
)
from sinomap.sinogram_io import atomic_write

logger = logging.getLogger(__name__)

NETP_MAGIC = b"NETP"
NETP_VERSION = 1
_NETP_HEADER = struct.Struct("<4sIIIII")
_ACTIVATIONS = {"relu": 0, "linear": 1}
KERNEL = 3
_PATCH_ELEMENTS = 1 << 22  # cap on one patch matrix (32 MiB of float64)


class NetSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    n_layers: int = Field(5, ge=1)
    channels: int = Field(32, ge=1)
    residual: bool = True
    activation: Literal["relu", "linear"] = "relu"

    def layer_shapes(self) -> List[Tuple[int, int, int, int]]:
        dims = [1] + [self.channels] * (self.n_layers - 1) + [1]
        return [(dims[i + 1], dims[i], KERNEL, KERNEL) for i in range(self.n_layers)]


@dataclass(eq=False)
class NetworkParams:
    spec: NetSpec
    weights: List[np.ndarray]
    biases: List[np.ndarray]

    def arrays(self) -> List[np.ndarray]:
        """Declaration order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    @classmethod
    def from_arrays(cls, spec: NetSpec, arrays: List[np.ndarray]) -> "NetworkParams":
        return cls(spec=spec, weights=list(arrays[0::2]), biases=list(arrays[1::2]))

    def zeros_like(self) -> "NetworkParams":
        return NetworkParams.from_arrays(self.spec, [np.zeros_like(a) for a in self.arrays()])

    def copy(self) -> "NetworkParams":
        return NetworkParams.from_arrays(self.spec, [a.copy() for a in self.arrays()])

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())


@dataclass(eq=False)
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params: NetworkParams, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        zeros = [np.zeros_like(a) for a in params.arrays()]
        return cls(m=zeros, v=[z.copy() for z in zeros], lr=lr, beta1=beta1, beta2=beta2, eps=eps)


@dataclass(eq=False)
class ActivationCache:
    x: np.ndarray
    inputs: List[np.ndarray] = field(default_factory=list)  # padded layer inputs
    pre: List[np.ndarray] = field(default_factory=list)


def init_params(spec: NetSpec, seed: int = 0) -> NetworkParams:
    """He-uniform weights, zero biases, zero last layer (identity map when residual)."""
    rng = np.random.default_rng(seed)
    shapes = spec.layer_shapes()
    weights, biases = [], []
    for i, shape in enumerate(shapes):
        if i == len(shapes) - 1:
            w = np.zeros(shape)
        else:
            fan_in = shape[1] * KERNEL * KERNEL
            limit = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-limit, limit, size=shape)
        weights.append(w)
        biases.append(np.zeros(shape[0]))
    return NetworkParams(spec=spec, weights=weights, biases=biases)


def _patches(xp: np.ndarray):
    """
    Yield (first_row, last_row, patch_matrix) over row chunks of a padded (Cin, H+2, W+2) input.

    Patch columns are ordered (channel, kernel row, kernel col), matching w.reshape(Cout, -1).
    """
    cin, h, wd = xp.shape[0], xp.shape[1] - 2, xp.shape[2] - 2
    rows = max(1, _PATCH_ELEMENTS // (wd * cin * KERNEL * KERNEL))
    for r0 in range(0, h, rows):
        r1 = min(h, r0 + rows)
        windows = sliding_window_view(xp[:, r0:r1 + 2], (KERNEL, KERNEL), axis=(1, 2))
        yield r0, r1, windows.transpose(1, 2, 0, 3, 4).reshape((r1 - r0) * wd, cin * KERNEL * KERNEL)


def _conv(xp: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cross-correlation of an already padded (Cin, H+2, W+2) input."""
    h, wd = xp.shape[1] - 2, xp.shape[2] - 2
    w_mat = w.reshape(w.shape[0], -1)
    out = np.empty((w.shape[0], h * wd))
    for r0, r1, cols in _patches(xp):
        out[:, r0 * wd:r1 * wd] = w_mat @ cols.T
    out += b[:, None]
    return out.reshape(w.shape[0], h, wd)


def _conv_backward(xp: np.ndarray, w: np.ndarray, dout: np.ndarray):
    wd = dout.shape[2]
    d_mat = dout.reshape(dout.shape[0], -1)
    dw = np.zeros((w.shape[0], w[0].size))
    for r0, r1, cols in _patches(xp):
        dw += d_mat[:, r0 * wd:r1 * wd] @ cols
    db = d_mat.sum(axis=1)
    # input gradient: correlate the padded output gradient with the flipped, transposed kernel
    w_flip = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    dx = _conv(_pad(dout), w_flip, np.zeros(w.shape[1]))
    return dw.reshape(w.shape), db, dx


def _pad(h: np.ndarray) -> np.ndarray:
    return np.pad(h, ((0, 0), (1, 1), (1, 1)))


def forward(params: NetworkParams, x: np.ndarray) -> Tuple[np.ndarray, ActivationCache]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeMismatchError(f"input must be 2-D, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("network input contains non-finite values")
    relu = params.spec.activation == "relu"
    cache = ActivationCache(x=x)
    h = x[None]
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        hp = _pad(h)
        z = _conv(hp, w, b)
        cache.inputs.append(hp)
        cache.pre.append(z)
        h = np.maximum(z, 0.0) if (relu and i < last) else z
    out = h[0] + x if params.spec.residual else h[0].copy()
    return out, cache


def backward(params: NetworkParams, cache: ActivationCache, grad_out: np.ndarray) -> NetworkParams:
    """Gradient of <grad_out, forward(params, x)> with respect to every parameter."""
    if len(cache.pre) != len(params.weights):
        raise ValidationError(f"cache holds {len(cache.pre)} layers, params have {len(params.weights)}")
    for i, (w, hp) in enumerate(zip(params.weights, cache.inputs)):
        if hp.shape[0] != w.shape[1] or cache.pre[i].shape[0] != w.shape[0]:
            raise ShapeMismatchError(f"layer {i}: cache does not match weight shape {w.shape}")
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != cache.x.shape:
        raise ShapeMismatchError(f"grad_out shape {grad_out.shape} does not match output {cache.x.shape}")

    relu = params.spec.activation == "relu"
    last = len(params.weights) - 1
    dws: List[np.ndarray] = [None] * len(params.weights)
    dbs: List[np.ndarray] = [None] * len(params.weights)
    g = grad_out[None]
    for i in range(last, -1, -1):
        if relu and i < last:
            g = g * (cache.pre[i] > 0)
        dws[i], dbs[i], g = _conv_backward(cache.inputs[i], params.weights[i], g)
    return NetworkParams(spec=params.spec, weights=dws, biases=dbs)


def adam_step(params: NetworkParams, grads: NetworkParams, state: AdamState) -> Tuple[NetworkParams, AdamState]:
    p_arrays, g_arrays = params.arrays(), grads.arrays()
    if len(p_arrays) != len(g_arrays) or any(p.shape != g.shape for p, g in zip(p_arrays, g_arrays)):
        raise ShapeMismatchError("gradient shapes do not match parameters")
    step = state.step + 1
    c1 = 1.0 - state.beta1 ** step
    c2 = 1.0 - state.beta2 ** step
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(p_arrays, g_arrays, state.m, state.v):
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        new_p.append(p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    new_state = AdamState(m=new_m, v=new_v, step=step, lr=state.lr,
                          beta1=state.beta1, beta2=state.beta2, eps=state.eps)
    return NetworkParams.from_arrays(params.spec, new_p), new_state


def encode_checkpoint(params: NetworkParams, state: AdamState) -> bytes:
    spec = params.spec
    parts = [_NETP_HEADER.pack(NETP_MAGIC, NETP_VERSION, spec.n_layers, spec.channels,
                               int(spec.residual), _ACTIVATIONS[spec.activation])]
    parts += [np.ascontiguousarray(a, dtype="<f8").tobytes() for a in params.arrays()]
    parts.append(np.array([state.step, state.lr, state.beta1, state.beta2, state.eps], dtype="<f8").tobytes())
    parts += [np.ascontiguousarray(a, dtype="<f8").tobytes() for a in state.m + state.v]
    return b"".join(parts)


def decode_checkpoint(blob: bytes) -> Tuple[NetworkParams, AdamState]:
    if len(blob) < _NETP_HEADER.size:
        raise TruncatedPayloadError("checkpoint header truncated")
    magic, version, n_layers, channels, residual, act_code = _NETP_HEADER.unpack_from(blob)
    if magic != NETP_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {NETP_MAGIC!r}")
    if version != NETP_VERSION:
        raise UnsupportedVersionError(f"unsupported NETP version {version}")
    names = {code: name for name, code in _ACTIVATIONS.items()}
    if act_code not in names:
        raise ValidationError(f"unknown activation code {act_code}")
    spec = NetSpec(n_layers=n_layers, channels=channels, residual=bool(residual), activation=names[act_code])

    shapes = []
    for shape in spec.layer_shapes():
        shapes.extend([shape, (shape[0],)])
    sizes = [int(np.prod(s)) for s in shapes]
    expected = 8 * (2 * sum(sizes) + sum(sizes) + 5)
    payload = blob[_NETP_HEADER.size:]
    if len(payload) < expected:
        raise TruncatedPayloadError(f"checkpoint payload has {len(payload)} bytes, expected {expected}")
    if len(payload) > expected:
        raise ValidationError(f"{len(payload) - expected} trailing bytes in checkpoint")
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)

    pos = 0

    def take(shape):
        nonlocal pos
        n = int(np.prod(shape))
        arr = flat[pos:pos + n].reshape(shape).copy()
        pos += n
        return arr

    params = NetworkParams.from_arrays(spec, [take(s) for s in shapes])
    step, lr, beta1, beta2, eps = take((5,))
    m = [take(s) for s in shapes]
    v = [take(s) for s in shapes]
    return params, AdamState(m=m, v=v, step=int(step), lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def save_checkpoint(path, params: NetworkParams, state: AdamState):
    atomic_write(path, encode_checkpoint(params, state))
    logger.debug("Saved checkpoint %s (%d parameters)", path, params.n_params)


def load_checkpoint(path) -> Tuple[NetworkParams, AdamState]:
    return decode_checkpoint(Path(path).read_bytes())
