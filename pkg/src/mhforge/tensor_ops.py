"""Dense 4-D tensor arithmetic: forward and backward math for every supported layer kind.

All arithmetic runs in float64. Every op is a pure function of its inputs;
tensors are treated as immutable except for explicit optimizer updates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import MhforgeError

Shape4 = tuple[int, int, int, int]

_SEED_MASK = (1 << 64) - 1


class ShapeMismatch(MhforgeError):
    """An operand dimension does not match what the op requires."""


class Tensor:
    """Dense (N, C, H, W) array of float64, row-major.

    Wraps a C-contiguous ndarray; the flat data length always equals
    N*C*H*W. Construction copies only when needed.
    """

    __slots__ = ("data",)

    def __init__(self, data: np.ndarray) -> None:
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if arr.ndim != 4:
            raise ShapeMismatch(f"tensor must be 4-D (N,C,H,W), got {arr.ndim}-D shape {arr.shape}")
        self.data = arr

    @property
    def shape(self) -> Shape4:
        return self.data.shape  # type: ignore[return-value]

    @property
    def size(self) -> int:
        return self.data.size

    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    @classmethod
    def zeros(cls, shape: Shape4) -> "Tensor":
        return cls(np.zeros(shape))

    @classmethod
    def full(cls, shape: Shape4, value: float) -> "Tensor":
        return cls(np.full(shape, float(value)))

    @classmethod
    def from_flat(cls, shape: Shape4, values) -> "Tensor":
        arr = np.asarray(values, dtype=np.float64).reshape(-1)
        n, c, h, w = shape
        if arr.size != n * c * h * w:
            raise ShapeMismatch(f"flat data has {arr.size} values, shape {shape} needs {n * c * h * w}")
        return cls(arr.reshape(shape))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


@dataclass
class LayerParams:
    """Weights and bias of one conv or fc layer.

    `weights` is 4-D: (Cout, Cin, K, K) for conv, (F, D, 1, 1) for fc.
    `bias` is 1-D with length equal to the output channels/features.
    A frozen layer must never be touched by an optimizer step.
    """

    weights: Tensor
    bias: np.ndarray
    frozen: bool = False

    def __post_init__(self) -> None:
        self.bias = np.ascontiguousarray(self.bias, dtype=np.float64)
        if self.bias.ndim != 1:
            raise ShapeMismatch(f"bias must be 1-D, got shape {self.bias.shape}")
        if self.bias.shape[0] != self.weights.shape[0]:
            raise ShapeMismatch(
                f"bias length {self.bias.shape[0]} != output channels {self.weights.shape[0]}"
            )

    def copy(self) -> "LayerParams":
        return LayerParams(self.weights.copy(), self.bias.copy(), self.frozen)


def _conv_out_dim(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def _check_conv_args(input: Tensor, params: LayerParams, stride: int, pad: int) -> tuple[int, int, int, int, int]:
    if stride < 1:
        raise ShapeMismatch(f"stride must be >= 1, got {stride}")
    if pad < 0:
        raise ShapeMismatch(f"pad must be >= 0, got {pad}")
    cout, cin, kh, kw = params.weights.shape
    if kh != kw:
        raise ShapeMismatch(f"conv kernel must be square, got {kh}x{kw}")
    n, c, h, w = input.shape
    if c != cin:
        raise ShapeMismatch(f"input has {c} channels but kernel expects {cin}")
    hout = _conv_out_dim(h, kh, stride, pad)
    wout = _conv_out_dim(w, kh, stride, pad)
    if hout < 1 or wout < 1:
        raise ShapeMismatch(
            f"conv output would be {hout}x{wout} for input {h}x{w}, kernel {kh}, stride {stride}, pad {pad}"
        )
    return cout, kh, hout, wout, cin


def _padded(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _windows(x: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    # (N, C, Hout, Wout, K, K) view, no copy
    win = sliding_window_view(x, (kernel, kernel), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d_forward(input: Tensor, params: LayerParams, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution: each output element is the receptive field dotted with the kernel, plus bias."""
    cout, k, hout, wout, _ = _check_conv_args(input, params, stride, pad)
    win = _windows(_padded(input.data, pad), k, stride)
    out = np.tensordot(win, params.weights.data, axes=([1, 4, 5], [1, 2, 3]))
    out = out.transpose(0, 3, 1, 2) + params.bias[None, :, None, None]
    return Tensor(out)


def conv2d_backward(
    input: Tensor, params: LayerParams, grad_out: Tensor, stride: int = 1, pad: int = 0
) -> tuple[Tensor, Tensor, np.ndarray]:
    """Gradients of sum(grad_out * conv2d_forward(...)) w.r.t. input, weights, and bias."""
    cout, k, hout, wout, cin = _check_conv_args(input, params, stride, pad)
    n, c, h, w = input.shape
    if grad_out.shape != (n, cout, hout, wout):
        raise ShapeMismatch(f"grad_out shape {grad_out.shape} != conv output shape {(n, cout, hout, wout)}")
    g = grad_out.data
    xp = _padded(input.data, pad)
    win = _windows(xp, k, stride)

    grad_bias = g.sum(axis=(0, 2, 3))
    grad_w = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))

    gxp = np.zeros_like(xp)
    wdat = params.weights.data
    for kh in range(k):
        for kw in range(k):
            # (N,Cout,Ho,Wo) x (Cout,Cin) -> (N,Ho,Wo,Cin)
            contrib = np.tensordot(g, wdat[:, :, kh, kw], axes=([1], [0]))
            gxp[:, :, kh : kh + hout * stride : stride, kw : kw + wout * stride : stride] += contrib.transpose(
                0, 3, 1, 2
            )
    gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
    return Tensor(gx), Tensor(grad_w), grad_bias


@dataclass(frozen=True)
class PoolIndexMap:
    """Argmax bookkeeping from a maxpool forward pass.

    `indices[n, c, oh, ow]` is the flat spatial index (h*W + w) of the
    element each window selected; ties go to the lowest flat index.
    """

    input_shape: Shape4
    kernel: int
    stride: int
    indices: np.ndarray


def maxpool2d(input: Tensor, k: int, stride: int) -> tuple[Tensor, PoolIndexMap]:
    """Max over each k x k window; also returns the per-window argmax map for the backward pass."""
    if k < 1 or stride < 1:
        raise ShapeMismatch(f"kernel and stride must be >= 1, got k={k}, stride={stride}")
    n, c, h, w = input.shape
    if k > h or k > w:
        raise ShapeMismatch(f"pool window {k}x{k} exceeds spatial dims {h}x{w}")
    hout = (h - k) // stride + 1
    wout = (w - k) // stride + 1
    win = _windows(input.data, k, stride)
    flat = win.reshape(n, c, hout, wout, k * k)
    local = flat.argmax(axis=-1)  # first occurrence wins: lowest flat index
    out = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]
    oh = np.arange(hout)[None, None, :, None]
    ow = np.arange(wout)[None, None, None, :]
    abs_h = oh * stride + local // k
    abs_w = ow * stride + local % k
    idx = (abs_h * w + abs_w).astype(np.int64)
    return Tensor(out), PoolIndexMap((n, c, h, w), k, stride, idx)


def maxpool2d_backward(pool_map: PoolIndexMap, grad_out: Tensor) -> Tensor:
    """Routes each grad_out element to its recorded argmax position; everything else gets zero."""
    n, c, h, w = pool_map.input_shape
    if grad_out.shape[:2] != (n, c) or grad_out.shape[2:] != pool_map.indices.shape[2:]:
        raise ShapeMismatch(
            f"grad_out shape {grad_out.shape} does not match pool map of {pool_map.indices.shape}"
        )
    gx = np.zeros((n * c, h * w))
    rows = np.arange(n * c)[:, None]
    idx = pool_map.indices.reshape(n * c, -1)
    np.add.at(gx, (rows, idx), grad_out.data.reshape(n * c, -1))
    return Tensor(gx.reshape(n, c, h, w))


def global_avgpool(input: Tensor) -> Tensor:
    """Mean over the spatial dims, per channel: (N,C,H,W) -> (N,C,1,1)."""
    return Tensor(input.data.mean(axis=(2, 3), keepdims=True))


def global_avgpool_backward(input_shape: Shape4, grad_out: Tensor) -> Tensor:
    n, c, h, w = input_shape
    if grad_out.shape != (n, c, 1, 1):
        raise ShapeMismatch(f"grad_out shape {grad_out.shape} != expected {(n, c, 1, 1)}")
    return Tensor(np.broadcast_to(grad_out.data / (h * w), input_shape).copy())


def relu(input: Tensor) -> Tensor:
    return Tensor(np.maximum(input.data, 0.0))


def relu_backward(input: Tensor, grad_out: Tensor) -> Tensor:
    """Passes gradient where input > 0; the subgradient at exactly 0 is 0."""
    if grad_out.shape != input.shape:
        raise ShapeMismatch(f"grad_out shape {grad_out.shape} != input shape {input.shape}")
    return Tensor(grad_out.data * (input.data > 0.0))


def _check_fc_args(input: Tensor, params: LayerParams) -> tuple[int, int, int]:
    f, d, kh, kw = params.weights.shape
    if kh != 1 or kw != 1:
        raise ShapeMismatch(f"fc weights must be (F, D, 1, 1), got {params.weights.shape}")
    n, c, h, w = input.shape
    found = c * h * w
    if found != d:
        raise ShapeMismatch(f"fc expected input dim {d}, found {found}")
    return n, f, d


def fully_connected(input: Tensor, params: LayerParams) -> Tensor:
    """Flattens (N,C,H,W) to (N,D) and applies out = x @ W.T + bias, returned as (N,F,1,1)."""
    n, f, d = _check_fc_args(input, params)
    x2 = input.data.reshape(n, d)
    w2 = params.weights.data.reshape(f, d)
    out = x2 @ w2.T + params.bias
    return Tensor(out.reshape(n, f, 1, 1))


def fully_connected_backward(
    input: Tensor, params: LayerParams, grad_out: Tensor
) -> tuple[Tensor, Tensor, np.ndarray]:
    n, f, d = _check_fc_args(input, params)
    if grad_out.shape != (n, f, 1, 1):
        raise ShapeMismatch(f"grad_out shape {grad_out.shape} != expected {(n, f, 1, 1)}")
    g2 = grad_out.data.reshape(n, f)
    x2 = input.data.reshape(n, d)
    w2 = params.weights.data.reshape(f, d)
    grad_w = (g2.T @ x2).reshape(f, d, 1, 1)
    grad_b = g2.sum(axis=0)
    grad_x = (g2 @ w2).reshape(input.shape)
    return Tensor(grad_x), Tensor(grad_w), grad_b


def _logits_2d(logits: Tensor) -> np.ndarray:
    n, f, h, w = logits.shape
    if h != 1 or w != 1:
        raise ShapeMismatch(f"logits must be (N, F, 1, 1), got {logits.shape}")
    return logits.data.reshape(n, f)


def softmax_cross_entropy(logits: Tensor, labels) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean negative log-likelihood over the batch.

    Softmax uses max-subtraction so huge logits cannot overflow. Returns
    (loss, probs, grad_logits) with grad_logits = (probs - onehot) / N.
    """
    z = _logits_2d(logits)
    n, f = z.shape
    lab = np.asarray(labels, dtype=np.int64).reshape(-1)
    if lab.shape[0] != n:
        raise ShapeMismatch(f"got {lab.shape[0]} labels for batch of {n}")
    for row, value in enumerate(lab):
        if value < 0 or value >= f:
            raise ShapeMismatch(f"row {row}: label {value} out of range [0, {f})")
    shifted = z - z.max(axis=1, keepdims=True)
    ez = np.exp(shifted)
    probs = ez / ez.sum(axis=1, keepdims=True)
    idx = np.arange(n)
    # log(p) via the shifted logits directly, avoiding log(exp(...)) rounding
    logp = shifted[idx, lab] - np.log(ez.sum(axis=1))
    loss = float(-logp.mean())
    grad = probs.copy()
    grad[idx, lab] -= 1.0
    grad /= n
    return loss, probs, grad


def top1_accuracy(logits: Tensor, labels) -> float:
    """Fraction of rows whose argmax equals the label; argmax ties go to the lowest index."""
    z = _logits_2d(logits)
    lab = np.asarray(labels, dtype=np.int64).reshape(-1)
    if lab.shape[0] != z.shape[0]:
        raise ShapeMismatch(f"got {lab.shape[0]} labels for batch of {z.shape[0]}")
    return float((z.argmax(axis=1) == lab).mean())


def init_params(
    kind: str, *, out_dim: int, in_dim: int, kernel: int = 1, seed: int = 0, frozen: bool = False
) -> LayerParams:
    """Deterministic parameter init for one layer.

    conv: zero-mean Gaussian with std sqrt(2 / (K*K*Cin)).
    fc:   uniform in +/- sqrt(6 / (D + F)).
    Biases start at zero. The same 64-bit seed always yields identical params.
    """
    rng = np.random.default_rng(seed & _SEED_MASK)
    if kind == "conv":
        std = np.sqrt(2.0 / (kernel * kernel * in_dim))
        w = rng.standard_normal((out_dim, in_dim, kernel, kernel)) * std
    elif kind == "fc":
        limit = np.sqrt(6.0 / (in_dim + out_dim))
        w = rng.uniform(-limit, limit, (out_dim, in_dim, 1, 1))
    else:
        raise MhforgeError(f"layer kind {kind!r} has no parameters to initialize")
    return LayerParams(Tensor(w), np.zeros(out_dim), frozen)
