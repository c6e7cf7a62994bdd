"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything runs in 64-bit precision on numpy arrays. The graph is a plain
tape: every op returns a new Tensor holding a closure that scatters the
incoming gradient to its parents. Gradients of fan-out nodes accumulate
by summation.
"""

from __future__ import annotations

import struct
from typing import Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class GraphError(RuntimeError):
    """Raised on invalid use of the computation graph."""


class ParameterDomainError(ValueError):
    """Raised when a parameter leaves its valid domain (e.g. beta <= 0)."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, name={self.name!r})"

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != data shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def backward(self) -> None:
        """Reverse-mode accumulation from a scalar loss."""
        if self.data.size != 1:
            raise GraphError(f"backward requires a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # Convenience arithmetic (same-shape or scalar only; no broadcasting).
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_constant(self, np.full_like(self.data, float(other)))

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_constant(self, np.full_like(self.data, -float(other)))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def parameter(data, name: str) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _track(*tensors: Tensor) -> bool:
    return any(t.requires_grad or t._parents for t in tensors)


def _make(data: np.ndarray, parents: tuple, backward) -> Tensor:
    out = Tensor(data)
    if _track(*parents):
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = parents
        out._backward = backward
    return out


def _same_shape(a: Tensor, b: Tensor, opname: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")

    def bw(g):
        a._accumulate(g)
        b._accumulate(g)

    return _make(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")

    def bw(g):
        a._accumulate(g)
        b._accumulate(-g)

    return _make(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")

    def bw(g):
        a._accumulate(g * b.data)
        b._accumulate(g * a.data)

    return _make(a.data * b.data, (a, b), bw)


def scale(x: Tensor, c: float) -> Tensor:
    def bw(g):
        x._accumulate(g * c)

    return _make(x.data * c, (x,), bw)


def add_constant(x: Tensor, arr: np.ndarray) -> Tensor:
    """x + const; gradient passes through unchanged (straight-through)."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.shape != x.shape:
        raise ShapeError(f"add_constant: constant shape {arr.shape} != {x.shape}")

    def bw(g):
        x._accumulate(g)

    return _make(x.data + arr, (x,), bw)


def mul_constant(x: Tensor, arr: np.ndarray) -> Tensor:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.shape != x.shape:
        raise ShapeError(f"mul_constant: constant shape {arr.shape} != {x.shape}")

    def bw(g):
        x._accumulate(g * arr)

    return _make(x.data * arr, (x,), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        x._accumulate(g * mask)

    return _make(np.where(mask, x.data, 0.0), (x,), bw)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)

    def bw(g):
        x._accumulate(g * y)

    return _make(y, (x,), bw)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise ParameterDomainError("log of non-positive value")

    def bw(g):
        x._accumulate(g / x.data)

    return _make(np.log(x.data), (x,), bw)


def clamp_min(x: Tensor, floor: float) -> Tensor:
    """max(x, floor); gradient is zero where the floor is active."""
    mask = x.data > floor

    def bw(g):
        x._accumulate(g * mask)

    return _make(np.maximum(x.data, floor), (x,), bw)


def sum_all(x: Tensor) -> Tensor:
    def bw(g):
        x._accumulate(np.full_like(x.data, float(g)))

    return _make(np.array(x.data.sum()), (x,), bw)


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.size)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)

    def bw(g):
        x._accumulate(g.reshape(x.shape))

    return _make(x.data.reshape(shape), (x,), bw)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def bw(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        x._accumulate(full)

    return _make(np.ascontiguousarray(x.data[idx]), (x,), bw)


# ---------------------------------------------------------------------------
# linear algebra / network ops


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Bias addition, the only broadcasting this library allows.

    x is (N, C) with b (C,), or (N, C, H, W) with b (C,).
    """
    if b.data.ndim != 1:
        raise ShapeError("bias must be rank 1")
    if x.data.ndim == 2:
        if x.shape[1] != b.shape[0]:
            raise ShapeError(f"bias length {b.shape[0]} != features {x.shape[1]}")
        y = x.data + b.data[None, :]

        def bw(g):
            x._accumulate(g)
            b._accumulate(g.sum(axis=0))

    elif x.data.ndim == 4:
        if x.shape[1] != b.shape[0]:
            raise ShapeError(f"bias length {b.shape[0]} != channels {x.shape[1]}")
        y = x.data + b.data[None, :, None, None]

        def bw(g):
            x._accumulate(g)
            b._accumulate(g.sum(axis=(0, 2, 3)))

    else:
        raise ShapeError(f"add_bias supports rank 2 or 4 inputs, got rank {x.data.ndim}")
    return _make(y, (x, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """y = x @ w.T (+ b). x: (N, I), w: (O, I), b: (O,)."""
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ShapeError("linear expects 2-D input and weight")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input features {x.shape[1]} != weight fan-in {w.shape[1]}")
    y = x.data @ w.data.T

    def bw(g):
        x._accumulate(g @ w.data)
        w._accumulate(g.T @ x.data)

    out = _make(y, (x, w), bw)
    if b is not None:
        out = add_bias(out, b)
    return out


def conv2d_out_hw(h: int, w: int, k: int, stride: int, padding: int) -> tuple[int, int]:
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: kernel {k} does not fit input {(h, w)} with padding {padding}")
    return oh, ow


def conv2d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation). x: NCHW, w: OIkk, b: (O,)."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d expects NCHW input and OIkk weight")
    n, c, h, wd = x.shape
    o, i, kh, kw = w.shape
    if kh != kw:
        raise ShapeError("conv2d supports square kernels only")
    if c != i:
        raise ShapeError(f"conv2d: input channels {c} != weight fan-in {i}")
    if stride < 1 or padding < 0:
        raise ShapeError("conv2d: stride must be >= 1 and padding >= 0")
    k = kh
    oh, ow = conv2d_out_hw(h, wd, k, stride, padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    sn, sc, sh, sw = xp.strides
    cols = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, k, k, oh, ow),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    # (N, C, k, k, OH, OW) x (O, C, k, k) -> (N, OH, OW, O)
    y = np.tensordot(cols, w.data, axes=([1, 2, 3], [1, 2, 3])).transpose(0, 3, 1, 2)
    y = np.ascontiguousarray(y)

    def bw(g):
        # dW
        dw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))
        w._accumulate(dw)
        # dX via col2im scatter-add
        dcols = np.tensordot(w.data, g, axes=([0], [1]))  # (C, k, k, N, OH, OW)
        dxp = np.zeros_like(xp)
        for ki in range(k):
            for kj in range(k):
                dxp[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride] += (
                    dcols[:, ki, kj].transpose(1, 0, 2, 3)
                )
        if padding:
            dxp = dxp[:, :, padding : padding + h, padding : padding + wd]
        x._accumulate(dxp)

    out = _make(y, (x, w), bw)
    if b is not None:
        out = add_bias(out, b)
    return out


def gdn(x: Tensor, beta: Tensor, gamma: Tensor, inverse: bool = False) -> Tensor:
    """Generalized divisive normalization across channels per spatial position.

    Forward: y_i = x_i / sqrt(beta_i + sum_j gamma_ij x_j^2); inverse=True
    multiplies by the root instead of dividing.
    """
    if x.data.ndim not in (2, 4):
        raise ShapeError("gdn expects (N, C) or (N, C, H, W)")
    c = x.shape[1]
    if beta.shape != (c,) or gamma.shape != (c, c):
        raise ShapeError(f"gdn: beta {beta.shape} / gamma {gamma.shape} incompatible with C={c}")
    if np.any(beta.data <= 0):
        raise ParameterDomainError("gdn: beta must be strictly positive")
    if np.any(gamma.data < 0):
        raise ParameterDomainError("gdn: gamma must be non-negative")

    squeeze = x.data.ndim == 2
    xd = x.data[:, :, None, None] if squeeze else x.data
    x2 = xd * xd
    # s[n, i, h, w] = beta_i + sum_j gamma_ij x2[n, j, h, w]
    s = np.einsum("ij,njhw->nihw", gamma.data, x2) + beta.data[None, :, None, None]
    root = np.sqrt(s)
    y = xd * root if inverse else xd / root

    def bw(g):
        gd = g[:, :, None, None] if squeeze else g
        if inverse:
            # y_i = x_i s_i^{1/2}
            dx = gd * root
            common = 0.5 * gd * xd / root  # g_i x_i / (2 sqrt(s_i))
        else:
            # y_i = x_i s_i^{-1/2}
            dx = gd / root
            common = -0.5 * gd * xd / (s * root)  # -g_i x_i / (2 s^{3/2})
        # dbeta_i = sum common_i ; dgamma_ij = sum common_i x_j^2
        dbeta = common.sum(axis=(0, 2, 3))
        dgamma = np.einsum("nihw,njhw->ij", common, x2)
        # dx_k += 2 x_k sum_i common_i gamma_ik
        dx = dx + 2.0 * xd * np.einsum("nihw,ik->nkhw", common, gamma.data)
        if squeeze:
            dx = dx[:, :, 0, 0]
        x._accumulate(dx)
        beta._accumulate(dbeta)
        gamma._accumulate(dgamma)

    return _make(y[:, :, 0, 0] if squeeze else y, (x, beta, gamma), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C) spatial mean."""
    if x.data.ndim != 4:
        raise ShapeError("global_avg_pool expects NCHW")
    n, c, h, w = x.shape

    def bw(g):
        x._accumulate(np.broadcast_to(g[:, :, None, None], x.shape) / (h * w))

    return _make(x.data.mean(axis=(2, 3)), (x,), bw)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x spatial upsampling; gradient is 2x2 sum pooling."""
    if x.data.ndim != 4:
        raise ShapeError("upsample2x expects NCHW")
    n, c, h, w = x.shape
    y = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bw(g):
        x._accumulate(g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    return _make(y, (x,), bw)


def log_softmax(x: Tensor) -> Tensor:
    """Row-wise log-softmax of (N, K) logits with max-subtraction."""
    if x.data.ndim != 2:
        raise ShapeError("log_softmax expects (N, K)")
    m = x.data.max(axis=1, keepdims=True)
    z = x.data - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    ls = z - lse
    sm = np.exp(ls)

    def bw(g):
        x._accumulate(g - sm * g.sum(axis=1, keepdims=True))

    return _make(ls, (x,), bw)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of (N, K) logits against integer class labels."""
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= k:
        raise ShapeError(f"label out of range [0, {k})")
    ls = log_softmax(logits)
    picked = ls.data[np.arange(n), labels]
    loss = -picked.mean()

    def bw(g):
        gl = np.zeros_like(ls.data)
        gl[np.arange(n), labels] = -float(g) / n
        ls._accumulate(gl)

    return _make(np.array(loss), (ls,), bw)


# ---------------------------------------------------------------------------
# checkpoint serialization

CHECKPOINT_MAGIC = b"SCTW"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Raised on malformed checkpoint bytes."""


def checkpoint_bytes(named: Iterable[tuple[str, np.ndarray]]) -> bytes:
    """Serialize named float64 arrays: little-endian SCTW container."""
    entries = list(named)
    out = [CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, len(entries))]
    for name, arr in entries:
        arr = np.asarray(arr, dtype=np.float64)
        nb = name.encode("utf-8")
        out.append(struct.pack("<H", len(nb)))
        out.append(nb)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.astype("<f8").tobytes())
    return b"".join(out)


def parse_checkpoint(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    (version, count) = struct.unpack_from("<HI", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 10
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            nbytes = 8 * int(np.prod(shape)) if rank else 8
            arr = np.frombuffer(blob[pos : pos + nbytes], dtype="<f8").reshape(shape)
            if arr.size != int(np.prod(shape)):
                raise CheckpointError("truncated tensor payload")
            pos += nbytes
            out[name] = np.array(arr)
    except struct.error as e:
        raise CheckpointError(f"truncated checkpoint: {e}") from None
    return out


def save_checkpoint(path, named: Iterable[tuple[str, np.ndarray]]) -> None:
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(named))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        return parse_checkpoint(f.read())
