"""Reverse-mode automatic differentiation over dense float64 arrays.

A small tape-free (closure-graph) autodiff engine: each `Tensor` wraps a
numpy array and remembers how to push a cotangent back to its parents.
Gradients are exact reverse-mode derivatives of the composed expression.

Also hosts the parameter store, the Adam optimizer and the binary
checkpoint container used by every network in the package.
"""
from __future__ import annotations

import struct

import numpy as np

__all__ = [
    "Tensor",
    "no_grad",
    "backward",
    "concat",
    "bilinear_sample",
    "conv2d",
    "ParamStore",
    "Adam",
    "save_checkpoint",
    "load_checkpoint",
]


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class no_grad:
    """Context manager disabling graph construction (forward-only mode)."""

    def __enter__(self):
        self._prev = Tensor._grad_enabled
        Tensor._grad_enabled = False

    def __exit__(self, *exc):
        Tensor._grad_enabled = self._prev
        return False


class Tensor:
    """A dense float64 array node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    _grad_enabled = True

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None,
                 op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = parents
        self._backward = backward_fn
        self.op = op

    # ------------------------------------------------------------------ basics
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # --------------------------------------------------------------- op helper
    @staticmethod
    def _make(data, parents, backward_fn, op):
        req = Tensor._grad_enabled and any(p.requires_grad for p in parents)
        if not req:
            return Tensor(data)
        return Tensor(data, requires_grad=True, parents=parents,
                      backward_fn=backward_fn, op=op)

    @staticmethod
    def as_tensor(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    # ------------------------------------------------------------- arithmetic
    def __add__(self, other):
        other = Tensor.as_tensor(other)
        out_data = self.data + other.data

        def bw(g):
            return (_unbroadcast(g, self.data.shape),
                    _unbroadcast(g, other.data.shape))

        return Tensor._make(out_data, (self, other), bw, "add")

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other):
        return self + (-Tensor.as_tensor(other))

    def __rsub__(self, other):
        return Tensor.as_tensor(other) + (-self)

    def __mul__(self, other):
        other = Tensor.as_tensor(other)
        out_data = self.data * other.data

        def bw(g):
            return (_unbroadcast(g * other.data, self.data.shape),
                    _unbroadcast(g * self.data, other.data.shape))

        return Tensor._make(out_data, (self, other), bw, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor.as_tensor(other)
        out_data = self.data / other.data

        def bw(g):
            ga = _unbroadcast(g / other.data, self.data.shape)
            gb = _unbroadcast(-g * self.data / (other.data ** 2),
                              other.data.shape)
            return ga, gb

        return Tensor._make(out_data, (self, other), bw, "div")

    def __rtruediv__(self, other):
        return Tensor.as_tensor(other) / self

    def __pow__(self, k):
        if not isinstance(k, (int, float)):
            raise TypeError("only scalar exponents are supported")
        out_data = self.data ** k

        def bw(g):
            return (g * k * self.data ** (k - 1),)

        return Tensor._make(out_data, (self,), bw, "pow")

    def __matmul__(self, other):
        other = Tensor.as_tensor(other)
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise ValueError("matmul expects 2-D operands")
        out_data = self.data @ other.data

        def bw(g):
            return g @ other.data.T, self.data.T @ g

        return Tensor._make(out_data, (self, other), bw, "matmul")

    # ------------------------------------------------------------ elementwise
    def exp(self):
        out_data = np.exp(self.data)
        return Tensor._make(out_data, (self,), lambda g: (g * out_data,), "exp")

    def log(self):
        return Tensor._make(np.log(self.data), (self,),
                            lambda g: (g / self.data,), "log")

    def sqrt(self):
        out_data = np.sqrt(self.data)
        return Tensor._make(out_data, (self,),
                            lambda g: (g * 0.5 / out_data,), "sqrt")

    def sin(self):
        return Tensor._make(np.sin(self.data), (self,),
                            lambda g: (g * np.cos(self.data),), "sin")

    def cos(self):
        return Tensor._make(np.cos(self.data), (self,),
                            lambda g: (-g * np.sin(self.data),), "cos")

    def relu(self):
        mask = self.data > 0.0
        return Tensor._make(self.data * mask, (self,),
                            lambda g: (g * mask,), "relu")

    def sigmoid(self):
        out_data = 1.0 / (1.0 + np.exp(-self.data))
        return Tensor._make(out_data, (self,),
                            lambda g: (g * out_data * (1.0 - out_data),),
                            "sigmoid")

    def softplus(self):
        # log(1 + e^x), stable form; derivative is sigmoid(x)
        out_data = np.logaddexp(0.0, self.data)

        def bw(g):
            return (g / (1.0 + np.exp(-self.data)),)

        return Tensor._make(out_data, (self,), bw, "softplus")

    # -------------------------------------------------------------- reductions
    def sum(self, axis=None, keepdims=False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def bw(g):
            g = np.asarray(g)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, self.data.shape).copy(),)

        return Tensor._make(out_data, (self,), bw, "sum")

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def cumsum(self, axis):
        out_data = np.cumsum(self.data, axis=axis)

        def bw(g):
            return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

        return Tensor._make(out_data, (self,), bw, "cumsum")

    # ------------------------------------------------------------ shape moves
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out_data = self.data.reshape(shape)
        src = self.data.shape
        return Tensor._make(out_data, (self,),
                            lambda g: (g.reshape(src),), "reshape")

    def transpose(self, *axes):
        axes = axes or tuple(reversed(range(self.data.ndim)))
        inv = np.argsort(axes)
        return Tensor._make(self.data.transpose(axes), (self,),
                            lambda g: (g.transpose(inv),), "transpose")

    @property
    def T(self):
        return self.transpose()

    def __getitem__(self, idx):
        out_data = self.data[idx]
        src_shape = self.data.shape

        def bw(g):
            full = np.zeros(src_shape)
            np.add.at(full, idx, g)
            return (full,)

        return Tensor._make(out_data, (self,), bw, "slice")


def concat(tensors, axis=0) -> Tensor:
    tensors = [Tensor.as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(out_data, tuple(tensors), bw, "concat")


def bilinear_sample(fmap: Tensor, coords: Tensor) -> Tensor:
    """Bilinear gather from a (C, H, W) feature map at (P, 2) pixel coords.

    Coordinates are (x, y) with pixel centers at integer positions and are
    clamped to the valid interpolation domain [0, W-1] x [0, H-1].
    Differentiable w.r.t. both the map and the coordinates (the coordinate
    gradient is the piecewise-constant derivative of the bilinear patch).
    """
    fmap = Tensor.as_tensor(fmap)
    coords = Tensor.as_tensor(coords)
    if np.isnan(coords.data).any():
        raise ValueError("bilinear_sample: NaN pixel coordinates")
    C, H, W = fmap.data.shape
    x = np.clip(coords.data[:, 0], 0.0, W - 1.0)
    y = np.clip(coords.data[:, 1], 0.0, H - 1.0)
    x0 = np.minimum(np.floor(x), W - 2.0).astype(np.int64) if W > 1 else np.zeros(len(x), np.int64)
    y0 = np.minimum(np.floor(y), H - 2.0).astype(np.int64) if H > 1 else np.zeros(len(y), np.int64)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = x - x0
    fy = y - y0

    f = fmap.data
    v00 = f[:, y0, x0]  # (C, P)
    v01 = f[:, y0, x1]
    v10 = f[:, y1, x0]
    v11 = f[:, y1, x1]
    w00 = (1 - fx) * (1 - fy)
    w01 = fx * (1 - fy)
    w10 = (1 - fx) * fy
    w11 = fx * fy
    out_data = (v00 * w00 + v01 * w01 + v10 * w10 + v11 * w11).T  # (P, C)

    in_x = (coords.data[:, 0] > 0.0) & (coords.data[:, 0] < W - 1.0)
    in_y = (coords.data[:, 1] > 0.0) & (coords.data[:, 1] < H - 1.0)

    def bw(g):
        gT = g.T  # (C, P)
        gmap = np.zeros_like(f)
        np.add.at(gmap, (slice(None), y0, x0), gT * w00)
        np.add.at(gmap, (slice(None), y0, x1), gT * w01)
        np.add.at(gmap, (slice(None), y1, x0), gT * w10)
        np.add.at(gmap, (slice(None), y1, x1), gT * w11)
        dvdx = ((v01 - v00) * (1 - fy) + (v11 - v10) * fy) * in_x
        dvdy = ((v10 - v00) * (1 - fx) + (v11 - v01) * fx) * in_y
        gcoords = np.stack([(gT * dvdx).sum(axis=0),
                            (gT * dvdy).sum(axis=0)], axis=1)
        return gmap, gcoords

    return Tensor._make(out_data, (fmap, coords), bw, "bilinear-gather")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride=1) -> Tensor:
    """3x3 convolution with zero padding 1 over a (C_in, H, W) input.

    Output has shape (C_out, ceil(H/stride) ...) following the usual
    floor((H + 2p - k) / stride) + 1 rule with p=1, k=3.
    """
    x = Tensor.as_tensor(x)
    weight = Tensor.as_tensor(weight)
    bias = Tensor.as_tensor(bias)
    Cin, H, W = x.data.shape
    Cout, Cin_w, kh, kw = weight.data.shape
    if Cin_w != Cin or (kh, kw) != (3, 3):
        raise ValueError("conv2d expects a (C_out, C_in, 3, 3) kernel")
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (Cin, Ho, Wo, 3, 3)
    Ho, Wo = win.shape[1], win.shape[2]
    cols = win.transpose(1, 2, 0, 3, 4).reshape(Ho * Wo, Cin * 9)
    wmat = weight.data.reshape(Cout, Cin * 9)
    out_data = (cols @ wmat.T + bias.data).T.reshape(Cout, Ho, Wo)

    def bw(g):
        gflat = g.reshape(Cout, Ho * Wo).T  # (HoWo, Cout)
        gw = (gflat.T @ cols).reshape(Cout, Cin, 3, 3)
        gb = gflat.sum(axis=0)
        gcols = gflat @ wmat  # (HoWo, Cin*9)
        gcols = gcols.reshape(Ho, Wo, Cin, 3, 3)
        gxp = np.zeros_like(xp)
        for di in range(3):
            for dj in range(3):
                np.add.at(
                    gxp,
                    (slice(None),
                     slice(di, di + Ho * stride, stride),
                     slice(dj, dj + Wo * stride, stride)),
                    gcols[:, :, :, di, dj].transpose(2, 0, 1))
        return gxp[:, 1:1 + H, 1:1 + W], gw, gb

    return Tensor._make(out_data, (x, weight, bias), bw, "conv2d")


# ----------------------------------------------------------------- backward
def backward(root: Tensor, nan_check: bool = False) -> None:
    """Run reverse-mode accumulation from a scalar `root`.

    Populates `.grad` on every reachable tensor with `requires_grad`.
    A second backward through the same root is forbidden.
    """
    if root.data.size != 1:
        raise ValueError("backward root must be a scalar")
    if getattr(root, "grad", None) is not None and root.op == "_done":
        raise RuntimeError("backward was already run on this graph root")

    topo, seen = [], set()
    stack = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    root.grad = np.ones_like(root.data)
    for node in reversed(topo):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        if nan_check:
            for g in grads:
                if not np.isfinite(g).all():
                    raise FloatingPointError(
                        f"non-finite gradient in backward of op {node.op!r}")
        for parent, g in zip(node._parents, grads):
            if not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.data)
            parent.grad += g
    root.op = "_done"


# ---------------------------------------------------------------- parameters
class ParamStore:
    """Named parameter tensors with deterministic (sorted) iteration order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return sorted(self._params)

    def items(self):
        for name in self.names():
            yield name, self._params[name]

    def zero_grad(self):
        for _, t in self.items():
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.items()}

    def load_state(self, state: dict[str, np.ndarray]):
        if sorted(state) != self.names():
            missing = set(self.names()) ^ set(state)
            raise KeyError(f"parameter name mismatch: {sorted(missing)}")
        for name, value in state.items():
            t = self._params[name]
            if t.data.shape != value.shape:
                raise ValueError(
                    f"shape mismatch for {name!r}: "
                    f"{t.data.shape} vs {value.shape}")
            t.data = np.array(value, dtype=np.float64)


class Adam:
    """Adam with bias correction and a constant learning rate."""

    def __init__(self, params: ParamStore, lr: float = 5e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}

    def step(self):
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise FloatingPointError(f"NaN/Inf gradient for parameter {name!r}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# --------------------------------------------------------------- checkpoints
_MAGIC = b"DFCKPT01"


def _write_record(fh, name: str, arr: np.ndarray):
    nb = name.encode("utf-8")
    fh.write(struct.pack("<I", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_record(fh):
    raw = fh.read(4)
    if len(raw) < 4:
        raise IOError("truncated checkpoint record")
    (nlen,) = struct.unpack("<I", raw)
    name = fh.read(nlen).decode("utf-8")
    (ndim,) = struct.unpack("<I", fh.read(4))
    shape = struct.unpack(f"<{ndim}q", fh.read(8 * ndim)) if ndim else ()
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape)
    return name, data.astype(np.float64)


def save_checkpoint(path, params: ParamStore, optimizer: Adam | None = None):
    """Write parameters (and optimizer moments) to a binary container.

    Layout: magic, record count (u32), then (name-length u32, utf-8 name,
    ndim u32, shape int64[], little-endian float64 payload) per record.
    Optimizer moments are stored under reserved "__adam_m/"-style prefixes.
    """
    records = list(params.items())
    extra = []
    if optimizer is not None:
        for name in params.names():
            extra.append((f"__adam_m/{name}", optimizer.m[name]))
            extra.append((f"__adam_v/{name}", optimizer.v[name]))
        extra.append(("__adam_step", np.array(float(optimizer.step_count))))
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(records) + len(extra)))
        for name, t in records:
            _write_record(fh, name, t.data)
        for name, arr in extra:
            _write_record(fh, name, np.asarray(arr, dtype=np.float64))


def load_checkpoint(path, params: ParamStore, optimizer: Adam | None = None):
    """Restore parameters (and optimizer state) written by save_checkpoint."""
    with open(path, "rb") as fh:
        if fh.read(8) != _MAGIC:
            raise IOError(f"{path}: not a checkpoint file")
        (count,) = struct.unpack("<I", fh.read(4))
        state, adam_m, adam_v, adam_step = {}, {}, {}, None
        for _ in range(count):
            name, arr = _read_record(fh)
            if name.startswith("__adam_m/"):
                adam_m[name[len("__adam_m/"):]] = arr
            elif name.startswith("__adam_v/"):
                adam_v[name[len("__adam_v/"):]] = arr
            elif name == "__adam_step":
                adam_step = int(arr)
            else:
                state[name] = arr
    params.load_state(state)
    if optimizer is not None:
        if adam_step is None:
            raise IOError(f"{path}: checkpoint has no optimizer state")
        optimizer.step_count = adam_step
        for name in params.names():
            optimizer.m[name] = adam_m[name].copy()
            optimizer.v[name] = adam_v[name].copy()
