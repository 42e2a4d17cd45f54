"""Minimal reverse-mode autodiff over numpy float64 arrays.

Operations executed inside ``with Tape():`` are recorded; :func:`backward`
replays their backward rules in reverse order. Outside a tape the same
functions just compute values, which is what inference uses.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "AutodiffError",
    "NonFiniteError",
    "ConfigError",
    "backward",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "tsum",
    "matmul",
    "relu",
    "exp",
    "log",
    "clamp_min",
    "square",
    "reshape",
    "take_rows",
    "pick",
    "conv2d",
    "log_softmax",
    "softmax",
    "log_prob",
    "ModelParams",
    "init_params",
    "forward",
    "OptimizerState",
    "sgd_step",
    "zero_grad",
    "save_params",
    "load_params",
]


class AutodiffError(RuntimeError):
    """Misuse of the tape (detached root, double backward, ...)."""


class NonFiniteError(ValueError):
    """A tensor would contain NaN or Inf."""


class ConfigError(ValueError):
    """Shape or configuration mismatch."""


class Tensor:
    """Dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "_log")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor data must be finite")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None
        # log-probabilities this tensor was exponentiated from (softmax outputs)
        self._log: Tensor | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item()

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _raise_item():
    raise ConfigError("item() needs a single-element tensor")


@dataclass
class _Record:
    out: Tensor
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of differentiable operations."""

    _stack: list["Tape"] = []

    def __init__(self):
        self.records: list[_Record] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.pop()

    def reset(self) -> None:
        self.records.clear()
        self.consumed = False

    @staticmethod
    def active() -> "Tape | None":
        return Tape._stack[-1] if Tape._stack else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data: np.ndarray, inputs: tuple, bw) -> Tensor:
    out = Tensor.__new__(Tensor)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError("operation produced non-finite values")
    out.data = data
    out.grad = None
    out._log = None
    out._tape = None
    tape = Tape.active()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape.records.append(_Record(out, inputs, bw))
    else:
        out.requires_grad = False
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(root: Tensor) -> None:
    """Populate ``.grad`` of every requires_grad tensor that ``root`` depends on.

    Gradients accumulate into existing ``.grad`` buffers, so several roots
    (e.g. one per image of a batch) can be backpropagated before a step.
    """
    if root.data.size != 1:
        raise AutodiffError("backward() needs a scalar root")
    tape = root._tape
    if tape is None or not root.requires_grad:
        raise AutodiffError("root is not connected to a tape")
    if tape.consumed:
        raise AutodiffError("tape already replayed; call reset() and rerun the forward pass")
    tape.consumed = True
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    owners: dict[int, Tensor] = {id(root): root}
    for rec in reversed(tape.records):
        g = grads.get(id(rec.out))
        if g is None:
            continue
        for t, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            k = id(t)
            if k in grads:
                grads[k] = grads[k] + gi
            else:
                grads[k] = gi
                owners[k] = t
    for k, g in grads.items():
        t = owners[k]
        t.grad = g.copy() if t.grad is None else t.grad + g
    # records reference their outputs, which reference the tape: drop them so
    # the activations are freed now rather than by the cycle collector
    tape.records.clear()


# -- elementwise / reductions --------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _emit(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _emit(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _emit(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _emit(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a Python scalar constant."""
    c = float(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        return _emit(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))
    ax = axis % a.data.ndim
    return _emit(a.data.sum(axis=ax), (a,), lambda g: (np.broadcast_to(np.expand_dims(g, ax), a.shape).copy(),))


def square(a: Tensor) -> Tensor:
    return _emit(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _emit(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _emit(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NonFiniteError("log of a non-positive value")
    return _emit(np.log(a.data), (a,), lambda g: (g / a.data,))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor); the gradient is cut where the floor is active."""
    keep = a.data >= floor
    return _emit(np.where(keep, a.data, floor), (a,), lambda g: (g * keep,))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ConfigError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    return _emit(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """``a[idx]`` along the first axis, with scatter-add backward."""
    idx = np.asarray(idx, dtype=np.int64)

    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _emit(a.data[idx], (a,), bw)


def pick(a: Tensor, labels: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Gather ``a[..., labels]`` per position, optionally only where ``mask``.

    ``a`` has shape (..., K) and ``labels`` the leading shape. Returns a 1-D
    tensor of the selected entries in row-major order.
    """
    k = a.shape[-1]
    flat = a.data.reshape(-1, k)
    lab = np.asarray(labels).reshape(-1)
    rows = np.arange(len(lab)) if mask is None else np.flatnonzero(np.asarray(mask).reshape(-1))
    cols = lab[rows].astype(np.int64)
    if cols.size and (cols.min() < 0 or cols.max() >= k):
        raise ConfigError("label index out of range")

    def bw(g):
        out = np.zeros_like(flat)
        out[rows, cols] = g
        return (out.reshape(a.shape),)

    return _emit(flat[rows, cols], (a,), bw)


# -- softmax family ------------------------------------------------------------


def log_softmax(x: Tensor) -> Tensor:
    """Log-softmax over the last axis (max-shifted)."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _emit(out, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def softmax(logits: Tensor) -> Tensor:
    """Per-pixel class probabilities; remembers its log-probabilities."""
    ls = log_softmax(logits)
    q = exp(ls)
    q._log = ls
    return q


def log_prob(q: Tensor, floor: float = 1e-12) -> Tensor:
    """log q, exact for softmax outputs, floored at ``floor`` otherwise."""
    if q._log is not None:
        return q._log
    return log(clamp_min(q, floor))


# -- convolution ---------------------------------------------------------------


def _im2col(xp: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(0, 1))
    # win: (h, w, C, k, k) -> (h*w, k*k*C) ordered as (dy, dx, c)
    return win.transpose(0, 1, 3, 4, 2).reshape(h * w, -1)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Same-padded 2-D convolution of an (H, W, Cin) map.

    ``weight`` has shape (k, k, Cin, Cout) with odd k, ``bias`` (Cout,).
    """
    if x.data.ndim != 3:
        raise ConfigError(f"conv2d expects (H, W, C) input, got {x.shape}")
    k, k2, cin, cout = weight.shape
    if k != k2 or k % 2 == 0:
        raise ConfigError("conv2d needs a square, odd kernel")
    h, w, c = x.shape
    if c != cin:
        raise ConfigError(f"conv2d channel mismatch: input has {c}, kernel expects {cin}")
    if bias.shape != (cout,):
        raise ConfigError("conv2d bias shape mismatch")
    r = k // 2
    xp = np.pad(x.data, ((r, r), (r, r), (0, 0))) if r else x.data
    cols = _im2col(xp, k, h, w)
    wm = weight.data.reshape(-1, cout)
    out = (cols @ wm + bias.data).reshape(h, w, cout)

    def bw(g):
        g2 = g.reshape(h * w, cout)
        gw = (cols.T @ g2).reshape(weight.shape)
        gb = g2.sum(axis=0)
        gcols = (g2 @ wm.T).reshape(h, w, k, k, cin)
        gxp = np.zeros_like(xp)
        for dy in range(k):
            for dx in range(k):
                gxp[dy : dy + h, dx : dx + w] += gcols[:, :, dy, dx, :]
        gx = gxp[r : r + h, r : r + w] if r else gxp
        return gx, gw, gb

    return _emit(out, (x, weight, bias), bw)


# -- model -------------------------------------------------------------------


@dataclass
class ModelParams:
    """Micro segmentation net: ``depth`` 3x3 conv+ReLU layers, then a 1x1 head."""

    in_channels: int
    hidden: int
    depth: int
    n_classes: int
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def names(self) -> list[str]:
        return list(self.tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def num_params(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values()))

    def flat(self) -> np.ndarray:
        return np.concatenate([t.data.ravel() for t in self.tensors.values()])

    def set_flat(self, vec: np.ndarray) -> None:
        off = 0
        for name, t in self.tensors.items():
            n = t.data.size
            self.tensors[name] = Tensor(vec[off : off + n].reshape(t.shape), requires_grad=True)
            off += n

    def clone(self) -> "ModelParams":
        return ModelParams(
            self.in_channels,
            self.hidden,
            self.depth,
            self.n_classes,
            {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.tensors.items()},
        )

    def layer_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        shapes = []
        cin = self.in_channels
        for i in range(self.depth):
            shapes.append((f"conv{i}.w", (3, 3, cin, self.hidden)))
            shapes.append((f"conv{i}.b", (self.hidden,)))
            cin = self.hidden
        shapes.append(("head.w", (1, 1, cin, self.n_classes)))
        shapes.append(("head.b", (self.n_classes,)))
        return shapes


def init_params(
    in_channels: int = 3,
    n_classes: int = 4,
    hidden: int = 16,
    depth: int = 4,
    seed: int = 0,
) -> ModelParams:
    """He-scaled normal weights, zero biases."""
    rng = np.random.default_rng(seed)
    p = ModelParams(in_channels, hidden, depth, n_classes)
    for name, shape in p.layer_shapes():
        if name.endswith(".b"):
            data = np.zeros(shape)
        else:
            fan_in = shape[0] * shape[1] * shape[2]
            data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        p.tensors[name] = Tensor(data, requires_grad=True)
    return p


def forward(params: ModelParams, image) -> Tensor:
    """Logits (H, W, K) for an (H, W, C) image."""
    x = _as_tensor(image)
    if x.data.ndim != 3 or x.shape[2] != params.in_channels:
        raise ConfigError(f"image shape {x.shape} does not match {params.in_channels} input channels")
    for i in range(params.depth):
        x = relu(conv2d(x, params[f"conv{i}.w"], params[f"conv{i}.b"]))
    return conv2d(x, params["head.w"], params["head.b"])


# -- optimizer -------------------------------------------------------------------


@dataclass
class OptimizerState:
    base_lr: float
    momentum: float = 0.9
    power: float = 0.9
    total_steps: int = 1
    step: int = 0
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def rate(self, step: int | None = None) -> float:
        s = self.step if step is None else step
        frac = min(max(s / max(self.total_steps, 1), 0.0), 1.0)
        return self.base_lr * (1.0 - frac) ** self.power


def zero_grad(params: ModelParams) -> None:
    for t in params.tensors.values():
        t.grad = None


def sgd_step(params: ModelParams, state: OptimizerState) -> None:
    """Momentum SGD: v <- mu v + g; w <- w - rate * v. Clears grads."""
    missing = [k for k, t in params.tensors.items() if t.grad is None]
    if missing:
        raise AutodiffError(f"no gradient for parameters {missing}")
    lr = state.rate()
    for name, t in params.tensors.items():
        v = state.buffers.get(name)
        v = t.grad.copy() if v is None else state.momentum * v + t.grad
        state.buffers[name] = v
        params.tensors[name] = Tensor(t.data - lr * v, requires_grad=True)
    state.step += 1


# -- checkpoints -------------------------------------------------------------

_MAGIC = b"TRSEGCK1"


def save_params(params: ModelParams, fh: BinaryIO) -> None:
    """Flat little-endian checkpoint: magic, layer spec, then named float64 blocks."""
    fh.write(_MAGIC)
    fh.write(struct.pack("<4I", params.in_channels, params.hidden, params.depth, params.n_classes))
    fh.write(struct.pack("<I", len(params.tensors)))
    for name, t in params.tensors.items():
        raw = name.encode("ascii")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<I", t.data.ndim))
        fh.write(struct.pack(f"<{t.data.ndim}I", *t.shape))
        fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_params(fh: BinaryIO) -> ModelParams:
    if fh.read(len(_MAGIC)) != _MAGIC:
        raise ConfigError("not a model checkpoint (bad magic)")
    cin, hidden, depth, k = struct.unpack("<4I", fh.read(16))
    (count,) = struct.unpack("<I", fh.read(4))
    p = ModelParams(cin, hidden, depth, k)
    for _ in range(count):
        (ln,) = struct.unpack("<I", fh.read(4))
        name = fh.read(ln).decode("ascii")
        (nd,) = struct.unpack("<I", fh.read(4))
        shape = struct.unpack(f"<{nd}I", fh.read(4 * nd))
        n = int(np.prod(shape)) if nd else 1
        buf = fh.read(8 * n)
        if len(buf) != 8 * n:
            raise ConfigError("truncated checkpoint")
        p.tensors[name] = Tensor(np.frombuffer(buf, dtype="<f8").reshape(shape).copy(), requires_grad=True)
    expected = [n for n, _ in p.layer_shapes()]
    if list(p.tensors) != expected:
        raise ConfigError("checkpoint parameters do not match its layer spec")
    return p
