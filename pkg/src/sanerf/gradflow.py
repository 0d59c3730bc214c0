"""Differentiable substrate: tensor ops, parameter storage, Adam, checkpoints.

Values are ``torch.Tensor`` objects; reverse-mode gradients come from torch
autograd. This module adds what the rest of the package relies on beyond
that: shape-checked op wrappers with typed errors, a named parameter store
with deterministic ordering, a hand-written Adam whose moments live in the
store, and a byte-stable checkpoint format.

Checkpoint layout (all integers little-endian)::

    offset 0   8 bytes   magic b"SNRFCKPT"
    offset 8   8 bytes   uint64 length N of the JSON index
    offset 16  N bytes   UTF-8 JSON index (sorted keys, no whitespace)
    offset 16+N          raw array payload

The index holds ``{"arrays": [{"name", "dtype", "shape", "offset",
"nbytes"}, ...], "meta": {...}}``. Offsets are relative to the payload
start and every array is stored C-contiguous little-endian.
"""

from __future__ import annotations

import json
import math
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
import torch
import torch.nn.functional as F

Value = torch.Tensor

MAGIC = b"SNRFCKPT"


class GradflowError(Exception):
    pass


class ShapeError(GradflowError, ValueError):
    """Operand shapes do not conform for the named op."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {', '.join(str(s) for s in self.shapes)}")


class NonFiniteGradientError(GradflowError, FloatingPointError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"non-finite gradient in parameter {name!r}")


# ---------------------------------------------------------------------------
# ops


def _broadcast_shape(op, a, b):
    try:
        return torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError(op, a.shape, b.shape) from None


def add(a: Value, b: Value) -> Value:
    _broadcast_shape("add", a, b)
    return a + b


def mul(a: Value, b: Value) -> Value:
    _broadcast_shape("mul", a, b)
    return a * b


def matmul(a: Value, b: Value) -> Value:
    if a.ndim == 0 or b.ndim == 0 or a.shape[-1] != b.shape[0 if b.ndim == 1 else -2]:
        raise ShapeError("matmul", a.shape, b.shape)
    return a @ b


def exp(a: Value) -> Value:
    return torch.exp(a)


def sin(a: Value) -> Value:
    return torch.sin(a)


def cos(a: Value) -> Value:
    return torch.cos(a)


def relu(a: Value) -> Value:
    return torch.relu(a)


def reciprocal(a: Value) -> Value:
    return torch.reciprocal(a)


def sum(a: Value, dim=None, keepdim: bool = False) -> Value:  # noqa: A001
    if dim is None:
        return a.sum()
    return a.sum(dim=dim, keepdim=keepdim)


def broadcast(a: Value, shape) -> Value:
    try:
        return a.expand(*shape)
    except RuntimeError:
        raise ShapeError("broadcast", a.shape, shape) from None


def slice(a: Value, index) -> Value:  # noqa: A001
    try:
        return a[index]
    except IndexError:
        raise ShapeError("slice", a.shape) from None


def concat(values: Iterable[Value], dim: int = -1) -> Value:
    values = list(values)
    try:
        return torch.cat(values, dim=dim)
    except RuntimeError:
        raise ShapeError("concat", *(v.shape for v in values)) from None


def softplus(a: Value) -> Value:
    return F.softplus(a)


def sigmoid(a: Value) -> Value:
    return torch.sigmoid(a)


def conv2d_output_size(size: int, stride: int) -> int:
    return -(-size // stride)


def conv2d(x: Value, weight: Value, bias: Value | None = None, stride: int = 2) -> Value:
    """Zero-padded 2D convolution with ``ceil(size / stride)`` output extent.

    ``x`` is (B, C, H, W) or (C, H, W); ``weight`` is (C_out, C_in, k, k)
    with odd ``k``.
    """
    squeeze = x.ndim == 3
    if squeeze:
        x = x.unsqueeze(0)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError("conv2d", x.shape, weight.shape)
    k = weight.shape[-1]
    if weight.shape[-2] != k or k % 2 == 0:
        raise ShapeError("conv2d", x.shape, weight.shape)
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError("conv2d", weight.shape, bias.shape)
    h, w = x.shape[-2:]
    # torch pads symmetrically; pad the bottom/right remainder explicitly so
    # every stride yields ceil(size / stride) outputs.
    pad = k // 2
    need_h = max((conv2d_output_size(h, stride) - 1) * stride + k - h - 2 * pad, 0)
    need_w = max((conv2d_output_size(w, stride) - 1) * stride + k - w - 2 * pad, 0)
    if need_h or need_w:
        x = F.pad(x, (0, need_w, 0, need_h))
    y = F.conv2d(x, weight, bias, stride=stride, padding=pad)
    return y[0] if squeeze else y


def global_avg_pool(x: Value) -> Value:
    if x.ndim < 2:
        raise ShapeError("global_avg_pool", x.shape)
    return x.mean(dim=(-2, -1))


# ---------------------------------------------------------------------------
# parameters


class ParamStore:
    """Named trainable leaves plus Adam moments and a step counter.

    Insertion order is the iteration order, so two stores built by the same
    code enumerate parameters identically.
    """

    def __init__(self, dtype: torch.dtype = torch.float32):
        self.dtype = dtype
        self._params: OrderedDict[str, Value] = OrderedDict()
        self._m: dict[str, Value] = {}
        self._v: dict[str, Value] = {}
        self.step = 0

    def add(self, name: str, data, trainable: bool = True) -> Value:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = torch.as_tensor(np.asarray(data), dtype=self.dtype).clone()
        t.requires_grad_(trainable)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Value:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self._params if n.startswith(prefix)]

    def trainable(self) -> list[tuple[str, Value]]:
        return [(n, p) for n, p in self._params.items() if p.requires_grad]

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def set_trainable(self, prefix: str, flag: bool) -> None:
        for n, p in self._params.items():
            if n.startswith(prefix):
                p.requires_grad_(flag)

    def to_numpy(self) -> dict[str, np.ndarray]:
        return {n: p.detach().cpu().numpy().copy() for n, p in self._params.items()}

    def moments(self, name: str):
        return self._m.get(name), self._v.get(name)

    def count(self) -> int:
        return int(np.sum([p.numel() for p in self._params.values()]))


def backward(loss: Value, params: ParamStore | None = None) -> None:
    """Populate ``.grad`` on every reachable trainable leaf.

    Gradients are written fresh (previous gradients are cleared first), so
    each call yields exactly d(loss)/d(leaf).
    """
    if loss.numel() != 1 or loss.ndim > 1:
        raise GradflowError(f"backward requires a scalar loss, got shape {tuple(loss.shape)}")
    if params is not None:
        params.zero_grad()
    loss.reshape(()).backward()
    if params is not None:
        for n, p in params.trainable():
            if p.grad is None:
                p.grad = torch.zeros_like(p)


def adam_step(
    params: ParamStore,
    lr: float = 5e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> ParamStore:
    """One bias-corrected Adam update over every trainable parameter with a
    populated gradient. Parameters without a gradient are left untouched."""
    grads = [(n, p) for n, p in params.trainable() if p.grad is not None]
    if not grads:
        return params
    names = [n for n, _ in grads]
    ps = [p for _, p in grads]
    gs = [p.grad for p in ps]
    norms = torch.stack(torch._foreach_norm(gs))
    if not bool(torch.isfinite(norms).all()):
        bad = int((~torch.isfinite(norms)).nonzero()[0, 0])
        raise NonFiniteGradientError(names[bad])
    params.step += 1
    t = params.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for n, p in grads:
        if n not in params._m:
            params._m[n] = torch.zeros_like(p)
            params._v[n] = torch.zeros_like(p)
    ms = [params._m[n] for n in names]
    vs = [params._v[n] for n in names]
    with torch.no_grad():
        torch._foreach_mul_(ms, beta1)
        torch._foreach_add_(ms, gs, alpha=1.0 - beta1)
        torch._foreach_mul_(vs, beta2)
        torch._foreach_addcmul_(vs, gs, gs, value=1.0 - beta2)
        # zero second moments hit a slow sqrt path; the clamp is below eps
        denom = torch._foreach_clamp_min(vs, torch.finfo(vs[0].dtype).tiny)
        torch._foreach_sqrt_(denom)
        torch._foreach_div_(denom, math.sqrt(bc2))
        torch._foreach_add_(denom, eps)
        torch._foreach_addcdiv_(ps, ms, denom, value=-lr / bc1)
    return params


# ---------------------------------------------------------------------------
# checkpoints


def _le(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    if arr.dtype.byteorder == ">" or (arr.dtype.byteorder == "=" and not _little()):
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    return arr


def _little() -> bool:
    import sys

    return sys.byteorder == "little"


def save_checkpoint(path, params: ParamStore, meta: dict | None = None) -> None:
    arrays: list[tuple[str, np.ndarray]] = []
    for n, p in params.items():
        arrays.append((f"param/{n}", p.detach().cpu().numpy()))
    for n in params:
        if n in params._m:
            arrays.append((f"adam_m/{n}", params._m[n].detach().cpu().numpy()))
            arrays.append((f"adam_v/{n}", params._v[n].detach().cpu().numpy()))
    index = []
    blobs = []
    offset = 0
    for name, arr in arrays:
        arr = _le(arr)
        raw = arr.tobytes(order="C")
        index.append(
            {
                "name": name,
                "dtype": arr.dtype.newbyteorder("<").str,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        blobs.append(raw)
        offset += len(raw)
    trainable = [n for n, p in params.items() if p.requires_grad]
    header = {
        "arrays": index,
        "meta": meta or {},
        "step": params.step,
        "dtype": str(params.dtype).replace("torch.", ""),
        "trainable": trainable,
    }
    js = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(js)))
        fh.write(js)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> tuple[ParamStore, dict]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise GradflowError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16 : 16 + n].decode("utf-8"))
    base = 16 + n
    store = ParamStore(dtype=getattr(torch, header["dtype"]))
    store.step = int(header["step"])
    trainable = set(header["trainable"])
    for entry in header["arrays"]:
        raw = data[base + entry["offset"] : base + entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        kind, name = entry["name"].split("/", 1)
        t = torch.from_numpy(arr.copy())
        if kind == "param":
            t.requires_grad_(name in trainable)
            store._params[name] = t
        elif kind == "adam_m":
            store._m[name] = t
        elif kind == "adam_v":
            store._v[name] = t
    return store, header["meta"]


def finite_difference_grad(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``fn`` at ``x`` (float64)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = float(fn(x))
        flat[i] = old - h
        fm = float(fn(x))
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def max_relative_error(a, b, floor: float = 1e-8) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / scale)) if a.size else 0.0


def lr_at(step: int, total: int, lr0: float, lr_final: float) -> float:
    """Exponential decay from ``lr0`` to ``lr_final`` over ``total`` steps."""
    if total <= 0 or lr0 <= 0:
        return lr0
    frac = min(step / total, 1.0)
    return lr0 * math.exp(frac * math.log(lr_final / lr0))
