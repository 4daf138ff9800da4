"""A small reverse-mode autodiff layer over numpy.

Only the fixed vocabulary of ops needed by the transformer towers is
supported. Every op records a closure that maps the output gradient to its
parents' gradients; ``Tensor.backward`` replays them in reverse topological
order.
"""

from __future__ import annotations

import base64
import contextlib
import hashlib
import json
import math
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import NumericError, ShapeError
from .seeding import mix

CHECK_FINITE = True
_GRAD_ENABLED = True
FORMAT_VERSION = 1


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._prev: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self, grad: Optional[np.ndarray] = None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = grad
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if node._prev:
                    node._backward = None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _finish(out: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if CHECK_FINITE and not np.isfinite(out).all():
        raise NumericError(f"non-finite value produced by {op}")
    t = Tensor(out)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._prev = tuple(parents)
        t._backward = backward
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise -----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))
    return _finish(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))
    return _finish(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))
    return _finish(a.data * b.data, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    def bw(g):
        _accum(a, g * c)
    return _finish(a.data * c, (a,), bw, "scale")


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: zero each entry with probability ``rate`` and rescale the rest."""
    if rate <= 0.0:
        return a
    keep = (rng.random(a.shape) >= rate).astype(a.data.dtype) / (1.0 - rate)

    def bw(g):
        _accum(a, g * keep)
    return _finish(a.data * keep, (a,), bw, "dropout")


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)

    def bw(g):
        _accum(a, g * y * (1.0 - y))
    return _finish(y, (a,), bw, "sigmoid")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(a)), computed without overflow."""
    x = a.data
    y = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))

    def bw(g):
        _accum(a, g * _sigmoid(x))
    return _finish(y, (a,), bw, "softplus")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bw(g):
        _accum(a, g * mask)
    return _finish(a.data * mask, (a,), bw, "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    x2 = x * x
    inner = _GELU_C * x * (1.0 + 0.044715 * x2)
    th = np.tanh(inner)
    y = 0.5 * x * (1.0 + th)

    def bw(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        _accum(a, g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * d_inner))
    return _finish(y, (a,), bw, "gelu")


# -- shape ops -------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    try:
        y = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None

    def bw(g):
        _accum(a, g.reshape(a.shape))
    return _finish(y, (a,), bw, "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))

    def bw(g):
        _accum(a, g.transpose(inv))
    return _finish(a.data.transpose(axes), (a,), bw, "transpose")


def getitem(a: Tensor, idx) -> Tensor:
    y = a.data[idx]

    basic = all(isinstance(k, (int, slice, type(None), type(Ellipsis)))
                for k in (idx if isinstance(idx, tuple) else (idx,)))

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        _accum(a, full)
    return _finish(np.array(y, copy=True), (a,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(t.shape[d] != ts[0].shape[d] for d in range(t.ndim) if d != ax):
            raise ShapeError(f"concat: shapes {ts[0].shape} and {t.shape} differ off axis {axis}")
    sizes = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def bw(g):
        for t, part in zip(ts, np.split(g, sizes, axis=ax)):
            _accum(t, part)
    return _finish(np.concatenate([t.data for t in ts], axis=ax), ts, bw, "concat")


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    y = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape).copy())
    return _finish(np.asarray(y), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[d] for d in np.atleast_1d(axis)])
    y = a.data.mean(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g / n, a.shape).copy())
    return _finish(np.asarray(y), (a,), bw, "mean")


def masked_mean(a: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over axis 1 of ``a`` (B, L, H) counting only positions where ``mask`` (B, L) is 1."""
    w = mask / np.maximum(mask.sum(axis=1, keepdims=True), 1)
    w = w.astype(a.data.dtype)
    y = np.einsum("bl,blh->bh", w, a.data)

    def bw(g):
        _accum(a, w[:, :, None] * g[:, None, :])
    return _finish(y, (a,), bw, "masked_mean")


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")

    def bw(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            _accum(a, _unbroadcast(ga, a.shape))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                a2 = a.data.reshape(-1, a.shape[-1])
                gb = a2.T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
            _accum(b, gb)
    return _finish(a.data @ b.data, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    y = matmul(x, w)
    return add(y, b) if b is not None else y


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        _accum(a, y * (g - (g * y).sum(axis=axis, keepdims=True)))
    return _finish(y, (a,), bw, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    z = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def bw(g):
        p = np.exp(y)
        _accum(a, g - p * g.sum(axis=axis, keepdims=True))
    return _finish(y, (a,), bw, "log_softmax")


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain.data + bias.data

    def bw(g):
        if gain.requires_grad:
            _accum(gain, (g * xhat).reshape(-1, x.shape[-1]).sum(axis=0))
        if bias.requires_grad:
            _accum(bias, g.reshape(-1, x.shape[-1]).sum(axis=0))
        if a.requires_grad:
            gx = g * gain.data
            n = x.shape[-1]
            _accum(a, inv / n * (n * gx - gx.sum(axis=-1, keepdims=True)
                                 - xhat * (gx * xhat).sum(axis=-1, keepdims=True)))
    return _finish(y, (a, gain, bias), bw, "layer_norm")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids outside [0, {table.shape[0]})")

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        _accum(table, full)
    return _finish(table.data[ids], (table,), bw, "embedding")


def cross_entropy(logits: Tensor, targets: np.ndarray, weights: Optional[np.ndarray] = None) -> Tensor:
    """Weighted mean negative log-likelihood of integer ``targets`` under softmax(logits)."""
    x = logits.data
    targets = np.asarray(targets)
    if x.shape[:-1] != targets.shape:
        raise ShapeError(f"cross_entropy: logits {x.shape} vs targets {targets.shape}")
    w = np.ones(targets.shape) if weights is None else np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if total <= 0:
        raise NumericError("cross_entropy: no target carries weight")
    z = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -(picked * w).sum() / total

    def bw(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
        _accum(logits, (g * (p - onehot) * (w / total)[..., None]).astype(x.dtype))
    return _finish(np.asarray(loss, dtype=x.dtype), (logits,), bw, "cross_entropy")


# -- parameters ------------------------------------------------------------------

def _truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    n = int(np.prod(shape)) if shape else 1
    out = np.empty(0)
    while out.size < n:
        draw = rng.standard_normal(2 * n + 16)
        out = np.concatenate([out, draw[np.abs(draw) <= 2.0]])
    # Rescale so the truncated distribution has the requested std.
    return (out[:n] * (std / 0.8796256610342398)).reshape(shape)


def init(shape, scheme: str, seed: int, name: str = "", std: float = 0.02) -> np.ndarray:
    shape = tuple(shape)
    if scheme == "zeros":
        return np.zeros(shape)
    if scheme == "ones":
        return np.ones(shape)
    if scheme == "normal":
        return _truncated_normal(np.random.default_rng(mix(seed, "init", name)), shape, std)
    raise ValueError(f"unknown init scheme {scheme!r}")


class ParamStore:
    """Named parameters plus AdamW moments."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.params: dict[str, np.ndarray] = {}
        self.decay: dict[str, bool] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0
        self._leaves: dict[str, Tensor] = {}

    def add(self, name: str, shape, scheme: str, seed: int, decay: Optional[bool] = None) -> np.ndarray:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        arr = init(shape, scheme, seed, name).astype(self.dtype)
        self.params[name] = arr
        self.decay[name] = scheme == "normal" if decay is None else decay
        self.m[name] = np.zeros_like(arr)
        self.v[name] = np.zeros_like(arr)
        return arr

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __len__(self) -> int:
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    def n_values(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def leaves(self) -> dict[str, Tensor]:
        """Fresh gradient-tracking leaf tensors over the current values."""
        track = _GRAD_ENABLED
        self._leaves = {k: Tensor(v, requires_grad=track, name=k) for k, v in self.params.items()}
        return self._leaves

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for k, t in self._leaves.items()}

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore(dtype)
        for k, v in self.params.items():
            out.params[k] = v.astype(dtype)
            out.decay[k] = self.decay[k]
            out.m[k] = self.m[k].astype(dtype)
            out.v[k] = self.v[k].astype(dtype)
        out.step = self.step
        return out

    def copy(self) -> "ParamStore":
        out = self.astype(self.dtype)
        return out

    def load_values(self, values: Mapping[str, np.ndarray], strict: bool = True):
        if strict and set(values) != set(self.params):
            missing = sorted(set(self.params) - set(values))
            extra = sorted(set(values) - set(self.params))
            raise ShapeError(f"checkpoint keys differ: missing {missing}, unexpected {extra}")
        for k, v in values.items():
            if k not in self.params:
                continue
            if tuple(v.shape) != self.params[k].shape:
                raise ShapeError(f"checkpoint {k}: shape {tuple(v.shape)} vs model {self.params[k].shape}")
            self.params[k] = np.asarray(v, dtype=self.dtype).copy()

    def digest(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k]).tobytes())
        return h.hexdigest()


def adamw_step(store: ParamStore, grads: Mapping[str, np.ndarray], lr: float,
               betas: tuple[float, float] = (0.9, 0.999), weight_decay: float = 0.01,
               eps: float = 1e-8) -> ParamStore:
    """One decoupled-weight-decay Adam update, in place; returns ``store``."""
    if set(grads) != set(store.params):
        missing = sorted(set(store.params) - set(grads))
        extra = sorted(set(grads) - set(store.params))
        raise KeyError(f"gradient keys differ from parameters: missing {missing}, unexpected {extra}")
    b1, b2 = betas
    store.step += 1
    c1 = 1.0 - b1 ** store.step
    c2 = 1.0 - b2 ** store.step
    for k in store.params:
        p = store.params[k]
        g = np.asarray(grads[k], dtype=store.dtype)
        if g.shape != p.shape:
            raise ShapeError(f"gradient {k}: shape {g.shape} vs parameter {p.shape}")
        if CHECK_FINITE and not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {k}")
        if weight_decay and store.decay[k]:
            p = p * (1.0 - lr * weight_decay)
        m = b1 * store.m[k] + (1 - b1) * g
        v = b2 * store.v[k] + (1 - b2) * g * g
        store.m[k], store.v[k] = m, v
        store.params[k] = (p - lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(store.dtype)
    return store


# -- checkpoints ------------------------------------------------------------------

def save_checkpoint(path: str | Path, store: ParamStore, header: Optional[dict] = None,
                    meta: Optional[dict] = None):
    blob = {
        "format_version": FORMAT_VERSION,
        "header": header or {},
        "meta": meta or {},
        "params": {k: {"shape": list(v.shape), "dtype": v.dtype.str,
                       "values": base64.b64encode(np.ascontiguousarray(v).tobytes()).decode("ascii")}
                   for k, v in sorted(store.params.items())},
    }
    Path(path).write_text(json.dumps(blob, sort_keys=True))


def read_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    blob = json.loads(Path(path).read_text())
    if blob.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {blob.get('format_version')!r}")
    values = {}
    for k, rec in blob["params"].items():
        arr = np.frombuffer(base64.b64decode(rec["values"]), dtype=np.dtype(rec["dtype"]))
        if arr.size != int(np.prod(rec["shape"])):
            raise ShapeError(f"checkpoint {k}: {arr.size} values for shape {rec['shape']}")
        values[k] = arr.reshape(rec["shape"]).copy()
    return values, {"header": blob.get("header", {}), "meta": blob.get("meta", {})}


def load_checkpoint(path: str | Path, store: ParamStore) -> dict:
    values, info = read_checkpoint(path)
    store.load_values(values)
    return info


# -- finite differences ------------------------------------------------------------

def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], eps: float = 1e-5,
              seed: int = 0) -> float:
    """Largest norm-relative error between autodiff and central differences.

    ``fn`` maps leaf tensors to any tensor; a fixed random projection turns it
    into a scalar.
    """
    leaves = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
    out = fn(*leaves)
    proj = np.random.default_rng(seed).standard_normal(out.shape)
    loss = sum_(mul(out, Tensor(proj)))
    loss.backward()
    worst = 0.0
    for k, leaf in enumerate(leaves):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        numeric = np.zeros_like(leaf.data)
        base = [np.array(x, dtype=np.float64) for x in inputs]
        flat = base[k].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            with no_grad():
                up = float((fn(*[Tensor(b) for b in base]).data * proj).sum())
            flat[j] = orig - eps
            with no_grad():
                down = float((fn(*[Tensor(b) for b in base]).data * proj).sum())
            flat[j] = orig
            numeric.reshape(-1)[j] = (up - down) / (2 * eps)
        denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / denom))
    return worst

