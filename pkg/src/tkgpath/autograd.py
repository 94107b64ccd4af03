"""Small float64 tensor engine with reverse-mode autodiff, Adam, and finite-difference checks."""

from __future__ import annotations

import json
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

CHECKPOINT_MAGIC = "TKGPATH-PARAMS"
CHECKPOINT_VERSION = 1


class DimensionError(ValueError):
    pass


class BackwardStateError(RuntimeError):
    pass


class NumericError(ArithmeticError):
    pass


_state = threading.local()


def _grad_enabled() -> bool:
    return not getattr(_state, "no_grad", False)


@contextmanager
def no_grad():
    prev = getattr(_state, "no_grad", False)
    _state.no_grad = True
    try:
        yield
    finally:
        _state.no_grad = prev


def _kink_log() -> list | None:
    return getattr(_state, "kinks", None)


class Tensor:
    """Dense float64 array with an optional backprop node."""

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.grad: np.ndarray | None = None
        self.op: str | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._consumed = False

    # -- properties ---------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}{tag})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, backward_fn) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise ops ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), "add", bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), "sub", bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), "mul", bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out_data = a.data / b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g / b.data, a.shape))
        _accumulate(b, _unbroadcast(-g * out_data / b.data, b.shape))

    return _make(out_data, (a, b), "div", bw)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        _accumulate(a, g * c)

    return _make(a.data * c, (a,), "scale", bw)


def relu(a) -> Tensor:
    a = as_tensor(a)
    log = _kink_log()
    if log is not None:
        log.append(a.data > 0)
    mask = a.data > 0  # subgradient 0 at the kink

    def bw(g):
        _accumulate(a, g * mask)

    return _make(np.where(mask, a.data, 0.0), (a,), "relu", bw)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bw(g):
        _accumulate(a, g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), "sigmoid", bw)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.tanh(a.data)

    def bw(g):
        _accumulate(a, g * (1.0 - out_data**2))

    return _make(out_data, (a,), "tanh", bw)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if a.ndim == 0:
        raise DimensionError("softmax: scalar input")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        _accumulate(a, out_data * (g - (g * out_data).sum(axis=axis, keepdims=True)))

    return _make(out_data, (a,), "softmax", bw)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if a.ndim == 0:
        raise DimensionError("log_softmax: scalar input")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out_data = z - lse

    def bw(g):
        _accumulate(a, g - np.exp(out_data) * g.sum(axis=axis, keepdims=True))

    return _make(out_data, (a,), "log_softmax", bw)


# -- reductions and structure -----------------------------------------------------


def sum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)

    def bw(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.shape))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(gg, a.shape))

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), "sum", bw)


def mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    if n == 0:
        raise DimensionError("mean: empty reduction")
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise DimensionError(f"matmul: only 1-D/2-D operands, got {a.shape} @ {b.shape}")
    k_a = a.shape[-1]
    k_b = b.shape[0]
    if k_a != k_b:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def bw(g):
        if A.ndim == 2 and B.ndim == 2:
            _accumulate(a, g @ B.T)
            _accumulate(b, A.T @ g)
        elif A.ndim == 2:
            _accumulate(a, np.outer(g, B))
            _accumulate(b, A.T @ g)
        elif B.ndim == 2:
            _accumulate(a, B @ g)
            _accumulate(b, np.outer(A, g))
        else:
            _accumulate(a, g * B)
            _accumulate(b, g * A)

    return _make(np.asarray(A @ B), (a, b), "matmul", bw)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose: expected 2-D, got {a.shape}")

    def bw(g):
        _accumulate(a, g.T)

    return _make(a.data.T, (a,), "transpose", bw)


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    try:
        out_data = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {a.shape} to {shape}") from None

    def bw(g):
        _accumulate(a, g.reshape(a.shape))

    return _make(out_data, (a,), "reshape", bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("concat: no inputs")
    try:
        out_data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(ts, np.split(g, splits, axis=axis)):
            _accumulate(t, piece)

    return _make(out_data, ts, "concat", bw)


def take(a, index, axis: int = 0) -> Tensor:
    """Gather slices along ``axis`` (rows by default); repeated indices accumulate gradient."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.int64)
    if idx.size and (idx.min() < -a.shape[axis] or idx.max() >= a.shape[axis]):
        raise DimensionError(f"take: index out of range for axis {axis} of {a.shape}")

    def bw(g):
        full = np.zeros_like(a.data)
        if axis == 0:
            np.add.at(full, idx, g)
        else:
            np.add.at(np.moveaxis(full, axis, 0), idx, np.moveaxis(g, axis, 0))
        _accumulate(a, full)

    return _make(np.take(a.data, idx, axis=axis), (a,), "take", bw)


def segment_sum(a, segments, n_segments: int) -> Tensor:
    """Sum rows of ``a`` into ``n_segments`` buckets given per-row segment ids."""
    a = as_tensor(a)
    seg = np.asarray(segments, dtype=np.int64)
    if seg.shape[0] != a.shape[0]:
        raise DimensionError(f"segment_sum: {seg.shape[0]} segment ids for {a.shape[0]} rows")
    out_data = np.zeros((n_segments,) + a.shape[1:])
    np.add.at(out_data, seg, a.data)

    def bw(g):
        _accumulate(a, g[seg])

    return _make(out_data, (a,), "segment_sum", bw)


def layer_norm(a, gain=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply optional gain and bias."""
    a = as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv

    def bw(g):
        _accumulate(a, inv * (g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).mean(axis=-1, keepdims=True)))

    out = _make(xhat, (a,), "layer_norm", bw)
    if gain is not None:
        out = mul(out, gain)
    if bias is not None:
        out = add(out, bias)
    return out


# -- backprop -------------------------------------------------------------------


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Fill ``.grad`` of every reachable leaf; the tape is freed afterwards."""
    if loss._consumed:
        raise BackwardStateError("backward already ran on this graph; rebuild the forward pass")
    if loss.data.size != 1:
        raise DimensionError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise BackwardStateError("backward: loss does not depend on any parameter")
    order = _topological(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for node in order:
        if node._parents:
            node.grad = None if node is not loss else node.grad
            node._parents = ()
            node._backward = None
    loss._consumed = True


# -- gradient checking ------------------------------------------------------------


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    skipped_kinks: int
    skipped_zero: int

    @property
    def ok(self) -> bool:
        return self.max_rel_error < 1e-4


def _eval(fn: Callable[[], Tensor], record_kinks: bool):
    prev = getattr(_state, "kinks", None)
    _state.kinks = [] if record_kinks else None
    try:
        with no_grad():
            out = fn()
        kinks = _state.kinks
    finally:
        _state.kinks = prev
    value = float(as_tensor(out).data.reshape(-1)[0])
    if not np.isfinite(value):
        raise NumericError(f"non-finite function value {value}")
    return value, kinks


def _same_kinks(k1, k2) -> bool:
    if k1 is None or k2 is None or len(k1) != len(k2):
        return False
    return all(a.shape == b.shape and np.array_equal(a, b) for a, b in zip(k1, k2))


def grad_check(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-3,
    seeds: Iterable[int] = (0,),
    max_coords: int | None = None,
    zero_tol: float = 1e-10,
    points: int = 5,
) -> GradCheckResult:
    """Compare reverse-mode gradients with central differences; return the worst relative error.

    ``points=5`` uses the fourth-order stencil (f(x-2h) - 8f(x-h) + 8f(x+h) - f(x+2h)) / 12h,
    ``points=3`` the classic (f(x+h) - f(x-h)) / 2h. Coordinates whose perturbation flips any
    relu gate are skipped, as are coordinates where both gradients vanish.
    """
    if points not in (3, 5):
        raise ValueError("points must be 3 or 5")
    offsets = (1, -1) if points == 3 else (1, -1, 2, -2)
    for p in params:
        p.zero_grad()
    loss = fn()
    if not np.all(np.isfinite(loss.data)):
        raise NumericError("non-finite loss")
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    for g in analytic:
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite analytic gradient")
    _, base_kinks = _eval(fn, True)

    coords: list[tuple[int, int]] = []
    for seed in seeds:
        if max_coords is None:
            coords = [(i, j) for i, p in enumerate(params) for j in range(p.data.size)]
            break
        rng = np.random.default_rng(seed)
        sizes = np.array([p.data.size for p in params])
        flat = rng.choice(sizes.sum(), size=min(max_coords, int(sizes.sum())), replace=False)
        bounds = np.cumsum(sizes)
        for f in sorted(flat.tolist()):
            i = int(np.searchsorted(bounds, f, side="right"))
            j = f - (int(bounds[i - 1]) if i else 0)
            coords.append((i, j))
    coords = sorted(set(coords))

    worst, checked, kinked, zeros = 0.0, 0, 0, 0
    for i, j in coords:
        flat = params[i].data.reshape(-1)
        orig = flat[j]
        values, same = {}, True
        for k in offsets:
            flat[j] = orig + k * step
            values[k], kinks = _eval(fn, True)
            same = same and _same_kinks(base_kinks, kinks)
        flat[j] = orig
        if not same:
            kinked += 1
            continue
        if points == 3:
            numeric = (values[1] - values[-1]) / (2 * step)
        else:
            numeric = (8 * (values[1] - values[-1]) - (values[2] - values[-2])) / (12 * step)
        a = float(analytic[i].reshape(-1)[j])
        denom = max(abs(a), abs(numeric))
        if denom < zero_tol:
            zeros += 1
            continue
        worst = max(worst, abs(a - numeric) / denom)
        checked += 1
    return GradCheckResult(worst, checked, kinked, zeros)


# -- optimisation -------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState) -> Sequence[Tensor]:
    """One bias-corrected Adam update, applied in place."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise DimensionError(f"adam_step: gradient shape {g.shape} != parameter shape {p.data.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state)


# -- checkpoints --------------------------------------------------------------------


def save_params(path: str | Path, params: dict[str, Tensor | np.ndarray]) -> None:
    body = {
        "magic": CHECKPOINT_MAGIC,
        "version": CHECKPOINT_VERSION,
        "params": {
            name: {"shape": list(np.shape(as_tensor(t).data)), "data": as_tensor(t).data.reshape(-1).tolist()}
            for name, t in sorted(params.items())
        },
    }
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(json.dumps(body), encoding="utf-8")
    tmp.replace(path)


def load_params(path: str | Path) -> dict[str, np.ndarray]:
    body = json.loads(Path(path).read_text(encoding="utf-8"))
    if body.get("magic") != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint")
    if body.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {body.get('version')}")
    out = {}
    for name, entry in body["params"].items():
        arr = np.asarray(entry["data"], dtype=np.float64)
        out[name] = arr.reshape(entry["shape"])
    return out
