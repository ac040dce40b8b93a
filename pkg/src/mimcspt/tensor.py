"""Dense tensors with reverse-mode autodiff, seeded RNG, and a finite-difference oracle.

Forward numerics are plain numpy; every differentiable op records a backward
closure on a tape. Training runs in float32; ``precision("float64")`` switches
new tensors to 64-bit, which ``grad_check`` uses to get trustworthy central
differences. Any op that produces a NaN/Inf raises immediately.
"""

from __future__ import annotations

import contextlib
import hashlib
from typing import Callable, Iterable

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Rng",
    "ShapeError",
    "NonFiniteError",
    "precision",
    "default_dtype",
    "matmul",
    "softmax",
    "log_softmax",
    "layer_norm",
    "gelu",
    "gather_rows",
    "scatter_rows",
    "grad_check",
    "zero_grads",
]


class ShapeError(ValueError):
    """Operand shapes do not satisfy an op's contract."""


class NonFiniteError(FloatingPointError):
    """An op produced (or was fed) NaN or Inf."""


_DEFAULT_DTYPE = np.float32

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def default_dtype() -> np.dtype:
    return np.dtype(_DEFAULT_DTYPE)


@contextlib.contextmanager
def precision(dtype: str):
    """Temporarily switch the dtype used for newly created tensors.

    ``with precision("float64"): ...`` is how grad_check gets 64-bit graphs.
    """
    global _DEFAULT_DTYPE
    new = np.dtype(dtype)
    if new not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported precision {dtype!r}")
    old = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = new.type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = old


def _check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` back down to `shape` after numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A dense row-major array plus an optional slot on the autodiff tape.

    Results of ops on tensors with ``requires_grad`` carry backward closures;
    ``backward()`` on a scalar output accumulates into each leaf's ``grad``.
    Backward closures receive (upstream_grad, accum) where accum(parent, g)
    routes gradient to a parent node.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else _DEFAULT_DTYPE)
        self.data = _check_finite(arr, "tensor construction")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @classmethod
    def _from_op(cls, data, parents, backward, what: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = _check_finite(np.asarray(data), what)
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = None
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.requires_grad = False
        t.grad = None
        t._parents = ()
        t._backward = None
        return t

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- autodiff driver -----------------------------------------------

    def backward(self, seed: np.ndarray | None = None) -> None:
        """Reverse-mode sweep from this node; accumulates into leaf ``grad``."""
        if seed is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed needs a scalar output")
            seed = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.asarray(seed, dtype=self.data.dtype)}

        def accum(parent: "Tensor", g: np.ndarray) -> None:
            if not parent.requires_grad:
                return
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g

        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is not None:
                node._backward(g, accum)
            else:
                node.grad = g if node.grad is None else node.grad + g

    # -- arithmetic ------------------------------------------------------

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(other, dtype=self.data.dtype)

    def __add__(self, other) -> "Tensor":
        b = self._coerce(other)

        def backward(g, accum, a=self, b=b):
            accum(a, _unbroadcast(g, a.shape))
            accum(b, _unbroadcast(g, b.shape))

        return Tensor._from_op(self.data + b.data, (self, b), backward, "add")

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        b = self._coerce(other)

        def backward(g, accum, a=self, b=b):
            accum(a, _unbroadcast(g, a.shape))
            accum(b, _unbroadcast(-g, b.shape))

        return Tensor._from_op(self.data - b.data, (self, b), backward, "sub")

    def __rsub__(self, other) -> "Tensor":
        return self._coerce(other).__sub__(self)

    def __neg__(self) -> "Tensor":
        def backward(g, accum, a=self):
            accum(a, -g)

        return Tensor._from_op(-self.data, (self,), backward, "neg")

    def __mul__(self, other) -> "Tensor":
        b = self._coerce(other)

        def backward(g, accum, a=self, b=b):
            accum(a, _unbroadcast(g * b.data, a.shape))
            accum(b, _unbroadcast(g * a.data, b.shape))

        return Tensor._from_op(self.data * b.data, (self, b), backward, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        b = self._coerce(other)

        def backward(g, accum, a=self, b=b):
            accum(a, _unbroadcast(g / b.data, a.shape))
            accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

        return Tensor._from_op(self.data / b.data, (self, b), backward, "div")

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    # -- shape ops -------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])

        def backward(g, accum, a=self):
            accum(a, g.reshape(a.shape))

        return Tensor._from_op(self.data.reshape(shape), (self,), backward, "reshape")

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = tuple(np.argsort(axes))

        def backward(g, accum, a=self):
            accum(a, g.transpose(inv))

        return Tensor._from_op(self.data.transpose(axes), (self,), backward, "transpose")

    def broadcast_to(self, shape) -> "Tensor":
        shape = tuple(shape)

        def backward(g, accum, a=self):
            accum(a, _unbroadcast(g, a.shape))

        return Tensor._from_op(np.broadcast_to(self.data, shape), (self,), backward, "broadcast")

    # -- reductions --------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        def backward(g, accum, a=self):
            gg = np.asarray(g)
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            accum(a, np.broadcast_to(gg, a.shape).copy())

        return Tensor._from_op(self.data.sum(axis=axis, keepdims=keepdims),
                               (self,), backward, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = int(np.prod([self.data.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def abs(self) -> "Tensor":
        # L1 subgradient at 0 is 0 (np.sign(0) == 0), keeping backward deterministic.
        def backward(g, accum, a=self):
            accum(a, g * np.sign(a.data))

        return Tensor._from_op(np.abs(self.data), (self,), backward, "abs")


# -- free-function ops ------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with broadcasting over leading (batch) axes."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")

    def backward(g, accum, a=a, b=b):
        accum(a, _unbroadcast(np.matmul(g, b.data.swapaxes(-1, -2)), a.shape))
        accum(b, _unbroadcast(np.matmul(a.data.swapaxes(-1, -2), g), b.shape))

    return Tensor._from_op(np.matmul(a.data, b.data), (a, b), backward, "matmul")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along `axis`; rows sum to 1."""
    if x.data.ndim == 0 or x.data.shape[axis] == 0:
        raise ShapeError(f"softmax over empty axis {axis} of shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g, accum, x=x):
        dot = (g * y).sum(axis=axis, keepdims=True)
        accum(x, y * (g - dot))

    return Tensor._from_op(y, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.data.ndim == 0 or x.data.shape[axis] == 0:
        raise ShapeError(f"log_softmax over empty axis {axis} of shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g, accum, x=x):
        accum(x, g - np.exp(y) * g.sum(axis=axis, keepdims=True))

    return Tensor._from_op(y, (x,), backward, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift.

    eps may be 0 when the variance is known positive; a zero-variance row with
    eps 0 produces Inf and raises.
    """
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match last extent {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    y = xhat * gamma.data + beta.data

    def backward(g, accum, x=x, gamma=gamma, beta=beta):
        sum_axes = tuple(range(g.ndim - 1))
        accum(gamma, (g * xhat).sum(axis=sum_axes))
        accum(beta, g.sum(axis=sum_axes))
        gx_hat = g * gamma.data
        m1 = gx_hat.mean(axis=-1, keepdims=True)
        m2 = (gx_hat * xhat).mean(axis=-1, keepdims=True)
        accum(x, inv_std * (gx_hat - m1 - xhat * m2))

    return Tensor._from_op(y, (x, gamma, beta), backward, "layer_norm")


def gelu(x: Tensor) -> Tensor:
    """Exact-erf gelu: x * Phi(x)."""
    phi = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    y = x.data * phi

    def backward(g, accum, x=x):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        accum(x, g * (phi + x.data * pdf))

    return Tensor._from_op(y, (x,), backward, "gelu")


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows along the second-to-last axis.

    x (..., N, D) with integer idx (..., K) -> (..., K, D), rows taken per
    leading batch item.
    """
    idx = np.asarray(idx)
    if idx.ndim != x.ndim - 1:
        raise ShapeError(f"gather_rows index ndim {idx.ndim} does not fit operand {x.shape}")
    expanded = np.broadcast_to(idx[..., None], idx.shape + (x.shape[-1],))
    data = np.take_along_axis(x.data, expanded, axis=-2)

    def backward(g, accum, x=x):
        gx = np.zeros_like(x.data)
        np.add.at(gx, _rows_index(idx), g)
        accum(x, gx)

    return Tensor._from_op(data, (x,), backward, "gather_rows")


def scatter_rows(src: Tensor, idx: np.ndarray, n: int) -> Tensor:
    """Place rows of src at positions idx within a zero-filled length-n axis.

    src (..., K, D), idx (..., K) unique per batch item -> (..., n, D) with
    out[..., idx[k], :] = src[..., k, :]; other rows stay zero.
    """
    idx = np.asarray(idx)
    if idx.shape != src.shape[:-1]:
        raise ShapeError(f"scatter_rows index shape {idx.shape} does not match src {src.shape}")
    data = np.zeros(src.shape[:-2] + (n, src.shape[-1]), dtype=src.data.dtype)
    data[_rows_index(idx)] = src.data

    def backward(g, accum, src=src):
        expanded = np.broadcast_to(idx[..., None], idx.shape + (g.shape[-1],))
        accum(src, np.take_along_axis(g, expanded, axis=-2))

    return Tensor._from_op(data, (src,), backward, "scatter_rows")


def _rows_index(idx: np.ndarray):
    """Fancy-index tuple addressing rows `idx` along axis -2."""
    if idx.ndim == 1:
        return (idx,)
    lead = np.indices(idx.shape, sparse=True)[:-1]
    return (*lead, idx)


# -- RNG ---------------------------------------------------------------------


class Rng:
    """Deterministic PCG64 stream with labeled, independently seeded sub-streams.

    Identical seeds give identical streams. ``substream(label)`` derives a
    child whose seed is SHA-256(seed, label), so distinct labels decorrelate
    and the derivation is itself reproducible.
    """

    ALGORITHM = "pcg64-sha256-substreams"

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def substream(self, label: str) -> "Rng":
        digest = hashlib.sha256(f"{self.seed}:{label}".encode()).digest()
        return Rng(int.from_bytes(digest[:8], "little"))

    # Thin pass-throughs; everything below consumes from this single stream.
    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def choice(self, n, size, replace=False):
        return self._gen.choice(n, size=size, replace=replace)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def beta(self, a: float, b: float) -> float:
        return float(self._gen.beta(a, b))

    def truncated_normal(self, std: float, size) -> np.ndarray:
        """Normal(0, std) with draws beyond 2 std resampled (a few rounds, then clipped)."""
        x = self._gen.normal(0.0, std, size)
        for _ in range(8):
            bad = np.abs(x) > 2.0 * std
            if not bad.any():
                break
            x[bad] = self._gen.normal(0.0, std, int(bad.sum()))
        return np.clip(x, -2.0 * std, 2.0 * std)

    def get_state(self) -> dict:
        return self._gen.bit_generator.state

    def set_state(self, state: dict) -> None:
        self._gen.bit_generator.state = state


# -- gradient checking --------------------------------------------------------


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def grad_check(f: Callable[[dict[str, Tensor]], Tensor],
               params: dict[str, Tensor],
               eps: float = 1e-4,
               max_coords_per_param: int | None = None,
               sample_fraction: float | None = None,
               rng: Rng | None = None) -> float:
    """Max relative error between analytic gradients and central differences.

    Rebuilds `params` as float64 leaves, evaluates ``f`` once with backward,
    then perturbs a sample of coordinates by +-eps (all coordinates unless
    a cap or fraction is given). Relative error per coordinate is
    |analytic - cd| / max(|analytic|, |cd|, 1e-8). ``f`` must be
    deterministic; a non-finite loss raises.
    """
    rng = rng or Rng(0)
    with precision("float64"):
        p64 = {k: Tensor(v.data.astype(np.float64), requires_grad=True)
               for k, v in params.items()}
        loss = f(p64)
        if loss.data.size != 1:
            raise ShapeError("grad_check target must be scalar-valued")
        _check_finite(loss.data, "grad_check loss")
        loss.backward()

        frozen = {k: v.detach() for k, v in p64.items()}

        def eval_at(name: str, flat_index: int, value: float) -> float:
            bumped = p64[name].data.copy()
            bumped.flat[flat_index] = value
            probe = dict(frozen)
            probe[name] = Tensor(bumped, requires_grad=False)
            out = f(probe).data
            _check_finite(out, "grad_check probe loss")
            return float(out)

        worst = 0.0
        for name, p in p64.items():
            analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
            size = p.data.size
            count = size
            if sample_fraction is not None:
                count = max(1, int(round(size * sample_fraction)))
            if max_coords_per_param is not None:
                count = min(count, max_coords_per_param)
            if count < size:
                coords = rng.choice(size, size=count, replace=False)
            else:
                coords = np.arange(size)
            for i in coords:
                base = float(p.data.flat[i])
                hi = eval_at(name, int(i), base + eps)
                lo = eval_at(name, int(i), base - eps)
                cd = (hi - lo) / (2.0 * eps)
                an = float(analytic.flat[i])
                err = abs(an - cd) / max(abs(an), abs(cd), 1e-8)
                worst = max(worst, err)
        return worst
