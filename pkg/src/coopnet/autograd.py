"""Dense tensors and reverse-mode automatic differentiation.

Conventions enforced throughout the package:

- Values are numpy arrays of dtype float32 or float64 with rank >= 1;
  scalar results (losses) are rank-1 tensors of shape ``(1,)``.
- A :class:`Tensor` is simultaneously a value and a node of the dynamically
  built computation graph. Leaves (``op == "leaf"``) hold parameters and
  inputs; interior nodes remember their parents and a closure that applies
  the chain rule.
- ``backward`` *accumulates* into ``.grad`` so that one backward pass can
  feed several parameter groups; the trainer zeroes gradients between steps.
  Calling ``backward`` twice on the same output node raises instead of
  silently doubling gradients.
- All randomness flows through :class:`RngState` (PCG64), so equal seeds
  give bit-identical streams across runs and platforms.
"""

from __future__ import annotations

import hashlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

DTYPES = {"f32": np.float32, "f64": np.float64}
_DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


class RngState:
    """Deterministic random source keyed by a 64-bit seed (PCG64 stream)."""

    algorithm = "pcg64"

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def child(self, tag: str | int) -> "RngState":
        """Derive an independent stream from (seed, tag), statelessly."""
        digest = hashlib.blake2b(
            f"{self.seed}/{tag}".encode(), digest_size=8
        ).digest()
        return RngState(int.from_bytes(digest, "little"))

    def uniform(self, lo: float, hi: float, shape, dtype="f32") -> np.ndarray:
        if not lo < hi:
            raise ShapeError(f"uniform bounds require lo < hi, got [{lo}, {hi})")
        return self._gen.uniform(lo, hi, size=shape).astype(_np_dtype(dtype))

    def normal(self, mu: float, sigma: float, shape, dtype="f32") -> np.ndarray:
        if sigma <= 0:
            raise ShapeError(f"gaussian sigma must be > 0, got {sigma}")
        return self._gen.normal(mu, sigma, size=shape).astype(_np_dtype(dtype))

    def integers(self, lo: int, hi: int, shape=None) -> np.ndarray:
        return self._gen.integers(lo, hi, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def _np_dtype(dtype) -> np.dtype:
    if isinstance(dtype, str):
        try:
            return np.dtype(DTYPES[dtype])
        except KeyError:
            raise ShapeError(f"unsupported dtype {dtype!r}; use 'f32' or 'f64'")
    d = np.dtype(dtype)
    if d not in _DTYPE_NAMES:
        raise ShapeError(f"unsupported dtype {d}; use f32 or f64")
    return d


def dtype_name(array: np.ndarray) -> str:
    return _DTYPE_NAMES[array.dtype]


class Tensor:
    """A dense f32/f64 array doubling as a node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward_fn",
                 "_backward_ran")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: Sequence["Tensor"] = (),
                 backward_fn: Callable[[np.ndarray], None] | None = None):
        arr = np.asarray(data)
        if arr.dtype not in _DTYPE_NAMES:
            arr = arr.astype(np.float32)
        if arr.ndim == 0:
            arr = arr.reshape(1)  # scalars are rank-1 shape-(1,) by convention
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = tuple(parents)
        self._backward_fn = backward_fn
        self._backward_ran = False

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> str:
        return dtype_name(self.data)

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op!r})"

    # -- gradient plumbing --------------------------------------------------

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match value shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def detach(self) -> "Tensor":
        """A leaf view of this value; gradients do not flow past it."""
        return Tensor(self.data, requires_grad=False)

    def backward(self) -> dict["Tensor", np.ndarray]:
        """Run reverse-mode differentiation from this scalar node.

        Accumulates ``dSelf/dLeaf`` into every reachable leaf that requires a
        gradient and returns a map from those leaves to their gradient arrays.
        Leaves not reachable from this node get no entry (and their ``.grad``
        is left untouched). A second call on the same node raises.
        """
        if self.data.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {self.shape}")
        if self._backward_ran:
            raise ContractError(
                "backward already ran on this node; rebuild the graph "
                "(gradients accumulate, so a second pass would double them)")
        self._backward_ran = True

        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        leaf_map: dict[Tensor, np.ndarray] = {}
        for node in order:  # already reverse-topological
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    node.accumulate_grad(g)
                    leaf_map[node] = node.grad
                continue
            # Interior node: hand the upstream gradient to the op closure,
            # which accumulates into the node's parents via the stash below.
            node._backward_fn(g, _Stash(grads))
        return leaf_map


class _Stash:
    """Accumulator for parent gradients during one backward sweep."""

    __slots__ = ("grads",)

    def __init__(self, grads: dict[int, np.ndarray]):
        self.grads = grads

    def add(self, parent: Tensor, g: np.ndarray) -> None:
        if not parent.requires_grad:
            return
        if g.shape != parent.data.shape:
            raise ShapeError(
                f"backward produced gradient of shape {g.shape} for parent "
                f"of shape {parent.data.shape}")
        key = id(parent)
        if key in self.grads:
            self.grads[key] += g
        else:
            # Copy defensively: closures may hand back views of cached buffers.
            self.grads[key] = np.array(g, copy=True)


def _topo_order(root: Tensor) -> list[Tensor]:
    """Reverse-topological order of the graph under ``root`` (iterative DFS)."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))
    order.reverse()
    return order


def _needs_graph(*tensors: Tensor) -> bool:
    return any(t.requires_grad for t in tensors)


def _make(data: np.ndarray, op: str, parents: tuple[Tensor, ...],
          backward_fn) -> Tensor:
    if _needs_graph(*parents):
        return Tensor(data, requires_grad=True, op=op, parents=parents,
                      backward_fn=backward_fn)
    return Tensor(data, requires_grad=False, op=op)


def _check_same_dtype(op: str, *tensors: Tensor) -> None:
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ShapeError(f"{op}: mixed dtypes {sorted(map(str, dtypes))}")


# -- constructors -----------------------------------------------------------


def _check_extents(shape) -> tuple[int, ...]:
    shape = tuple(int(e) for e in shape)
    if len(shape) == 0:
        raise ShapeError("shape must be non-empty")
    for e in shape:
        if e < 1:
            raise ShapeError(f"extents must be >= 1, got {shape}")
    return shape


def tensor(data, dtype: str = "f32", requires_grad: bool = False) -> Tensor:
    """Wrap array-like data as a leaf tensor."""
    arr = np.asarray(data, dtype=_np_dtype(dtype))
    return Tensor(arr, requires_grad=requires_grad)


def zeros(shape, dtype: str = "f32", requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(_check_extents(shape), dtype=_np_dtype(dtype)),
                  requires_grad=requires_grad)


def full(shape, value: float, dtype: str = "f32",
         requires_grad: bool = False) -> Tensor:
    return Tensor(np.full(_check_extents(shape), value, dtype=_np_dtype(dtype)),
                  requires_grad=requires_grad)


def uniform(shape, lo: float, hi: float, rng: RngState, dtype: str = "f32",
            requires_grad: bool = False) -> Tensor:
    return Tensor(rng.uniform(lo, hi, _check_extents(shape), dtype),
                  requires_grad=requires_grad)


def gaussian(shape, mu: float, sigma: float, rng: RngState, dtype: str = "f32",
             requires_grad: bool = False) -> Tensor:
    return Tensor(rng.normal(mu, sigma, _check_extents(shape), dtype),
                  requires_grad=requires_grad)


# -- elementwise / linear-algebra primitives --------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors (no broadcasting)."""
    _check_same_dtype("add", a, b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")

    def bw(g, stash):
        stash.add(a, g)
        stash.add(b, g)

    return _make(a.data + b.data, "add", (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product of two same-shape tensors."""
    _check_same_dtype("mul", a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")

    def bw(g, stash):
        stash.add(a, g * b.data)
        stash.add(b, g * a.data)

    return _make(a.data * b.data, "mul", (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python constant."""
    c = a.data.dtype.type(c)

    def bw(g, stash):
        stash.add(a, g * c)

    return _make(a.data * c, "scale", (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of rank-2 tensors [m,k] x [k,n] -> [m,n]."""
    _check_same_dtype("matmul", a, b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(
            f"matmul requires rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul: inner extents disagree, {a.shape} x {b.shape}")

    def bw(g, stash):
        stash.add(a, g @ b.data.T)
        stash.add(b, a.data.T @ g)

    return _make(a.data @ b.data, "matmul", (a, b), bw)


def sum_all(a: Tensor) -> Tensor:
    """Sum of all elements, as a shape-(1,) scalar tensor."""

    def bw(g, stash):
        stash.add(a, np.full_like(a.data, g.reshape(-1)[0]))

    return _make(a.data.sum(dtype=a.data.dtype).reshape(1), "sum_all", (a,), bw)


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-mode pass from a scalar loss; see :meth:`Tensor.backward`."""
    return loss.backward()


# -- verification oracle ----------------------------------------------------


def finite_difference_grad(f: Callable[[Tensor], Tensor], x: Tensor,
                           eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of the scalar function ``f`` at ``x``.

    ``f`` must be deterministic and return a scalar tensor. ``x`` is treated
    as a leaf; its data is never modified. Use f64 inputs for a trustworthy
    oracle.
    """
    if eps <= 0:
        raise ContractError(f"eps must be > 0, got {eps}")
    base = np.array(x.data, copy=True)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(Tensor(base.reshape(x.shape))).item()
        flat[i] = orig - eps
        lo = f(Tensor(base.reshape(x.shape))).item()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad
