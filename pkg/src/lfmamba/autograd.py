"""Tape-based reverse-mode automatic differentiation over numpy arrays.

A ``Tensor`` wraps an ndarray and remembers how it was produced (parent
tensors plus a backward closure).  ``backward`` walks the graph once in
reverse topological order with a fixed accumulation order, so gradients are
bit-reproducible for a given graph.  Saved activations are whatever each
op's closure captured; there is no rematerialization.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Dict, Iterable, Sequence

import numpy as np

GradientTable = Dict[str, np.ndarray]

_grad_enabled = True


def grad_enabled() -> bool:
    return _grad_enabled


@contextmanager
def no_grad():
    """Disable graph recording (inference / oracle evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "name")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: Sequence["Tensor"] = (),
        backward_fn: Callable[[np.ndarray], None] | None = None,
        name: str | None = None,
    ):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flags = "param" if isinstance(self, Parameter) else ("grad" if self.requires_grad else "const")
        return f"Tensor({flags}, shape={tuple(self.shape)}, dtype={self.dtype})"


class Parameter(Tensor):
    """Leaf tensor updated by the optimizer."""

    def __init__(self, data, name: str | None = None):
        super().__init__(np.asarray(data), requires_grad=True, name=name)


def astensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def make_node(data, parents: Sequence[Tensor], backward_fn) -> Tensor:
    """Create a graph node; collapses to a constant when no grad is needed."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, backward_fn=backward_fn)
    return Tensor(data)


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        # reversed() keeps visitation order equal to parent declaration order
        for p in reversed(node.parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    The loss must be a scalar node attached to the graph; accumulation order
    is fixed by the forward construction order, so repeated runs on the same
    graph produce bit-identical gradients.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ValueError("detached graph: loss does not depend on any parameter")
    order = _toposort(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node.backward_fn is not None:
            node.backward_fn(node.grad)


def grad_table(named_params: Iterable[tuple[str, Parameter]]) -> GradientTable:
    """Collect accumulated gradients keyed by dotted parameter path."""
    table: GradientTable = {}
    for name, p in named_params:
        if p.grad is not None:
            if p.grad.shape != p.data.shape:
                raise RuntimeError(f"gradient shape mismatch for {name}")
            table[name] = p.grad
    return table


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Dict[str, Parameter],
    h: float = 1e-4,
    max_coords: int = 200,
    rng: np.random.Generator | None = None,
) -> tuple[float, str]:
    """Compare reverse-mode gradients of ``f`` against central differences.

    Perturbs at most ``max_coords`` randomly chosen coordinates across all
    parameters (central difference with step ``h``) and returns the worst
    relative error together with the offending coordinate's identity.
    ``f`` is re-evaluated under ``no_grad`` for the perturbed values, so it
    must be a pure function of the parameters.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    rng = rng or np.random.default_rng(0)

    for p in params.values():
        p.zero_grad()
    loss = f()
    if not np.isfinite(loss.data):
        raise ValueError("non-finite loss")
    backward(loss)
    analytic = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}

    coords = []
    for name, p in params.items():
        for flat in range(p.data.size):
            coords.append((name, flat))
    if len(coords) > max_coords:
        idx = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(idx)]

    worst = 0.0
    worst_id = ""
    for name, flat in coords:
        p = params[name]
        orig = p.data.flat[flat]
        with no_grad():
            p.data.flat[flat] = orig + h
            f_plus = float(f().data)
            p.data.flat[flat] = orig - h
            f_minus = float(f().data)
        p.data.flat[flat] = orig
        numeric = (f_plus - f_minus) / (2 * h)
        a = float(analytic[name].flat[flat])
        denom = max(abs(a), abs(numeric), 1e-8)
        rel = abs(a - numeric) / denom
        if rel > worst:
            worst = rel
            worst_id = f"{name}[{flat}]"
    return worst, worst_id
