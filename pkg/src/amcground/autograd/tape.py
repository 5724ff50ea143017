"""Reverse-mode sweep over a recorded graph."""
from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from ..errors import DimensionError, GraphError
from .tensor import Tensor, add, set_grad_enabled


def _toposort(root: Tensor) -> list[Tensor]:
    """Graph nodes reachable from ``root``, parents before children."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


class GradientTape:
    """Ordered record of the operations that produced ``loss``.

    The tape is captured once; :meth:`gradient` may be replayed any number
    of times and is deterministic. With ``create_graph`` the returned
    gradients are graph nodes, which is what makes losses on gradients
    trainable.
    """

    def __init__(self, loss: Tensor, create_graph: bool = False):
        if loss.size != 1:
            raise DimensionError(f"loss must be a scalar, got shape {loss.shape}")
        self.loss = loss
        self.create_graph = create_graph
        self.nodes = _toposort(loss) if loss.requires_grad else [loss]

    def __len__(self) -> int:
        return len(self.nodes)

    def gradient(self, wrt: Sequence[Tensor], create_graph: bool | None = None) -> list[Tensor]:
        create_graph = self.create_graph if create_graph is None else create_graph
        targets = {id(t) for t in wrt}
        present = {id(n) for n in self.nodes}
        missing = [t for t in wrt if id(t) not in present or not t.requires_grad]
        if missing:
            raise GraphError(
                f"{len(missing)} tensor(s) not reachable from the loss: "
                + ", ".join(t.name or repr(t) for t in missing)
            )

        # nodes on some path from a wrt tensor to the loss
        relevant: set[int] = set()
        for node in self.nodes:
            if id(node) in targets or any(id(p) in relevant for p in node._parents):
                relevant.add(id(node))

        grads: dict[int, Tensor] = {
            id(self.loss): Tensor(np.ones(self.loss.shape, dtype=self.loss.dtype))
        }
        with set_grad_enabled(create_graph):
            for node in reversed(self.nodes):
                g = grads.get(id(node))
                if g is None or node._backward is None:
                    continue
                needs = tuple(id(p) in relevant for p in node._parents)
                if not any(needs):
                    continue
                for parent, flag, pg in zip(node._parents, needs, node._backward(g, needs)):
                    if not flag or pg is None:
                        continue
                    prev = grads.get(id(parent))
                    grads[id(parent)] = pg if prev is None else add(prev, pg)

        out = []
        for t in wrt:
            g = grads.get(id(t))
            if g is None:
                g = Tensor(np.zeros(t.shape, dtype=t.dtype))
            out.append(g)
        return out


def grad(loss: Tensor, wrt: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradients of scalar ``loss`` w.r.t. each tensor in ``wrt``, in order."""
    return GradientTape(loss).gradient(list(wrt), create_graph=create_graph)


def backward(loss: Tensor, wrt: Iterable[Tensor], create_graph: bool = False) -> dict[Tensor, Tensor]:
    """Mapping ``tensor -> d loss / d tensor``.

    Tensors hash by identity, so the mapping is keyed by the very objects
    passed in ``wrt``.
    """
    wrt = list(wrt)
    return dict(zip(wrt, grad(loss, wrt, create_graph=create_graph)))
