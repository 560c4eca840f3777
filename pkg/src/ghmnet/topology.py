"""Regular rooted trees with a fixed branching factor per layer.

Nodes are addressed as ``(layer, offset)`` pairs.  Layer 0 holds the root,
layer ``L`` the leaves.  Within a layer nodes are laid out breadth first so
that the children of ``(l - 1, p)`` are the contiguous block
``(l, p * m[l] + k)`` for ranks ``k = 0 .. m[l] - 1``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .errors import InvalidTopologyError, NoSiblingsError

Node = tuple  # (layer, offset)


@dataclass(frozen=True)
class TreeTopology:
    """Tree of depth ``L`` where every node on layer ``l - 1`` has ``m[l]`` children.

    ``m`` is stored with a leading placeholder so ``m[l]`` is the branching
    factor into layer ``l`` (``m[0]`` is 1 by convention).
    """

    depth: int
    branching: tuple[int, ...]

    def __post_init__(self):
        if self.depth < 1 or len(self.branching) != self.depth:
            raise InvalidTopologyError(
                f"need one branching factor per layer, got depth={self.depth} "
                f"and {len(self.branching)} factors"
            )
        if any(int(k) < 1 for k in self.branching):
            raise InvalidTopologyError(f"branching factors must be >= 1: {self.branching}")

    @property
    def L(self) -> int:
        return self.depth

    @property
    def m(self) -> tuple[int, ...]:
        return (1,) + tuple(self.branching)

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        sizes = [1]
        for k in self.branching:
            sizes.append(sizes[-1] * k)
        return tuple(sizes)

    @property
    def d(self) -> int:
        """Number of leaves."""
        return self.layer_sizes[-1]

    @property
    def n_nodes(self) -> int:
        return sum(self.layer_sizes)

    @property
    def m_norm1(self) -> int:
        return sum(self.branching)

    def nodes(self, layer: int) -> list[Node]:
        self._check_layer(layer)
        return [(layer, o) for o in range(self.layer_sizes[layer])]

    def __iter__(self) -> Iterator[Node]:
        for layer in range(self.depth + 1):
            yield from self.nodes(layer)

    def parent(self, v: Node) -> Node:
        layer, offset = self._check_node(v)
        if layer == 0:
            raise InvalidTopologyError("the root has no parent")
        return (layer - 1, offset // self.m[layer])

    def rank(self, v: Node) -> int:
        """Position of ``v`` among its siblings, in ``0 .. m[layer] - 1``."""
        layer, offset = self._check_node(v)
        if layer == 0:
            return 0
        return offset % self.m[layer]

    def child(self, v: Node, k: int) -> Node:
        layer, offset = self._check_node(v)
        if layer == self.depth:
            raise InvalidTopologyError("leaves have no children")
        if not 0 <= k < self.m[layer + 1]:
            raise InvalidTopologyError(f"rank {k} out of range for layer {layer + 1}")
        return (layer + 1, offset * self.m[layer + 1] + k)

    def children(self, v: Node) -> list[Node]:
        layer, _ = self._check_node(v)
        if layer == self.depth:
            return []
        return [self.child(v, k) for k in range(self.m[layer + 1])]

    def siblings(self, v: Node) -> list[Node]:
        layer, _ = self._check_node(v)
        if layer == 0:
            raise NoSiblingsError("the root has no siblings")
        return [c for c in self.children(self.parent(v)) if c != v]

    def parent_index(self, layer: int) -> np.ndarray:
        """Parent offsets of every node on ``layer`` (vectorised ``parent``)."""
        self._check_layer(layer)
        if layer == 0:
            raise InvalidTopologyError("the root has no parent")
        return np.arange(self.layer_sizes[layer]) // self.m[layer]

    def rank_index(self, layer: int) -> np.ndarray:
        self._check_layer(layer)
        if layer == 0:
            return np.zeros(1, dtype=int)
        return np.arange(self.layer_sizes[layer]) % self.m[layer]

    def to_dict(self) -> dict:
        return {"L": self.depth, "m": list(self.branching)}

    def _check_layer(self, layer):
        if not 0 <= layer <= self.depth:
            raise InvalidTopologyError(f"layer {layer} outside 0..{self.depth}")

    def _check_node(self, v):
        layer, offset = v
        self._check_layer(layer)
        if not 0 <= offset < self.layer_sizes[layer]:
            raise InvalidTopologyError(f"node {v} does not exist")
        return layer, offset


def build(L: int, m: Sequence[int]) -> TreeTopology:
    """Build a topology of depth ``L`` with branching factors ``m`` (one per layer)."""
    m = tuple(int(k) for k in m)
    if len(m) == 0:
        raise InvalidTopologyError("branching sequence is empty")
    return TreeTopology(int(L), m)
