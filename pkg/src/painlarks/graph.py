"""The 68-point facial landmark graph and its normalized adjacency."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .tensor import Tensor

NUM_LANDMARKS = 68

# (name, node indices, closed loop)
LANDMARK_GROUPS: tuple[tuple[str, tuple[int, ...], bool], ...] = (
    ("jaw", tuple(range(0, 17)), False),
    ("right_brow", tuple(range(17, 22)), False),
    ("left_brow", tuple(range(22, 27)), False),
    ("nose_bridge", tuple(range(27, 31)), False),
    ("lower_nose", tuple(range(31, 36)), False),
    ("right_eye", tuple(range(36, 42)), True),
    ("left_eye", tuple(range(42, 48)), True),
    ("outer_lip", tuple(range(48, 60)), True),
    ("inner_lip", tuple(range(60, 68)), True),
)

# Upper/lower inner-lip pairs plus the corner-to-corner line; they keep the
# inner lip one component while giving it 12 edges.
INNER_LIP_CHORDS: tuple[tuple[int, int], ...] = ((61, 67), (62, 66), (63, 65), (60, 64))


class GraphError(ValueError):
    pass


def _canon(i: int, j: int) -> tuple[int, int]:
    return (i, j) if i < j else (j, i)


def canonical_edges() -> frozenset[tuple[int, int]]:
    edges = set()
    for _, nodes, closed in LANDMARK_GROUPS:
        for a, b in zip(nodes, nodes[1:]):
            edges.add(_canon(a, b))
        if closed:
            edges.add(_canon(nodes[-1], nodes[0]))
    edges.update(_canon(i, j) for i, j in INNER_LIP_CHORDS)
    return frozenset(edges)


def _validate_edges(num_nodes: int, edges: Iterable[tuple[int, int]]) -> frozenset[tuple[int, int]]:
    out = set()
    for i, j in edges:
        i, j = int(i), int(j)
        if not (0 <= i < num_nodes and 0 <= j < num_nodes):
            raise GraphError(f"edge ({i}, {j}) references a node outside [0, {num_nodes})")
        if i == j:
            raise GraphError(f"self-loop ({i}, {j}) is not allowed; self-loops are added by normalization")
        out.add(_canon(i, j))
    return frozenset(out)


def normalize_adjacency(num_nodes: int, edges: Iterable[tuple[int, int]]) -> np.ndarray:
    """Return D^-1/2 (A + I) D^-1/2 where D is the degree matrix of A + I."""
    edges = _validate_edges(num_nodes, edges)
    A = np.eye(num_nodes)
    for i, j in edges:
        A[i, j] = A[j, i] = 1.0
    d = A.sum(axis=1)
    return A / np.sqrt(np.outer(d, d))


@dataclass(frozen=True)
class FacialGraph:
    num_nodes: int
    edges: frozenset
    adjacency_norm: np.ndarray = field(repr=False, compare=False)

    @classmethod
    def from_edges(cls, num_nodes: int, edges: Iterable[tuple[int, int]]) -> "FacialGraph":
        edges = _validate_edges(num_nodes, edges)
        adj = normalize_adjacency(num_nodes, edges)
        adj.setflags(write=False)
        return cls(num_nodes, edges, adj)

    @property
    def A_hat(self) -> Tensor:
        return Tensor._wrap(self.adjacency_norm)

    def degrees(self) -> np.ndarray:
        """Node degrees in A (self-loops excluded)."""
        deg = np.zeros(self.num_nodes, dtype=np.int64)
        for i, j in self.edges:
            deg[i] += 1
            deg[j] += 1
        return deg

    def n_components(self) -> int:
        rows = [i for i, j in self.edges] + [j for i, j in self.edges]
        cols = [j for i, j in self.edges] + [i for i, j in self.edges]
        m = csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(self.num_nodes, self.num_nodes))
        return int(connected_components(m, directed=False)[0])

    def permuted(self, perm) -> "FacialGraph":
        """Relabel node ``i`` as ``perm[i]``."""
        perm = np.asarray(perm)
        return FacialGraph.from_edges(self.num_nodes, [(perm[i], perm[j]) for i, j in self.edges])

    def describe(self) -> str:
        deg = self.degrees()
        lines = [
            f"nodes {self.num_nodes}",
            f"edges {len(self.edges)}",
            f"components {self.n_components()}",
            "degrees " + " ".join(str(int(d)) for d in deg),
        ]
        return "\n".join(lines) + "\n"


def build_facial_adjacency(extra_edges: Iterable[tuple[int, int]] = ()) -> FacialGraph:
    """Canonical 68-landmark face graph: nine anatomical groups, 67 edges."""
    return FacialGraph.from_edges(NUM_LANDMARKS, set(canonical_edges()) | set(extra_edges))


def read_edge_list(path) -> list[tuple[int, int]]:
    """Parse ``i j`` pairs (0-based), one per line; ``#`` starts a comment."""
    edges = []
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise GraphError(f"{path}:{lineno}: expected two node indices, got {raw!r}")
        try:
            edges.append((int(parts[0]), int(parts[1])))
        except ValueError:
            raise GraphError(f"{path}:{lineno}: non-integer node index in {raw!r}") from None
    return edges


def write_edge_list(edges: Iterable[tuple[int, int]], path) -> None:
    lines = [f"{i} {j}" for i, j in sorted(edges)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_graph(path=None, num_nodes: int = NUM_LANDMARKS,
               extra_edges: Iterable[tuple[int, int]] = ()) -> FacialGraph:
    """Canonical graph when ``path`` is None, otherwise the edge list in ``path``."""
    if path is None:
        return build_facial_adjacency(extra_edges)
    return FacialGraph.from_edges(num_nodes, set(read_edge_list(path)) | set(extra_edges))
