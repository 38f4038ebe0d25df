"""Structured background triangulation of a rectangular hold-all domain."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .geometry import BBox


@dataclass(frozen=True, eq=False)
class BackgroundMesh:
    """Conforming triangulation with cell/edge connectivity.

    ``edges[e]`` holds the two vertex ids of edge e and ``edge_cells[e]`` its
    one or two adjacent cells (-1 marks a missing neighbour on the box
    boundary).  Local edge k of a cell joins local vertices k and k+1.
    """

    vertices: np.ndarray
    cells: np.ndarray
    edges: np.ndarray
    edge_cells: np.ndarray
    cell_edges: np.ndarray
    box: BBox
    n: int

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @cached_property
    def cell_coords(self) -> np.ndarray:
        return self.vertices[self.cells]

    @cached_property
    def jacobians(self) -> np.ndarray:
        x = self.cell_coords
        return np.stack([x[:, 1] - x[:, 0], x[:, 2] - x[:, 0]], axis=-1)

    @cached_property
    def inv_jacobians(self) -> np.ndarray:
        return np.linalg.inv(self.jacobians)

    @cached_property
    def det(self) -> np.ndarray:
        return np.linalg.det(self.jacobians)

    @cached_property
    def areas(self) -> np.ndarray:
        return 0.5 * np.abs(self.det)

    @cached_property
    def barycenters(self) -> np.ndarray:
        return self.cell_coords.mean(axis=1)

    @cached_property
    def edge_lengths(self) -> np.ndarray:
        v = self.vertices[self.edges]
        return np.linalg.norm(v[:, 1] - v[:, 0], axis=1)

    @cached_property
    def diameters(self) -> np.ndarray:
        return self.edge_lengths[self.cell_edges].max(axis=1)

    @cached_property
    def inradii(self) -> np.ndarray:
        return 2.0 * self.areas / self.edge_lengths[self.cell_edges].sum(axis=1)

    @property
    def h(self) -> float:
        return float(self.diameters.max())

    @cached_property
    def quasi_uniformity(self) -> float:
        return float(self.diameters.max() / self.inradii.min())

    @cached_property
    def edge_normals(self) -> np.ndarray:
        """Unit normal of each edge pointing out of ``edge_cells[e, 0]``."""
        v = self.vertices[self.edges]
        t = v[:, 1] - v[:, 0]
        nrm = np.stack([t[:, 1], -t[:, 0]], axis=1) / self.edge_lengths[:, None]
        mid = v.mean(axis=1)
        away = np.einsum("ij,ij->i", mid - self.barycenters[self.edge_cells[:, 0]], nrm)
        return np.where(away[:, None] < 0, -nrm, nrm)

    @cached_property
    def vertex_neighbors(self) -> sp.csr_matrix:
        """Boolean cell-cell matrix: cells sharing at least one vertex (includes self)."""
        nc = self.n_cells
        inc = sp.csr_matrix(
            (np.ones(3 * nc), (np.repeat(np.arange(nc), 3), self.cells.ravel())),
            shape=(nc, len(self.vertices)),
        )
        adj = (inc @ inc.T).tocsr()
        adj.data[:] = 1.0
        return adj


def build_background_mesh(box: BBox, n: int) -> BackgroundMesh:
    """n x n squares, each split into two triangles along the same diagonal."""
    if n < 2:
        raise ValueError("n must be at least 2")
    xs = np.linspace(box.lo[0], box.hi[0], n + 1)
    ys = np.linspace(box.lo[1], box.hi[1], n + 1)
    X, Y = np.meshgrid(xs, ys)
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    j, i = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    v00 = (j * (n + 1) + i).ravel()
    v10 = v00 + 1
    v01 = v00 + n + 1
    v11 = v01 + 1
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    cells = np.empty((2 * n * n, 3), dtype=np.int64)
    cells[0::2] = lower
    cells[1::2] = upper

    local = np.stack([cells[:, [0, 1]], cells[:, [1, 2]], cells[:, [2, 0]]], axis=1)
    keys = np.sort(local.reshape(-1, 2), axis=1)
    edges, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    cell_edges = inverse.reshape(-1, 3)
    owner = np.repeat(np.arange(len(cells)), 3)
    edge_cells = np.full((len(edges), 2), -1, dtype=np.int64)
    order = np.argsort(inverse, kind="stable")
    sorted_e = inverse[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = sorted_e[1:] != sorted_e[:-1]
    edge_cells[sorted_e[first], 0] = owner[order][first]
    edge_cells[sorted_e[~first], 1] = owner[order][~first]
    return BackgroundMesh(vertices, cells, edges, edge_cells, cell_edges, box, n)
