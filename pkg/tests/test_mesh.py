import numpy as np
import pytest

from cutmaxwell.geometry import BBox
from cutmaxwell.mesh import build_background_mesh

BOX = BBox((-1.0, -1.0), (1.0, 1.0))


@pytest.mark.parametrize("box, n, cells, verts", [
    (BOX, 6, 72, 49),
    (BBox((0.0, 0.0), (1.0, 1.0)), 2, 8, 9),
    (BOX, 48, 4608, 2401),
])
def test_counts(box, n, cells, verts):
    m = build_background_mesh(box, n)
    assert m.n_cells == cells
    assert len(m.vertices) == verts
    # Euler: V - E + F = 1 for a disk
    assert len(m.vertices) - len(m.edges) + m.n_cells == 1


@pytest.mark.parametrize("n", [2, 5, 12])
def test_conforming(n):
    m = build_background_mesh(BOX, n)
    n_adj = (m.edge_cells >= 0).sum(axis=1)
    v = m.vertices[m.edges]
    on_box = np.all(np.isclose(np.abs(v[:, :, 0]), 1.0), axis=1) | np.all(np.isclose(np.abs(v[:, :, 1]), 1.0), axis=1)
    assert np.all(n_adj[on_box] == 1)
    assert np.all(n_adj[~on_box] == 2)
    # every cell lists its own edges and each edge lists the cell
    for c in range(m.n_cells):
        for e in m.cell_edges[c]:
            assert c in m.edge_cells[e]
            assert set(m.edges[e]) <= set(m.cells[c])


def test_orientation_and_area():
    m = build_background_mesh(BOX, 7)
    assert np.all(m.det > 0)
    assert m.areas.sum() == pytest.approx(4.0)


def test_quasi_uniformity_and_h():
    for n in (4, 16):
        m = build_background_mesh(BOX, n)
        assert m.h == pytest.approx(np.sqrt(2) * 2 / n)
        # right isosceles triangles: h / rho = 2 + 2 sqrt 2, independent of n
        assert m.quasi_uniformity == pytest.approx(2 + 2 * np.sqrt(2))


def test_edge_normals_point_out_of_first_cell():
    m = build_background_mesh(BOX, 4)
    mid = m.vertices[m.edges].mean(axis=1)
    out = np.einsum("ij,ij->i", mid - m.barycenters[m.edge_cells[:, 0]], m.edge_normals)
    assert np.all(out > 0)
    assert np.allclose(np.linalg.norm(m.edge_normals, axis=1), 1.0)


def test_vertex_neighbors_symmetric():
    m = build_background_mesh(BOX, 5)
    A = m.vertex_neighbors
    assert (A != A.T).nnz == 0
    assert np.all(A.diagonal() == 1)
    # an interior cell of this mesh touches 12 cells plus itself
    counts = np.diff(A.indptr)
    assert counts.max() == 13


def test_rejects_tiny_n():
    with pytest.raises(ValueError):
        build_background_mesh(BOX, 1)
