"""Structured tetrahedral mesh generation for tests, demos and CLI setup.

Boxes (and box complexes such as T-shapes) are built on a regular grid with
six tets per cell (Kuhn decomposition), which is conforming across cells.
"""

from __future__ import annotations

import numpy as np

from .mesh import DomainPartition, TetMesh, orient_positive

# Corner order per axis-permutation path through the unit cell.
_KUHN_PATHS = [
    (0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0),
]


def box_complex(cell_mask: np.ndarray, spacing=(1.0, 1.0, 1.0),
                origin=(0.0, 0.0, 0.0)) -> TetMesh:
    """Mesh the cells where ``cell_mask`` is True with 6 tets per cell."""
    mask = np.asarray(cell_mask, dtype=bool)
    nx, ny, nz = mask.shape
    sx, sy, sz = spacing

    used = np.zeros((nx + 1, ny + 1, nz + 1), dtype=bool)
    idx = np.nonzero(mask)
    for i, j, k in zip(*idx):
        used[i:i + 2, j:j + 2, k:k + 2] = True
    node_id = -np.ones(used.shape, dtype=np.int64)
    coords = []
    count = 0
    for gi in range(nx + 1):
        for gj in range(ny + 1):
            for gk in range(nz + 1):
                if used[gi, gj, gk]:
                    node_id[gi, gj, gk] = count
                    coords.append((origin[0] + gi * sx, origin[1] + gj * sy,
                                   origin[2] + gk * sz))
                    count += 1
    nodes = np.array(coords, dtype=np.float64)

    tets = []
    for i, j, k in zip(*idx):
        base = np.array([i, j, k])
        for path in _KUHN_PATHS:
            corner = base.copy()
            verts = [node_id[tuple(corner)]]
            for axis in path:
                corner[axis] += 1
                verts.append(node_id[tuple(corner)])
            tets.append((verts[0], verts[1], verts[2], verts[3]))
    tets = orient_positive(nodes, np.array(tets, dtype=np.int64))
    return TetMesh(nodes=nodes, tets=tets)


def beam(nx: int = 8, ny: int = 3, nz: int = 3, lengths=(2.0, 1.0, 1.0),
         anchor: str = "x_min") -> TetMesh:
    """Rectangular beam of nx*ny*nz cells (6 tets each).

    ``anchor`` fixes one face: one of x_min/x_max/y_min/y_max/z_min/z_max,
    or "none".
    """
    mask = np.ones((nx, ny, nz), dtype=bool)
    spacing = (lengths[0] / nx, lengths[1] / ny, lengths[2] / nz)
    mesh = box_complex(mask, spacing)
    if anchor == "none":
        return mesh
    axis = {"x": 0, "y": 1, "z": 2}[anchor[0]]
    coords = mesh.nodes[:, axis]
    value = coords.min() if anchor.endswith("min") else coords.max()
    tol = 1e-9 * max(lengths)
    anchors = np.nonzero(np.abs(coords - value) <= tol)[0]
    return mesh.with_anchors(anchors)


def partition_by_axis(mesh: TetMesh, axis: int, cuts: list[float]) -> DomainPartition:
    """Label tets by which axis interval their centroid falls into."""
    centroids = mesh.nodes[mesh.tets].mean(axis=1)[:, axis]
    labels = np.searchsorted(np.asarray(cuts, dtype=np.float64), centroids)
    part = DomainPartition(labels)
    part.validate(mesh)
    return part


def t_shape(arm: int = 2, thickness: int = 1, lengths=None) -> tuple[TetMesh, DomainPartition]:
    """T-shaped beam: a horizontal bar with a stem, three box domains.

    Domain 0 is the stem, domains 1 and 2 the two bar arms; its domain graph
    is the 3-vertex star/path.
    """
    nx = 2 * arm + thickness
    ny = arm + thickness
    nz = thickness
    mask = np.zeros((nx, ny, nz), dtype=bool)
    mask[:, :thickness, :] = True                                  # horizontal bar
    mask[arm:arm + thickness, thickness:, :] = True                # stem going up
    mesh = box_complex(mask, spacing=(1.0, 1.0, 1.0))
    centroids = mesh.nodes[mesh.tets].mean(axis=1)
    labels = np.zeros(mesh.n_tets, dtype=np.int64)
    in_bar = centroids[:, 1] < thickness
    labels[in_bar & (centroids[:, 0] < arm)] = 1
    labels[in_bar & (centroids[:, 0] > arm + thickness)] = 2
    part = DomainPartition(labels)
    part.validate(mesh)
    return mesh, part
