import io

import numpy as np
import pytest

from deepwarp.mesh import (DomainPartition, MeshError, MeshFormatError, TetMesh,
                           connected_components, load_mesh, load_partition,
                           lumped_mass, mass_center, node_adjacency,
                           normalize_to_unit_sphere, select_pseudo_anchor,
                           signed_volumes, tet_volumes, write_mesh_files)
from deepwarp.meshgen import beam, partition_by_axis, t_shape


def make_streams(nodes, tets, anchors=()):
    node_text = "\n".join(f"{i} {x} {y} {z}" for i, (x, y, z) in enumerate(nodes))
    ele_text = "\n".join(f"{i} " + " ".join(map(str, t)) for i, t in enumerate(tets))
    anchor_text = "\n".join(str(a) for a in anchors)
    return io.StringIO(node_text), io.StringIO(ele_text), io.StringIO(anchor_text)


UNIT_TET = [(0, 0, 0), (1, 0, 0), (0, 1, 0), (0, 0, 1)]


class TestLoadMesh:
    def test_unit_tet(self):
        mesh = load_mesh(*make_streams(UNIT_TET, [(0, 1, 2, 3)], [0]))
        assert mesh.n_tets == 1
        assert mesh.anchors == {0}
        assert tet_volumes(mesh)[0] == pytest.approx(1.0 / 6.0, abs=1e-15)

    def test_out_of_range_index(self):
        with pytest.raises(MeshFormatError, match="out of range"):
            load_mesh(*make_streams(UNIT_TET, [(0, 1, 2, 99)]))

    def test_beam_volume(self, small_beam):
        # 2x1x1 box split into 12 tets
        assert small_beam.n_tets == 12
        assert tet_volumes(small_beam).sum() == pytest.approx(2.0, abs=1e-12)

    def test_negative_orientation_repaired(self):
        mesh = load_mesh(*make_streams(UNIT_TET, [(0, 1, 3, 2)]))
        assert signed_volumes(mesh.nodes, mesh.tets)[0] > 0

    def test_zero_volume_rejected(self):
        degenerate = [(0, 0, 0), (1, 0, 0), (0, 1, 0), (0.5, 0.5, 0)]
        with pytest.raises(MeshFormatError, match="zero-volume"):
            load_mesh(*make_streams(degenerate, [(0, 1, 2, 3)]))

    def test_comments_and_blank_lines(self):
        text = "# header\n\n0 0 0 0\n1 1 0 0  # inline\n2 0 1 0\n3 0 0 1\n"
        mesh = load_mesh(io.StringIO(text), io.StringIO("0 0 1 2 3"), io.StringIO(""))
        assert mesh.n_nodes == 4 and not mesh.anchors

    def test_parse_error_reports_line(self):
        with pytest.raises(MeshFormatError, match="line 2"):
            load_mesh(io.StringIO("0 0 0 0\n1 bad 0 0\n"), io.StringIO("0 0 0 0 0"))

    def test_non_contiguous_index(self):
        with pytest.raises(MeshFormatError, match="not contiguous"):
            load_mesh(io.StringIO("1 0 0 0\n"), io.StringIO("0 0 1 2 3"))

    def test_round_trip(self, small_beam):
        n, e, a = io.StringIO(), io.StringIO(), io.StringIO()
        write_mesh_files(small_beam, n, e, a)
        n.seek(0), e.seek(0), a.seek(0)
        again = load_mesh(n, e, a)
        assert np.allclose(again.nodes, small_beam.nodes)
        assert np.array_equal(again.tets, small_beam.tets)
        assert again.anchors == small_beam.anchors

    def test_all_volumes_positive_after_load(self, bending_beam):
        assert np.all(signed_volumes(bending_beam.nodes, bending_beam.tets) > 0)


class TestNormalize:
    def test_already_normalized_identity(self):
        nodes = np.array([[1.0, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0],
                          [0, 0, 1], [0, 0, -1]])
        tets = np.array([[0, 2, 4, 1]])
        mesh = TetMesh(nodes=nodes, tets=tets)
        out = normalize_to_unit_sphere(mesh)
        assert out.scale_factor == pytest.approx(1.0)
        assert np.allclose(out.nodes, mesh.nodes)

    def test_radius_four_scales_quarter(self):
        nodes = np.array([[4.0, 0, 0], [-4, 0, 0], [0, 4, 0], [0, -4, 0],
                          [0, 0, 4], [0, 0, -4]])
        mesh = TetMesh(nodes=nodes, tets=np.array([[0, 2, 4, 1]]))
        out = normalize_to_unit_sphere(mesh)
        assert out.scale_factor == pytest.approx(0.25)
        assert np.linalg.norm(out.nodes, axis=1).max() == pytest.approx(1.0)

    def test_random_cloud_max_radius_one(self):
        rng = np.random.default_rng(3)
        nodes = rng.standard_normal((20, 3)) * 3.0 + 5.0
        mesh = TetMesh(nodes=nodes, tets=np.array([[0, 1, 2, 3]]))
        out = normalize_to_unit_sphere(mesh)
        assert abs(np.linalg.norm(out.nodes - out.nodes.mean(0), axis=1).max() - 1.0) < 1e-12

    def test_idempotent(self, bending_beam):
        once = normalize_to_unit_sphere(bending_beam)
        twice = normalize_to_unit_sphere(once)
        assert np.abs(twice.nodes - once.nodes).max() < 1e-12
        assert twice.scale_factor == pytest.approx(once.scale_factor, abs=1e-12)

    def test_coincident_nodes_rejected(self):
        mesh = TetMesh(nodes=np.zeros((4, 3)) + 2.0,
                       tets=np.zeros((0, 4), dtype=int))
        with pytest.raises(MeshError, match="coincide"):
            normalize_to_unit_sphere(mesh)


class TestAdjacency:
    def test_single_tet(self, unit_tet):
        adj = node_adjacency(unit_tet)
        for i in range(4):
            assert sorted(adj[i]) == sorted(set(range(4)) - {i})

    def test_two_tets_shared_face(self):
        nodes = UNIT_TET + [(1.0, 1.0, 1.0)]
        mesh = load_mesh(*make_streams(nodes, [(0, 1, 2, 3), (1, 2, 3, 4)]))
        adj = node_adjacency(mesh)
        for shared in (1, 2, 3):
            assert len(adj[shared]) == 4
        assert len(adj[0]) == 3 and len(adj[4]) == 3

    def test_symmetry(self, bending_beam):
        adj = node_adjacency(bending_beam)
        for i, nbrs in enumerate(adj):
            for j in nbrs:
                assert i in adj[j]
                assert j != i

    def test_connected(self, bending_beam):
        assert connected_components(bending_beam.n_nodes,
                                    node_adjacency(bending_beam)) == 1


class TestLumpedMass:
    def test_unit_tet_density_six(self, unit_tet):
        masses = lumped_mass(unit_tet, 6.0)
        assert np.allclose(masses, 0.25)

    def test_zero_density_rejected(self, unit_tet):
        with pytest.raises(ValueError):
            lumped_mass(unit_tet, 0.0)

    def test_beam_total_mass(self, small_beam):
        masses = lumped_mass(small_beam, 37.5)
        assert masses.sum() == pytest.approx(37.5 * 2.0, abs=1e-10)


class TestPseudoAnchor:
    def test_single_tet(self, unit_tet):
        assert select_pseudo_anchor(unit_tet) == 0

    def test_symmetric_beam_near_center(self, bending_beam):
        idx = select_pseudo_anchor(bending_beam)
        center = mass_center(bending_beam)
        centroids = bending_beam.nodes[bending_beam.tets].mean(axis=1)
        dists = np.linalg.norm(centroids - center, axis=1)
        # brute-force oracle: returned tet minimizes the distance
        assert dists[idx] == dists.min()
        edge = np.linalg.norm(bending_beam.nodes[bending_beam.tets[idx][0]]
                              - bending_beam.nodes[bending_beam.tets[idx][1]])
        assert dists[idx] <= 2.0 * edge

    def test_tie_breaks_low_index(self):
        # two mirror-image tets equidistant from the mass center
        nodes = [(-2, 0, 0), (-1, 0, 0), (-1.5, 1, 0), (-1.5, 0, 1),
                 (2, 0, 0), (1, 0, 0), (1.5, 1, 0), (1.5, 0, 1)]
        mesh = load_mesh(*make_streams(nodes, [(0, 1, 2, 3), (4, 5, 6, 7)]))
        assert select_pseudo_anchor(mesh) == 0


class TestPartition:
    def test_valid_two_domain(self, small_beam):
        part = partition_by_axis(small_beam, 0, [1.0])
        assert part.n_domains == 2
        assert len(part.labels) == small_beam.n_tets

    def test_missing_domain_id(self, small_beam):
        labels = np.zeros(small_beam.n_tets, dtype=int)
        labels[0] = 2     # skips id 1
        with pytest.raises(MeshError, match="empty domain"):
            DomainPartition(labels).validate(small_beam)

    def test_disconnected_domain_rejected(self, bending_beam):
        # same label on the two beam ends, different in the middle
        centroids = bending_beam.nodes[bending_beam.tets].mean(axis=1)[:, 0]
        labels = np.where((centroids < 0.4) | (centroids > 1.6), 0, 1)
        with pytest.raises(MeshError, match="not edge-connected"):
            DomainPartition(labels).validate(bending_beam)

    def test_load_partition_stream(self, small_beam):
        text = io.StringIO("\n".join("0" for _ in range(small_beam.n_tets)))
        part = load_partition(text, small_beam)
        assert part.n_domains == 1

    def test_t_shape_partition_valid(self):
        mesh, part = t_shape()
        part.validate(mesh)
        assert part.n_domains == 3
