"""Mesh construction, ray casting, scan simulation, and STL round trips."""

import json
import math
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from advlidar.errors import MalformedFileError
from advlidar.pointcloud import Point3
from advlidar.scanner import (
    ScanConfig,
    TriangleMesh,
    build_perturbation_mesh,
    default_scan_config,
    export_stl,
    icosphere,
    load_scan_config,
    load_stl,
    ray_triangle_intersect,
    simulate_scan,
)
from oracles import (
    SAMPLING_HIT_THRESHOLD,
    brute_force_scan,
    generate_ray_triangle_cases,
    plane_residual,
    ray_plane_solve,
    ref_read_stl,
    sampled_ray_min_distance,
)


def beam_directions(cfg: ScanConfig) -> np.ndarray:
    """Unit beam directions rebuilt from the documented walk, h-major."""
    start, end = cfg.horizontal_span
    res = cfg.horizontal_resolution
    dirs = []
    k = 0
    while start + res * k <= end + 1e-9 * res:
        h = math.radians(start + res * k)
        for a_deg in cfg.vertical_angles:
            a = math.radians(a_deg)
            dirs.append((math.cos(a) * math.cos(h),
                         math.cos(a) * math.sin(h),
                         math.sin(a)))
        k += 1
    return np.array(dirs, dtype=np.float64).reshape(-1, 3)


def expected_scan_points(mesh: TriangleMesh, cfg: ScanConfig) -> np.ndarray:
    dirs = beam_directions(cfg)
    origin = cfg.origin.as_array()
    t = brute_force_scan(mesh.triangles(), dirs, origin)
    rows = np.flatnonzero(np.isfinite(t))
    return origin[None, :] + t[rows, None] * dirs[rows]


class TestTriangleMesh:
    def test_basic_construction(self):
        verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float)
        faces = np.array([[0, 1, 2], [0, 1, 3]])
        mesh = TriangleMesh(verts, faces)
        assert mesh.num_vertices == 4
        assert mesh.num_faces == 2
        assert mesh.vertices.dtype == np.float64
        assert mesh.faces.dtype == np.int64
        tri = mesh.triangles()
        assert tri.shape == (2, 3, 3)
        np.testing.assert_array_equal(tri[1, 2], [0, 0, 1])
        assert "2 faces" in repr(mesh)

    def test_zero_faces_allowed(self):
        mesh = TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=int))
        assert mesh.num_faces == 0
        assert mesh.triangles().shape == (0, 3, 3)

    def test_bad_vertex_shape(self):
        with pytest.raises(ValueError, match="vertices"):
            TriangleMesh(np.zeros((4, 2)), np.zeros((1, 3), dtype=int))

    def test_bad_face_shape(self):
        with pytest.raises(ValueError, match="faces"):
            TriangleMesh(np.zeros((4, 3)), np.zeros((1, 4), dtype=int))

    def test_non_finite_vertex(self):
        verts = np.array([[0, 0, 0], [1, 0, 0], [0, np.nan, 0]])
        with pytest.raises(ValueError, match="finite"):
            TriangleMesh(verts, np.array([[0, 1, 2]]))

    def test_face_index_out_of_range(self):
        verts = np.eye(3)
        with pytest.raises(ValueError, match="out of range"):
            TriangleMesh(verts, np.array([[0, 1, 3]]))
        with pytest.raises(ValueError, match="out of range"):
            TriangleMesh(verts, np.array([[0, -1, 2]]))

    def test_degenerate_face_rejected(self):
        verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], dtype=float)
        with pytest.raises(ValueError, match="degenerate face 0"):
            TriangleMesh(verts, np.array([[0, 1, 1]]))


class TestIcosphere:
    def test_counts_level_one(self):
        mesh = icosphere(np.zeros(3), 1.0)
        assert mesh.num_vertices == 42
        assert mesh.num_faces == 80

    def test_counts_level_two(self):
        mesh = icosphere(np.zeros(3), 1.0, subdivisions=2)
        assert mesh.num_vertices == 162
        assert mesh.num_faces == 320

    def test_vertices_on_sphere(self):
        center = np.array([1.5, -2.0, 0.25])
        mesh = icosphere(center, 0.07)
        r = np.linalg.norm(mesh.vertices - center[None, :], axis=1)
        np.testing.assert_allclose(r, 0.07, rtol=1e-12, atol=0)

    def test_outward_winding(self):
        # consistent winding: every face normal points away from the center
        mesh = icosphere(np.array([0.0, 0.0, 0.0]), 1.0)
        tri = mesh.triangles()
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        centroids = tri.mean(axis=1)
        assert (np.einsum("ij,ij->i", n, centroids) > 0).all()

    def test_deterministic(self):
        a = icosphere(np.ones(3), 0.5)
        b = icosphere(np.ones(3), 0.5)
        np.testing.assert_array_equal(a.vertices, b.vertices)
        np.testing.assert_array_equal(a.faces, b.faces)

    def test_bad_radius(self):
        with pytest.raises(ValueError, match="radius"):
            icosphere(np.zeros(3), 0.0)
        with pytest.raises(ValueError, match="radius"):
            icosphere(np.zeros(3), float("nan"))


class TestPerturbationMesh:
    def test_counts_and_block_layout(self):
        pts = np.array([[1, 0, 0], [0, 2, 0], [0, 0, 3.5]], dtype=float)
        mesh = build_perturbation_mesh(pts, radius=0.02)
        assert mesh.num_vertices == 3 * 42
        assert mesh.num_faces == 3 * 80
        for i, p in enumerate(pts):
            block = mesh.vertices[i * 42:(i + 1) * 42]
            r = np.linalg.norm(block - p[None, :], axis=1)
            np.testing.assert_allclose(r, 0.02, rtol=1e-12, atol=0)

    def test_face_indices_partition_blocks(self):
        mesh = build_perturbation_mesh(np.zeros((2, 3)) + [[0, 0, 0], [9, 9, 9]])
        first = mesh.faces[:80]
        second = mesh.faces[80:]
        assert first.max() < 42
        assert second.min() >= 42
        np.testing.assert_array_equal(second, first + 42)

    def test_validation(self):
        with pytest.raises(ValueError, match="zero points"):
            build_perturbation_mesh(np.zeros((0, 3)))
        with pytest.raises(ValueError, match="finite"):
            build_perturbation_mesh(np.array([[0.0, np.inf, 0.0]]))
        with pytest.raises(ValueError, match="radius"):
            build_perturbation_mesh(np.ones((1, 3)), radius=-0.1)


TRI_Z1 = (np.array([-1.0, -1.0, 1.0]),
          np.array([3.0, -1.0, 1.0]),
          np.array([-1.0, 3.0, 1.0]))


class TestRayTriangleIntersect:
    def test_straight_hit(self):
        out = ray_triangle_intersect(
            np.zeros(3), np.array([0.0, 0.0, 1.0]), *TRI_Z1)
        assert out is not None
        t, point = out
        assert t == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(point, [0.0, 0.0, 1.0], atol=1e-12)

    def test_vertex_hit_counts(self):
        # boundary convention: hitting a corner exactly is still a hit
        out = ray_triangle_intersect(
            np.array([-1.0, -1.0, 0.0]), np.array([0.0, 0.0, 1.0]), *TRI_Z1)
        assert out is not None
        assert out[0] == pytest.approx(1.0, abs=1e-12)

    def test_miss_outside(self):
        out = ray_triangle_intersect(
            np.array([5.0, 5.0, 0.0]), np.array([0.0, 0.0, 1.0]), *TRI_Z1)
        assert out is None

    def test_behind_origin(self):
        out = ray_triangle_intersect(
            np.zeros(3), np.array([0.0, 0.0, -1.0]), *TRI_Z1)
        assert out is None

    def test_parallel_ray(self):
        out = ray_triangle_intersect(
            np.zeros(3), np.array([1.0, 0.0, 0.0]), *TRI_Z1)
        assert out is None

    def test_origin_on_triangle(self):
        # t == 0 falls below the minimum hit distance
        out = ray_triangle_intersect(
            np.array([0.0, 0.0, 1.0]), np.array([0.0, 0.0, 1.0]), *TRI_Z1)
        assert out is None

    def test_non_unit_direction_rejected(self):
        with pytest.raises(ValueError, match="unit"):
            ray_triangle_intersect(np.zeros(3), np.array([0.0, 0.0, 2.0]), *TRI_Z1)

    def test_degenerate_triangle_rejected(self):
        v = np.array([1.0, 1.0, 1.0])
        with pytest.raises(ValueError, match="degenerate"):
            ray_triangle_intersect(
                np.zeros(3), np.array([0.0, 0.0, 1.0]), v, v, v)

    @given(st.floats(0.05, 0.85), st.floats(0.05, 0.85))
    def test_hit_distance_matches_linear_solve(self, u, v):
        if u + v > 0.92:
            u, v = u / 2.0, v / 2.0
        origin = np.array([0.3, -0.4, -2.0])
        aim = TRI_Z1[0] + u * (TRI_Z1[1] - TRI_Z1[0]) + v * (TRI_Z1[2] - TRI_Z1[0])
        d = aim - origin
        d = d / np.linalg.norm(d)
        out = ray_triangle_intersect(origin, d, *TRI_Z1)
        assert out is not None
        t_ref, _, _ = ray_plane_solve(origin, d, np.stack(TRI_Z1))
        assert out[0] == pytest.approx(t_ref, rel=1e-12)

    def test_against_sampling_oracle(self):
        cases = generate_ray_triangle_cases(150, seed=9)
        hits = 0
        for origin, direction, tri in cases:
            sampled = sampled_ray_min_distance(origin, direction, tri)
            out = ray_triangle_intersect(origin, direction, tri[0], tri[1], tri[2])
            assert (sampled < SAMPLING_HIT_THRESHOLD) == (out is not None)
            if out is not None:
                hits += 1
                t, point = out
                assert t > 0
                np.testing.assert_allclose(point, origin + t * direction, atol=1e-12)
                assert plane_residual(point, tri) < 1e-6
        assert 30 < hits < 120  # the generator mixes both outcomes


class TestScanConfig:
    def test_defaults(self):
        cfg = default_scan_config()
        assert len(cfg.vertical_angles) == 64
        assert cfg.vertical_angles[0] == pytest.approx(-24.8)
        assert cfg.vertical_angles[-1] == pytest.approx(2.0)
        assert cfg.horizontal_resolution == 0.2
        assert cfg.horizontal_span == (0.0, 360.0)

    def test_empty_vertical_angles(self):
        with pytest.raises(ValueError, match="vertical_angles"):
            ScanConfig(vertical_angles=())

    def test_non_finite_fields(self):
        with pytest.raises(ValueError, match="vertical"):
            ScanConfig(vertical_angles=(0.0, float("nan")))
        with pytest.raises(ValueError, match="resolution"):
            ScanConfig(vertical_angles=(0.0,), horizontal_resolution=0.0)
        with pytest.raises(ValueError, match="span"):
            ScanConfig(vertical_angles=(0.0,), horizontal_span=(0.0, float("inf")))

    def test_dict_roundtrip(self):
        cfg = ScanConfig(
            origin=Point3(0.5, -0.25, 1.75),
            vertical_angles=(-3.0, 0.0, 2.5),
            horizontal_resolution=0.4,
            horizontal_span=(10.0, 110.0),
        )
        again = ScanConfig.from_dict(cfg.to_dict())
        assert again == cfg

    def test_dict_keys_are_explicit_about_units(self):
        d = default_scan_config().to_dict()
        assert set(d) == {
            "origin", "vertical_angles",
            "horizontal_resolution_deg", "horizontal_span_deg",
        }

    def test_hashable(self):
        cfg = ScanConfig(vertical_angles=(0.0, 1.0))
        assert cfg in {cfg}

    def test_load_from_file(self, tmp_path):
        cfg = ScanConfig(vertical_angles=(-1.0, 0.0), horizontal_span=(0.0, 90.0))
        path = tmp_path / "scan.json"
        path.write_text(json.dumps(cfg.to_dict()))
        assert load_scan_config(path) == cfg

    def test_load_rejects_bad_files(self, tmp_path):
        path = tmp_path / "scan.json"
        path.write_text("{not json")
        with pytest.raises(MalformedFileError):
            load_scan_config(path)
        path.write_text(json.dumps({"origin": [0, 0, 0]}))
        with pytest.raises(MalformedFileError):
            load_scan_config(path)


def _soup_mesh() -> TriangleMesh:
    """Random triangle soup all around the origin plus targeted extras.

    Extras: a floor triangle whose bounding sphere encloses the origin (dense
    fallback), a face straight up (polar fallback), and a face at ~40 degrees
    elevation no configured beam can reach.
    """
    rng = np.random.default_rng(2024)
    tris = []
    for _ in range(14):
        azim = rng.uniform(0.0, 2 * math.pi)
        dist = rng.uniform(3.5, 7.0)
        center = np.array([dist * math.cos(azim), dist * math.sin(azim),
                           rng.uniform(-1.5, 0.8)])
        tris.append(center[None, :] + rng.normal(size=(3, 3)) * 0.9)
    tris.append(np.array([[-12.0, -12.0, -1.8], [12.0, -12.0, -1.8], [0.0, 16.0, -1.8]]))
    tris.append(np.array([[-0.4, -0.3, 6.0], [0.5, -0.2, 6.1], [0.0, 0.5, 6.2]]))
    tris.append(np.array([[2.8, -0.3, 2.5], [3.4, 0.3, 2.6], [3.1, 0.1, 3.0]]))
    verts = np.concatenate(tris, axis=0)
    faces = np.arange(len(verts), dtype=np.int64).reshape(-1, 3)
    return TriangleMesh(verts, faces)


def _assert_scan_matches_brute(mesh: TriangleMesh, cfg: ScanConfig):
    cloud = simulate_scan(mesh, cfg)
    expected = expected_scan_points(mesh, cfg)
    assert cloud.xyz.shape == expected.shape
    if len(expected):
        np.testing.assert_allclose(cloud.xyz, expected, atol=1e-9, rtol=0)
        assert (cloud.intensity == 1.0).all()
    return cloud


class TestSimulateScan:
    def test_full_circle_soup(self):
        cfg = ScanConfig(
            vertical_angles=tuple(np.linspace(-15.0, 5.0, 16)),
            horizontal_resolution=6.0,
            horizontal_span=(0.0, 354.0),
        )
        cloud = _assert_scan_matches_brute(_soup_mesh(), cfg)
        assert len(cloud) > 50

    def test_perturbation_mesh_window_path(self):
        rng = np.random.default_rng(31)
        pts = np.array([5.0, 0.0, 0.0]) + rng.uniform(-0.5, 0.5, size=(8, 3))
        mesh = build_perturbation_mesh(pts, radius=0.05)
        cfg = ScanConfig(
            vertical_angles=tuple(np.linspace(-5.0, 5.0, 11)),
            horizontal_resolution=1.0,
            horizontal_span=(0.0, 359.0),
        )
        cloud = _assert_scan_matches_brute(mesh, cfg)
        assert len(cloud) > 0

    def test_partial_span_with_straddling_faces(self):
        # faces poke over both span edges; one face sits just below the span
        # start so only its wrapped tail is visible
        tris = [
            np.array([[3.0, 1.6, -0.2], [3.4, 2.2, -0.1], [3.1, 1.9, 0.4]]),
            np.array([[2.4, 4.3, -0.5], [2.9, 4.8, -0.3], [2.6, 4.5, 0.2]]),
            np.array([[4.33, 2.45, -0.3], [4.40, 2.60, 0.3], [4.25, 2.52, 0.1]]),
            np.array([[-0.3, 5.1, -0.4], [0.3, 5.2, -0.2], [0.0, 5.0, 0.5]]),
        ]
        verts = np.concatenate(tris, axis=0)
        mesh = TriangleMesh(verts, np.arange(12, dtype=np.int64).reshape(-1, 3))
        cfg = ScanConfig(
            origin=Point3(0.5, -0.3, 0.2),
            vertical_angles=tuple(np.linspace(-10.0, 2.0, 8)),
            horizontal_resolution=0.7,
            horizontal_span=(30.0, 90.0),
        )
        assert len(beam_directions(cfg)) == 86 * 8
        cloud = _assert_scan_matches_brute(mesh, cfg)
        assert len(cloud) > 0

    def test_polar_face(self):
        mesh = icosphere(np.array([0.3, 0.2, 4.0]), 0.6)
        cfg = ScanConfig(
            vertical_angles=(-10.0, 0.0, 85.0),
            horizontal_resolution=10.0,
            horizontal_span=(0.0, 350.0),
        )
        cloud = _assert_scan_matches_brute(mesh, cfg)
        assert len(cloud) > 0

    def test_unreachable_elevation_is_empty(self):
        tri = np.array([[2.8, -0.3, 2.5], [3.4, 0.3, 2.6], [3.1, 0.1, 3.0]])
        mesh = TriangleMesh(tri, np.array([[0, 1, 2]]))
        cfg = ScanConfig(
            vertical_angles=(-5.0, -2.0, 0.0),
            horizontal_resolution=2.0,
            horizontal_span=(0.0, 358.0),
        )
        cloud = _assert_scan_matches_brute(mesh, cfg)
        assert len(cloud) == 0

    def test_empty_mesh(self):
        mesh = TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=int))
        cfg = ScanConfig(vertical_angles=(0.0,), horizontal_span=(0.0, 90.0))
        assert len(simulate_scan(mesh, cfg)) == 0

    def test_inverted_span_yields_no_beams(self):
        cfg = ScanConfig(vertical_angles=(0.0,), horizontal_span=(90.0, 10.0))
        assert len(simulate_scan(_soup_mesh(), cfg)) == 0

    def test_deterministic(self):
        cfg = ScanConfig(
            vertical_angles=tuple(np.linspace(-15.0, 5.0, 16)),
            horizontal_resolution=6.0,
            horizontal_span=(0.0, 354.0),
        )
        mesh = _soup_mesh()
        a = simulate_scan(mesh, cfg)
        b = simulate_scan(mesh, cfg)
        assert a.xyz.tobytes() == b.xyz.tobytes()


class TestStl:
    def test_roundtrip_quantizes_to_single_precision(self, tmp_path):
        mesh = build_perturbation_mesh(
            np.array([[1.0, 2.0, 3.0], [0.1, -0.2, 0.3], [4.0, 4.0, 4.0]]),
            radius=0.02,
        )
        path = tmp_path / "mesh.stl"
        export_stl(mesh, path)
        back = load_stl(path)
        assert back.num_faces == mesh.num_faces
        assert back.num_vertices == mesh.num_faces * 3  # unindexed
        want = mesh.triangles().astype("<f4").astype(np.float64)
        np.testing.assert_array_equal(back.triangles(), want)

    def test_file_layout_against_struct_reader(self, tmp_path):
        mesh = icosphere(np.array([0.5, 0.5, 0.5]), 0.3)
        path = tmp_path / "ball.stl"
        export_stl(mesh, path)

        raw = path.read_bytes()
        assert raw.startswith(b"binary stl")
        assert len(raw) == 84 + 50 * mesh.num_faces

        count, normals, verts = ref_read_stl(path)
        assert count == mesh.num_faces
        np.testing.assert_array_equal(
            verts, mesh.triangles().astype("<f4").astype(np.float64))
        # stored normals follow the winding and are unit length
        recomputed = np.cross(verts[:, 1] - verts[:, 0], verts[:, 2] - verts[:, 0])
        recomputed /= np.linalg.norm(recomputed, axis=1, keepdims=True)
        np.testing.assert_allclose(normals, recomputed, atol=1e-5)
        np.testing.assert_allclose(np.linalg.norm(normals, axis=1), 1.0, atol=1e-5)

    def test_empty_mesh_roundtrip(self, tmp_path):
        mesh = TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=int))
        path = tmp_path / "empty.stl"
        export_stl(mesh, path)
        assert load_stl(path).num_faces == 0

    def test_truncated_header(self, tmp_path):
        path = tmp_path / "short.stl"
        path.write_bytes(b"\0" * 50)
        with pytest.raises(MalformedFileError, match="header"):
            load_stl(path)

    def test_count_payload_mismatch(self, tmp_path):
        path = tmp_path / "bad_count.stl"
        path.write_bytes(b"\0" * 80 + struct.pack("<I", 2) + b"\0" * 50)
        with pytest.raises(MalformedFileError, match="expected"):
            load_stl(path)

    def test_degenerate_facet_rejected(self, tmp_path):
        facet = struct.pack("<12fH", 0, 0, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 0)
        path = tmp_path / "degenerate.stl"
        path.write_bytes(b"\0" * 80 + struct.pack("<I", 1) + facet)
        with pytest.raises(MalformedFileError, match="degenerate"):
            load_stl(path)
