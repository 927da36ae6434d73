"""Mesh reconstruction of candidate points and a simulated spinning scanner.

A set of perturbation points is realized as a union of small icospheres
(subdivision level 1: 42 vertices / 80 faces per point) so it can be scanned
and 3D-printed. The simulated scanner sweeps one ray per (horizontal,
vertical) angle pair from a fixed origin,

    direction(h, a) = (cos a * cos h,  cos a * sin h,  sin a),

and keeps the nearest mesh intersection per beam. Output points carry
intensity 1.0 and appear in beam order (horizontal-major, then vertical).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import MalformedFileError
from .pointcloud import Point3, PointCloud

# Tolerances used by the intersection test. Rays are unit length, so the ray
# parameter t is metric distance.
MIN_HIT_DISTANCE = 1e-9
PARALLEL_EPS = 1e-12

_STL_FACET = np.dtype(
    [("normal", "<f4", 3), ("verts", "<f4", (3, 3)), ("attr", "<u2")]
)
assert _STL_FACET.itemsize == 50


class TriangleMesh:
    """Indexed triangle soup: (V, 3) float64 vertices, (F, 3) int64 faces.

    Face indices must be in range and no face may be degenerate (zero area);
    both are rejected at construction.
    """

    __slots__ = ("vertices", "faces")

    def __init__(self, vertices: np.ndarray, faces: np.ndarray):
        vertices = np.ascontiguousarray(np.asarray(vertices, dtype=np.float64))
        faces = np.ascontiguousarray(np.asarray(faces, dtype=np.int64))
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise ValueError(f"vertices must be (V, 3), got {vertices.shape}")
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise ValueError(f"faces must be (F, 3), got {faces.shape}")
        if not np.isfinite(vertices).all():
            raise ValueError("non-finite vertex coordinate")
        if faces.size:
            if faces.min() < 0 or faces.max() >= len(vertices):
                raise ValueError("face index out of range")
            tri = vertices[faces]
            cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
            area2 = np.linalg.norm(cross, axis=1)
            if (area2 <= 1e-18).any():
                bad = int(np.flatnonzero(area2 <= 1e-18)[0])
                raise ValueError(f"degenerate face {bad}")
        self.vertices = vertices
        self.faces = faces

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_faces(self) -> int:
        return len(self.faces)

    def triangles(self) -> np.ndarray:
        """(F, 3, 3) array of face corner coordinates."""
        return self.vertices[self.faces]

    def __repr__(self) -> str:
        return f"TriangleMesh({self.num_vertices} vertices, {self.num_faces} faces)"


# -- icosphere ------------------------------------------------------------------

def _unit_icosphere(subdivisions: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Unit icosphere by midpoint subdivision of an icosahedron.

    Level 1 gives 42 vertices and 80 faces. Construction is fully
    deterministic: faces are visited in order and edge midpoints are cached
    by sorted vertex-index pair.
    """
    phi = (1.0 + 5.0 ** 0.5) / 2.0
    verts = [
        (-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
        (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
        (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [np.asarray(v, dtype=np.float64) for v in verts]
    verts = [v / np.linalg.norm(v) for v in verts]

    for _ in range(subdivisions):
        midpoint_cache: dict[tuple[int, int], int] = {}

        def midpoint(i: int, j: int) -> int:
            key = (i, j) if i < j else (j, i)
            if key not in midpoint_cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                midpoint_cache[key] = len(verts) - 1
            return midpoint_cache[key]

        next_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            next_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = next_faces

    return np.array(verts), np.array(faces, dtype=np.int64)


_ICO_VERTS, _ICO_FACES = _unit_icosphere(1)


def icosphere(center: np.ndarray, radius: float, subdivisions: int = 1) -> TriangleMesh:
    """Icosphere mesh around `center`."""
    if radius <= 0.0 or not np.isfinite(radius):
        raise ValueError(f"radius must be positive and finite: {radius!r}")
    if subdivisions == 1:
        verts, faces = _ICO_VERTS, _ICO_FACES
    else:
        verts, faces = _unit_icosphere(subdivisions)
    center = np.asarray(center, dtype=np.float64).reshape(3)
    return TriangleMesh(verts * radius + center, faces.copy())


def build_perturbation_mesh(points, radius: float = 0.02) -> TriangleMesh:
    """Union-of-icospheres mesh for a perturbation point set.

    `points` may be a PointCloud or an (n, 3) array. Sphere order follows
    point order, so the mesh is deterministic for a given input.
    """
    xyz = points.xyz if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64)
    xyz = xyz.reshape(-1, 3)
    if not len(xyz):
        raise ValueError("cannot build a mesh from zero points")
    if not np.isfinite(xyz).all():
        raise ValueError("non-finite point coordinate")
    if radius <= 0.0 or not np.isfinite(radius):
        raise ValueError(f"radius must be positive and finite: {radius!r}")
    n = len(xyz)
    nv = len(_ICO_VERTS)
    verts = (_ICO_VERTS * radius)[None, :, :] + xyz[:, None, :]
    faces = _ICO_FACES[None, :, :] + (np.arange(n, dtype=np.int64) * nv)[:, None, None]
    return TriangleMesh(verts.reshape(-1, 3), faces.reshape(-1, 3))


# -- ray / triangle -------------------------------------------------------------

def ray_triangle_intersect(origin, direction, v0, v1, v2):
    """Nearest forward intersection of a unit ray with one triangle.

    Returns (t, point) with t the metric distance along the ray, or None when
    the ray misses, is parallel to the triangle plane (|dir . n| < 1e-12 with
    n the unit normal), or hits behind/too close to the origin (t <= 1e-9).
    Boundary hits (edges, vertices) count as hits.
    """
    o = np.asarray(origin, dtype=np.float64).reshape(3)
    d = np.asarray(direction, dtype=np.float64).reshape(3)
    norm = np.linalg.norm(d)
    if abs(norm - 1.0) > 1e-9:
        raise ValueError(f"direction must be unit length, |d| = {norm}")
    a = np.asarray(v0, dtype=np.float64).reshape(3)
    e1 = np.asarray(v1, dtype=np.float64).reshape(3) - a
    e2 = np.asarray(v2, dtype=np.float64).reshape(3) - a

    n = np.cross(e1, e2)
    n_len = np.linalg.norm(n)
    if n_len <= 0.0:
        raise ValueError("degenerate triangle")
    pvec = np.cross(d, e2)
    det = float(e1 @ pvec)
    if abs(det) < PARALLEL_EPS * n_len:
        return None
    inv = 1.0 / det
    tvec = o - a
    u = float(tvec @ pvec) * inv
    if u < 0.0 or u > 1.0:
        return None
    qvec = np.cross(tvec, e1)
    v = float(d @ qvec) * inv
    if v < 0.0 or u + v > 1.0:
        return None
    t = float(e2 @ qvec) * inv
    if t <= MIN_HIT_DISTANCE:
        return None
    return t, o + t * d


# -- scan configuration ----------------------------------------------------------

@dataclass(frozen=True)
class ScanConfig:
    """Scanner geometry: ray origin, vertical angle list, horizontal walk.

    Angles are degrees. The horizontal walk visits
    ``start, start + res, ...`` up to and including ``end`` when it lands on
    the grid; an inverted span (end < start) yields no beams.
    """

    origin: Point3 = Point3(0.0, 0.0, 0.0)
    vertical_angles: tuple[float, ...] = ()
    horizontal_resolution: float = 0.2
    horizontal_span: tuple[float, float] = (0.0, 360.0)

    def __post_init__(self):
        if not self.vertical_angles:
            raise ValueError("vertical_angles must be non-empty")
        va = tuple(float(a) for a in self.vertical_angles)
        if any(not np.isfinite(a) for a in va):
            raise ValueError("non-finite vertical angle")
        object.__setattr__(self, "vertical_angles", va)
        if not (np.isfinite(self.horizontal_resolution) and self.horizontal_resolution > 0):
            raise ValueError(f"horizontal_resolution must be > 0: {self.horizontal_resolution!r}")
        span = (float(self.horizontal_span[0]), float(self.horizontal_span[1]))
        if any(not np.isfinite(s) for s in span):
            raise ValueError("non-finite horizontal span")
        object.__setattr__(self, "horizontal_span", span)

    def to_dict(self) -> dict:
        return {
            "origin": [self.origin.x, self.origin.y, self.origin.z],
            "vertical_angles": list(self.vertical_angles),
            "horizontal_resolution_deg": self.horizontal_resolution,
            "horizontal_span_deg": list(self.horizontal_span),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScanConfig":
        ox, oy, oz = (float(v) for v in d["origin"])
        return cls(
            origin=Point3(ox, oy, oz),
            vertical_angles=tuple(float(a) for a in d["vertical_angles"]),
            horizontal_resolution=float(d["horizontal_resolution_deg"]),
            horizontal_span=tuple(float(s) for s in d["horizontal_span_deg"]),
        )


def default_scan_config() -> ScanConfig:
    """64-beam spinning unit: vertical -24.8..2 degrees, 0.2 degree azimuth
    steps over a full turn, origin at the sensor frame origin."""
    return ScanConfig(
        origin=Point3(0.0, 0.0, 0.0),
        vertical_angles=tuple(np.linspace(-24.8, 2.0, 64)),
        horizontal_resolution=0.2,
        horizontal_span=(0.0, 360.0),
    )


def load_scan_config(path: str | Path) -> ScanConfig:
    try:
        doc = json.loads(Path(path).read_text())
        return ScanConfig.from_dict(doc)
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise MalformedFileError(f"{path}: bad scan config ({exc})") from exc


@lru_cache(maxsize=8)
def _beam_grid(config: ScanConfig) -> tuple[np.ndarray, np.ndarray]:
    """Unit beam directions for a config, horizontal-major, plus beam count.

    Returns (dirs (H*A, 3), origin (3,)). Cached: the grid for the default
    config is ~115k rays and rebuilding it per evaluation would dominate the
    scan cost.
    """
    start, end = config.horizontal_span
    res = config.horizontal_resolution
    if end < start:
        nh = 0
    else:
        nh = int(np.floor((end - start) / res + 1e-9)) + 1
    h = np.deg2rad(start + res * np.arange(nh))
    a = np.deg2rad(np.asarray(config.vertical_angles, dtype=np.float64))
    ca, sa = np.cos(a), np.sin(a)
    ch, sh = np.cos(h), np.sin(h)
    dirs = np.empty((nh, len(a), 3), dtype=np.float64)
    dirs[:, :, 0] = ch[:, None] * ca[None, :]
    dirs[:, :, 1] = sh[:, None] * ca[None, :]
    dirs[:, :, 2] = sa[None, :]
    return dirs.reshape(-1, 3), config.origin.as_array()


class _FacePrecomp:
    """Per-face constants of the Moller-Trumbore test for a fixed origin."""

    __slots__ = ("v0", "e1", "e2", "n_len", "tvec", "qvec", "t_num")

    def __init__(self, mesh: TriangleMesh, origin: np.ndarray):
        tri = mesh.triangles()
        self.v0 = tri[:, 0]
        self.e1 = tri[:, 1] - self.v0
        self.e2 = tri[:, 2] - self.v0
        self.n_len = np.linalg.norm(np.cross(self.e1, self.e2), axis=1)
        self.tvec = origin - self.v0
        self.qvec = np.cross(self.tvec, self.e1)
        self.t_num = np.einsum("fj,fj->f", self.e2, self.qvec)


def _pair_hits(
    hits: np.ndarray,
    dirs: np.ndarray,
    pre: _FacePrecomp,
    beam_idx: np.ndarray,
    face_idx: np.ndarray,
) -> None:
    """Min-reduce beam/face candidate pairs into per-beam hit distances."""
    d = dirs[beam_idx]
    e1 = pre.e1[face_idx]
    e2 = pre.e2[face_idx]
    pvec = np.cross(d, e2)
    det = np.einsum("pj,pj->p", e1, pvec)
    ok = np.abs(det) >= PARALLEL_EPS * pre.n_len[face_idx]
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(ok, 1.0 / det, 0.0)
        u = np.einsum("pj,pj->p", pre.tvec[face_idx], pvec) * inv
        v = np.einsum("pj,pj->p", d, pre.qvec[face_idx]) * inv
        t = pre.t_num[face_idx] * inv
    ok &= (u >= 0.0) & (u <= 1.0) & (v >= 0.0) & (u + v <= 1.0) & (t > MIN_HIT_DISTANCE)
    np.minimum.at(hits, beam_idx[ok], t[ok])


def _dense_hits(
    hits: np.ndarray,
    dirs: np.ndarray,
    pre: _FacePrecomp,
    faces: np.ndarray,
) -> None:
    """Exhaustive beams-by-faces test for the given face subset."""
    if not len(faces):
        return
    chunk = max(1, int(2_000_000 // len(faces)))
    e1 = pre.e1[faces]
    e2 = pre.e2[faces]
    n_len = pre.n_len[faces]
    tvec = pre.tvec[faces]
    qvec = pre.qvec[faces]
    t_num = pre.t_num[faces]
    for lo in range(0, len(dirs), chunk):
        d = dirs[lo:lo + chunk]                          # (B, 3)
        pvec = np.cross(d[:, None, :], e2[None, :, :])   # (B, F, 3)
        det = np.einsum("fj,bfj->bf", e1, pvec)
        ok = np.abs(det) >= PARALLEL_EPS * n_len[None, :]
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = np.where(ok, 1.0 / det, 0.0)
            u = np.einsum("fj,bfj->bf", tvec, pvec) * inv
            v = np.einsum("bj,fj->bf", d, qvec) * inv
            t = t_num[None, :] * inv
        ok &= (u >= 0.0) & (u <= 1.0) & (v >= 0.0) & (u + v <= 1.0) & (t > MIN_HIT_DISTANCE)
        t = np.where(ok, t, np.inf)
        np.minimum(hits[lo:lo + chunk], t.min(axis=1), out=hits[lo:lo + chunk])


def simulate_scan(mesh: TriangleMesh, config: ScanConfig) -> PointCloud:
    """Cast every configured beam at the mesh; nearest hit per beam.

    Points come back in beam order with intensity 1.0. Each face is only
    tested against the beams whose azimuth/elevation can reach its bounding
    sphere (the windows are conservative over-approximations, so no hit is
    missed); faces too close to the origin or too near the poles fall back
    to testing every beam. Perturbation meshes resolve to a few thousand
    beam/face pairs instead of beams-times-faces.
    """
    dirs, origin = _beam_grid(config)
    if not len(dirs) or not mesh.num_faces:
        return PointCloud.empty()

    start = config.horizontal_span[0]
    res = config.horizontal_resolution
    n_vert = len(config.vertical_angles)
    nh = len(dirs) // n_vert
    vert = np.asarray(config.vertical_angles, dtype=np.float64)
    vert_order = np.argsort(vert, kind="stable")
    vert_sorted = vert[vert_order]
    # wrap azimuth indices only when the grid covers the full circle
    full_circle = res * nh >= 360.0 - 1e-9

    pre = _FacePrecomp(mesh, origin)
    tri = mesh.triangles()
    centers = tri.mean(axis=1)
    radii = np.linalg.norm(tri - centers[:, None, :], axis=2).max(axis=1)

    rel = centers - origin
    dist = np.linalg.norm(rel, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        ang = np.arcsin(np.minimum(radii / dist, 1.0)) * 1.05 + 1e-9
        el = np.degrees(np.arctan2(rel[:, 2], np.hypot(rel[:, 0], rel[:, 1])))
        az = np.degrees(np.arctan2(rel[:, 1], rel[:, 0]))
    ang_deg = np.degrees(ang)
    el_pad = np.abs(el) + ang_deg
    cos_min = np.cos(np.radians(np.minimum(el_pad, 90.0)))
    dense = (dist <= 2.0 * radii) | (el_pad >= 80.0) | (cos_min <= 0.2)

    hits = np.full(len(dirs), np.inf)
    sparse_faces = np.flatnonzero(~dense)
    if len(sparse_faces):
        # exact spherical bound: beams within 3D angle `ang` of the center
        # direction satisfy sin(daz/2) <= sin(ang/2) / cos(elevation)
        ratio = np.minimum(np.sin(ang[sparse_faces] / 2.0) / cos_min[sparse_faces], 1.0)
        az_width = np.degrees(2.0 * np.arcsin(ratio))
        off = np.mod(az[sparse_faces] - start, 360.0)
        el_lo = el[sparse_faces] - ang_deg[sparse_faces]
        el_hi = el[sparse_faces] + ang_deg[sparse_faces]
        iv_lo = np.searchsorted(vert_sorted, el_lo, side="left")
        iv_hi = np.searchsorted(vert_sorted, el_hi, side="right")

        def _col_range(center_off: float, width: float) -> np.ndarray:
            lo = int(np.ceil((center_off - width) / res)) - 1
            hi = int(np.floor((center_off + width) / res)) + 1
            return np.arange(lo, hi + 1)

        beam_parts: list[np.ndarray] = []
        face_parts: list[np.ndarray] = []
        for k, f in enumerate(sparse_faces):
            if iv_lo[k] >= iv_hi[k]:
                continue
            cols = _col_range(off[k], az_width[k])
            if full_circle:
                cols = np.unique(np.mod(cols, nh))
            else:
                # a face just below span start sits at offset ~360; probe the
                # negative-wrapped range too so the first columns still see it
                cols = np.concatenate([cols, _col_range(off[k] - 360.0, az_width[k])])
                cols = np.unique(cols[(cols >= 0) & (cols < nh)])
            if not len(cols):
                continue
            rows = vert_order[iv_lo[k]:iv_hi[k]]
            beams = (cols[:, None] * n_vert + rows[None, :]).ravel()
            beam_parts.append(beams)
            face_parts.append(np.full(len(beams), f, dtype=np.int64))
        if beam_parts:
            _pair_hits(
                hits, dirs, pre,
                np.concatenate(beam_parts), np.concatenate(face_parts),
            )

    _dense_hits(hits, dirs, pre, np.flatnonzero(dense))

    hit_mask = np.isfinite(hits)
    if not hit_mask.any():
        return PointCloud.empty()
    rows = np.flatnonzero(hit_mask)
    pts = origin[None, :] + hits[rows, None] * dirs[rows]
    return PointCloud.from_xyz(pts, intensity=1.0)


# -- STL ------------------------------------------------------------------------

def export_stl(mesh: TriangleMesh, path: str | Path) -> None:
    """Write binary STL (80-byte header, uint32 facet count, 50-byte facets).

    Facet normals are recomputed from vertex winding, so the file is
    self-consistent regardless of how the mesh was assembled.
    """
    tri = mesh.triangles()
    normals = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    lens = np.linalg.norm(normals, axis=1, keepdims=True)
    normals = normals / lens

    rec = np.zeros(mesh.num_faces, dtype=_STL_FACET)
    rec["normal"] = normals.astype("<f4")
    rec["verts"] = tri.astype("<f4")
    header = b"binary stl; units: meters".ljust(80, b"\0")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(struct.pack("<I", mesh.num_faces))
        fh.write(rec.tobytes())


def load_stl(path: str | Path) -> TriangleMesh:
    """Read a binary STL back into an (unindexed) TriangleMesh."""
    raw = Path(path).read_bytes()
    if len(raw) < 84:
        raise MalformedFileError(f"{path}: shorter than an STL header")
    (count,) = struct.unpack_from("<I", raw, 80)
    expected = 84 + 50 * count
    if len(raw) != expected:
        raise MalformedFileError(
            f"{path}: expected {expected} bytes for {count} facets, got {len(raw)}"
        )
    rec = np.frombuffer(raw, dtype=_STL_FACET, count=count, offset=84)
    verts = rec["verts"].astype(np.float64).reshape(-1, 3)
    faces = np.arange(len(verts), dtype=np.int64).reshape(-1, 3)
    try:
        return TriangleMesh(verts, faces)
    except ValueError as exc:
        raise MalformedFileError(f"{path}: {exc}") from exc
