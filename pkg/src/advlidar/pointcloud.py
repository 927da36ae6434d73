"""Point-cloud container, KITTI velodyne I/O, rigid transforms, set distances.

The on-disk format is the KITTI velodyne layout: consecutive 16-byte
little-endian records of four float32 values ``x, y, z, intensity``, in
sensor-frame meters. Record order is significant and preserved by load/save.

Coordinates are held as float64 in memory so rigid transforms keep their
isometry guarantees; ``save_kitti_bin`` quantizes to float32 on write, which
is lossless for anything that came out of a .bin file or a decoded chromosome.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import pdist

from .errors import MalformedFileError

RECORD_BYTES = 16
VALID_LABELS = ("Car", "Pedestrian", "Cyclist")


@dataclass(frozen=True)
class Point3:
    """One LiDAR return: sensor-frame coordinates plus reflectance in [0, 1]."""

    x: float
    y: float
    z: float
    intensity: float = 0.0

    def __post_init__(self):
        for name in ("x", "y", "z"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"non-finite coordinate {name}={getattr(self, name)!r}")
        if not math.isfinite(self.intensity) or not 0.0 <= self.intensity <= 1.0:
            raise ValueError(f"intensity outside [0, 1]: {self.intensity!r}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)


class PointCloud:
    """Ordered point set stored as an (N, 4) float64 array [x, y, z, intensity].

    Every row satisfies the `Point3` invariants: finite coordinates, intensity
    in [0, 1]. Instances are treated as immutable once built; the lazily built
    KD-tree over xyz is shared by distance queries and constraint repair.
    """

    __slots__ = ("data", "_tree")

    def __init__(self, data: np.ndarray):
        arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        if arr.ndim != 2 or arr.shape[1] != 4:
            raise ValueError(f"expected an (N, 4) array, got shape {arr.shape}")
        if arr.shape[0]:
            finite = np.isfinite(arr)
            if not finite[:, :3].all():
                bad = int(np.flatnonzero(~finite[:, :3].all(axis=1))[0])
                raise ValueError(f"non-finite coordinate at point {bad}")
            inten = arr[:, 3]
            ok = finite[:, 3] & (inten >= 0.0) & (inten <= 1.0)
            if not ok.all():
                bad = int(np.flatnonzero(~ok)[0])
                raise ValueError(f"intensity outside [0, 1] at point {bad}")
        self.data = arr
        self._tree = None

    # -- construction helpers -------------------------------------------------

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.empty((0, 4), dtype=np.float64))

    @classmethod
    def from_xyz(cls, xyz: np.ndarray, intensity: float | np.ndarray = 0.0) -> "PointCloud":
        xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        data = np.empty((xyz.shape[0], 4), dtype=np.float64)
        data[:, :3] = xyz
        data[:, 3] = intensity
        return cls(data)

    # -- views ----------------------------------------------------------------

    def __len__(self) -> int:
        return self.data.shape[0]

    @property
    def xyz(self) -> np.ndarray:
        return self.data[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.data[:, 3]

    def kdtree(self) -> cKDTree:
        if self._tree is None:
            if not len(self):
                raise ValueError("cannot build a KD-tree over an empty cloud")
            self._tree = cKDTree(self.xyz)
        return self._tree

    def equals(self, other: "PointCloud") -> bool:
        return np.array_equal(self.data, other.data)

    def __repr__(self) -> str:
        return f"PointCloud({len(self)} points)"


def merge(*clouds: PointCloud) -> PointCloud:
    """Concatenate clouds in argument order (order inside each cloud kept)."""
    if not clouds:
        return PointCloud.empty()
    return PointCloud(np.concatenate([c.data for c in clouds], axis=0))


# -- KITTI binary I/O ---------------------------------------------------------

def load_kitti_bin(path: str | Path) -> PointCloud:
    """Read a KITTI velodyne .bin file.

    Raises:
        MalformedFileError: file length is not a multiple of 16 bytes, or a
            record holds a non-finite value / out-of-range intensity (the
            record index is reported).
    """
    raw = Path(path).read_bytes()
    if len(raw) % RECORD_BYTES:
        raise MalformedFileError(
            f"{path}: length {len(raw)} is not a multiple of {RECORD_BYTES}"
        )
    arr = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float64)
    if arr.shape[0]:
        finite = np.isfinite(arr)
        if not finite.all():
            bad = int(np.flatnonzero(~finite.all(axis=1))[0])
            raise MalformedFileError(f"{path}: non-finite value in record {bad}")
        inten = arr[:, 3]
        if (inten < 0.0).any() or (inten > 1.0).any():
            bad = int(np.flatnonzero((inten < 0.0) | (inten > 1.0))[0])
            raise MalformedFileError(f"{path}: intensity outside [0, 1] in record {bad}")
    return PointCloud(arr)


def save_kitti_bin(cloud: PointCloud, path: str | Path) -> None:
    """Write a cloud as little-endian float32 records, one per point."""
    Path(path).write_bytes(cloud.data.astype("<f4").tobytes())


# -- rigid transforms ---------------------------------------------------------

def rotation_z(psi: float) -> np.ndarray:
    """3x3 rotation about +z by `psi` radians (right-handed)."""
    c, s = math.cos(psi), math.sin(psi)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotate_z(cloud: PointCloud, psi: float) -> PointCloud:
    """Rotate every point about the z axis; intensities untouched."""
    if not math.isfinite(psi):
        raise ValueError(f"non-finite angle: {psi!r}")
    out = cloud.data.copy()
    out[:, :3] = cloud.xyz @ rotation_z(psi).T
    return PointCloud(out)


def translate(cloud: PointCloud, delta: np.ndarray) -> PointCloud:
    delta = np.asarray(delta, dtype=np.float64).reshape(3)
    if not np.isfinite(delta).all():
        raise ValueError(f"non-finite translation: {delta!r}")
    out = cloud.data.copy()
    out[:, :3] += delta
    return PointCloud(out)


# -- set distances ------------------------------------------------------------

def chamfer_to_target(perturb: PointCloud, target: PointCloud) -> float:
    """One-directional Chamfer distance: mean over `perturb` of the nearest
    Euclidean distance into `target`. Zero iff every perturbation point
    coincides with some target point."""
    if not len(perturb) or not len(target):
        raise ValueError("chamfer_to_target requires two non-empty clouds")
    dists, _ = target.kdtree().query(perturb.xyz)
    return float(np.mean(dists))


def mean_pairwise_distance(cloud: PointCloud) -> float:
    """Mean Euclidean distance over all unordered point pairs; 0.0 for a
    single-point cloud."""
    n = len(cloud)
    if n == 0:
        raise ValueError("mean_pairwise_distance requires a non-empty cloud")
    if n == 1:
        return 0.0
    return float(pdist(cloud.xyz).mean())


# -- ground-truth boxes and scenes ---------------------------------------------

@dataclass(frozen=True)
class BoundingBox:
    """Oriented (yaw-only) box: center, positive half extents, yaw in [-pi, pi)."""

    center: Point3
    half_extents: tuple[float, float, float]
    yaw: float

    def __post_init__(self):
        he = tuple(float(v) for v in self.half_extents)
        if len(he) != 3 or any(not math.isfinite(v) or v <= 0.0 for v in he):
            raise ValueError(f"half extents must be three positive finites: {self.half_extents!r}")
        if not math.isfinite(self.yaw):
            raise ValueError(f"non-finite yaw: {self.yaw!r}")
        object.__setattr__(self, "half_extents", he)
        # normalize into [-pi, pi)
        wrapped = (self.yaw + math.pi) % (2.0 * math.pi) - math.pi
        object.__setattr__(self, "yaw", wrapped)

    def contains(self, point_xyz: np.ndarray) -> bool:
        """True when the point lies inside or on the box boundary."""
        p = np.asarray(point_xyz, dtype=np.float64).reshape(3) - self.center.as_array()
        local = rotation_z(-self.yaw) @ p
        return bool(np.all(np.abs(local) <= np.asarray(self.half_extents) + 1e-12))

    def to_dict(self) -> dict:
        return {
            "center": [self.center.x, self.center.y, self.center.z],
            "half_extents": list(self.half_extents),
            "yaw": self.yaw,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BoundingBox":
        cx, cy, cz = (float(v) for v in d["center"])
        return cls(
            center=Point3(cx, cy, cz),
            half_extents=tuple(float(v) for v in d["half_extents"]),
            yaw=float(d["yaw"]),
        )


@dataclass
class Scene:
    """One attack scenario: static background, target object, its label and box."""

    background: PointCloud
    target: PointCloud
    label: str
    gt_box: BoundingBox
    name: str = ""

    def __post_init__(self):
        if self.label not in VALID_LABELS:
            raise ValueError(f"unknown label {self.label!r}, expected one of {VALID_LABELS}")
        if not len(self.target):
            raise ValueError("scene target cloud is empty")


def load_scene(path: str | Path) -> Scene:
    """Load a scene JSON file; .bin paths resolve relative to the file."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise MalformedFileError(f"{path}: {exc}") from exc
    try:
        background = load_kitti_bin(path.parent / doc["background"])
        target = load_kitti_bin(path.parent / doc["target"])
        label = doc["label"]
        gt_box = BoundingBox.from_dict(doc["gt_box"])
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedFileError(f"{path}: bad scene document ({exc})") from exc
    try:
        return Scene(background, target, label, gt_box, name=path.stem)
    except ValueError as exc:
        raise MalformedFileError(f"{path}: {exc}") from exc


def save_scene(scene: Scene, path: str | Path) -> None:
    """Write the scene JSON next to its two .bin files (<stem>_bg / <stem>_target)."""
    path = Path(path)
    bg_name = f"{path.stem}_bg.bin"
    target_name = f"{path.stem}_target.bin"
    save_kitti_bin(scene.background, path.parent / bg_name)
    save_kitti_bin(scene.target, path.parent / target_name)
    doc = {
        "background": bg_name,
        "target": target_name,
        "label": scene.label,
        "gt_box": scene.gt_box.to_dict(),
    }
    path.write_text(json.dumps(doc, indent=2) + "\n")
