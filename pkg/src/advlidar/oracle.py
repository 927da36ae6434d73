"""Detector oracle boundary: verdict classification, builtin toy detectors,
and the newline-delimited-JSON client for external detectors.

The attack treats every detector as a black box with one operation,
``detect(cloud) -> [Detection]``. Three verdicts cover the outcome against a
scene's ground truth: the target is still recognized with its true label
(RecognizedCorrect), it produces no matching above-threshold detection
(Hidden), or it is matched with the wrong label (Misclassified). Hidden and
Misclassified both count as attack success.

Wire protocol (version 1), one JSON document per line over stdio or TCP:

    -> {"op": "hello", "version": 1}
    <- {"op": "hello", "version": 1, "name": str,
        "default_threshold": num, "classes": [str, ...]}
    -> {"op": "detect", "id": n, "points": [[x, y, z, intensity], ...]}
    <- {"op": "detections", "id": n, "detections": [
            {"label": str, "score": num,
             "box": {"center": [x, y, z], "half_extents": [hx, hy, hz],
                     "yaw": num}}, ...]}
    -> {"op": "shutdown"}            (peer exits; no reply)
    <- {"op": "error", "message": str}   (any request the peer rejects)

Request ids are monotonically increasing per connection and must be echoed;
a mismatched id or malformed reply is a protocol error, a silent peer is a
transport error after the timeout (5 s default).
"""

from __future__ import annotations

import json
import math
import queue
import shlex
import socket
import subprocess
import threading
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .errors import ConfigError, ProtocolError, TransportError
from .pointcloud import BoundingBox, Point3, PointCloud, Scene

PROTOCOL_VERSION = 1
DEFAULT_TIMEOUT = 5.0

# Toy-detector knobs. MIN_CLUSTER_POINTS is the minimum-evidence rule: any
# cluster (or whole cloud) with fewer points produces no detection.
MIN_CLUSTER_POINTS = 5
CLUSTER_CELL = 0.4
TOY_TAU = 1.35
CLASS_NAMES = ("Car", "Pedestrian", "Cyclist")

# Per-component weights applied to the raw feature vector
# [log1p(count), extent_x, extent_y, extent_z, hist x8, log1p(voxels)].
# Height structure separates the toy classes best, so extent_z and the
# height histogram carry most of the metric; raw counts are noisy under
# occlusion and get damped.
_FEATURE_SCALE = np.array([0.3, 0.4, 0.4, 1.7] + [2.5] * 8 + [0.3])

_PACK_OFFSET = 1 << 20
_PACK_LIMIT = 1 << 21


@dataclass(frozen=True)
class Detection:
    """One detector output: class label, confidence in [0, 1], oriented box."""

    label: str
    score: float
    box: BoundingBox

    def __post_init__(self):
        if not self.label:
            raise ValueError("empty detection label")
        if not math.isfinite(self.score) or not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score outside [0, 1]: {self.score!r}")

    def to_dict(self) -> dict:
        return {"label": self.label, "score": self.score, "box": self.box.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "Detection":
        return cls(
            label=str(d["label"]),
            score=float(d["score"]),
            box=BoundingBox.from_dict(d["box"]),
        )


@dataclass(frozen=True)
class DetectorInfo:
    """Handshake metadata for a detector."""

    name: str
    default_threshold: float
    classes: tuple[str, ...]


class VerdictCase(Enum):
    RECOGNIZED_CORRECT = "recognized_correct"
    HIDDEN = "hidden"
    MISCLASSIFIED = "misclassified"


@dataclass(frozen=True)
class OracleVerdict:
    """Outcome of one detect() call against a scene's ground truth.

    ``score_s`` is the matched detection's score; for Hidden it is the best
    sub-threshold matched score (0 when nothing matched at all), which keeps
    the downstream fitness continuous as a detection fades below threshold.
    """

    case: VerdictCase
    matched: Detection | None
    score_s: float

    def to_dict(self) -> dict:
        return {
            "case": self.case.value,
            "score": self.score_s,
            "matched": self.matched.to_dict() if self.matched else None,
        }


def classify_verdict(
    detections: list[Detection],
    scene: Scene,
    info: DetectorInfo,
    iou_gate: float = 0.0,
) -> OracleVerdict:
    """Match detections to the scene's ground-truth box and classify.

    A detection matches when its box center lies inside the ground-truth box;
    among matches the highest score wins (earlier detection on ties). No
    match, or a matched score below the detector's default threshold, is
    Hidden. `iou_gate` is reserved for future use and currently ignored.
    """
    del iou_gate
    matched: Detection | None = None
    for det in detections:
        if scene.gt_box.contains(det.box.center.as_array()):
            if matched is None or det.score > matched.score:
                matched = det
    if matched is None:
        return OracleVerdict(VerdictCase.HIDDEN, None, 0.0)
    if matched.score < info.default_threshold:
        return OracleVerdict(VerdictCase.HIDDEN, matched, matched.score)
    if matched.label == scene.label:
        return OracleVerdict(VerdictCase.RECOGNIZED_CORRECT, matched, matched.score)
    return OracleVerdict(VerdictCase.MISCLASSIFIED, matched, matched.score)


def attack_success(verdict: OracleVerdict) -> bool:
    """Hidden or Misclassified both defeat the detector."""
    return verdict.case is not VerdictCase.RECOGNIZED_CORRECT


# -- toy world templates --------------------------------------------------------
#
# Deterministic surface samplings of three compact shapes. The toy world is
# intentionally small-scale: class geometries sit close enough in feature
# space that points confined to a thin shell around the object can move a
# cluster across class boundaries, which is what makes the desk benchmark
# attackable at all.


def _axis_grid(lo: float, hi: float, step: float) -> np.ndarray:
    n = max(2, int(round((hi - lo) / step)) + 1)
    return np.linspace(lo, hi, n)


def _box_shell(center, size, step: float) -> np.ndarray:
    cx, cy, cz = center
    sx, sy, sz = size
    x = _axis_grid(cx - sx / 2, cx + sx / 2, step)
    y = _axis_grid(cy - sy / 2, cy + sy / 2, step)
    z = _axis_grid(cz - sz / 2, cz + sz / 2, step)
    faces = []
    xx, yy = np.meshgrid(x, y, indexing="ij")
    for zc in (z[0], z[-1]):
        faces.append(np.stack([xx.ravel(), yy.ravel(), np.full(xx.size, zc)], axis=1))
    xx, zz = np.meshgrid(x, z, indexing="ij")
    for yc in (y[0], y[-1]):
        faces.append(np.stack([xx.ravel(), np.full(xx.size, yc), zz.ravel()], axis=1))
    yy, zz = np.meshgrid(y, z, indexing="ij")
    for xc in (x[0], x[-1]):
        faces.append(np.stack([np.full(yy.size, xc), yy.ravel(), zz.ravel()], axis=1))
    return np.concatenate(faces, axis=0)


def _cylinder_shell(cx: float, cy: float, z0: float, z1: float, r: float, step: float) -> np.ndarray:
    n_theta = max(8, int(round(2 * math.pi * r / step)))
    theta = np.linspace(0.0, 2 * math.pi, n_theta, endpoint=False)
    zs = _axis_grid(z0, z1, step)
    tt, zz = np.meshgrid(theta, zs, indexing="ij")
    side = np.stack(
        [cx + r * np.cos(tt).ravel(), cy + r * np.sin(tt).ravel(), zz.ravel()], axis=1
    )
    # top cap as concentric rings
    rings = []
    for rr in _axis_grid(0.0, r, step)[1:]:
        m = max(4, int(round(2 * math.pi * rr / step)))
        th = np.linspace(0.0, 2 * math.pi, m, endpoint=False)
        rings.append(
            np.stack(
                [cx + rr * np.cos(th), cy + rr * np.sin(th), np.full(m, z1)], axis=1
            )
        )
    rings.append(np.array([[cx, cy, z1]]))
    return np.concatenate([side] + rings, axis=0)


def _sphere_shell(cx: float, cy: float, cz: float, r: float, step: float) -> np.ndarray:
    n_lat = max(4, int(round(math.pi * r / step)))
    pts = []
    for lat in np.linspace(-math.pi / 2, math.pi / 2, n_lat):
        ring_r = r * math.cos(lat)
        m = max(3, int(round(2 * math.pi * max(ring_r, step / 4) / step)))
        th = np.linspace(0.0, 2 * math.pi, m, endpoint=False)
        pts.append(
            np.stack(
                [
                    cx + ring_r * np.cos(th),
                    cy + ring_r * np.sin(th),
                    np.full(m, cz + r * math.sin(lat)),
                ],
                axis=1,
            )
        )
    return np.concatenate(pts, axis=0)


@lru_cache(maxsize=1)
def class_templates() -> dict[str, PointCloud]:
    """Canonical template cloud per class, centered at origin, base at z=0."""
    car = np.concatenate(
        [
            _box_shell((0.0, 0.0, 0.55), (2.2, 1.3, 0.7), 0.10),
            _box_shell((-0.1, 0.0, 1.125), (1.2, 1.0, 0.45), 0.10),
        ]
    )
    pedestrian = np.concatenate(
        [
            _cylinder_shell(0.0, 0.0, 0.0, 1.55, 0.28, 0.07),
            _sphere_shell(0.0, 0.0, 1.64, 0.14, 0.06),
        ]
    )
    cyclist = np.concatenate(
        [
            _box_shell((0.0, 0.0, 0.55), (1.7, 0.45, 0.9), 0.08),
            _cylinder_shell(-0.15, 0.0, 1.0, 1.75, 0.24, 0.08),
        ]
    )
    return {
        "Car": PointCloud.from_xyz(car, intensity=0.5),
        "Pedestrian": PointCloud.from_xyz(pedestrian, intensity=0.5),
        "Cyclist": PointCloud.from_xyz(cyclist, intensity=0.5),
    }


# -- voxel clustering -----------------------------------------------------------

def _pack_cells(ijk: np.ndarray) -> np.ndarray:
    """Pack (N, 3) integer cells into sortable int64 keys."""
    shifted = ijk + _PACK_OFFSET
    if shifted.min() < 0 or shifted.max() >= _PACK_LIMIT:
        raise ValueError("coordinates out of packable range (~±200 km)")
    return (
        shifted[:, 0] * (1 << 42) + shifted[:, 1] * (1 << 21) + shifted[:, 2]
    )


# One representative per +/- offset pair: enough for an undirected adjacency
# graph over the 26-neighborhood.
_HALF_NEIGHBORHOOD = [
    (dx, dy, dz)
    for dx in (-1, 0, 1)
    for dy in (-1, 0, 1)
    for dz in (-1, 0, 1)
    if (dx, dy, dz) < (0, 0, 0)
]


def _cluster_points(xyz: np.ndarray, cell: float = CLUSTER_CELL) -> np.ndarray:
    """Connected components over occupied voxels (26-connectivity); returns a
    cluster id per point."""
    ijk = np.floor(xyz / cell).astype(np.int64)
    keys = _pack_cells(ijk)
    uniq, inverse = np.unique(keys, return_inverse=True)
    nv = len(uniq)
    src, dst = [], []
    for dx, dy, dz in _HALF_NEIGHBORHOOD:
        nb = uniq + dx * (1 << 42) + dy * (1 << 21) + dz
        pos = np.searchsorted(uniq, nb)
        pos_c = np.clip(pos, 0, nv - 1)
        found = uniq[pos_c] == nb
        if found.any():
            src.append(np.flatnonzero(found))
            dst.append(pos_c[found])
    if src:
        rows = np.concatenate(src)
        cols = np.concatenate(dst)
        graph = coo_matrix(
            (np.ones(len(rows), dtype=np.int8), (rows, cols)), shape=(nv, nv)
        )
        _, comp = connected_components(graph, directed=False)
    else:
        comp = np.arange(nv)
    return comp[inverse]


def _cluster_features(xyz: np.ndarray, voxel_size: float) -> np.ndarray:
    """13-dim feature vector: log point count, bbox extents, 8-bin height
    histogram (fractions), log occupied-voxel count."""
    n = len(xyz)
    mins = xyz.min(axis=0)
    maxs = xyz.max(axis=0)
    extents = maxs - mins
    z = xyz[:, 2]
    zmin, zmax = float(z.min()), float(z.max())
    if zmax - zmin < 1e-9:
        hist = np.zeros(8)
        hist[0] = 1.0
    else:
        counts, _ = np.histogram(z, bins=8, range=(zmin, zmax))
        hist = counts / n
    vox = len(np.unique(_pack_cells(np.floor(xyz / voxel_size).astype(np.int64))))
    raw = np.concatenate([[math.log1p(n)], extents, hist, [math.log1p(vox)]])
    return raw * _FEATURE_SCALE


class ToyVoxelDetector:
    """Deterministic nearest-template detector over voxelized clusters.

    Clusters the cloud on a coarse occupancy grid, extracts per-cluster
    features, and scores each class with exp(-||f - f_class||^2 / tau)
    normalized over classes. A detection is emitted only when the top score
    reaches the threshold. No randomness anywhere; same cloud, same answer.
    """

    def __init__(
        self,
        template_set: dict[str, PointCloud],
        threshold: float = 0.5,
        voxel_size: float = 0.2,
        tau: float = TOY_TAU,
        name: str | None = None,
    ):
        if not template_set:
            raise ValueError("template set must be non-empty")
        if not 0.0 < threshold <= 1.0:
            raise ValueError(f"threshold must be in (0, 1]: {threshold!r}")
        if voxel_size <= 0 or tau <= 0:
            raise ValueError("voxel_size and tau must be positive")
        self.voxel_size = float(voxel_size)
        self.tau = float(tau)
        self._labels = tuple(template_set)
        self._class_feats = np.stack(
            [_cluster_features(template_set[lbl].xyz, self.voxel_size) for lbl in self._labels]
        )
        self.info = DetectorInfo(
            name=name or f"voxel{voxel_size:g}",
            default_threshold=float(threshold),
            classes=self._labels,
        )
        self.calls = 0

    def detect(self, cloud: PointCloud) -> list[Detection]:
        self.calls += 1
        if len(cloud) < MIN_CLUSTER_POINTS:
            return []
        xyz = cloud.xyz
        comp = _cluster_points(xyz)
        ncomp = comp.max() + 1
        first_idx = np.full(ncomp, len(xyz))
        np.minimum.at(first_idx, comp, np.arange(len(xyz)))
        detections: list[Detection] = []
        for cid in np.argsort(first_idx, kind="stable"):
            mask = comp == cid
            if int(mask.sum()) < MIN_CLUSTER_POINTS:
                continue
            pts = xyz[mask]
            feats = _cluster_features(pts, self.voxel_size)
            d2 = ((feats[None, :] - self._class_feats) ** 2).sum(axis=1)
            logits = -d2 / self.tau
            logits -= logits.max()
            e = np.exp(logits)
            scores = e / e.sum()
            top = int(np.argmax(scores))
            score = float(scores[top])
            if score < self.info.default_threshold:
                continue
            mins = pts.min(axis=0)
            maxs = pts.max(axis=0)
            center = (mins + maxs) / 2.0
            half = np.maximum((maxs - mins) / 2.0, 0.01)
            detections.append(
                Detection(
                    label=self._labels[top],
                    score=score,
                    box=BoundingBox(
                        center=Point3(*center),
                        half_extents=tuple(half),
                        yaw=0.0,
                    ),
                )
            )
        return detections

    def close(self) -> None:
        pass

    def __enter__(self) -> "ToyVoxelDetector":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def toy_voxel_detector(
    template_set: dict[str, PointCloud], threshold: float = 0.5, **kwargs
) -> ToyVoxelDetector:
    return ToyVoxelDetector(template_set, threshold=threshold, **kwargs)


BUILTIN_ORACLES = ("voxel0.2", "voxel0.4")


def builtin_oracle(name: str) -> ToyVoxelDetector:
    if name == "voxel0.2":
        return ToyVoxelDetector(class_templates(), voxel_size=0.2)
    if name == "voxel0.4":
        return ToyVoxelDetector(class_templates(), voxel_size=0.4)
    raise ConfigError(f"unknown builtin oracle {name!r}, have {BUILTIN_ORACLES}")


# -- external oracle transports ---------------------------------------------------

class _StdioTransport:
    """Line transport over a child process's stdin/stdout.

    stdout is drained by a daemon thread into a queue so receives can honor
    the timeout without blocking on the pipe.
    """

    def __init__(self, command: str):
        try:
            self._proc = subprocess.Popen(
                shlex.split(command),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
            )
        except OSError as exc:
            raise TransportError(f"failed to spawn {command!r}: {exc}") from exc
        self._queue: queue.Queue = queue.Queue()
        self._reader = threading.Thread(target=self._drain, daemon=True)
        self._reader.start()

    def _drain(self) -> None:
        assert self._proc.stdout is not None
        for line in self._proc.stdout:
            self._queue.put(line)
        self._queue.put(None)  # EOF sentinel

    def send(self, line: str) -> None:
        assert self._proc.stdin is not None
        try:
            self._proc.stdin.write(line.encode("utf-8") + b"\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise TransportError(f"peer process closed its stdin: {exc}") from exc

    def recv(self, timeout: float) -> str:
        try:
            line = self._queue.get(timeout=timeout)
        except queue.Empty:
            raise TransportError(f"no reply within {timeout} s") from None
        if line is None:
            raise TransportError("peer process closed its stdout")
        return line.decode("utf-8")

    def close(self) -> None:
        for stream in (self._proc.stdin, self._proc.stdout):
            try:
                if stream:
                    stream.close()
            except OSError:
                pass
        try:
            self._proc.wait(timeout=2.0)
        except subprocess.TimeoutExpired:
            self._proc.kill()
            self._proc.wait()

    def exit_code(self, timeout: float) -> int | None:
        try:
            return self._proc.wait(timeout=timeout)
        except subprocess.TimeoutExpired:
            return None


class _TcpTransport:
    """Line transport over a TCP connection."""

    def __init__(self, host: str, port: int, timeout: float = DEFAULT_TIMEOUT):
        try:
            self._sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise TransportError(f"cannot connect to {host}:{port}: {exc}") from exc
        self._file = self._sock.makefile("rwb")

    def send(self, line: str) -> None:
        try:
            self._file.write(line.encode("utf-8") + b"\n")
            self._file.flush()
        except OSError as exc:
            raise TransportError(f"peer hung up: {exc}") from exc

    def recv(self, timeout: float) -> str:
        self._sock.settimeout(timeout)
        try:
            line = self._file.readline()
        except socket.timeout:
            raise TransportError(f"no reply within {timeout} s") from None
        except OSError as exc:
            raise TransportError(f"receive failed: {exc}") from exc
        if not line:
            raise TransportError("peer closed the connection")
        return line.decode("utf-8")

    def close(self) -> None:
        try:
            self._file.close()
        except OSError:
            pass
        try:
            self._sock.close()
        except OSError:
            pass

    def exit_code(self, timeout: float) -> int | None:
        del timeout
        return None


def _dump_line(msg: dict) -> str:
    return json.dumps(msg, separators=(",", ":"))


class ExternalOracle:
    """Protocol-v1 client for a detector behind stdio or TCP.

    Performs the hello handshake at construction, serializes requests per
    connection, assigns monotonically increasing ids and verifies each reply
    echoes the id it answers.
    """

    def __init__(self, transport, timeout: float = DEFAULT_TIMEOUT):
        self._transport = transport
        self._timeout = timeout
        self._lock = threading.Lock()
        self._next_id = 1
        self.calls = 0
        reply = self._roundtrip({"op": "hello", "version": PROTOCOL_VERSION})
        if reply.get("op") != "hello":
            raise ProtocolError(f"expected hello reply, got {reply.get('op')!r}", reply)
        if reply.get("version") != PROTOCOL_VERSION:
            raise ProtocolError(
                f"unsupported protocol version {reply.get('version')!r}", reply
            )
        try:
            self.info = DetectorInfo(
                name=str(reply["name"]),
                default_threshold=float(reply["default_threshold"]),
                classes=tuple(str(c) for c in reply["classes"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"bad hello payload: {exc}", reply) from exc

    def _roundtrip(self, msg: dict) -> dict:
        self._transport.send(_dump_line(msg))
        line = self._transport.recv(self._timeout)
        try:
            reply = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"reply is not valid JSON: {exc}", line) from exc
        if not isinstance(reply, dict):
            raise ProtocolError("reply is not a JSON object", reply)
        return reply

    def detect(self, cloud: PointCloud) -> list[Detection]:
        with self._lock:
            rid = self._next_id
            self._next_id += 1
            reply = self._roundtrip(
                {"op": "detect", "id": rid, "points": cloud.data.tolist()}
            )
            if reply.get("op") == "error":
                raise ProtocolError(f"oracle error: {reply.get('message')}", reply)
            if reply.get("op") != "detections":
                raise ProtocolError(f"expected detections, got {reply.get('op')!r}", reply)
            if reply.get("id") != rid:
                raise ProtocolError(
                    f"reply id {reply.get('id')!r} does not match request id {rid}", reply
                )
            raw = reply.get("detections")
            if not isinstance(raw, list):
                raise ProtocolError("detections field is not a list", reply)
            try:
                dets = [Detection.from_dict(d) for d in raw]
            except (KeyError, TypeError, ValueError) as exc:
                raise ProtocolError(f"bad detection payload: {exc}", reply) from exc
            self.calls += 1
            return dets

    def close(self) -> None:
        try:
            self._transport.send(_dump_line({"op": "shutdown"}))
        except TransportError:
            pass
        self._transport.close()

    def __enter__(self) -> "ExternalOracle":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def _open_transport(spec: str, timeout: float = DEFAULT_TIMEOUT):
    if spec.startswith("exec:"):
        return _StdioTransport(spec[len("exec:"):])
    if spec.startswith("tcp:"):
        rest = spec[len("tcp:"):]
        host, sep, port = rest.rpartition(":")
        if not sep or not host:
            raise ConfigError(f"tcp spec must be tcp:<host>:<port>: {spec!r}")
        try:
            return _TcpTransport(host, int(port), timeout=timeout)
        except ValueError as exc:
            raise ConfigError(f"bad port in {spec!r}") from exc
    raise ConfigError(f"unknown oracle spec {spec!r}")


def connect_oracle(spec: str, timeout: float = DEFAULT_TIMEOUT):
    """Resolve an oracle spec string to a live handle.

    Grammar: ``builtin:<name>`` | ``exec:<command>`` | ``tcp:<host>:<port>``.
    """
    if spec.startswith("builtin:"):
        return builtin_oracle(spec[len("builtin:"):])
    if spec.startswith(("exec:", "tcp:")):
        return ExternalOracle(_open_transport(spec, timeout), timeout=timeout)
    raise ConfigError(
        f"unknown oracle spec {spec!r}; expected builtin:<name>, exec:<cmd> or tcp:<host>:<port>"
    )


# -- protocol conformance ----------------------------------------------------------

def golden_transcript_path() -> Path:
    """Location of the golden protocol transcript shipped with the package."""
    return Path(resources.files("advlidar").joinpath("data/golden_transcript.ndjson"))


def _json_close(expected, actual, tol: float = 1e-9) -> bool:
    """Structural JSON equality with numeric tolerance (bools compared exactly)."""
    if isinstance(expected, bool) or isinstance(actual, bool):
        return expected is actual
    if isinstance(expected, (int, float)) and isinstance(actual, (int, float)):
        return math.isclose(expected, actual, rel_tol=tol, abs_tol=tol)
    if isinstance(expected, dict):
        return (
            isinstance(actual, dict)
            and expected.keys() == actual.keys()
            and all(_json_close(v, actual[k], tol) for k, v in expected.items())
        )
    if isinstance(expected, list):
        return (
            isinstance(actual, list)
            and len(expected) == len(actual)
            and all(_json_close(e, a, tol) for e, a in zip(expected, actual))
        )
    return expected == actual


def load_transcript(path: str | Path | None = None) -> list[dict]:
    path = Path(path) if path is not None else golden_transcript_path()
    records = []
    for i, line in enumerate(path.read_text().splitlines()):
        line = line.strip()
        if not line:
            continue
        rec = json.loads(line)
        if rec.get("dir") not in ("send", "recv") or "msg" not in rec:
            raise ValueError(f"{path}:{i + 1}: transcript record must be dir+msg")
        records.append(rec)
    return records


def replay_transcript(transport, records: list[dict], timeout: float = DEFAULT_TIMEOUT) -> list[str]:
    """Replay the golden transcript; returns human-readable mismatch strings.

    Comparison is structural with 1e-9 numeric tolerance, so peers are free
    to format floats however they like but not to change content.
    """
    mismatches: list[str] = []
    for i, rec in enumerate(records):
        if rec["dir"] == "send":
            transport.send(_dump_line(rec["msg"]))
            continue
        try:
            line = transport.recv(timeout)
        except TransportError as exc:
            mismatches.append(f"record {i + 1}: transport failed: {exc}")
            return mismatches
        try:
            actual = json.loads(line)
        except json.JSONDecodeError:
            mismatches.append(f"record {i + 1}: reply is not valid JSON: {line!r}")
            continue
        if not _json_close(rec["msg"], actual):
            mismatches.append(
                f"record {i + 1}: expected {_dump_line(rec['msg'])}, got {line.strip()}"
            )
    return mismatches


def check_conformance(
    spec: str, transcript_path: str | Path | None = None, timeout: float = DEFAULT_TIMEOUT
) -> list[str]:
    """Run the golden-transcript conformance suite against an external oracle.

    The transcript ends with a shutdown request; for exec transports the peer
    process must then exit cleanly.
    """
    if spec.startswith("builtin:"):
        raise ConfigError("conformance checks apply to external oracles only")
    records = load_transcript(transcript_path)
    transport = _open_transport(spec, timeout)
    try:
        mismatches = replay_transcript(transport, records, timeout)
        if not mismatches and records and records[-1]["msg"].get("op") == "shutdown":
            code = transport.exit_code(timeout)
            if code is not None and code != 0:
                mismatches.append(f"peer exited with status {code} after shutdown")
    finally:
        transport.close()
    return mismatches


def check_structural(spec: str, timeout: float = DEFAULT_TIMEOUT) -> list[str]:
    """Behavior-agnostic protocol checks for real detector bridges.

    Verifies the handshake shape, id echoing on two detect calls, the error
    reply for an unknown op, and that detections parse, without pinning any
    particular detector output.
    """
    problems: list[str] = []
    try:
        oracle = connect_oracle(spec, timeout=timeout)
    except (TransportError, ProtocolError) as exc:
        return [f"handshake failed: {exc}"]
    try:
        probe = PointCloud.from_xyz(
            np.array([[1.0, 2.0, 3.0]] * 6), intensity=0.5
        )
        try:
            oracle.detect(probe)
            oracle.detect(PointCloud.from_xyz(np.array([[0.0, 0.0, 0.0]]), intensity=1.0))
        except (TransportError, ProtocolError) as exc:
            problems.append(f"detect failed: {exc}")
        try:
            reply = oracle._roundtrip({"op": "frobnicate"})
            if reply.get("op") != "error":
                problems.append(f"unknown op answered with {reply.get('op')!r}, not error")
        except (TransportError, ProtocolError) as exc:
            problems.append(f"unknown-op probe failed: {exc}")
    finally:
        oracle.close()
    return problems
