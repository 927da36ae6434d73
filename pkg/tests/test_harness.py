"""Robustness sweeps, report serialization, and the external-oracle client."""

import json
import math
import socket
import sys
import threading
from types import SimpleNamespace

import numpy as np
import pytest

from advlidar.errors import ConfigError, ProtocolError, TransportError
from advlidar.gsa import AttackConfig, scan_and_classify
from advlidar.harness import (
    CSV_HEADER,
    Report,
    ReportRow,
    SweepSpec,
    compute_asr,
    summarize_attacks,
    sweep_angle,
    sweep_distance,
    sweep_srs,
)
from advlidar.oracle import (
    ExternalOracle,
    _json_close,
    attack_success,
    check_conformance,
    check_structural,
    connect_oracle,
    golden_transcript_path,
    load_transcript,
)
from advlidar.pointcloud import BoundingBox, Point3, PointCloud, Scene

from conftest import stub_command
from stub_oracle import detections_for

# perturbation that scans to a tiny isolated cluster far from any target
NOOP_POINTS = np.array([[30.0, 0.0, 5.0], [30.1, 0.0, 5.0]])


class TestSweepSpec:
    def test_kind_must_be_known(self):
        with pytest.raises(ConfigError, match="kind"):
            SweepSpec("speed", (1.0,))

    def test_values_must_be_nonempty_and_finite(self):
        with pytest.raises(ConfigError, match="non-empty"):
            SweepSpec("distance", ())
        with pytest.raises(ConfigError, match="finite"):
            SweepSpec("distance", (0.0, math.inf))
        with pytest.raises(ConfigError, match="finite"):
            SweepSpec("angle", (math.nan,))

    def test_srs_values_are_integer_counts(self):
        with pytest.raises(ConfigError, match="removal counts"):
            SweepSpec("srs", (-1,))
        with pytest.raises(ConfigError, match="removal counts"):
            SweepSpec("srs", (1.5,))
        assert SweepSpec("srs", (0, 5.0)).values == (0, 5.0)

    def test_trials_must_be_positive(self):
        with pytest.raises(ConfigError, match="trials_per_value"):
            SweepSpec("angle", (1.0,), trials_per_value=0)

    def test_values_coerced_to_tuple(self):
        assert SweepSpec("distance", [0.0, 1.0]).values == (0.0, 1.0)


class TestReport:
    def test_row_asr(self):
        row = ReportRow("c", scenes=4, successes=3, mean_calls=1.0, mean_ms=2.0)
        assert row.asr == 0.75

    def test_row_to_dict_error_key_only_when_set(self):
        clean = ReportRow("c", 2, 1, 1.0, 2.0)
        assert "error" not in clean.to_dict()
        bad = ReportRow("c", 2, 0, 1.0, 2.0, error="boom")
        assert bad.to_dict()["error"] == "boom"

    def test_csv_format(self):
        report = Report(
            kind="distance",
            rows=[ReportRow("distance+0m", 4, 2, 1.0, 2.5)],
            values=[0.0],
        )
        assert report.to_csv() == CSV_HEADER + "\n" + "distance+0m,4,2,0.5000,1.00,2.500\n"

    def test_plot_data(self):
        report = Report(
            kind="srs",
            rows=[ReportRow("srs_k=0", 2, 2, 1.0, 1.0), ReportRow("srs_k=5", 2, 1, 1.0, 1.0)],
            values=[0.0, 5.0],
        )
        assert report.plot_data() == {"kind": "srs", "x": [0.0, 5.0], "y": [1.0, 0.5]}

    def test_write_creates_csv_and_json(self, tmp_path):
        report = Report(kind="angle", rows=[ReportRow("angle+5deg", 1, 0, 1.0, 3.0)], values=[5.0])
        written = report.write(tmp_path / "out" / "sweep")
        assert [p.name for p in written] == ["sweep.csv", "sweep.json"]
        assert written[0].read_text() == report.to_csv()
        assert json.loads(written[1].read_text()) == report.to_json_dict()

    def test_write_with_plot_data(self, tmp_path):
        report = Report(kind="angle", rows=[ReportRow("angle+5deg", 1, 1, 1.0, 3.0)], values=[5.0])
        written = report.write(tmp_path / "sweep", plot_data=True)
        assert written[2].name == "sweep_plot.json"
        assert json.loads(written[2].read_text()) == report.plot_data()

    def test_compute_asr(self):
        results = [SimpleNamespace(success=s) for s in (True, False, True, True)]
        assert compute_asr(results) == 0.75
        with pytest.raises(ValueError):
            compute_asr([])

    def test_summarize_attacks(self):
        results = [
            SimpleNamespace(success=True, oracle_calls=10, wall_time_s=0.5),
            SimpleNamespace(success=False, oracle_calls=20, wall_time_s=1.5),
        ]
        report = summarize_attacks(results, condition="batch")
        (row,) = report.rows
        assert row.condition == "batch"
        assert row.scenes == 2
        assert row.successes == 1
        assert row.mean_calls == 15.0
        assert row.mean_ms == 1000.0
        with pytest.raises(ValueError):
            summarize_attacks([])


class _BoomOracle:
    """Raises on every detect call; info mimics a builtin."""

    def __init__(self, exc):
        self._exc = exc
        self.info = SimpleNamespace(default_threshold=0.5)

    def detect(self, cloud):
        raise self._exc


class TestSweeps:
    def baseline_success(self, scene, voxel, fast_cfg) -> bool:
        verdict, _ = scan_and_classify(NOOP_POINTS, scene, voxel, voxel.info, fast_cfg)
        return attack_success(verdict)

    def test_zero_conditions_reproduce_baseline(self, bench_scene0, voxel, fast_cfg):
        base = self.baseline_success(bench_scene0, voxel, fast_cfg)
        dist = sweep_distance(NOOP_POINTS, bench_scene0, voxel, [0.0], config=fast_cfg, trials=2)
        angle = sweep_angle(NOOP_POINTS, bench_scene0, voxel, [0.0], config=fast_cfg, trials=2)
        srs = sweep_srs(NOOP_POINTS, bench_scene0, voxel, [0], config=fast_cfg, trials=2)
        for report in (dist, angle, srs):
            assert report.rows[0].successes == 2 * int(base)
            assert report.rows[0].scenes == 2
            assert report.rows[0].error is None

    def test_condition_labels(self, bench_scene0, voxel, fast_cfg):
        dist = sweep_distance(NOOP_POINTS, bench_scene0, voxel, [0.0, 1.0, -1.0], config=fast_cfg)
        assert [r.condition for r in dist.rows] == ["distance+0m", "distance+1m", "distance-1m"]
        assert dist.values == [0.0, 1.0, -1.0]
        assert dist.kind == "distance"
        angle = sweep_angle(NOOP_POINTS, bench_scene0, voxel, [15.0], config=fast_cfg)
        assert angle.rows[0].condition == "angle+15deg"
        srs = sweep_srs(NOOP_POINTS, bench_scene0, voxel, [0, 3], config=fast_cfg)
        assert [r.condition for r in srs.rows] == ["srs_k=0", "srs_k=3"]

    def test_accepts_individual_or_array(self, bench_scene0, voxel, fast_cfg):
        # anything with the same point rows must produce the same report
        wrapped = SimpleNamespace(points=NOOP_POINTS)  # not an Individual: treated as array
        a = sweep_srs(NOOP_POINTS, bench_scene0, voxel, [2], config=fast_cfg, trials=2)
        b = sweep_srs(NOOP_POINTS.tolist(), bench_scene0, voxel, [2], config=fast_cfg, trials=2)
        assert [r.successes for r in a.rows] == [r.successes for r in b.rows]
        del wrapped

    def test_srs_is_seed_deterministic(self, bench_scene0, voxel, fast_cfg):
        a = sweep_srs(NOOP_POINTS, bench_scene0, voxel, [0, 3], config=fast_cfg, trials=3, seed=5)
        b = sweep_srs(NOOP_POINTS, bench_scene0, voxel, [0, 3], config=fast_cfg, trials=3, seed=5)
        assert [r.successes for r in a.rows] == [r.successes for r in b.rows]

    def test_srs_removal_capped_by_cloud_size(self, bench_scene0, voxel, fast_cfg):
        with pytest.raises(ConfigError, match=">= cloud size"):
            sweep_srs(NOOP_POINTS, bench_scene0, voxel, [10**6], config=fast_cfg)

    def test_distance_needs_offset_target(self, voxel, fast_cfg):
        sym = np.array(
            [[0.1, 0, 0], [-0.1, 0, 0], [0, 0.1, 0], [0, -0.1, 0], [0, 0, 0.1], [0, 0, -0.1]]
        )
        scene = Scene(
            background=PointCloud.empty(),
            target=PointCloud.from_xyz(sym, intensity=0.5),
            label="Car",
            gt_box=BoundingBox(Point3(0.0, 0.0, 0.0), (1.0, 1.0, 1.0), 0.0),
        )
        with pytest.raises(ConfigError, match="coincides"):
            sweep_distance(NOOP_POINTS, scene, voxel, [0.0], config=fast_cfg)

    @pytest.mark.parametrize(
        "exc,name",
        [(TransportError("pipe broke"), "TransportError"), (ProtocolError("bad id"), "ProtocolError")],
    )
    def test_oracle_errors_recorded_per_row(self, bench_scene0, fast_cfg, exc, name):
        report = sweep_srs(
            NOOP_POINTS, bench_scene0, _BoomOracle(exc), [0, 1], config=fast_cfg, trials=2
        )
        assert len(report.rows) == 2  # sweep continues past failing rows
        for row in report.rows:
            assert row.error is not None and row.error.startswith(name)
            assert row.successes == 0
            assert row.scenes == 2

    def test_sweep_row_shape(self, bench_scene0, voxel, fast_cfg):
        report = sweep_angle(NOOP_POINTS, bench_scene0, voxel, [0.0, 90.0], config=fast_cfg, trials=3)
        for row in report.rows:
            assert row.scenes == 3
            assert 0 <= row.successes <= 3
            assert row.mean_calls == 1.0
            assert row.mean_ms >= 0.0


# -- external oracle ---------------------------------------------------------------


class TestStdioOracle:
    def test_handshake_info(self):
        with connect_oracle(stub_command()) as oracle:
            assert oracle.info.name == "stub"
            assert oracle.info.default_threshold == 0.5
            assert oracle.info.classes == ("Car", "Pedestrian", "Cyclist")

    def test_detect_round_trip(self):
        cloud = PointCloud.from_xyz(np.array([[1.0, 2.0, 3.0]] * 6), intensity=0.5)
        with connect_oracle(stub_command()) as oracle:
            dets = oracle.detect(cloud)
            assert len(dets) == 1
            assert dets[0].label == "Car"
            assert dets[0].score == 0.9
            np.testing.assert_allclose(dets[0].box.center.as_array(), [1.0, 2.0, 3.0])
            assert oracle.detect(PointCloud.from_xyz(np.zeros((1, 3)), intensity=0.0)) == []
            assert oracle.calls == 2

    def test_corrupt_ids_rejected(self):
        cloud = PointCloud.from_xyz(np.zeros((6, 3)), intensity=0.5)
        with connect_oracle(stub_command("--corrupt-ids")) as oracle:
            with pytest.raises(ProtocolError, match="does not match"):
                oracle.detect(cloud)

    def test_silent_peer_times_out(self):
        cloud = PointCloud.from_xyz(np.zeros((6, 3)), intensity=0.5)
        oracle = connect_oracle(stub_command("--silent"), timeout=0.5)
        try:
            with pytest.raises(TransportError, match="no reply within"):
                oracle.detect(cloud)
        finally:
            oracle.close()

    def test_non_json_reply_rejected(self):
        cloud = PointCloud.from_xyz(np.zeros((6, 3)), intensity=0.5)
        with connect_oracle(stub_command("--bad-json")) as oracle:
            with pytest.raises(ProtocolError, match="not valid JSON"):
                oracle.detect(cloud)

    def test_spawn_failure(self):
        with pytest.raises(TransportError, match="failed to spawn"):
            connect_oracle("exec:/no/such/binary-для-tests")

    def test_dead_peer_reported(self):
        spec = f"exec:{sys.executable} -c pass"
        with pytest.raises(TransportError):
            connect_oracle(spec, timeout=2.0)


class TestConnectSpec:
    def test_builtin_spec(self):
        oracle = connect_oracle("builtin:voxel0.2")
        assert oracle.info.name == "voxel0.2"

    @pytest.mark.parametrize(
        "spec,msg",
        [
            ("voxel0.2", "unknown oracle spec"),
            ("http:host:1", "unknown oracle spec"),
            ("tcp:9000", "tcp spec must be"),
            ("tcp:host:notaport", "bad port"),
            ("builtin:bogus", "unknown builtin"),
        ],
    )
    def test_bad_specs(self, spec, msg):
        with pytest.raises(ConfigError, match=msg):
            connect_oracle(spec)


def _serve_once(handler):
    """One-shot TCP server on an ephemeral port; returns the port."""
    srv = socket.socket()
    srv.bind(("127.0.0.1", 0))
    srv.listen(1)
    port = srv.getsockname()[1]

    def run():
        conn, _ = srv.accept()
        with conn:
            f = conn.makefile("rwb")
            handler(f)
            f.close()
        srv.close()

    threading.Thread(target=run, daemon=True).start()
    return port


def _speak_protocol(f):
    for raw in f:
        msg = json.loads(raw)
        op = msg.get("op")
        if op == "hello":
            out = {
                "op": "hello",
                "version": 1,
                "name": "tcp-stub",
                "default_threshold": 0.5,
                "classes": ["Car"],
            }
        elif op == "detect":
            out = {
                "op": "detections",
                "id": msg["id"],
                "detections": detections_for(msg["points"]),
            }
        elif op == "shutdown":
            return
        else:
            out = {"op": "error", "message": "unknown"}
        f.write((json.dumps(out) + "\n").encode())
        f.flush()


def _hello_then_silence(f):
    for raw in f:
        msg = json.loads(raw)
        if msg.get("op") == "hello":
            f.write(
                (
                    json.dumps(
                        {
                            "op": "hello",
                            "version": 1,
                            "name": "mute",
                            "default_threshold": 0.5,
                            "classes": ["Car"],
                        }
                    )
                    + "\n"
                ).encode()
            )
            f.flush()
        elif msg.get("op") == "shutdown":
            return
        # swallow everything else


class TestTcpOracle:
    def test_round_trip(self):
        port = _serve_once(_speak_protocol)
        with connect_oracle(f"tcp:127.0.0.1:{port}", timeout=5.0) as oracle:
            assert oracle.info.name == "tcp-stub"
            cloud = PointCloud.from_xyz(np.full((6, 3), 2.0), intensity=0.5)
            dets = oracle.detect(cloud)
            assert [d.label for d in dets] == ["Car"]

    def test_connection_refused(self):
        probe = socket.socket()
        probe.bind(("127.0.0.1", 0))
        port = probe.getsockname()[1]
        probe.close()
        with pytest.raises(TransportError, match="cannot connect"):
            connect_oracle(f"tcp:127.0.0.1:{port}", timeout=1.0)

    def test_detect_timeout(self):
        port = _serve_once(_hello_then_silence)
        oracle = connect_oracle(f"tcp:127.0.0.1:{port}", timeout=0.5)
        try:
            cloud = PointCloud.from_xyz(np.zeros((6, 3)), intensity=0.5)
            with pytest.raises(TransportError, match="no reply within"):
                oracle.detect(cloud)
        finally:
            oracle.close()


# -- conformance -------------------------------------------------------------------


class TestJsonClose:
    def test_numeric_tolerance(self):
        assert _json_close(0.5, 0.5 + 1e-12)
        assert not _json_close(0.5, 0.5 + 1e-6)
        assert _json_close(1, 1.0)

    def test_bools_compared_exactly(self):
        assert _json_close(True, True)
        assert not _json_close(True, 1)
        assert not _json_close(0, False)

    def test_structures(self):
        assert _json_close({"a": [1.0, {"b": 2}]}, {"a": [1.0, {"b": 2.0}]})
        assert not _json_close({"a": 1}, {"a": 1, "b": 2})
        assert not _json_close([1, 2], [1, 2, 3])
        assert _json_close("x", "x")
        assert not _json_close("x", "y")


class TestTranscript:
    def test_golden_transcript_loads(self):
        records = load_transcript()
        assert golden_transcript_path().exists()
        assert records[0] == {"dir": "send", "msg": {"op": "hello", "version": 1}}
        assert records[-1]["msg"] == {"op": "shutdown"}
        assert all(r["dir"] in ("send", "recv") for r in records)

    def test_malformed_transcript_rejected(self, tmp_path):
        path = tmp_path / "t.ndjson"
        path.write_text('{"dir": "sideways", "msg": {}}\n')
        with pytest.raises(ValueError, match="dir\\+msg"):
            load_transcript(path)
        path.write_text('{"dir": "send"}\n')
        with pytest.raises(ValueError, match="dir\\+msg"):
            load_transcript(path)

    def test_blank_lines_skipped(self, tmp_path):
        path = tmp_path / "t.ndjson"
        path.write_text('\n{"dir": "send", "msg": {"op": "shutdown"}}\n\n')
        assert len(load_transcript(path)) == 1


SURLY_PEER = """\
import json, sys
for line in sys.stdin:
    msg = json.loads(line)
    op = msg.get("op")
    if op == "hello":
        out = {"op": "hello", "version": 1, "name": "stub",
               "default_threshold": 0.5, "classes": ["Car", "Pedestrian", "Cyclist"]}
    elif op == "detect":
        pts = msg.get("points", [])
        dets = []
        if len(pts) >= 5:
            c = [sum(p[k] for p in pts) / len(pts) for k in range(3)]
            dets = [{"label": "Car", "score": 0.9,
                     "box": {"center": c, "half_extents": [1.0, 1.0, 1.0], "yaw": 0.0}}]
        out = {"op": "detections", "id": msg.get("id"), "detections": dets}
    elif op == "shutdown":
        sys.exit(5)
    else:
        out = {"op": "error", "message": "unknown op: " + str(op)}
    sys.stdout.write(json.dumps(out) + "\\n")
    sys.stdout.flush()
"""


class TestConformance:
    def test_conforming_stub_passes(self):
        assert check_conformance(stub_command()) == []

    def test_corrupt_ids_flagged(self):
        mismatches = check_conformance(stub_command("--corrupt-ids"))
        assert mismatches
        assert "record 4" in mismatches[0]

    def test_bad_json_flagged(self):
        mismatches = check_conformance(stub_command("--bad-json"))
        assert any("not valid JSON" in m for m in mismatches)

    def test_builtin_rejected(self):
        with pytest.raises(ConfigError, match="external"):
            check_conformance("builtin:voxel0.2")

    def test_nonzero_exit_after_shutdown_flagged(self, tmp_path):
        peer = tmp_path / "surly.py"
        peer.write_text(SURLY_PEER)
        mismatches = check_conformance(f"exec:{sys.executable} {peer}")
        assert mismatches == ["peer exited with status 5 after shutdown"]

    def test_custom_transcript(self, tmp_path):
        path = tmp_path / "hello_only.ndjson"
        path.write_text(
            '{"dir": "send", "msg": {"op": "hello", "version": 1}}\n'
            '{"dir": "recv", "msg": {"op": "hello", "version": 1, "name": "stub", '
            '"default_threshold": 0.5, "classes": ["Car", "Pedestrian", "Cyclist"]}}\n'
        )
        assert check_conformance(stub_command(), transcript_path=path) == []

    def test_wrong_name_detected_via_custom_transcript(self, tmp_path):
        path = tmp_path / "bad.ndjson"
        path.write_text(
            '{"dir": "send", "msg": {"op": "hello", "version": 1}}\n'
            '{"dir": "recv", "msg": {"op": "hello", "version": 1, "name": "somebody-else", '
            '"default_threshold": 0.5, "classes": ["Car", "Pedestrian", "Cyclist"]}}\n'
        )
        mismatches = check_conformance(stub_command(), transcript_path=path)
        assert len(mismatches) == 1 and "record 2" in mismatches[0]


class TestCheckStructural:
    def test_conforming_stub_has_no_problems(self):
        assert check_structural(stub_command()) == []

    def test_corrupt_peer_reported(self):
        problems = check_structural(stub_command("--corrupt-ids"))
        assert any("detect failed" in p for p in problems)

    def test_dead_peer_is_handshake_failure(self):
        problems = check_structural(f"exec:{sys.executable} -c pass", timeout=2.0)
        assert len(problems) == 1
        assert problems[0].startswith("handshake failed")
