"""NDJSON request loop shared by the real and mock servers.

One JSON document per line in both directions, UTF-8, no pretty-printing.
Replies always echo the request id, one reply line per request line. A
request the server cannot make sense of gets an error reply instead of
killing the connection; only the shutdown op ends the process.
"""

from __future__ import annotations

import json
import socket
import sys

PROTOCOL_VERSION = 1


class BridgeError(Exception):
    """Configuration or startup problem; reported before serving begins."""


class ShutdownRequest(Exception):
    """Internal signal: the peer asked us to exit."""


def dump_line(payload: dict) -> str:
    return json.dumps(payload, separators=(",", ":")) + "\n"


def parse_transport(spec: str) -> tuple[str, str, int]:
    """'stdio' or 'tcp:PORT' / 'tcp:HOST:PORT' -> (kind, host, port)."""
    if spec == "stdio":
        return ("stdio", "", 0)
    if spec.startswith("tcp:"):
        rest = spec[len("tcp:"):]
        host, sep, port_text = rest.rpartition(":")
        if not sep:
            host, port_text = "127.0.0.1", rest
        try:
            port = int(port_text)
        except ValueError:
            raise BridgeError(f"transport {spec!r} has a non-numeric port") from None
        if not 0 <= port <= 65535:
            raise BridgeError(f"transport port {port} outside 0..65535")
        return ("tcp", host, port)
    raise BridgeError(f"unknown transport {spec!r}; expected stdio or tcp:PORT")


def _checked_points(raw) -> list[list[float]]:
    # bool is an int subclass; it must not pass as a coordinate
    if not isinstance(raw, list):
        raise ValueError("points must be a list")
    points = []
    for row in raw:
        if not isinstance(row, list) or len(row) != 4:
            raise ValueError("each point must be [x, y, z, intensity]")
        values = []
        for v in row:
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ValueError("point coordinates must be numbers")
            values.append(float(v))
        points.append(values)
    return points


def handle_request(detector, line: str, corrupt_ids: bool = False) -> str | None:
    """Answer one request line; None for blank lines.

    Raises ShutdownRequest on the shutdown op. Everything else, including
    malformed JSON and a detector that blows up mid-inference, turns into an
    error reply so the connection survives.
    """
    line = line.strip()
    if not line:
        return None
    try:
        msg = json.loads(line)
    except json.JSONDecodeError:
        return dump_line({"op": "error", "message": "request is not valid JSON"})
    if not isinstance(msg, dict):
        return dump_line({"op": "error", "message": "request must be a JSON object"})
    op = msg.get("op")
    if op == "hello":
        return dump_line({
            "op": "hello",
            "version": PROTOCOL_VERSION,
            "name": detector.name,
            "default_threshold": detector.default_threshold,
            "classes": list(detector.classes),
        })
    if op == "detect":
        request_id = msg.get("id")
        if isinstance(request_id, bool) or not isinstance(request_id, int) or request_id < 0:
            return dump_line({"op": "error",
                              "message": "detect needs a non-negative integer id"})
        try:
            points = _checked_points(msg.get("points"))
            detections = detector.detect(points)
        except Exception as exc:
            return dump_line({"op": "error", "message": f"detect failed: {exc}"})
        if corrupt_ids:
            request_id += 1
        return dump_line({"op": "detections", "id": request_id,
                          "detections": detections})
    if op == "shutdown":
        raise ShutdownRequest
    return dump_line({"op": "error", "message": f"unknown op: {op}"})


def serve_stream(detector, rfile, wfile, corrupt_ids: bool = False) -> bool:
    """Pump requests from rfile to wfile until shutdown or EOF.

    True means the peer sent shutdown; False means it just went away.
    """
    for line in rfile:
        try:
            reply = handle_request(detector, line, corrupt_ids)
        except ShutdownRequest:
            return True
        if reply is not None:
            wfile.write(reply)
            wfile.flush()
    return False


def serve_stdio(detector, corrupt_ids: bool = False) -> int:
    serve_stream(detector, sys.stdin, sys.stdout, corrupt_ids)
    return 0


def serve_tcp(detector, host: str, port: int, corrupt_ids: bool = False) -> int:
    """Sequential single-connection server; exits when a peer sends shutdown.

    The bound address is announced on stderr ("listening on HOST:PORT") so
    callers can use port 0 and discover the ephemeral port. A client that
    disconnects without shutdown does not stop the server; the next
    connection is accepted.
    """
    with socket.create_server((host, port)) as server:
        bound_host, bound_port = server.getsockname()[:2]
        print(f"listening on {bound_host}:{bound_port}", file=sys.stderr, flush=True)
        while True:
            conn, _peer = server.accept()
            with conn:
                reader = conn.makefile("r", encoding="utf-8", newline="\n")
                writer = conn.makefile("w", encoding="utf-8", newline="\n")
                finished = serve_stream(detector, reader, writer, corrupt_ids)
            if finished:
                return 0


def run_transport(detector, transport: str, corrupt_ids: bool = False) -> int:
    kind, host, port = parse_transport(transport)
    if kind == "stdio":
        return serve_stdio(detector, corrupt_ids)
    return serve_tcp(detector, host, port, corrupt_ids)
