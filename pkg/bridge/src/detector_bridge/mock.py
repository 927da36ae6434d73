"""Dependency-free scripted detector for CI and conformance checking.

The scripted rule is the one the golden transcript freezes: a cloud of five
or more points yields exactly one Car detection at the cloud centroid with
unit half extents, zero yaw and score 0.9; smaller clouds yield nothing.
"""

from __future__ import annotations

from .protocol import run_transport


class MockDetector:
    name = "stub"
    default_threshold = 0.5
    classes = ("Car", "Pedestrian", "Cyclist")

    def detect(self, points: list[list[float]]) -> list[dict]:
        if len(points) < 5:
            return []
        n = len(points)
        center = [sum(p[axis] for p in points) / n for axis in range(3)]
        return [
            {
                "label": "Car",
                "score": 0.9,
                "box": {
                    "center": center,
                    "half_extents": [1.0, 1.0, 1.0],
                    "yaw": 0.0,
                },
            }
        ]


def mock_serve(transport: str = "stdio", corrupt_ids: bool = False) -> int:
    """Serve the scripted detector until the peer sends shutdown.

    `corrupt_ids` shifts every reply id by one. That is deliberate
    misbehavior: conformance checkers must notice and reject it.
    """
    return run_transport(MockDetector(), transport, corrupt_ids)
