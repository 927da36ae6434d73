"""Real-model plumbing: configuration and detector loading.

Deep detection stacks differ in preprocessing (coordinate cropping, range
filters, tensor layout), and those details must stay behind the black-box
boundary. So the bridge never touches a model directly: the model identifier
names a factory ("package.module:factory") that receives the BridgeConfig
and returns a detector object exposing

    name                  str, reported in the handshake
    classes               iterable of class label strings
    default_threshold     float, the model's emit threshold
    detect(points)        list of detection dicts for one cloud, where
                          points is a list of [x, y, z, intensity] rows

Detection dicts use the wire shape directly:
    {"label": str, "score": float,
     "box": {"center": [x,y,z], "half_extents": [hx,hy,hz], "yaw": float}}
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import import_module
from pathlib import Path

from .protocol import BridgeError, run_transport

_DETECTOR_SURFACE = ("name", "classes", "default_threshold", "detect")


@dataclass(frozen=True)
class BridgeConfig:
    model: str
    checkpoint: str
    device: str = "cpu"
    score_threshold: float | None = None

    def __post_init__(self) -> None:
        if not self.model:
            raise BridgeError("model identifier is required")
        if not Path(self.checkpoint).is_file():
            raise BridgeError(f"checkpoint not found: {self.checkpoint}")
        if self.score_threshold is not None and not 0.0 < self.score_threshold < 1.0:
            raise BridgeError(
                f"score threshold must be in (0, 1), got {self.score_threshold}"
            )


class _ThresholdOverride:
    """Same detector, different advertised emit threshold."""

    def __init__(self, inner, threshold: float) -> None:
        self._inner = inner
        self.default_threshold = threshold

    @property
    def name(self) -> str:
        return self._inner.name

    @property
    def classes(self):
        return self._inner.classes

    def detect(self, points: list[list[float]]) -> list[dict]:
        return self._inner.detect(points)


def load_detector(config: BridgeConfig):
    """Import and invoke the factory named by config.model."""
    if ":" not in config.model:
        raise BridgeError(
            f"model {config.model!r} is not a factory path; "
            "expected 'package.module:factory'"
        )
    module_name, _, attr = config.model.partition(":")
    try:
        module = import_module(module_name)
    except ImportError as exc:
        raise BridgeError(f"cannot import model module {module_name!r}: {exc}") from exc
    factory = getattr(module, attr, None)
    if factory is None:
        raise BridgeError(f"module {module_name!r} has no attribute {attr!r}")
    detector = factory(config)
    missing = [f for f in _DETECTOR_SURFACE if not hasattr(detector, f)]
    if missing:
        raise BridgeError(
            f"model factory returned an object missing {', '.join(missing)}"
        )
    if config.score_threshold is not None:
        detector = _ThresholdOverride(detector, config.score_threshold)
    return detector


def serve(config: BridgeConfig, transport: str = "stdio") -> int:
    """Load the configured model and answer requests until shutdown."""
    return run_transport(load_detector(config), transport)
