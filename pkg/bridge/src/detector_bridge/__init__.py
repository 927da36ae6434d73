"""Wire-protocol adapter that puts point-cloud detectors behind the
NDJSON oracle boundary used by the attack toolkit.

Two servers ship here: `serve` loads a real model through a user-supplied
factory, `mock_serve` answers with a scripted stub so transports and
conformance can be exercised without any model on disk.
"""

from .adapter import BridgeConfig, load_detector, serve
from .mock import MockDetector, mock_serve
from .protocol import (
    PROTOCOL_VERSION,
    BridgeError,
    ShutdownRequest,
    handle_request,
    parse_transport,
)

__version__ = "0.1.0"

__all__ = [
    "BridgeConfig",
    "BridgeError",
    "MockDetector",
    "PROTOCOL_VERSION",
    "ShutdownRequest",
    "handle_request",
    "load_detector",
    "mock_serve",
    "parse_transport",
    "serve",
    "__version__",
]
