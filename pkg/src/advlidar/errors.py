"""Exception taxonomy shared across the toolkit.

The CLI maps these onto its exit codes: config/file problems exit 10,
oracle transport/protocol failures exit 11, budget exhaustion exits 12.
"""


class AdvLidarError(Exception):
    """Base class for all toolkit errors."""


class MalformedFileError(AdvLidarError):
    """A .bin / .stl / scene / config file violates its format contract."""


class ConfigError(AdvLidarError):
    """Invalid configuration value or unparseable config file."""


class TransportError(AdvLidarError):
    """External oracle could not be reached, timed out, or hung up."""


class ProtocolError(AdvLidarError):
    """External oracle answered with a malformed or out-of-contract message."""

    def __init__(self, message: str, payload: object = None):
        super().__init__(message)
        self.payload = payload


class BudgetExhaustedError(AdvLidarError):
    """An evaluation was requested beyond the configured oracle-call budget."""
