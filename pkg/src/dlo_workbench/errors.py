"""
Exception hierarchy for the workbench.

Library code raises these; the CLI and the MCP tools turn them into
messages.
"""


class WorkbenchError(Exception):
    """Base class for every error raised by the workbench."""


class ConfigError(WorkbenchError):
    """Bad key, bad value, or unreadable config file."""


class MeshConstructionError(WorkbenchError):
    """Invalid mesh dimensions or degenerate tetrahedra."""


class SimulationDivergedError(WorkbenchError):
    """Non-finite node state after a physics step."""

    def __init__(self, node_index: int, message: str | None = None):
        self.node_index = int(node_index)
        super().__init__(message or f"simulation diverged at node {self.node_index}")


class EpisodeProtocolError(WorkbenchError):
    """Environment used out of order (step after the episode ended, no goal set)."""


class DimensionMismatchError(WorkbenchError):
    """Vector or weight shapes that do not line up."""


class OptimizerError(WorkbenchError):
    """Non-finite gradients handed to the optimizer."""


class NonFiniteLossError(WorkbenchError):
    """Critic or policy loss evaluated to NaN/inf."""


class BufferNotReadyError(WorkbenchError):
    """Replay buffer holds fewer transitions than the requested batch."""


class CheckpointFormatError(WorkbenchError):
    """Unreadable, wrong-version, or wrong-shape checkpoint."""


class DatabaseFormatError(WorkbenchError):
    """Unreadable or wrong-version goal database file."""


class FingerprintMismatchError(WorkbenchError):
    """Goal database or checkpoint produced under a different scenario."""


class TrainingAbortedError(WorkbenchError):
    """Training stopped because the summed gradient was not finite."""
