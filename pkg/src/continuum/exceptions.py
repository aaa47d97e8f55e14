"""Exception classes for continuum."""

from __future__ import annotations

from collections.abc import Iterable, Sequence


class ContinuumError(Exception):
    """Base exception for continuum."""

    pass


class ContinuumValidationError(ContinuumError):
    """Input or configuration rejected before any computation ran."""

    pass


class ContinuumRuntimeError(ContinuumError):
    """Error raised while a pipeline stage was computing."""

    pass


# Validation errors


class ConfigError(ContinuumValidationError):
    """Error related to run configuration."""

    pass


class ManifestError(ContinuumValidationError):
    """Error related to a dataset manifest or labels file."""

    pass


class MalformedLineError(ContinuumValidationError):
    """A data line does not have the expected field count."""

    def __init__(self, line_no: int, path: str | None = None, detail: str = ""):
        self.line_no = line_no
        self.path = path
        where = f"{path}:{line_no}" if path else f"line {line_no}"
        message = f"Malformed line at {where}"
        if detail:
            message += f": {detail}"
        super().__init__(message)


class TypeConflictError(ContinuumValidationError):
    """A node reappeared with a different type than first seen."""

    def __init__(self, node_id: str, first: str, second: str):
        self.node_id = node_id
        super().__init__(
            f"Node {node_id!r} seen as type {first!r} and later as {second!r}"
        )


class BadTimestampError(ContinuumValidationError):
    """A timestamp field is not a decimal integer in the u64 range."""

    def __init__(self, line_no: int, value: str, path: str | None = None):
        self.line_no = line_no
        self.value = value
        where = f"{path}:{line_no}" if path else f"line {line_no}"
        super().__init__(f"Bad timestamp {value!r} at {where}")


class CheckpointError(ContinuumValidationError):
    """A checkpoint or its model-config sidecar cannot be read."""

    pass


# Runtime errors


class EmptyGraphError(ContinuumRuntimeError):
    """A graph with no edges cannot be split into snapshots."""

    pass


class ShapeMismatchError(ContinuumRuntimeError):
    """Operand shapes are incompatible for an operation."""

    def __init__(self, op: str, *shapes: Sequence[int]):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        rendered = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: shape mismatch {rendered}")


class NotScalarError(ContinuumRuntimeError):
    """backward() was called on a non-scalar tensor."""

    pass


class MissingGradError(ContinuumRuntimeError):
    """An optimizer step found a parameter without a gradient."""

    def __init__(self, name: str):
        self.name = name
        super().__init__(f"Parameter {name!r} has no gradient")


class EmptyInputError(ContinuumRuntimeError):
    """An operation received an empty sequence it cannot reduce."""

    pass


class NonBenignInTrainingError(ContinuumRuntimeError):
    """A graph labeled as attack was passed to training."""

    def __init__(self, graph_id: str):
        self.graph_id = graph_id
        super().__init__(f"Graph {graph_id!r} is not benign; refusing to train on it")


class TooFewPointsError(ContinuumRuntimeError):
    """The benign index needs more points than neighbors."""

    def __init__(self, n_points: int, k: int):
        self.n_points = n_points
        self.k = k
        super().__init__(f"Need at least k+1={k + 1} benign points, got {n_points}")


class DimensionMismatchError(ContinuumRuntimeError):
    """A query point does not match the index dimensionality."""

    pass


class SingleClassValidationError(ContinuumRuntimeError):
    """Threshold selection needs both benign and attack validation items."""

    pass


class BadThresholdError(ContinuumRuntimeError):
    """Secret-sharing threshold outside 1 < t <= n."""

    def __init__(self, threshold: int, n_shares: int):
        self.threshold = threshold
        self.n_shares = n_shares
        super().__init__(f"Threshold must satisfy 1 < t <= n, got t={threshold}, n={n_shares}")


class MissingClientError(ContinuumRuntimeError):
    """Aggregation found clients that did not submit shares."""

    def __init__(self, ids: Iterable[int]):
        self.ids = sorted(ids)
        super().__init__(f"Missing submissions from clients {self.ids}")


class LengthMismatchError(ContinuumRuntimeError):
    """Share payloads of one round have different lengths."""

    pass


class WrongSubsetSizeError(ContinuumRuntimeError):
    """Decryption subset size differs from the threshold."""

    pass


class DivergedRoundError(ContinuumRuntimeError):
    """A client produced a non-finite loss during a federated round."""

    def __init__(self, round_no: int, client_id: int):
        self.round_no = round_no
        self.client_id = client_id
        super().__init__(f"Client {client_id} diverged in round {round_no}")


class QuantizationOverflowError(ContinuumRuntimeError):
    """A weight is too large to be fixed-point encoded without wraparound."""

    pass
