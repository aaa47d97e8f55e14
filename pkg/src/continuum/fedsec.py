"""Federated training with server-blind aggregation.

Clients quantize their parameters to a prime field and split every value into
Shamir shares, one per share index. The server adds shares index-wise, which
by linearity yields shares of the parameter sum, and never holds enough
information to recover any value. A threshold subset of clients then turns
the aggregated shares into Lagrange-weighted partials; summing ``t`` partials
recovers the sum, and dividing by the client count gives the average.

Field vectors are numpy object arrays of Python ints, so arithmetic is exact.
"""

from __future__ import annotations

import base64
import json
import logging
import math
import threading
import time
from collections import defaultdict
from collections.abc import Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .config import FedConfig, ModelConfig, derive_seed
from .exceptions import (
    BadThresholdError,
    DivergedRoundError,
    LengthMismatchError,
    ManifestError,
    MissingClientError,
    QuantizationOverflowError,
    WrongSubsetSizeError,
)
from .snapshot import Snapshot
from .stgnn import Autoencoder, train

logger = logging.getLogger(__name__)

MODULUS = 2**61 - 1
FIXED_POINT_SCALE = 2**16

FieldVector = NDArray[np.object_]


@dataclass(frozen=True)
class PrimeField:
    """Integers modulo a prime."""

    modulus: int = MODULUS

    def vector(self, values: Iterable[int] | ArrayLike) -> FieldVector:
        return np.array([int(v) % self.modulus for v in np.asarray(values).reshape(-1)], dtype=object)

    def zeros(self, size: int) -> FieldVector:
        return np.array([0] * size, dtype=object)

    def __post_init__(self) -> None:
        if not 2 < self.modulus < 2**63:
            raise ValueError(f"modulus must lie in (2, 2**63), got {self.modulus}")

    def random_vector(self, size: int, rng: np.random.Generator) -> FieldVector:
        drawn = rng.integers(0, self.modulus, size=size, dtype=np.int64)
        return np.array([int(v) for v in drawn], dtype=object)

    def add(self, a: FieldVector, b: FieldVector) -> FieldVector:
        return np.asarray((a + b) % self.modulus, dtype=object)

    def scale(self, c: int, v: FieldVector) -> FieldVector:
        return np.asarray((v * (c % self.modulus)) % self.modulus, dtype=object)

    def inverse(self, a: int) -> int:
        return pow(a % self.modulus, -1, self.modulus)


DEFAULT_FIELD = PrimeField()


@dataclass(frozen=True)
class FixedPointCodec:
    """Signed fixed-point encoding into a field, centered around zero.

    ``x`` maps to ``round(x * scale)``; negative values wrap to ``p - |q|``.
    Encoding refuses values whose sum over ``max_summands`` clients could
    reach ``p / 2``, so aggregates decode without wraparound.
    """

    field: PrimeField = DEFAULT_FIELD
    scale: int = FIXED_POINT_SCALE
    max_summands: int = 1

    @property
    def bound(self) -> float:
        """Largest encodable magnitude."""
        return (self.field.modulus // 2) / (self.scale * self.max_summands)

    def encode(self, values: ArrayLike) -> FieldVector:
        x = np.asarray(values, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(x)) or (x.size and np.max(np.abs(x)) >= self.bound):
            raise QuantizationOverflowError(
                f"values must be finite with magnitude below {self.bound:.6g}"
            )
        quantized = np.rint(x * self.scale).astype(np.int64)
        return np.array([int(q) % self.field.modulus for q in quantized], dtype=object)

    def decode(self, vector: FieldVector) -> NDArray[np.float64]:
        p = self.field.modulus
        centered = [int(v) - p if int(v) > p // 2 else int(v) for v in vector]
        return np.asarray(centered, dtype=np.float64) / self.scale


@dataclass
class ShareBundle:
    """One share of a client's whole parameter vector.

    ``share_index`` is the 1-based evaluation point of the sharing polynomial.
    """

    round: int
    client_id: int
    share_index: int
    payload: FieldVector

    def __len__(self) -> int:
        return len(self.payload)


def evaluate_shares(
    coefficients: Sequence[FieldVector], n: int, field: PrimeField = DEFAULT_FIELD
) -> list[FieldVector]:
    """Evaluate ``sum_k coefficients[k] * x**k`` at ``x = 1..n`` (Horner)."""
    shares = []
    for x in range(1, n + 1):
        acc = field.zeros(len(coefficients[0]))
        for c in reversed(coefficients):
            acc = field.add(field.scale(x, acc), c)
        shares.append(acc)
    return shares


def share_vector(
    secret: FieldVector | Sequence[int],
    n: int,
    t: int,
    rng: np.random.Generator,
    field: PrimeField = DEFAULT_FIELD,
    round_no: int = 0,
    client_id: int = 0,
) -> list[ShareBundle]:
    """Split each element with its own random degree ``t - 1`` polynomial.

    Raises:
        BadThresholdError: Unless ``1 < t <= n``.
    """
    if not 1 < t <= n:
        raise BadThresholdError(t, n)
    constant = field.vector(secret)
    coefficients = [constant] + [field.random_vector(len(constant), rng) for _ in range(t - 1)]
    return [
        ShareBundle(round_no, client_id, x, payload)
        for x, payload in enumerate(evaluate_shares(coefficients, n, field), start=1)
    ]


def lagrange_basis(indices: Sequence[int], field: PrimeField = DEFAULT_FIELD) -> dict[int, int]:
    """Lagrange coefficients at ``x = 0`` for the given evaluation points."""
    if len(set(indices)) != len(indices):
        raise WrongSubsetSizeError(f"share indices must be distinct, got {list(indices)}")
    p = field.modulus
    basis = {}
    for i in indices:
        num, den = 1, 1
        for j in indices:
            if j != i:
                num = num * (-j) % p
                den = den * (i - j) % p
        basis[i] = num * field.inverse(den) % p
    return basis


def reconstruct(
    bundles: Sequence[ShareBundle], field: PrimeField = DEFAULT_FIELD
) -> FieldVector:
    """Interpolate the shared vector from the given shares.

    Exact when at least ``t`` distinct shares are supplied.
    """
    if not bundles:
        raise WrongSubsetSizeError("no shares to reconstruct from")
    basis = lagrange_basis([b.share_index for b in bundles], field)
    return merge_partials([field.scale(basis[b.share_index], b.payload) for b in bundles], field)


def aggregate_shares(
    bundles: Sequence[ShareBundle],
    expected_clients: Iterable[int] | None = None,
    field: PrimeField = DEFAULT_FIELD,
) -> dict[int, ShareBundle]:
    """Add payloads of equal share index across clients.

    Returns one bundle per share index (``client_id`` 0). No interpolation
    happens here.

    Raises:
        MissingClientError: If an expected client has no share at some index.
        LengthMismatchError: If payload lengths differ.
    """
    if not bundles:
        raise MissingClientError(sorted(expected_clients or []))
    lengths = {len(b) for b in bundles}
    if len(lengths) != 1:
        raise LengthMismatchError(f"share payload lengths differ: {sorted(lengths)}")

    grouped: dict[int, list[ShareBundle]] = defaultdict(list)
    for bundle in bundles:
        grouped[bundle.share_index].append(bundle)
    expected = set(expected_clients) if expected_clients is not None else {b.client_id for b in bundles}

    size = next(iter(lengths))
    aggregated = {}
    for share_index in sorted(grouped):
        group = grouped[share_index]
        missing = expected - {b.client_id for b in group}
        if missing:
            raise MissingClientError(sorted(missing))
        total = field.zeros(size)
        for bundle in group:
            total = field.add(total, bundle.payload)
        aggregated[share_index] = ShareBundle(group[0].round, 0, share_index, total)
    return aggregated


def partial_decrypt(
    bundle: ShareBundle,
    subset: Sequence[int],
    threshold: int,
    field: PrimeField = DEFAULT_FIELD,
) -> FieldVector:
    """Scale a share by its Lagrange coefficient within ``subset``.

    Raises:
        WrongSubsetSizeError: If ``subset`` does not name exactly ``threshold``
            distinct indices including the bundle's own.
    """
    if len(set(subset)) != threshold or len(subset) != threshold:
        raise WrongSubsetSizeError(
            f"decryption needs exactly {threshold} distinct participants, got {list(subset)}"
        )
    if bundle.share_index not in subset:
        raise WrongSubsetSizeError(
            f"share {bundle.share_index} is not part of the decryption subset {list(subset)}"
        )
    return field.scale(lagrange_basis(subset, field)[bundle.share_index], bundle.payload)


def merge_partials(
    partials: Sequence[FieldVector], field: PrimeField = DEFAULT_FIELD
) -> FieldVector:
    """Field sum of partial decryptions."""
    if len({len(p) for p in partials}) > 1:
        raise LengthMismatchError("partial decryptions have different lengths")
    total = field.zeros(len(partials[0]) if partials else 0)
    for partial in partials:
        total = field.add(total, partial)
    return total


# Messaging

PARAMS = "params"
SHARES = "shares"
AGG_SHARES = "agg_shares"
PARTIAL = "partial"
KINDS = (PARAMS, SHARES, AGG_SHARES, PARTIAL)

AUTHORITY = "authority"
SERVER = "server"


def client_name(client_id: int) -> str:
    return f"client-{client_id}"


def pack_field(vector: FieldVector, prefix: Sequence[int] = ()) -> bytes:
    return np.asarray([*prefix, *(int(v) for v in vector)], dtype="<u8").tobytes()


def unpack_field(data: bytes, prefix: int = 0) -> tuple[list[int], FieldVector]:
    values = [int(v) for v in np.frombuffer(data, dtype="<u8")]
    return values[:prefix], np.array(values[prefix:], dtype=object)


def pack_params(values: NDArray[np.float64]) -> bytes:
    return np.asarray(values, dtype="<f8").tobytes()


def unpack_params(data: bytes) -> NDArray[np.float64]:
    return np.frombuffer(data, dtype="<f8").astype(np.float64)


@dataclass(frozen=True)
class Envelope:
    """One message between roles.

    ``shares`` and ``agg_shares`` payloads start with the share index as their
    first u64.
    """

    round: int
    sender: str
    recipient: str
    kind: str
    payload: bytes

    def to_json(self) -> str:
        return json.dumps(
            {
                "round": self.round,
                "from": self.sender,
                "to": self.recipient,
                "kind": self.kind,
                "payload_b64": base64.b64encode(self.payload).decode("ascii"),
            },
            sort_keys=True,
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, line: str) -> Envelope:
        try:
            data = json.loads(line)
            envelope = cls(
                round=int(data["round"]),
                sender=str(data["from"]),
                recipient=str(data["to"]),
                kind=str(data["kind"]),
                payload=base64.b64decode(data["payload_b64"]),
            )
        except (KeyError, ValueError, TypeError) as e:
            raise ManifestError(f"Invalid message envelope: {e}")
        if envelope.kind not in KINDS:
            raise ManifestError(f"Unknown message kind {envelope.kind!r}")
        return envelope


class MessageBus:
    """In-process mailbox per recipient plus an ordered log of every message."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._inboxes: dict[str, list[Envelope]] = defaultdict(list)
        self.log: list[Envelope] = []

    def send(self, envelope: Envelope) -> None:
        with self._lock:
            self.log.append(envelope)
            self._inboxes[envelope.recipient].append(envelope)

    def receive(self, recipient: str, kind: str, round_no: int) -> list[Envelope]:
        """Remove and return the recipient's messages of one kind and round."""
        with self._lock:
            inbox = self._inboxes[recipient]
            taken = [m for m in inbox if m.kind == kind and m.round == round_no]
            self._inboxes[recipient] = [
                m for m in inbox if not (m.kind == kind and m.round == round_no)
            ]
        return taken

    def write_log(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for envelope in self.log:
                f.write(envelope.to_json() + "\n")


def read_log(path: str | Path) -> list[Envelope]:
    try:
        with open(path, encoding="utf-8") as f:
            return [Envelope.from_json(line) for line in f if line.strip()]
    except UnicodeDecodeError as e:
        raise ManifestError(f"{path}: message log is not valid UTF-8 ({e})")


# Roles


class KeyAuthority:
    """Trusted setup: assigns share indices, fixes the decryption subset, seeds."""

    def __init__(self, config: FedConfig, seed: int):
        self.config = config
        self.seed = seed

    def share_index(self, client_id: int) -> int:
        return client_id

    def decryption_subset(self) -> list[int]:
        if self.config.decrypt_subset:
            return sorted(self.config.decrypt_subset)
        return list(range(1, self.config.threshold + 1))

    def sharing_rng(self, client_id: int, round_no: int) -> np.random.Generator:
        return np.random.default_rng(derive_seed(self.seed, f"shares/{round_no}/{client_id}"))


@dataclass
class LocalUpdate:
    client_id: int
    params: NDArray[np.float64]
    loss: float
    seconds: float


class FederatedClient:
    """Trains on a private shard and takes part in threshold decryption."""

    def __init__(
        self,
        client_id: int,
        graphs: Mapping[str, Sequence[Snapshot]],
        model_config: ModelConfig,
        authority: KeyAuthority,
        bus: MessageBus,
        codec: FixedPointCodec,
    ):
        self.client_id = client_id
        self.name = client_name(client_id)
        self.graphs = graphs
        self.model_config = model_config
        self.authority = authority
        self.bus = bus
        self.codec = codec
        self.share_index = authority.share_index(client_id)
        self.global_params: NDArray[np.float64] | None = None

    def receive_params(self, round_no: int) -> NDArray[np.float64]:
        messages = self.bus.receive(self.name, PARAMS, round_no)
        if messages:
            self.global_params = unpack_params(messages[-1].payload)
        if self.global_params is None:
            raise MissingClientError([self.client_id])
        return self.global_params

    def local_train(self, round_no: int, epochs: int) -> LocalUpdate:
        """Train a copy of the global model on the local shard.

        Raises:
            DivergedRoundError: If the local loss is not finite.
        """
        start = time.perf_counter()
        model = Autoencoder(self.model_config)
        model.params.assign_flat(self.receive_params(round_no))
        result = train(model, self.graphs, epochs=epochs)
        losses = result.loss_trace or [0.0]
        if not all(math.isfinite(loss) for loss in losses):
            raise DivergedRoundError(round_no, self.client_id)
        seconds = time.perf_counter() - start
        logger.debug("%s round %d: loss %.6f in %.3fs", self.name, round_no, losses[-1], seconds)
        return LocalUpdate(self.client_id, model.params.flatten(), losses[-1], seconds)

    def submit_shares(self, round_no: int, params: NDArray[np.float64]) -> None:
        encoded = self.codec.encode(params)
        bundles = share_vector(
            encoded,
            self.authority.config.n_clients,
            self.authority.config.threshold,
            self.authority.sharing_rng(self.client_id, round_no),
            self.codec.field,
            round_no,
            self.client_id,
        )
        for bundle in bundles:
            self.bus.send(
                Envelope(round_no, self.name, SERVER, SHARES, pack_field(bundle.payload, [bundle.share_index]))
            )

    def send_partial(self, round_no: int, peers: Sequence[int]) -> None:
        """Turn this client's aggregated share into a partial and send it to every peer."""
        subset = self.authority.decryption_subset()
        if self.share_index not in subset:
            return
        for message in self.bus.receive(self.name, AGG_SHARES, round_no):
            header, payload = unpack_field(message.payload, prefix=1)
            bundle = ShareBundle(round_no, 0, header[0], payload)
            partial = partial_decrypt(bundle, subset, self.authority.config.threshold, self.codec.field)
            for peer in peers:
                self.bus.send(Envelope(round_no, self.name, client_name(peer), PARTIAL, pack_field(partial)))

    def merge(self, round_no: int) -> NDArray[np.float64]:
        """Merge received partials into the new global parameters."""
        messages = self.bus.receive(self.name, PARTIAL, round_no)
        threshold = self.authority.config.threshold
        if len(messages) != threshold:
            raise WrongSubsetSizeError(
                f"{self.name} received {len(messages)} partials, expected {threshold}"
            )
        partials = [unpack_field(m.payload)[1] for m in messages]
        total = self.codec.decode(merge_partials(partials, self.codec.field))
        self.global_params = total / self.authority.config.n_clients
        return self.global_params


class AggregationServer:
    """Adds client shares index-wise and forwards each sum to its share holder."""

    def __init__(self, bus: MessageBus, config: FedConfig, field: PrimeField = DEFAULT_FIELD):
        self.bus = bus
        self.config = config
        self.field = field

    def aggregate(self, round_no: int, holders: Mapping[int, int]) -> None:
        bundles = []
        for message in self.bus.receive(SERVER, SHARES, round_no):
            header, payload = unpack_field(message.payload, prefix=1)
            client_id = int(message.sender.rsplit("-", 1)[1])
            bundles.append(ShareBundle(round_no, client_id, header[0], payload))
        expected = range(1, self.config.n_clients + 1)
        for share_index, bundle in aggregate_shares(bundles, expected, self.field).items():
            self.bus.send(
                Envelope(
                    round_no,
                    SERVER,
                    client_name(holders[share_index]),
                    AGG_SHARES,
                    pack_field(bundle.payload, [share_index]),
                )
            )


@dataclass
class RoundMetrics:
    """Per-round losses and timing.

    ``speedup`` is the summed client time over the slowest client's time, the
    gain a fully parallel deployment could expect.
    """

    round: int
    client_losses: dict[int, float]
    client_seconds: dict[int, float]
    wall_seconds: float

    @property
    def speedup(self) -> float:
        slowest = max(self.client_seconds.values(), default=0.0)
        return sum(self.client_seconds.values()) / slowest if slowest > 0 else 1.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "round": self.round,
            "client_losses": {str(k): v for k, v in self.client_losses.items()},
            "client_seconds": {str(k): v for k, v in self.client_seconds.items()},
            "wall_seconds": self.wall_seconds,
            "speedup": self.speedup,
        }


@dataclass
class FederationResult:
    model: Autoencoder
    rounds: list[RoundMetrics] = field(default_factory=list)
    messages: list[Envelope] = field(default_factory=list)


def run_federation(
    config: FedConfig,
    client_datasets: Sequence[Mapping[str, Sequence[Snapshot]]],
    model_config: ModelConfig,
    seed: int = 0,
    jobs: int = 1,
    serial: bool = False,
    initial: Autoencoder | None = None,
) -> FederationResult:
    """Run ``config.rounds`` rounds of secure federated averaging.

    Args:
        config: Federation settings; ``n_clients`` must match the shard count.
        client_datasets: One benign shard per client, in client-id order.
        model_config: Architecture shared by all clients.
        seed: Global seed for share randomness.
        jobs: Local-training worker threads (ignored when ``serial``).
        serial: Run clients one after another.
        initial: Starting global model (a fresh one from ``model_config`` if None).

    Returns:
        FederationResult: The final global model, round metrics and message log.
    """
    if len(client_datasets) != config.n_clients:
        raise MissingClientError(range(len(client_datasets) + 1, config.n_clients + 1))
    authority = KeyAuthority(config, seed)
    bus = MessageBus()
    codec = FixedPointCodec(max_summands=config.n_clients)
    server = AggregationServer(bus, config, codec.field)
    clients = [
        FederatedClient(i, shard, model_config, authority, bus, codec)
        for i, shard in enumerate(client_datasets, start=1)
    ]
    holders = {c.share_index: c.client_id for c in clients}
    ids = [c.client_id for c in clients]

    model = initial if initial is not None else Autoencoder(model_config)
    for client in clients:
        bus.send(Envelope(1, AUTHORITY, client.name, PARAMS, pack_params(model.params.flatten())))

    result = FederationResult(model=model)
    workers = 1 if serial else max(1, min(jobs, len(clients)))
    for round_no in range(1, config.rounds + 1):
        start = time.perf_counter()
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                updates = list(pool.map(lambda c: c.local_train(round_no, config.local_epochs), clients))
        else:
            updates = [c.local_train(round_no, config.local_epochs) for c in clients]

        for client, update in zip(clients, updates, strict=True):
            client.submit_shares(round_no, update.params)
        server.aggregate(round_no, holders)
        for client in clients:
            client.send_partial(round_no, ids)
        merged = [client.merge(round_no) for client in clients]
        if any(not np.array_equal(merged[0], m) for m in merged[1:]):
            raise DivergedRoundError(round_no, 0)

        metrics = RoundMetrics(
            round=round_no,
            client_losses={u.client_id: u.loss for u in updates},
            client_seconds={u.client_id: u.seconds for u in updates},
            wall_seconds=time.perf_counter() - start,
        )
        result.rounds.append(metrics)
        logger.info(
            "Round %d/%d: mean client loss %.6f, speedup estimate %.2fx",
            round_no,
            config.rounds,
            float(np.mean(list(metrics.client_losses.values()))),
            metrics.speedup,
        )

    final = Autoencoder(model_config)
    final.params.assign_flat(merged[0] if config.rounds else model.params.flatten())
    result.model = final
    result.messages = list(bus.log)
    return result


def plaintext_average(updates: Sequence[NDArray[np.float64]]) -> NDArray[np.float64]:
    """Unweighted mean of client parameter vectors."""
    return np.asarray(np.mean(np.vstack(updates), axis=0), dtype=np.float64)


def write_round_metrics(rounds: Sequence[RoundMetrics], path: str | Path) -> None:
    Path(path).write_text(json.dumps([r.to_dict() for r in rounds], indent=2) + "\n", encoding="utf-8")
