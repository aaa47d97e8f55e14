"""Protobuf encoding of snapshots, the size-optimized alternative to JSON.

The message schema is declared here with ``descriptor_pb2`` rather than a
generated ``_pb2`` module::

    message CompressedEdge { uint32 src = 1; uint32 dst = 2; repeated uint64 counts = 3; }
    message Snapshot {
      uint32 index = 1; uint64 t_lo = 2; uint64 last_offset = 3; uint32 num_nodes = 4;
      repeated uint32 node_type = 5; repeated CompressedEdge edges = 6;
    }

``last_offset`` is ``t_hi - t_lo - 1``: an interval can end at 2**64, which
uint64 cannot hold.
"""

from __future__ import annotations

from typing import Any

import numpy as np
from google.protobuf import descriptor_pb2, descriptor_pool, message_factory
from google.protobuf.message import DecodeError

from .exceptions import ManifestError
from .snapshot import Snapshot

_F = descriptor_pb2.FieldDescriptorProto


def _build_file() -> descriptor_pb2.FileDescriptorProto:
    proto = descriptor_pb2.FileDescriptorProto(
        name="continuum/snapshot.proto", package="continuum", syntax="proto3"
    )

    edge = proto.message_type.add(name="CompressedEdge")
    edge.field.add(name="src", number=1, type=_F.TYPE_UINT32, label=_F.LABEL_OPTIONAL)
    edge.field.add(name="dst", number=2, type=_F.TYPE_UINT32, label=_F.LABEL_OPTIONAL)
    edge.field.add(name="counts", number=3, type=_F.TYPE_UINT64, label=_F.LABEL_REPEATED)

    snap = proto.message_type.add(name="Snapshot")
    snap.field.add(name="index", number=1, type=_F.TYPE_UINT32, label=_F.LABEL_OPTIONAL)
    snap.field.add(name="t_lo", number=2, type=_F.TYPE_UINT64, label=_F.LABEL_OPTIONAL)
    snap.field.add(name="last_offset", number=3, type=_F.TYPE_UINT64, label=_F.LABEL_OPTIONAL)
    snap.field.add(name="num_nodes", number=4, type=_F.TYPE_UINT32, label=_F.LABEL_OPTIONAL)
    snap.field.add(
        name="node_type", number=5, type=_F.TYPE_UINT32, label=_F.LABEL_REPEATED
    )
    snap.field.add(
        name="edges",
        number=6,
        type=_F.TYPE_MESSAGE,
        label=_F.LABEL_REPEATED,
        type_name=".continuum.CompressedEdge",
    )
    return proto


_pool = descriptor_pool.DescriptorPool()
_pool.Add(_build_file())

SnapshotProto: Any = message_factory.GetMessageClass(
    _pool.FindMessageTypeByName("continuum.Snapshot")
)


def encode_snapshot(s: Snapshot) -> bytes:
    """Serialize a snapshot to protobuf bytes."""
    message = SnapshotProto(
        index=s.index,
        t_lo=s.t_lo,
        last_offset=s.t_hi - s.t_lo - 1,
        num_nodes=s.num_nodes,
    )
    message.node_type.extend(s.node_types.tolist())
    for edge in s.iter_edges():
        message.edges.add(src=edge.src, dst=edge.dst, counts=edge.counts)
    return bytes(message.SerializeToString())


def decode_snapshot(data: bytes, d_node: int, d_edge: int) -> Snapshot:
    """Parse protobuf bytes written by ``encode_snapshot``.

    Raises:
        ManifestError: If the bytes are not a valid snapshot message.
    """
    message = SnapshotProto()
    try:
        message.ParseFromString(data)
    except DecodeError as e:
        raise ManifestError(f"Invalid snapshot protobuf: {e}")

    n_edges = len(message.edges)
    counts = np.zeros((n_edges, d_edge), dtype=np.int64)
    for k, edge in enumerate(message.edges):
        counts[k, : len(edge.counts)] = list(edge.counts)
    return Snapshot(
        index=message.index,
        t_lo=message.t_lo,
        t_hi=message.t_lo + message.last_offset + 1,
        node_types=np.asarray(list(message.node_type), dtype=np.int64),
        d_node=d_node,
        d_edge=d_edge,
        src=np.asarray([e.src for e in message.edges], dtype=np.int64),
        dst=np.asarray([e.dst for e in message.edges], dtype=np.int64),
        counts=counts,
        compressed=True,
    )
