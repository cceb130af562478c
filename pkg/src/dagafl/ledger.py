"""Append-only DAG ledger of model-update transactions.

Every node approves exactly two earlier nodes (the genesis approves none).
Edges are stored child -> parent ("approves"), together with the transpose, so
a tip is simply a node with no approvers.

Node digest::

    body   = SHA-256(canonical metadata bytes)
    digest = SHA-256(parent_digest_1 || parent_digest_2 || body)

with 32 zero bytes standing in for both parent digests at the genesis.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

DIGEST_SIZE = 32
ZERO_DIGEST = bytes(DIGEST_SIZE)


class LedgerError(ValueError):
    pass


class UnknownNodeError(LedgerError, KeyError):
    pass


@dataclass(frozen=True)
class TipMetadata:
    client_id: int
    signature: tuple[float, ...]
    model_accuracy: float
    current_epoch: int
    validation_node_id: int
    timestamp: float

    def __post_init__(self):
        object.__setattr__(self, "signature", tuple(float(v) for v in self.signature))

    def to_bytes(self) -> bytes:
        """Canonical body serialization (little-endian, no separators)."""
        sig = self.signature
        return b"".join([
            struct.pack("<Q", self.client_id),
            struct.pack("<I", len(sig)),
            struct.pack(f"<{len(sig)}d", *sig),
            struct.pack("<d", self.model_accuracy),
            struct.pack("<Q", self.current_epoch),
            struct.pack("<Q", self.validation_node_id),
            struct.pack("<d", self.timestamp),
        ])

    @classmethod
    def from_bytes(cls, data: bytes) -> "TipMetadata":
        client_id, n = struct.unpack_from("<QI", data, 0)
        off = 12
        sig = struct.unpack_from(f"<{n}d", data, off)
        off += 8 * n
        acc, epoch, vnode, ts = struct.unpack_from("<dQQd", data, off)
        if off + 32 != len(data):
            raise LedgerError("trailing bytes in metadata serialization")
        return cls(client_id, sig, acc, epoch, vnode, ts)

    def to_json(self) -> dict:
        return {
            "client_id": self.client_id,
            "signature": list(self.signature),
            "model_accuracy": self.model_accuracy,
            "current_epoch": self.current_epoch,
            "validation_node_id": self.validation_node_id,
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TipMetadata":
        return cls(
            int(obj["client_id"]),
            tuple(obj.get("signature", ())),
            float(obj["model_accuracy"]),
            int(obj["current_epoch"]),
            int(obj["validation_node_id"]),
            float(obj["timestamp"]),
        )


def compute_digest(parent_digest_1: bytes, parent_digest_2: bytes, metadata: TipMetadata) -> bytes:
    body = hashlib.sha256(metadata.to_bytes()).digest()
    return hashlib.sha256(parent_digest_1 + parent_digest_2 + body).digest()


@dataclass(frozen=True)
class DagNode:
    id: int
    parents: tuple[int, ...]
    metadata: TipMetadata
    digest: bytes

    def to_json(self) -> dict:
        meta = self.metadata
        return {
            "id": self.id,
            "parents": list(self.parents),
            "client_id": meta.client_id,
            "model_accuracy": meta.model_accuracy,
            "current_epoch": meta.current_epoch,
            "validation_node_id": meta.validation_node_id,
            "timestamp": meta.timestamp,
            "signature": list(meta.signature),
            "digest": self.digest.hex(),
        }


@dataclass(frozen=True)
class PathRecord:
    """Self-contained copy of one ledger node, enough to recompute its digest."""

    id: int
    parents: tuple[int, ...]
    parent_digests: tuple[bytes, bytes]
    metadata: TipMetadata
    digest: bytes


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    tampered_at: int | None = None

    def __str__(self) -> str:
        return "accepted" if self.accepted else f"tampered-at({self.tampered_at})"


class Ledger:
    """The publisher's ledger of record. Mutations must be serialized by the caller."""

    def __init__(self, genesis: TipMetadata):
        self._nodes: list[DagNode] = []
        self._approvers: list[set[int]] = []
        self._tips: set[int] = set()
        self._append(tuple(), genesis, ZERO_DIGEST, ZERO_DIGEST)

    def _append(self, parents: tuple[int, ...], metadata: TipMetadata, h1: bytes, h2: bytes) -> int:
        node_id = len(self._nodes)
        node = DagNode(node_id, parents, metadata, compute_digest(h1, h2, metadata))
        self._nodes.append(node)
        self._approvers.append(set())
        for p in set(parents):
            self._approvers[p].add(node_id)
            self._tips.discard(p)
        self._tips.add(node_id)
        return node_id

    def append(self, parents: Sequence[int], metadata: TipMetadata) -> int:
        """Append a node approving ``parents`` (exactly two ids; may repeat)."""
        parents = tuple(int(p) for p in parents)
        if len(parents) != 2:
            raise LedgerError(f"a node approves exactly two parents, got {len(parents)}")
        for p in parents:
            if not 0 <= p < len(self._nodes):
                raise UnknownNodeError(f"unknown parent {p}")
        acc = metadata.model_accuracy
        if not (math.isfinite(acc) and 0.0 <= acc <= 1.0):
            raise LedgerError(f"model_accuracy {acc} outside [0, 1]")
        if not all(math.isfinite(v) and 0.0 <= v <= 1.0 for v in metadata.signature):
            raise LedgerError("signature entries must lie in [0, 1]")
        newest = max(self._nodes[p].metadata.timestamp for p in parents)
        if not metadata.timestamp >= newest:
            raise LedgerError(f"timestamp regression: {metadata.timestamp} < parent time {newest}")
        h1, h2 = (self._nodes[p].digest for p in parents)
        return self._append(parents, metadata, h1, h2)

    # ------------------------------------------------------------------ queries

    def __len__(self) -> int:
        return len(self._nodes)

    def __iter__(self):
        return iter(self._nodes)

    def node(self, node_id: int) -> DagNode:
        if not 0 <= node_id < len(self._nodes):
            raise UnknownNodeError(f"unknown node {node_id}")
        return self._nodes[node_id]

    def tips(self) -> set[int]:
        return set(self._tips)

    def parents(self, node_id: int) -> tuple[int, ...]:
        return self.node(node_id).parents

    def approvers(self, node_id: int) -> set[int]:
        self.node(node_id)
        return set(self._approvers[node_id])

    def approver_count(self, node_id: int) -> int:
        self.node(node_id)
        return len(self._approvers[node_id])

    def tip_digest(self, node_id: int) -> bytes:
        return self.node(node_id).digest

    def extract_verification_path(self, from_tip: int) -> list[PathRecord]:
        """Root-ward path from ``from_tip`` to the genesis along first parents."""
        path = []
        node = self.node(from_tip)
        while True:
            if node.parents:
                pd = (self._nodes[node.parents[0]].digest, self._nodes[node.parents[1]].digest)
            else:
                pd = (ZERO_DIGEST, ZERO_DIGEST)
            path.append(PathRecord(node.id, node.parents, pd, node.metadata, node.digest))
            if not node.parents:
                return path
            node = self._nodes[node.parents[0]]

    def recompute_all(self) -> bool:
        """Recompute every digest from scratch and compare with the stored ones."""
        for node in self._nodes:
            if node.parents:
                h1, h2 = (self._nodes[p].digest for p in node.parents)
            else:
                h1 = h2 = ZERO_DIGEST
            if compute_digest(h1, h2, node.metadata) != node.digest:
                return False
        return True

    # ------------------------------------------------------------------ export

    def to_jsonl(self) -> str:
        return "".join(json.dumps(n.to_json(), separators=(",", ":")) + "\n" for n in self._nodes)

    def write_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_jsonl())


def verify_path(path: Sequence[PathRecord], trusted_tip_digest: bytes) -> Verdict:
    """Check a retained path against the trusted digest of its head.

    Walks from the head towards the genesis; reports the first record whose
    recomputed digest differs from its recorded one, or whose first parent
    digest does not match the next record on the path.
    """
    if not path:
        raise LedgerError("empty verification path")
    if path[0].digest != trusted_tip_digest:
        return Verdict(False, path[0].id)
    for i, rec in enumerate(path):
        if compute_digest(rec.parent_digests[0], rec.parent_digests[1], rec.metadata) != rec.digest:
            return Verdict(False, rec.id)
        if i + 1 < len(path):
            nxt = path[i + 1]
            if not rec.parents or rec.parents[0] != nxt.id or rec.parent_digests[0] != nxt.digest:
                return Verdict(False, rec.id)
        elif rec.parents or rec.parent_digests != (ZERO_DIGEST, ZERO_DIGEST):
            # the path must end at a genesis record
            return Verdict(False, rec.id)
    return Verdict(True)


# ---------------------------------------------------------------------- import

@dataclass
class ExportedNode:
    id: int
    parents: tuple[int, ...]
    metadata: TipMetadata
    digest: bytes


def parse_export(lines: Iterable[str]) -> list[ExportedNode]:
    """Parse a JSON-lines ledger export without re-validating anything."""
    out = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            out.append(ExportedNode(
                int(obj["id"]),
                tuple(int(p) for p in obj["parents"]),
                TipMetadata.from_json(obj),
                bytes.fromhex(obj["digest"]),
            ))
        except (KeyError, TypeError, ValueError) as exc:
            raise LedgerError(f"line {lineno}: malformed ledger record ({exc})") from exc
    return out


def path_from_export(nodes: Sequence[ExportedNode], from_id: int) -> list[PathRecord]:
    """Rebuild the first-parent path from exported records, trusting stored digests
    for the parent pointers (verification then recomputes each record)."""
    by_id = {n.id: n for n in nodes}
    if from_id not in by_id:
        raise UnknownNodeError(f"unknown node {from_id}")
    path = []
    node = by_id[from_id]
    seen = set()
    while True:
        if node.id in seen:
            raise LedgerError(f"cycle through node {node.id}")
        seen.add(node.id)
        if node.parents:
            try:
                pd = (by_id[node.parents[0]].digest, by_id[node.parents[1]].digest)
            except (KeyError, IndexError) as exc:
                raise LedgerError(f"node {node.id} references a missing parent") from exc
        else:
            pd = (ZERO_DIGEST, ZERO_DIGEST)
        path.append(PathRecord(node.id, node.parents, pd, node.metadata, node.digest))
        if not node.parents:
            return path
        node = by_id[node.parents[0]]


def ledger_from_nodes(nodes: Sequence[ExportedNode]) -> Ledger:
    """Replay exported nodes into a fresh ledger, checking each digest."""
    nodes = sorted(nodes, key=lambda n: n.id)
    if not nodes or nodes[0].parents:
        raise LedgerError("export does not start with a genesis node")
    ledger = Ledger(nodes[0].metadata)
    for n in nodes:
        if n.id == 0:
            got = ledger.node(0).digest
        else:
            got = ledger.node(ledger.append(n.parents, n.metadata)).digest
        if got != n.digest:
            raise LedgerError(f"digest mismatch at node {n.id}")
    return ledger


def mutate_record(rec: PathRecord, offset: int, xor: int) -> PathRecord:
    """Flip bits of one byte in the record's hashed content.

    Offsets index ``parent_digest_1 || parent_digest_2 || metadata bytes``,
    skipping the 4-byte signature length prefix so the record stays decodable.
    """
    if not 1 <= xor <= 255:
        raise ValueError("xor must be a non-zero byte")
    meta = bytearray(rec.metadata.to_bytes())
    editable = [("p", i) for i in range(2 * DIGEST_SIZE)]
    editable += [("m", i) for i in range(len(meta)) if not 8 <= i < 12]
    kind, i = editable[offset % len(editable)]
    if kind == "p":
        pd = bytearray(rec.parent_digests[0] + rec.parent_digests[1])
        pd[i] ^= xor
        return replace(rec, parent_digests=(bytes(pd[:DIGEST_SIZE]), bytes(pd[DIGEST_SIZE:])))
    meta[i] ^= xor
    return replace(rec, metadata=TipMetadata.from_bytes(bytes(meta)))


def editable_size(rec: PathRecord) -> int:
    return 2 * DIGEST_SIZE + len(rec.metadata.to_bytes()) - 4
