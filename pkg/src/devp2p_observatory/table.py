"""Routing table: XOR metric, 17 recency-ordered buckets, replacement lists."""
from __future__ import annotations

import enum
import heapq
import json
import random
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Dict, Iterator, List, Optional, Tuple

from .codec import Endpoint, NodeIdentity

NUM_BUCKETS = 17
BUCKET_SIZE = 16
REPLACEMENT_SIZE = 10
# distances at or below this collapse into bucket 0
BUCKET_MIN_DISTANCE = 256 - (NUM_BUCKETS - 1)
BOND_WINDOW = 12 * 3600.0


class TableError(Exception):
    pass


class SelfInsertion(TableError):
    pass


class EmptyTable(TableError):
    pass


def xor_distance(a: bytes, b: bytes) -> int:
    return int.from_bytes(a, "big") ^ int.from_bytes(b, "big")


def log_distance(a: bytes, b: bytes) -> int:
    if len(a) != 32 or len(b) != 32:
        raise ValueError("table keys are 32 bytes")
    return xor_distance(a, b).bit_length()


@dataclass
class TableEntry:
    identity: NodeIdentity
    endpoint: Endpoint
    last_pong_at: Optional[float] = None
    last_ping_from_at: Optional[float] = None
    added_at: float = 0.0

    @property
    def key(self) -> bytes:
        return self.identity.table_key

    def to_json(self) -> dict:
        return {
            "id": self.identity.hex,
            "ip": self.endpoint.ip,
            "udp": self.endpoint.udp_port,
            "tcp": self.endpoint.tcp_port,
            "lastPongAt": self.last_pong_at,
            "lastPingFromAt": self.last_ping_from_at,
            "addedAt": self.added_at,
        }


def needs_bond(entry: Optional[TableEntry], now: float, window: float = BOND_WINDOW) -> bool:
    if entry is None or entry.last_pong_at is None:
        return True
    return now - entry.last_pong_at > window


class UpsertResult(enum.Enum):
    INSERTED = "Inserted"
    REFRESHED = "Refreshed"
    BUCKET_FULL_QUEUED = "BucketFullQueued"


def _recency(entry: TableEntry) -> float:
    return entry.last_pong_at if entry.last_pong_at is not None else float("-inf")


def _max_opt(a: Optional[float], b: Optional[float]) -> Optional[float]:
    if a is None:
        return b
    if b is None:
        return a
    return max(a, b)


class RoutingTable:
    """Buckets are lists ordered most-recent first by ``last_pong_at``."""

    def __init__(self, self_key: bytes, bucket_capacity: int = BUCKET_SIZE,
                 replacement_capacity: int = REPLACEMENT_SIZE) -> None:
        if len(self_key) != 32:
            raise ValueError("self key must be 32 bytes")
        if bucket_capacity < 1:
            raise ValueError("bucket capacity must be positive")
        self.self_key = self_key
        self.bucket_capacity = bucket_capacity
        self.replacement_capacity = replacement_capacity
        self.buckets: List[List[TableEntry]] = [[] for _ in range(NUM_BUCKETS)]
        self.replacements: List[List[TableEntry]] = [[] for _ in range(NUM_BUCKETS)]
        self._where: Dict[bytes, int] = {}

    def bucket_index_for(self, key: bytes) -> int:
        if key == self.self_key:
            raise SelfInsertion("cannot place the local node in its own table")
        return max(0, log_distance(self.self_key, key) - BUCKET_MIN_DISTANCE)

    def __len__(self) -> int:
        return len(self._where)

    def __contains__(self, node_id: bytes) -> bool:
        return node_id in self._where

    def __iter__(self) -> Iterator[TableEntry]:
        for bucket in self.buckets:
            yield from bucket

    def get(self, node_id: bytes) -> Optional[TableEntry]:
        idx = self._where.get(node_id)
        if idx is None:
            return None
        for e in self.buckets[idx]:
            if e.identity.node_id == node_id:
                return e
        return None

    def _place(self, bucket: List[TableEntry], entry: TableEntry) -> None:
        # ties go in front of older equals: the newest touch is the most recent
        r = _recency(entry)
        for i, e in enumerate(bucket):
            if _recency(e) <= r:
                bucket.insert(i, entry)
                return
        bucket.append(entry)

    def upsert(self, entry: TableEntry) -> UpsertResult:
        node_id = entry.identity.node_id
        idx = self.bucket_index_for(entry.key)
        bucket = self.buckets[idx]
        if node_id in self._where:
            old = self.get(node_id)
            bucket.remove(old)
            merged = TableEntry(
                entry.identity, entry.endpoint,
                _max_opt(old.last_pong_at, entry.last_pong_at),
                _max_opt(old.last_ping_from_at, entry.last_ping_from_at),
                old.added_at,
            )
            self._place(bucket, merged)
            return UpsertResult.REFRESHED
        repl = self.replacements[idx]
        for r in repl:
            if r.identity.node_id == node_id:
                repl.remove(r)
                break
        if len(bucket) < self.bucket_capacity:
            self._place(bucket, replace(entry))
            self._where[node_id] = idx
            return UpsertResult.INSERTED
        repl.insert(0, replace(entry))
        del repl[self.replacement_capacity:]
        return UpsertResult.BUCKET_FULL_QUEUED

    def remove(self, node_id: bytes) -> Optional[TableEntry]:
        idx = self._where.pop(node_id, None)
        if idx is None:
            return None
        bucket = self.buckets[idx]
        for e in bucket:
            if e.identity.node_id == node_id:
                bucket.remove(e)
                return e
        return None

    def closest(self, target: bytes, k: int) -> List[TableEntry]:
        if k < 1:
            raise ValueError("k must be at least 1")
        t = int.from_bytes(target, "big")
        return heapq.nsmallest(k, self, key=lambda e: int.from_bytes(e.key, "big") ^ t)

    def pick_revalidation_target(self, rng: random.Random) -> TableEntry:
        nonempty = [b for b in self.buckets if b]
        if not nonempty:
            raise EmptyTable("no entries to revalidate")
        return rng.choice(nonempty)[-1]

    def revalidation_succeeded(self, node_id: bytes, now: float,
                               endpoint: Optional[Endpoint] = None) -> None:
        e = self.get(node_id)
        if e is not None:
            self.upsert(TableEntry(e.identity, endpoint or e.endpoint, now, e.last_ping_from_at, e.added_at))

    def revalidation_failed(self, node_id: bytes) -> Optional[TableEntry]:
        """Evict ``node_id``; promote the freshest replacement. Returns it."""
        idx = self._where.get(node_id)
        if idx is None:
            return None
        self.remove(node_id)
        repl = self.replacements[idx]
        if repl:
            promoted = repl.pop(0)
            self._place(self.buckets[idx], promoted)
            self._where[promoted.identity.node_id] = idx
            return promoted
        return None

    def snapshot(self) -> Tuple[TableEntry, ...]:
        return tuple(replace(e) for e in self)

    def dump_lines(self) -> Iterator[str]:
        for idx, bucket in enumerate(self.buckets):
            for pos, e in enumerate(bucket):
                row = e.to_json()
                row["bucket"] = idx
                row["position"] = pos
                row["distance"] = log_distance(self.self_key, e.key)
                yield json.dumps(row, sort_keys=True)

    def check_invariants(self) -> None:
        seen = set()
        assert len(self.buckets) == NUM_BUCKETS
        for idx, bucket in enumerate(self.buckets):
            assert len(bucket) <= self.bucket_capacity, "bucket over capacity"
            for e in bucket:
                nid = e.identity.node_id
                assert nid not in seen, "identity in two buckets"
                seen.add(nid)
                assert self._where.get(nid) == idx
                assert self.bucket_index_for(e.key) == idx
            rec = [_recency(e) for e in bucket]
            assert rec == sorted(rec, reverse=True), "bucket not in recency order"
        assert seen == set(self._where)


class SerializedTable:
    """Routes every mutation through one worker thread; reads use snapshots."""

    def __init__(self, table: RoutingTable) -> None:
        self._table = table
        self._writer = ThreadPoolExecutor(max_workers=1, thread_name_prefix="table-writer")

    def submit(self, method: str, *args) -> Future:
        return self._writer.submit(getattr(self._table, method), *args)

    def snapshot(self) -> Tuple[TableEntry, ...]:
        return self._writer.submit(self._table.snapshot).result()

    def close(self) -> None:
        self._writer.shutdown(wait=True)
