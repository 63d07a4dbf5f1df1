"""Chain configurations and fork identifiers (CRC-32 over the fork history)."""
from __future__ import annotations

import bisect
import enum
import zlib
from dataclasses import dataclass, field
from typing import Optional, Tuple

from .codec import ForkId, Status


@dataclass(frozen=True)
class Head:
    """Chain head position; forks activate by block number or timestamp."""
    number: int
    time: int = 0


@dataclass(frozen=True)
class ChainStatus:
    network_id: int
    genesis_hash: bytes
    fork_id: ForkId

    @classmethod
    def from_status(cls, st: Status) -> "ChainStatus":
        return cls(st.network_id, st.genesis_hash, st.fork_id)

    def to_json(self) -> dict:
        return {"networkID": self.network_id, "genesisHash": "0x" + self.genesis_hash.hex(),
                "forkID": str(self.fork_id)}


def compute_fork_hash(genesis_hash: bytes, past_forks=()) -> bytes:
    """Fold each activation point (block or timestamp, uint64 BE) into the
    CRC-32 of the genesis hash."""
    crc = zlib.crc32(genesis_hash)
    for f in past_forks:
        crc = zlib.crc32(f.to_bytes(8, "big"), crc)
    return crc.to_bytes(4, "big")


class ForkCheck(enum.Enum):
    COMPATIBLE = "Compatible"
    REMOTE_STALE = "RemoteStale"
    LOCAL_STALE = "LocalStale"
    DIFFERENT_CHAIN = "DifferentChain"


@dataclass(frozen=True)
class ChainConfig:
    name: str
    network_id: int
    genesis_hash: bytes
    block_forks: Tuple[int, ...] = ()
    time_forks: Tuple[int, ...] = ()
    genesis_time: int = 0
    # chains whose schedule we do not model can pin an advertised fork id
    pinned_fork_id: Optional[ForkId] = field(default=None, compare=False)

    def __post_init__(self) -> None:
        # duplicates and forks active at genesis do not contribute to the checksum
        blocks = tuple(sorted({b for b in self.block_forks if b > 0}))
        times = tuple(sorted({t for t in self.time_forks if t > self.genesis_time}))
        object.__setattr__(self, "block_forks", blocks)
        object.__setattr__(self, "time_forks", times)

    @property
    def forks(self) -> Tuple[int, ...]:
        return self.block_forks + self.time_forks

    def _passed(self, head: Head) -> int:
        n = bisect.bisect_right(self.block_forks, head.number)
        if n == len(self.block_forks):
            n += bisect.bisect_right(self.time_forks, head.time)
        return n

    def fork_hashes(self) -> Tuple[bytes, ...]:
        """Checksum after each prefix of the schedule, genesis first."""
        out = []
        for i in range(len(self.forks) + 1):
            out.append(compute_fork_hash(self.genesis_hash, self.forks[:i]))
        return tuple(out)

    def fork_id(self, head: Head) -> ForkId:
        if self.pinned_fork_id is not None:
            return self.pinned_fork_id
        n = self._passed(head)
        nxt = self.forks[n] if n < len(self.forks) else 0
        return ForkId(compute_fork_hash(self.genesis_hash, self.forks[:n]), nxt)

    def chain_status(self, head: Head) -> ChainStatus:
        return ChainStatus(self.network_id, self.genesis_hash, self.fork_id(head))

    def status(self, head: Head, head_hash: bytes = b"\x00" * 32, version: int = 68,
               total_difficulty: int = 0) -> Status:
        return Status(version, self.network_id, self.genesis_hash, self.fork_id(head),
                      head_hash, total_difficulty)

    def truncated(self, n_forks: int, name: Optional[str] = None) -> "ChainConfig":
        """The same chain with a schedule that stops after ``n_forks`` forks."""
        keep = self.forks[:n_forks]
        blocks = tuple(f for f in keep if f in self.block_forks)
        times = tuple(f for f in keep if f in self.time_forks)
        return ChainConfig(name or f"{self.name}-{n_forks}", self.network_id, self.genesis_hash,
                           blocks, times, self.genesis_time)


def validate_fork_id(local: ChainConfig, remote: ChainStatus, head: Head) -> ForkCheck:
    """Fork-id filter in the style of EIP-2124.

    Remote hashes from our own future count as Compatible (we are the one
    still syncing); anything else unknown is a different chain.
    """
    if remote.network_id != local.network_id or remote.genesis_hash != local.genesis_hash:
        return ForkCheck.DIFFERENT_CHAIN
    if local.pinned_fork_id is not None:
        same = remote.fork_id == local.pinned_fork_id
        return ForkCheck.COMPATIBLE if same else ForkCheck.DIFFERENT_CHAIN
    forks = local.forks
    sums = local.fork_hashes()
    n = local._passed(head)
    rhash, rnext = remote.fork_id.fork_hash, remote.fork_id.fork_next
    if rhash == sums[n]:
        if rnext > 0:
            passed = head.number >= rnext if rnext < _TIME_THRESHOLD else head.time >= rnext
            if passed:
                return ForkCheck.LOCAL_STALE
        return ForkCheck.COMPATIBLE
    for i in range(n):
        if rhash == sums[i]:
            return ForkCheck.COMPATIBLE if forks[i] == rnext else ForkCheck.REMOTE_STALE
    if rhash in sums[n + 1:]:
        return ForkCheck.COMPATIBLE
    return ForkCheck.DIFFERENT_CHAIN


# fork-next values at or above this are timestamps (the geth convention)
_TIME_THRESHOLD = 1438269973


def _h(x: str) -> bytes:
    return bytes.fromhex(x)


MAINNET = ChainConfig(
    "mainnet", 1, _h("d4e56740f876aef8c010b86a40d5f56745a118d0906a34e69aec8c0db1cb8fa3"),
    (1150000, 1920000, 2463000, 2675000, 4370000, 7280000, 9069000, 9200000,
     12244000, 12965000, 13773000, 15050000),
    (1681338455, 1710338135),
    genesis_time=0,
)
# a node that never upgraded past Shanghai
MAINNET_PRE_CANCUN = MAINNET.truncated(13, "mainnet-pre-cancun")
MAINNET_HEAD = Head(19_800_000, 1714521600)

HOLESKY = ChainConfig(
    "holesky", 17000, _h("b5f7f912443c940f21fd611f12828d75b534364ed9e95ca4e307729a4661bde4"),
    (), (1696000704, 1707305664), genesis_time=1695902400,
)
HOLESKY_PRE_SHANGHAI = HOLESKY.truncated(0, "holesky-pre-shanghai")

GNOSIS = ChainConfig(
    "gnosis", 100, _h("4f1dd23188aab3a76b463e4af801b52b1248ef073c648cbdc4c9333d3da79756"),
    pinned_fork_id=ForkId(_h("1384dfc1"), 0),
)
# fork schedules below are not modeled; only network id and genesis matter here
POLYGON = ChainConfig(
    "polygon", 137, _h("a9c28ce2141b56c474f1dc504bee9b01eb1bd7d1a507580d5519d4437a97de1b"),
)
BSC = ChainConfig(
    "bsc", 56, _h("0d21840abff46b96c84b2ac9e10e4f5cdaeb5693cb665db62a2f3b02d2d57b5b"),
)

CHAINS = {c.name: c for c in (MAINNET, MAINNET_PRE_CANCUN, HOLESKY, HOLESKY_PRE_SHANGHAI,
                              GNOSIS, POLYGON, BSC)}


def chain_by_name(name: str) -> ChainConfig:
    try:
        return CHAINS[name]
    except KeyError:
        raise ValueError(f"unknown chain {name!r}; known: {', '.join(sorted(CHAINS))}") from None
