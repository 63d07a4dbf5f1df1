"""Scripted client personas for the simulated network."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

from .. import codec
from ..codec import BREACH_OF_PROTOCOL, REQUESTED
from ..session import DEFAULT_REASONS

Caps = Tuple[Tuple[str, int], ...]

MAINNET_CAPS: Caps = (("eth", 68), ("snap", 1))
LEGACY_CAPS: Caps = (("eth", 66), ("eth", 67), ("eth", 68), ("snap", 1))


@dataclass(frozen=True)
class BehaviorProfile:
    name: str
    client_id: str
    neighbors_reply_lengths: Tuple[int, ...] = (12, 4)
    latency_ms: int = 5
    chain: str = "mainnet"
    # "synced" uses the observer's head; "genesis" advertises the genesis fork id
    head: str = "synced"
    capabilities: Caps = MAINNET_CAPS
    false_from_ip: Optional[str] = None
    disconnect_vocabulary: Dict[str, int] = field(default_factory=dict)
    # "same_family" keeps only peers of this profile's client family in tables and replies
    table_filter: Optional[str] = None
    silent_close_probability: float = 0.0
    tcp_reachable: bool = True
    udp_responsive: bool = True
    max_peers: Optional[int] = None
    session_hold: Optional[float] = 10.0

    def __post_init__(self) -> None:
        lengths = tuple(int(n) for n in self.neighbors_reply_lengths)
        if sum(lengths) > codec.MAX_NEIGHBORS or any(n < 0 for n in lengths):
            raise ValueError(f"{self.name}: reply lengths {lengths} exceed {codec.MAX_NEIGHBORS} nodes")
        object.__setattr__(self, "neighbors_reply_lengths", lengths)
        object.__setattr__(self, "capabilities", tuple((str(n), int(v)) for n, v in self.capabilities))
        if not 0.0 <= self.silent_close_probability <= 1.0:
            raise ValueError("silent close probability must be within [0, 1]")
        if self.table_filter not in (None, "same_family"):
            raise ValueError(f"unknown table filter {self.table_filter!r}")

    @property
    def family(self) -> str:
        return self.client_id.split("/", 1)[0].lower() or "unknown"

    def reasons(self) -> Dict[str, int]:
        out = dict(DEFAULT_REASONS)
        out.update(self.disconnect_vocabulary)
        return out

    def with_overrides(self, **kw) -> "BehaviorProfile":
        if "neighbors_reply_lengths" in kw:
            kw["neighbors_reply_lengths"] = tuple(kw["neighbors_reply_lengths"])
        if "capabilities" in kw:
            kw["capabilities"] = tuple(_parse_cap(c) for c in kw["capabilities"])
        if "disconnect_vocabulary" in kw:
            kw["disconnect_vocabulary"] = dict(kw["disconnect_vocabulary"])
        return dataclasses.replace(self, **kw)


def _parse_cap(c) -> Tuple[str, int]:
    if isinstance(c, str):
        name, _, version = c.partition("/")
        return name, int(version)
    name, version = c
    return str(name), int(version)


GETH = BehaviorProfile("geth", "Geth/v1.13.14-stable-2bd6bd01/linux-amd64/go1.21.7")
ERIGON = BehaviorProfile("erigon", "erigon/v2.59.3-f0ba7ba3/linux-amd64/go1.21.6")
RETH = BehaviorProfile("reth", "reth/v0.2.0-beta.6-ac29b4b7/x86_64-unknown-linux-gnu")
BESU = BehaviorProfile("besu", "besu/v24.3.0/linux-x86_64/openjdk-java-17", neighbors_reply_lengths=(13,))
NETHERMIND = BehaviorProfile(
    "nethermind", "Nethermind/v1.25.4+20b10b35/linux-x64/dotnet8.0.2",
    neighbors_reply_lengths=(12,),
    disconnect_vocabulary={"incompatible_chain": BREACH_OF_PROTOCOL, "idle": REQUESTED},
)
BOR = BehaviorProfile(
    "bor", "bor/v1.2.8-stable-3f4a4ac5/linux-amd64/go1.22.0",
    neighbors_reply_lengths=(6,), chain="polygon", table_filter="same_family",
)
BUGGY_NAT = BehaviorProfile("buggy-nat", GETH.client_id, false_from_ip="127.0.0.1")

PROFILES = {p.name: p for p in (GETH, ERIGON, RETH, BESU, NETHERMIND, BOR, BUGGY_NAT)}


def profile_by_name(name: str) -> BehaviorProfile:
    try:
        return PROFILES[name]
    except KeyError:
        raise ValueError(f"unknown profile {name!r}; known: {', '.join(sorted(PROFILES))}") from None


__all__ = ["BehaviorProfile", "PROFILES", "profile_by_name", "GETH", "BESU", "NETHERMIND", "BOR",
           "BUGGY_NAT", "ERIGON", "RETH"]
