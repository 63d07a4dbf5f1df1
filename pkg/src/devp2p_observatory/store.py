"""Append-only event log plus peer and table snapshots.

Layout of a store directory::

    events.jsonl   one event per line, in emit order
    peers.json     latest dossier snapshot (list of peer records)
    table.jsonl    routing table dump, one entry per line
"""
from __future__ import annotations

import json
import logging
import os
import threading
from pathlib import Path
from typing import Iterable, Iterator, List, Tuple, Union

log = logging.getLogger(__name__)

EVENTS = "events.jsonl"
PEERS = "peers.json"
TABLE = "table.jsonl"


def encode_event(ev: dict) -> str:
    return json.dumps(ev, sort_keys=True, separators=(",", ":"))


class EventLog:
    """Crash-tolerant JSON-lines writer. Safe to share between threads."""

    def __init__(self, path: Union[str, Path], fsync: bool = False) -> None:
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "a", encoding="utf-8")
        self._lock = threading.Lock()
        self._fsync = fsync
        self.written = 0

    def append(self, ev: dict) -> None:
        line = encode_event(ev) + "\n"
        with self._lock:
            self._fh.write(line)
            self._fh.flush()
            if self._fsync:
                os.fsync(self._fh.fileno())
            self.written += 1

    __call__ = append

    def close(self) -> None:
        with self._lock:
            if not self._fh.closed:
                self._fh.close()

    def __enter__(self) -> "EventLog":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class Replay:
    """Iterates a log; ``warnings`` counts lines that could not be decoded."""

    def __init__(self, path: Union[str, Path]) -> None:
        self.path = Path(path)
        self.warnings = 0
        self.torn_tail = False

    def __iter__(self) -> Iterator[dict]:
        with open(self.path, "rb") as fh:
            data = fh.read()
        lines = data.split(b"\n")
        # a final fragment without its newline is a write cut short by a crash
        last = len(lines) - 1
        for i, raw in enumerate(lines):
            if not raw.strip():
                continue
            try:
                ev = json.loads(raw)
                if not isinstance(ev, dict):
                    raise ValueError("event is not an object")
            except ValueError:
                self.warnings += 1
                if i >= last - 1:
                    self.torn_tail = True
                log.warning("%s:%d: skipping undecodable line", self.path, i + 1)
                continue
            yield ev


def replay_log(path: Union[str, Path]) -> Tuple[List[dict], int]:
    r = Replay(path)
    events = list(r)
    return events, r.warnings


def write_events(path: Union[str, Path], events: Iterable[dict]) -> int:
    n = 0
    with EventLog(path) as out:
        for ev in events:
            out.append(ev)
            n += 1
    return n


def save_peers(path: Union[str, Path], records: Iterable[dict]) -> None:
    """Atomic snapshot: write a temp file, then rename over the old one."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(list(records), indent=1, sort_keys=True) + "\n")
    os.replace(tmp, path)


def load_peers(path: Union[str, Path]) -> List[dict]:
    return json.loads(Path(path).read_text())


def resolve_log(store: Union[str, Path]) -> Path:
    """Accept either a store directory or a log file path."""
    p = Path(store)
    return p / EVENTS if p.is_dir() else p


def save_table(path: Union[str, Path], lines: Iterable[str]) -> None:
    Path(path).write_text("".join(line + "\n" for line in lines))


__all__ = ["EventLog", "Replay", "replay_log", "write_events", "save_peers", "load_peers",
           "resolve_log", "save_table", "encode_event", "EVENTS", "PEERS", "TABLE"]
