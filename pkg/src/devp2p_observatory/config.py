"""Application configuration: INI file, environment overrides, validation.

Sections and keys (defaults shown)::

    [general]
    seed = 0
    logLevel = INFO

    [discovery]
    port = 30303
    alpha = 3
    maxConcurrentLookups = 1
    neighborsTimeoutMs = 1500
    bondWindowHours = 12
    dialRatePerPeerPerMinute = 10
    tableRefreshSeconds = 10
    revalidateSeconds = 10
    bucketCapacity = 16
    bootnodes =                   ; comma separated enode:// URLs

    [session]
    port = 30303
    chain = mainnet
    clientId = devp2p-observatory/v0.1.0
    maxPeerSlots = 50
    dialHistoryExpirySeconds = 35
    connectTimeoutSeconds = 5
    helloTimeoutSeconds = 5
    statusTimeoutSeconds = 5
    drainDeadlineSeconds = 5

    [limits]
    bandwidthMbit = 50

    [storage]
    dir = store
    snapshotSeconds = 60

Any key can be overridden with ``DEVP2POBS_<SECTION>__<KEY>`` (case
insensitive), e.g. ``DEVP2POBS_DISCOVERY__ALPHA=8``.
"""
from __future__ import annotations

import configparser
import io
import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple, Union

from .codec import Endpoint, NodeIdentity
from .crypto import decompress_public

ENV_PREFIX = "DEVP2POBS_"


class ConfigError(ValueError):
    pass


# (type, default, must be strictly positive)
SCHEMA: Dict[str, Dict[str, Tuple[type, object, bool]]] = {
    "general": {
        "seed": (int, 0, False),
        "logLevel": (str, "INFO", False),
    },
    "discovery": {
        "port": (int, 30303, True),
        "alpha": (int, 3, True),
        "maxConcurrentLookups": (int, 1, True),
        "neighborsTimeoutMs": (int, 1500, True),
        "bondWindowHours": (float, 12.0, True),
        "dialRatePerPeerPerMinute": (int, 10, True),
        "tableRefreshSeconds": (float, 10.0, True),
        "revalidateSeconds": (float, 10.0, True),
        "bucketCapacity": (int, 16, True),
        "bootnodes": (str, "", False),
    },
    "session": {
        "port": (int, 30303, True),
        "chain": (str, "mainnet", False),
        "clientId": (str, "devp2p-observatory/v0.1.0", False),
        "maxPeerSlots": (int, 50, True),
        "dialHistoryExpirySeconds": (float, 35.0, True),
        "connectTimeoutSeconds": (float, 5.0, True),
        "helloTimeoutSeconds": (float, 5.0, True),
        "statusTimeoutSeconds": (float, 5.0, True),
        "drainDeadlineSeconds": (float, 5.0, True),
    },
    "limits": {
        "bandwidthMbit": (float, 50.0, True),
    },
    "storage": {
        "dir": (str, "store", False),
        "snapshotSeconds": (float, 60.0, True),
    },
}

_LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")


def _coerce(section: str, key: str, raw: str):
    kind, _, positive = SCHEMA[section][key]
    try:
        value = kind(raw.strip()) if kind is not str else raw.strip()
    except ValueError:
        raise ConfigError(f"[{section}] {key}: expected {kind.__name__}, got {raw!r}") from None
    if positive and not value > 0:
        raise ConfigError(f"[{section}] {key}: must be positive, got {raw!r}")
    return value


@dataclass
class AppConfig:
    values: Dict[str, Dict[str, object]]

    @classmethod
    def defaults(cls) -> "AppConfig":
        return cls({s: {k: spec[1] for k, spec in keys.items()} for s, keys in SCHEMA.items()})

    def get(self, section: str, key: str):
        return self.values[section][key]

    def __getitem__(self, item: str) -> Dict[str, object]:
        return self.values[item]

    def set(self, section: str, key: str, raw: str) -> None:
        canon = _canonical(section, key)
        self.values[canon[0]][canon[1]] = _coerce(canon[0], canon[1], raw)

    def validate(self) -> None:
        level = str(self.get("general", "logLevel")).upper()
        if level not in _LOG_LEVELS:
            raise ConfigError(f"[general] logLevel: must be one of {', '.join(_LOG_LEVELS)}")
        for url in self.bootnodes_raw():
            parse_enode(url)

    def bootnodes_raw(self) -> List[str]:
        return [u.strip() for u in str(self.get("discovery", "bootnodes")).split(",") if u.strip()]

    def serialize(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        for section, keys in SCHEMA.items():
            cp[section] = {k: str(self.values[section][k]) for k in keys}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _canonical(section: str, key: str) -> Tuple[str, str]:
    sec = next((s for s in SCHEMA if s.lower() == section.lower()), None)
    if sec is None:
        raise ConfigError(f"unknown section [{section}]")
    k = next((name for name in SCHEMA[sec] if name.lower() == key.lower()), None)
    if k is None:
        raise ConfigError(f"unknown key {key!r} in [{sec}]")
    return sec, k


def parse_config(text: str, env: Optional[Mapping[str, str]] = None) -> AppConfig:
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax: {exc}") from None
    cfg = AppConfig.defaults()
    for section in cp.sections():
        for key, raw in cp[section].items():
            cfg.set(section, key, raw)
    apply_env(cfg, os.environ if env is None else env)
    cfg.validate()
    return cfg


def apply_env(cfg: AppConfig, env: Mapping[str, str]) -> None:
    for name in sorted(env):
        if not name.upper().startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX):]
        section, sep, key = rest.partition("__")
        if not sep:
            raise ConfigError(f"environment override {name}: expected {ENV_PREFIX}SECTION__KEY")
        cfg.set(section, key, env[name])


def load_config(path: Union[str, Path, None], env: Optional[Mapping[str, str]] = None) -> AppConfig:
    text = Path(path).read_text() if path else ""
    return parse_config(text, env)


_ENODE = re.compile(r"^enode://([0-9a-fA-F]{128}|[0-9a-fA-F]{66})@(\[[0-9a-fA-F:.]+\]|[^:@]+):(\d+)"
                    r"(?:\?discport=(\d+))?$")


def parse_enode(url: str) -> Tuple[NodeIdentity, Endpoint]:
    m = _ENODE.match(url.strip())
    if not m:
        raise ConfigError(f"malformed enode URL {url!r}")
    key = bytes.fromhex(m.group(1))
    if len(key) == 33:
        key = decompress_public(key)
    tcp = int(m.group(3))
    udp = int(m.group(4)) if m.group(4) else tcp
    try:
        return NodeIdentity(key), Endpoint(m.group(2).strip("[]"), udp, tcp)
    except ValueError as exc:
        raise ConfigError(f"bad enode URL {url!r}: {exc}") from None


__all__ = ["AppConfig", "ConfigError", "SCHEMA", "ENV_PREFIX", "parse_config", "load_config",
           "apply_env", "parse_enode"]
