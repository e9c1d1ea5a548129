"""Service configuration.

The file is ``key = value`` lines with optional ``[section]`` headers.
Keys before the first header form the top level; a dotted key such as
``cache.capacity`` at the top level is the same as ``capacity`` under
``[cache]``. Every key has a default, listed in :data:`DEFAULTS`.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass

from .autoscaler import ScalingPolicy
from .errors import TrinityError

DEFAULTS = {
    "durability": "relaxed",
    "listen": "127.0.0.1:7411",
    "data_dir": "./trinity-data",
    "cache.capacity": "1024",
    "cdc.batch": "64",
    "cdc.interval_ms": "10",
    "cluster.shards": "1",
    "cluster.slaves": "1",
    "cluster.members": "3",
    "cluster.heartbeat_ms": "100",
    "cluster.timeout_ms": "500",
    "autoscale.enabled": "false",
    "autoscale.interval_ms": "1000",
    "autoscale.qps_high": "100",
    "autoscale.qps_low": "10",
    "autoscale.lag_high": "1000",
    "autoscale.cooldown_ticks": "50",
    "autoscale.min_secondaries": "1",
    "autoscale.max_secondaries": "5",
    "autoscale.max_shards": "16",
}


class ConfigError(TrinityError):
    code = "CONFIG_ERROR"


@dataclass(frozen=True)
class Config:
    durability: str = "relaxed"
    host: str = "127.0.0.1"
    port: int = 7411
    data_dir: str = "./trinity-data"
    cache_capacity: int = 1024
    cdc_batch: int = 64
    cdc_interval_ms: int = 10
    shards: int = 1
    slaves: int = 1
    members: int = 3
    heartbeat_ms: int = 100
    timeout_ms: int = 500
    autoscale: bool = False
    autoscale_interval_ms: int = 1000
    policy: ScalingPolicy = ScalingPolicy()

    @property
    def listen(self) -> str:
        return f"{self.host}:{self.port}"


def _flatten(parser: configparser.ConfigParser) -> dict[str, str]:
    flat = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            flat[key if section == "top" else f"{section}.{key}"] = value
    return flat


def parse_config(text: str) -> Config:
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__",
                                       inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string("[top]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(str(exc).replace("\n", " ")) from None
    raw = _flatten(parser)
    unknown = sorted(set(raw) - set(DEFAULTS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    v = {**DEFAULTS, **raw}
    try:
        if v["durability"] not in ("strict", "relaxed"):
            raise ConfigError("durability must be strict or relaxed")
        host, _, port = v["listen"].rpartition(":")
        policy = ScalingPolicy(
            qps_high=float(v["autoscale.qps_high"]),
            qps_low=float(v["autoscale.qps_low"]),
            lag_high=int(v["autoscale.lag_high"]),
            cooldown_ticks=int(v["autoscale.cooldown_ticks"]),
            min_secondaries=int(v["autoscale.min_secondaries"]),
            max_secondaries=int(v["autoscale.max_secondaries"]),
            max_shards=int(v["autoscale.max_shards"]),
        )
        cfg = Config(
            durability=v["durability"],
            host=host or "127.0.0.1",
            port=int(port),
            data_dir=v["data_dir"],
            cache_capacity=int(v["cache.capacity"]),
            cdc_batch=int(v["cdc.batch"]),
            cdc_interval_ms=int(v["cdc.interval_ms"]),
            shards=int(v["cluster.shards"]),
            slaves=int(v["cluster.slaves"]),
            members=int(v["cluster.members"]),
            heartbeat_ms=int(v["cluster.heartbeat_ms"]),
            timeout_ms=int(v["cluster.timeout_ms"]),
            autoscale=v["autoscale.enabled"].lower() in ("1", "true", "yes", "on"),
            autoscale_interval_ms=int(v["autoscale.interval_ms"]),
            policy=policy,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if min(cfg.cache_capacity, cfg.cdc_batch, cfg.cdc_interval_ms, cfg.shards, cfg.members,
           cfg.heartbeat_ms, cfg.timeout_ms, cfg.autoscale_interval_ms) < 1 or cfg.slaves < 0:
        raise ConfigError("sizes and intervals must be positive")
    return cfg


def load_config(path: str | None) -> Config:
    if path is None:
        return Config()
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
