"""``key = value`` config files shared by agents and the manager."""
from __future__ import annotations

from pathlib import Path


class ConfigError(ValueError):
    pass


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def load_config_file(path) -> dict[str, str]:
    p = Path(path)
    return parse_config_text(p.read_text(encoding="utf-8"), str(p))


def merge(file_values: dict, overrides: dict) -> dict:
    """CLI flags win over file keys; None means 'not given'."""
    out = dict(file_values)
    out.update({k: v for k, v in overrides.items() if v is not None})
    return out


def get_int(values: dict, key: str, default=None) -> int | None:
    v = values.get(key)
    if v is None or v == "":
        return default
    try:
        return int(v)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected an integer, got {v!r}") from None


def get_float(values: dict, key: str, default=None) -> float | None:
    v = values.get(key)
    if v is None or v == "":
        return default
    try:
        return float(v)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected a number, got {v!r}") from None


def get_list(values: dict, key: str) -> list[str]:
    v = values.get(key)
    if v is None:
        return []
    if isinstance(v, (list, tuple)):
        return [str(x) for x in v]
    return [s.strip() for s in str(v).split(",") if s.strip()]


def parse_hostport(text: str, default_host: str = "127.0.0.1") -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep:
        host, port = default_host, text
    try:
        p = int(port)
    except ValueError:
        raise ConfigError(f"bad host:port {text!r}") from None
    return (host or default_host), p


def parse_scan_targets(text: str) -> list[tuple[str, int]]:
    """``127.0.0.2:8000-8024,127.0.0.3:8000`` -> explicit address list."""
    out = []
    for item in get_list({"x": text}, "x"):
        host, _, ports = item.rpartition(":")
        if not host:
            raise ConfigError(f"scan target needs host:port[-port], got {item!r}")
        lo, _, hi = ports.partition("-")
        try:
            lo_i = int(lo)
            hi_i = int(hi) if hi else lo_i
        except ValueError:
            raise ConfigError(f"bad port range in {item!r}") from None
        out.extend((host, p) for p in range(lo_i, hi_i + 1))
    return out
