"""Flat key=value config documents (one `key = value` per line, # comments)."""

from __future__ import annotations

from pathlib import Path

__all__ = ["read_kv_config", "write_kv_config"]


def read_kv_config(path: str | Path) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ValueError(f"{path}: line {line_no} is not 'key = value'")
            key, _, value = stripped.partition("=")
            key = key.strip()
            if key in out:
                raise ValueError(f"{path}: duplicate key {key!r} at line {line_no}")
            out[key] = value.strip()
    return out


def write_kv_config(path: str | Path, mapping: dict[str, str]) -> None:
    with open(path, "w") as fh:
        for key in sorted(mapping):
            fh.write(f"{key} = {mapping[key]}\n")
