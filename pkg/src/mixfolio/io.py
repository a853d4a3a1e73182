"""Run configuration, validated up front, and auditable run outputs.

Configs are JSON documents validated completely before any computation
starts, so that long Monte Carlo runs fail fast.  Outputs are written
atomically (temp file plus rename) and every run emits one manifest tying
the config hash, seed, and output checksums together.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path


class ConfigError(ValueError):
    """Invalid configuration or command usage; maps to exit code 2."""


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    return sha256_bytes(Path(path).read_bytes())


def atomic_write_text(path, text: str) -> None:
    """Write via a sibling temp file and rename, so readers never see a
    partial file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def json_dumps(obj) -> str:
    """Deterministic JSON: fixed separators, preserved key order, newline."""
    return json.dumps(obj, indent=2, allow_nan=True) + "\n"


def load_config(path) -> tuple[dict, bytes]:
    """Read and parse a JSON config; returns (document, raw bytes)."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    raw = path.read_bytes()
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    return doc, raw


def require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigError(message)


def resolve_input(base_dir: Path, value, name: str) -> Path:
    """Resolve a referenced file relative to the config and require it to
    exist."""
    require(isinstance(value, str) and value, f"{name} must be a file path")
    path = (base_dir / value).resolve() if not os.path.isabs(value) else Path(value)
    require(path.exists(), f"{name} file not found: {path}")
    return path


def write_manifest(
    out_dir,
    *,
    config_bytes: bytes,
    seed,
    outputs: list[str],
    wall_clock_seconds: float,
) -> Path:
    """Emit the run manifest next to the outputs; one per run."""
    from . import __version__

    out_dir = Path(out_dir)
    checksums = {name: sha256_file(out_dir / name) for name in outputs}
    manifest = {
        "config_sha256": sha256_bytes(config_bytes),
        "seed": seed,
        "package_version": __version__,
        "wall_clock_seconds": wall_clock_seconds,
        "outputs": checksums,
    }
    path = out_dir / "manifest.json"
    atomic_write_text(path, json_dumps(manifest))
    return path
