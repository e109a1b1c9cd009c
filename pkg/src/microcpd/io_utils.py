"""Atomic artifact writes and provenance stamps."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile

from . import __version__


def _umask() -> int:
    current = os.umask(0)
    os.umask(current)
    return current


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temp file in the target directory, then rename over ``path``."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.chmod(tmp, 0o666 & ~_umask())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def config_hash(config: dict) -> str:
    text = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def provenance(config: dict, seed) -> dict:
    """Tool version, config hash and seed. No timestamps, so reruns are byte-identical."""
    return {"tool": "microcpd", "version": __version__, "config_hash": config_hash(config), "seed": seed}


def csv_comment(prov: dict) -> str:
    return "# " + " ".join(f"{k}={prov[k]}" for k in sorted(prov)) + "\n"


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"
