"""Run bookkeeping: atomic output adoption, content hashing, artifact metadata."""
from __future__ import annotations

import hashlib
import json
import os
from contextlib import contextmanager
from pathlib import Path

from . import __version__
from .errors import MissingInputError

SCHEMA_VERSION = 1


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def require_inputs(paths: dict[str, Path]) -> dict[str, str]:
    """Check inputs exist; return {name: sha256}. Missing -> MissingInputError."""
    missing = [f"{name}: {p}" for name, p in paths.items() if not Path(p).is_file()]
    if missing:
        raise MissingInputError("missing input file(s): " + "; ".join(missing),
                                missing=missing)
    return {name: sha256_file(p) for name, p in sorted(paths.items())}


@contextmanager
def atomic_write(path):
    """Yield a temp path; adopt it on success, leave the .tmp behind on failure."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    yield tmp
    os.replace(tmp, path)


def artifact_meta(seed: int, input_hashes: dict[str, str], extra: dict | None = None) -> dict:
    meta = {"tool_version": __version__, "schema_version": SCHEMA_VERSION,
            "seed": seed, "input_hashes": input_hashes}
    if extra:
        meta.update(extra)
    return meta


def write_meta(artifact_path, meta: dict) -> None:
    side = Path(str(artifact_path) + ".meta.json")
    with atomic_write(side) as tmp:
        with Path(tmp).open("w") as fh:
            json.dump(meta, fh, sort_keys=True, indent=2)
            fh.write("\n")
