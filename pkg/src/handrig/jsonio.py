"""Canonical JSON rendering and seeded RNG streams.

Artifacts written by this package must round-trip byte-identically
(save -> load -> save), so floats are rendered at a fixed 9 significant
digits and object keys are always sorted.  Parsing a 9-digit decimal into a
double and reprinting it at 9 digits reproduces the same text, which makes
the round-trip stable.
"""

from __future__ import annotations

import hashlib
import json
from typing import Any

import numpy as np

SCHEMA_VERSION = 1


def _render(value: Any, out: list[str]) -> None:
    if isinstance(value, dict):
        out.append("{")
        for i, key in enumerate(sorted(value)):
            if not isinstance(key, str):
                raise TypeError(f"canonical JSON requires string keys, got {type(key)!r}")
            if i:
                out.append(",")
            out.append(json.dumps(key))
            out.append(":")
            _render(value[key], out)
        out.append("}")
    elif isinstance(value, (list, tuple)):
        out.append("[")
        for i, item in enumerate(value):
            if i:
                out.append(",")
            _render(item, out)
        out.append("]")
    elif isinstance(value, np.ndarray):
        _render(value.tolist(), out)
    elif isinstance(value, bool) or value is None:
        out.append(json.dumps(value))
    elif isinstance(value, (int, np.integer)):
        out.append(str(int(value)))
    elif isinstance(value, (float, np.floating)):
        v = float(value)
        if not np.isfinite(v):
            raise ValueError("canonical JSON does not admit non-finite floats")
        if v == 0.0:
            v = 0.0            # normalize -0.0 so reload -> dump is stable
        out.append(format(v, ".9g"))
    elif isinstance(value, str):
        out.append(json.dumps(value))
    else:
        raise TypeError(f"cannot render {type(value)!r} as canonical JSON")


def canonical_dumps(obj: Any) -> str:
    """Render ``obj`` as canonical JSON text (sorted keys, %.9g floats)."""
    out: list[str] = []
    _render(obj, out)
    return "".join(out)


def canonical_dump(obj: Any, path) -> None:
    with open(path, "w") as fh:
        fh.write(canonical_dumps(obj))
        fh.write("\n")


def load_json(path) -> Any:
    with open(path) as fh:
        return json.load(fh)


def dump_jsonl(records, path) -> None:
    """One canonical-JSON record per line."""
    with open(path, "w") as fh:
        for rec in records:
            fh.write(canonical_dumps(rec))
            fh.write("\n")


def load_jsonl(path) -> list[Any]:
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Named substream of the run seed.

    Every module draws from its own stream so adding draws in one module
    never perturbs another.  The stream key is a stable hash of the name,
    independent of process or platform.
    """
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    key = int.from_bytes(digest[:8], "big")
    return np.random.default_rng(np.random.SeedSequence([int(seed), key]))
