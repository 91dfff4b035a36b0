"""Checkpoint files: a text manifest followed by raw little-endian float64 data.

Layout::

    #million-checkpoint 1
    meta <key> <json value>
    param <name> <d0>x<d1>...        (scalar shape is written as "-")
    stats <task> <mu> <nu> <sigma>   (optional Pop-Art block)
    end
    <binary payload: every param in manifest order, '<f8'>
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Any

import numpy as np

MAGIC = "#million-checkpoint 1"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict[str, Any] = field(default_factory=dict)
    stats: dict[str, tuple[float, float, float]] | None = None


def _shape_str(shape) -> str:
    return "x".join(str(d) for d in shape) if shape else "-"


def _parse_shape(text: str) -> tuple[int, ...]:
    return () if text == "-" else tuple(int(d) for d in text.split("x"))


def save_checkpoint(path: str | os.PathLike, ckpt: Checkpoint) -> None:
    lines = [MAGIC]
    for key, value in ckpt.meta.items():
        if " " in key:
            raise CheckpointError(f"meta key may not contain spaces: {key!r}")
        lines.append(f"meta {key} {json.dumps(value, sort_keys=True)}")
    for name, arr in ckpt.params.items():
        if " " in name:
            raise CheckpointError(f"parameter name may not contain spaces: {name!r}")
        lines.append(f"param {name} {_shape_str(np.shape(arr))}")
    if ckpt.stats is not None:
        for task, (mu, nu, sigma) in ckpt.stats.items():
            lines.append(f"stats {task} {float(mu)!r} {float(nu)!r} {float(sigma)!r}")
    lines.append("end")
    header = ("\n".join(lines) + "\n").encode("utf-8")
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in ckpt.params.values())
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(payload)
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    ckpt = Checkpoint()
    shapes: list[tuple[str, tuple[int, ...]]] = []
    pos = 0
    first = True
    while True:
        nl = raw.find(b"\n", pos)
        if nl < 0:
            raise CheckpointError("manifest is not terminated by 'end'")
        line = raw[pos:nl].decode("utf-8")
        pos = nl + 1
        if first:
            if line != MAGIC:
                raise CheckpointError(f"not a checkpoint file: {path}")
            first = False
            continue
        if line == "end":
            break
        kind, _, rest = line.partition(" ")
        if kind == "meta":
            key, _, value = rest.partition(" ")
            ckpt.meta[key] = json.loads(value)
        elif kind == "param":
            name, shape = rest.split(" ")
            shapes.append((name, _parse_shape(shape)))
        elif kind == "stats":
            task, mu, nu, sigma = rest.split(" ")
            if ckpt.stats is None:
                ckpt.stats = {}
            ckpt.stats[task] = (float(mu), float(nu), float(sigma))
        else:
            raise CheckpointError(f"unknown manifest entry {kind!r}")
    for name, shape in shapes:
        n = int(np.prod(shape)) if shape else 1
        nbytes = 8 * n
        if pos + nbytes > len(raw):
            raise CheckpointError(f"truncated payload at parameter {name}")
        ckpt.params[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += nbytes
    if pos != len(raw):
        raise CheckpointError("trailing bytes after payload")
    return ckpt
