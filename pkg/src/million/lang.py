"""Word embeddings, instruction tokenization and per-task instruction sets."""

from __future__ import annotations

import hashlib
import logging
import os
import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Mapping

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_DIM = 50
_STRIP = re.compile(r"[^\w\-]")


class ParseError(ValueError):
    """Malformed embedding or instruction file."""


def data_path(name: str) -> str:
    """Path of a file shipped in ``million/data``."""
    return str(resources.files("million").joinpath("data", name))


@dataclass
class EmbeddingTable:
    """Token to vector map with a deterministic out-of-vocabulary rule.

    ``oov_policy`` is ``"hash"`` (a seeded pseudo-random vector derived from
    the token text) or ``"zero"``.
    """

    dim: int = DEFAULT_DIM
    vocab: dict[str, np.ndarray] = field(default_factory=dict)
    oov_policy: str = "hash"
    oov_seed: int = 0
    oov_scale: float = 0.6
    duplicates: int = 0

    def __post_init__(self) -> None:
        if self.oov_policy not in ("hash", "zero"):
            raise ValueError(f"unknown oov_policy {self.oov_policy!r}")

    def __len__(self) -> int:
        return len(self.vocab)

    def __contains__(self, token: str) -> bool:
        return token in self.vocab

    def lookup(self, token: str) -> np.ndarray:
        vec = self.vocab.get(token)
        if vec is not None:
            return vec
        if self.oov_policy == "zero":
            return np.zeros(self.dim)
        digest = hashlib.sha256(f"{self.oov_seed}:{token}".encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        return rng.normal(0.0, self.oov_scale, self.dim)


def load_embeddings(path: str | os.PathLike, dim: int = DEFAULT_DIM, oov_policy: str = "hash",
                    oov_seed: int = 0) -> EmbeddingTable:
    """Read a GloVe-style text file: ``token v1 ... v_dim`` per line.

    Duplicate tokens keep the last vector; the number of overwrites is kept
    in ``table.duplicates``.
    """
    table = EmbeddingTable(dim=dim, oov_policy=oov_policy, oov_seed=oov_seed)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split()
            if not parts:
                continue
            token, values = parts[0], parts[1:]
            if len(values) != dim:
                raise ParseError(f"{path}:{lineno}: expected {dim} values for {token!r}, got {len(values)}")
            try:
                vec = np.array([float(v) for v in values], dtype=np.float64)
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            if token in table.vocab:
                table.duplicates += 1
            table.vocab[token] = vec
    if table.duplicates:
        log.warning("%s: %d duplicate tokens (last entry kept)", path, table.duplicates)
    return table


def tokenize(instruction: str) -> list[str]:
    """Lowercase, split on whitespace, drop punctuation other than ``_`` and ``-``."""
    tokens = []
    for raw in instruction.lower().split():
        tok = _STRIP.sub("", raw)
        if tok:
            tokens.append(tok)
    return tokens


def encode_instruction(tokens: list[str], table: EmbeddingTable) -> np.ndarray:
    """Stack one embedding row per token; shape ``(len(tokens), table.dim)``."""
    if not tokens:
        return np.zeros((0, table.dim))
    return np.stack([table.lookup(t) for t in tokens])


@dataclass(frozen=True)
class InstructionSet:
    task_id: str
    templates: tuple[tuple[str, ...], ...]
    encoded: tuple[np.ndarray, ...]


class InstructionBank:
    """All tasks' instruction sets, built against one embedding table."""

    def __init__(self, instructions: Mapping[str, list[str]], table: EmbeddingTable):
        self.table = table
        self.sets: dict[str, InstructionSet] = {}
        for task, texts in instructions.items():
            templates = tuple(tuple(tokenize(t)) for t in texts)
            templates = tuple(t for t in templates if t)
            if not templates:
                raise ValueError(f"task {task!r} has no non-empty instruction")
            encoded = tuple(encode_instruction(list(t), table) for t in templates)
            self.sets[task] = InstructionSet(task, templates, encoded)

    def __contains__(self, task: str) -> bool:
        return task in self.sets

    def __getitem__(self, task: str) -> InstructionSet:
        try:
            return self.sets[task]
        except KeyError:
            raise KeyError(f"no instructions registered for task {task!r}") from None

    @property
    def tasks(self) -> list[str]:
        return list(self.sets)

    def max_length(self) -> int:
        return max(len(t) for s in self.sets.values() for t in s.templates)

    def sample(self, task: str, rng: np.random.Generator) -> tuple[int, np.ndarray]:
        """Uniformly pick one of the task's templates (with replacement across calls)."""
        iset = self[task]
        idx = int(rng.integers(len(iset.templates)))
        return idx, iset.encoded[idx]


def sample_instruction(bank: InstructionBank, task_id: str, rng: np.random.Generator) -> np.ndarray:
    return bank.sample(task_id, rng)[1]


def load_instruction_config(path: str | os.PathLike) -> dict[str, list[str]]:
    """Parse ``[task]`` blocks of instruction lines; ``#`` starts a comment line."""
    out: dict[str, list[str]] = {}
    current = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            if text.startswith("[") and text.endswith("]"):
                current = text[1:-1].strip()
                if not current:
                    raise ParseError(f"{path}:{lineno}: empty task header")
                out.setdefault(current, [])
                continue
            if current is None:
                raise ParseError(f"{path}:{lineno}: instruction before any [task] header")
            out[current].append(text)
    for task, texts in out.items():
        if not texts:
            raise ParseError(f"{path}: task {task!r} has no instructions")
    return out


def default_bank(embedding_path: str | None = None, instruction_path: str | None = None,
                 dim: int = DEFAULT_DIM) -> InstructionBank:
    table = load_embeddings(embedding_path or data_path("glove_desk.50d.txt"), dim=dim)
    config = load_instruction_config(instruction_path or data_path("instructions.txt"))
    return InstructionBank(config, table)
