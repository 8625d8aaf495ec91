"""Example parsing, feature hashing and sharding.

Text format, one example per line::

    label [importance] | name[:value] name[:value] ...

Feature names are hashed with 64-bit FNV-1a and masked to ``bits`` bits.
A shard is held in memory as CSR arrays (:class:`Dataset`), which is what
the optimizers consume.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
import scipy.sparse as sp

DEFAULT_BITS = 18

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


class ParseError(ValueError):
    def __init__(self, message, lineno=None, path=None):
        where = ""
        if path is not None:
            where += f"{path}:"
        if lineno is not None:
            where += f"{lineno}: "
        elif where:
            where += " "
        super().__init__(where + message)
        self.lineno = lineno
        self.path = path


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK64
    return h


@lru_cache(maxsize=1 << 20)
def _hash_cached(name: bytes, bits: int) -> int:
    return fnv1a64(name) & ((1 << bits) - 1)


def hash_feature(name, bits: int = DEFAULT_BITS) -> int:
    """Index of a feature name in a 2**bits space."""
    if not 1 <= bits <= 31:
        raise ValueError(f"bits must be in [1, 31], got {bits}")
    if isinstance(name, str):
        name = name.encode("utf-8")
    return _hash_cached(bytes(name), bits)


@dataclass
class SparseExample:
    label: float
    features: list  # [(index, value)], indices strictly increasing
    importance: float = 1.0

    @property
    def indices(self) -> np.ndarray:
        return np.array([j for j, _ in self.features], dtype=np.int64)

    @property
    def values(self) -> np.ndarray:
        return np.array([v for _, v in self.features], dtype=np.float64)


def canonical_features(pairs: Iterable) -> list:
    """Sort by index and merge duplicates by summing their values."""
    merged: dict = {}
    for j, v in pairs:
        merged[j] = merged.get(j, 0.0) + v
    return sorted(merged.items())


def _number(text, what, lineno):
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"non-numeric {what} {text!r}", lineno) from None


def parse_example(line: str, bits: int = DEFAULT_BITS, lineno=None) -> SparseExample:
    head, bar, body = line.partition("|")
    if not bar:
        raise ParseError("missing '|' separator", lineno)
    fields = head.split()
    if not 1 <= len(fields) <= 2:
        raise ParseError(f"expected 'label [importance]' before '|', got {head.strip()!r}", lineno)
    label = _number(fields[0], "label", lineno)
    importance = 1.0
    if len(fields) == 2:
        importance = _number(fields[1], "importance", lineno)
        if not importance > 0:
            raise ParseError(f"importance must be positive, got {importance}", lineno)
    pairs = []
    for tok in body.split():
        name, colon, val = tok.rpartition(":")
        if colon:
            if not name:
                raise ParseError(f"empty feature name in {tok!r}", lineno)
            value = _number(val, f"value for feature {name!r}", lineno)
        else:
            name, value = tok, 1.0
        pairs.append((hash_feature(name, bits), value))
    return SparseExample(label, canonical_features(pairs), importance)


def format_indexed(ex: SparseExample) -> str:
    head = _fmt(ex.label) if ex.importance == 1.0 else f"{_fmt(ex.label)} {_fmt(ex.importance)}"
    body = " ".join(f"{j}:{_fmt(v)}" for j, v in ex.features)
    return f"{head} | {body}"


def parse_indexed(line: str, lineno=None) -> SparseExample:
    """Inverse of :func:`format_indexed`: tokens are ``index:value``."""
    head, bar, body = line.partition("|")
    if not bar:
        raise ParseError("missing '|' separator", lineno)
    fields = head.split()
    if not 1 <= len(fields) <= 2:
        raise ParseError("expected 'label [importance]'", lineno)
    label = _number(fields[0], "label", lineno)
    importance = _number(fields[1], "importance", lineno) if len(fields) == 2 else 1.0
    pairs = []
    for tok in body.split():
        j, _, v = tok.partition(":")
        if not j.isdigit():
            raise ParseError(f"bad index token {tok!r}", lineno)
        pairs.append((int(j), _number(v, "value", lineno) if v else 1.0))
    return SparseExample(label, canonical_features(pairs), importance)


def _fmt(x: float) -> str:
    return repr(float(x)) if x != int(x) else str(int(x))


# ---------------------------------------------------------------------------
# in-memory shards


@dataclass
class Dataset:
    """A shard of examples in CSR layout."""

    indptr: np.ndarray
    indices: np.ndarray
    values: np.ndarray
    labels: np.ndarray
    importance: np.ndarray
    dim: int

    def __post_init__(self):
        self.indptr = np.asarray(self.indptr, dtype=np.int64)
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        self.importance = np.asarray(self.importance, dtype=np.float64)
        if self.indptr.size != self.labels.size + 1 or self.importance.size != self.labels.size:
            raise ValueError("indptr/labels/importance sizes disagree")
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= self.dim):
            raise IndexError(f"feature index outside [0, {self.dim})")

    def __len__(self) -> int:
        return self.labels.size

    @property
    def n(self) -> int:
        return self.labels.size

    @property
    def nnz(self) -> int:
        return self.indices.size

    @cached_property
    def matrix(self) -> sp.csr_matrix:
        """The shard as an (n, dim) scipy CSR matrix, built once."""
        return sp.csr_matrix((self.values, self.indices, self.indptr), shape=(self.n, self.dim))

    def row(self, i: int) -> tuple:
        a, b = self.indptr[i], self.indptr[i + 1]
        return self.indices[a:b], self.values[a:b]

    def example(self, i: int) -> SparseExample:
        idx, val = self.row(i)
        return SparseExample(float(self.labels[i]), list(zip(idx.tolist(), val.tolist())),
                             float(self.importance[i]))

    def __iter__(self) -> Iterator[SparseExample]:
        for i in range(self.n):
            yield self.example(i)

    def row_ids(self) -> np.ndarray:
        """Example index of every stored nonzero."""
        return np.repeat(np.arange(self.n), np.diff(self.indptr))

    def subset(self, rows: Sequence[int]) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        starts, stops = self.indptr[rows], self.indptr[rows + 1]
        lens = stops - starts
        take = np.concatenate([np.arange(a, b) for a, b in zip(starts, stops)]) if rows.size else np.zeros(0, np.int64)
        return Dataset(np.concatenate([[0], np.cumsum(lens)]), self.indices[take], self.values[take],
                       self.labels[rows], self.importance[rows], self.dim)

    def slice(self, start: int, stop: int) -> "Dataset":
        stop = min(stop, self.n)
        start = min(start, stop)
        a, b = self.indptr[start], self.indptr[stop]
        return Dataset(self.indptr[start : stop + 1] - a, self.indices[a:b], self.values[a:b],
                       self.labels[start:stop], self.importance[start:stop], self.dim)

    def concat(self, other: "Dataset") -> "Dataset":
        if other.dim != self.dim:
            raise ValueError("dimension mismatch")
        return Dataset(np.concatenate([self.indptr, other.indptr[1:] + self.indptr[-1]]),
                       np.concatenate([self.indices, other.indices]),
                       np.concatenate([self.values, other.values]),
                       np.concatenate([self.labels, other.labels]),
                       np.concatenate([self.importance, other.importance]), self.dim)

    @classmethod
    def from_examples(cls, examples: Iterable[SparseExample], dim: int) -> "Dataset":
        indptr, indices, values, labels, imp = [0], [], [], [], []
        for ex in examples:
            for j, v in ex.features:
                indices.append(j)
                values.append(v)
            indptr.append(len(indices))
            labels.append(ex.label)
            imp.append(ex.importance)
        return cls(np.array(indptr), np.array(indices, dtype=np.int64), np.array(values, dtype=np.float64),
                   np.array(labels, dtype=np.float64), np.array(imp, dtype=np.float64), dim)

    @classmethod
    def empty(cls, dim: int) -> "Dataset":
        return cls(np.zeros(1), np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0), dim)


def load_dataset(path, bits: int = DEFAULT_BITS) -> Dataset:
    """Parse a text file of examples, hashing names into 2**bits slots."""
    path = Path(path)
    if not 1 <= bits <= 31:
        raise ValueError("bits must be in [1, 31]")
    mask = (1 << bits) - 1
    cache: dict = {}  # token -> (index, value)
    indptr, indices, values, labels, imp = [0], [], [], [], []
    try:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    head, bar, body = line.partition("|")
                    fields = head.split()
                    if not bar or not 1 <= len(fields) <= 2:
                        raise ValueError
                    label = float(fields[0])
                    w = float(fields[1]) if len(fields) == 2 else 1.0
                    if not w > 0:
                        raise ValueError
                    row = []
                    for tok in body.split():
                        hit = cache.get(tok)
                        if hit is None:
                            name, colon, val = tok.rpartition(":")
                            if not colon:
                                name, val = tok, "1"
                            if not name:
                                raise ValueError
                            hit = cache[tok] = (fnv1a64(name.encode("utf-8")) & mask, float(val))
                        row.append(hit)
                    if any(row[i][0] >= row[i + 1][0] for i in range(len(row) - 1)):
                        row = canonical_features(row)
                except ValueError:
                    # slow path, for its precise error message
                    ex = _parse_or_raise(line, bits, lineno, path)
                    label, w, row = ex.label, ex.importance, ex.features
                for j, v in row:
                    indices.append(j)
                    values.append(v)
                indptr.append(len(indices))
                labels.append(label)
                imp.append(w)
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror or exc}") from exc
    return Dataset(np.array(indptr), np.array(indices, dtype=np.int64), np.array(values, dtype=np.float64),
                   np.array(labels, dtype=np.float64), np.array(imp, dtype=np.float64), 1 << bits)


def _parse_or_raise(line, bits, lineno, path) -> SparseExample:
    try:
        return parse_example(line, bits, lineno)
    except ParseError as exc:
        raise ParseError(str(exc).split(": ", 1)[-1], lineno, path) from None


# ---------------------------------------------------------------------------
# sharding


@dataclass
class ShardManifest:
    m: int
    counts: list
    digest: str
    paths: list = field(default_factory=list)


def shard_dataset(path, m: int, out_dir=None, policy: str = "round-robin") -> ShardManifest:
    """Split a text file m ways: line i goes to shard i mod m."""
    if m < 1:
        raise ValueError("shard count must be >= 1")
    if policy != "round-robin":
        raise ValueError(f"unknown sharding policy {policy!r}")
    path = Path(path)
    out_dir = Path(out_dir) if out_dir is not None else path.parent
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror or exc}") from exc
    lines = [ln for ln in raw.splitlines(keepends=True) if ln.strip()]
    if lines and not lines[-1].endswith(b"\n"):
        lines[-1] += b"\n"
    out_dir.mkdir(parents=True, exist_ok=True)
    paths, counts = [], []
    for k in range(m):
        p = out_dir / f"{path.stem}.shard{k}-of-{m}{path.suffix}"
        part = lines[k::m]
        try:
            p.write_bytes(b"".join(part))
        except OSError as exc:
            raise OSError(f"cannot write {p}: {exc.strerror or exc}") from exc
        paths.append(p)
        counts.append(len(part))
    return ShardManifest(m, counts, hashlib.sha256(raw).hexdigest(), paths)


def overcomplete_shards(path, m: int, replication: int, out_dir=None) -> ShardManifest:
    """Round-robin shards where node k also holds shards k+1..k+replication-1."""
    if not 1 <= replication <= m:
        raise ValueError(f"replication must be in [1, {m}], got {replication}")
    base = shard_dataset(path, m, Path(out_dir or Path(path).parent) / "base")
    out_dir = Path(out_dir) if out_dir is not None else Path(path).parent
    paths, counts = [], []
    for k in range(m):
        p = out_dir / f"{Path(path).stem}.over{k}-of-{m}x{replication}{Path(path).suffix}"
        chunks = [base.paths[(k + r) % m].read_bytes() for r in range(replication)]
        p.write_bytes(b"".join(chunks))
        paths.append(p)
        counts.append(sum(base.counts[(k + r) % m] for r in range(replication)))
    return ShardManifest(m, counts, base.digest, paths)


# ---------------------------------------------------------------------------
# synthetic data


def make_logistic(n: int, d: int, nnz: int = 10, seed: int = 0, weight_scale: float = 1.0,
                  zipf: float = 1.1, bias: bool = True) -> tuple:
    """Synthetic sparse logistic-regression data.

    Feature frequencies follow a Zipf-like law so that some coordinates are
    seen everywhere and most only rarely, as with hashed click features.
    Returns ``(dataset, true_weights)``.
    """
    rng = np.random.default_rng(seed)
    p = 1.0 / np.arange(1, d + 1) ** zipf
    p /= p.sum()
    k = nnz - 1 if bias else nnz
    draws = np.sort(rng.choice(d, size=(n, k), p=p), axis=1)
    if bias:
        draws = np.concatenate([np.zeros((n, 1), dtype=draws.dtype), draws], axis=1)
    keep = np.ones(draws.shape, dtype=bool)
    keep[:, 1:] = np.diff(draws, axis=1) != 0
    indices = draws[keep]
    indptr = np.concatenate([[0], np.cumsum(keep.sum(axis=1))])
    values = np.ones(indices.size)
    w_true = rng.normal(scale=weight_scale, size=d)
    margins = np.add.reduceat(w_true[indices], indptr[:-1])
    labels = (rng.random(n) < 1.0 / (1.0 + np.exp(-margins))).astype(np.float64)
    return Dataset(indptr, indices, values, labels, np.ones(n), d), w_true


def write_named(ds: Dataset, path) -> None:
    """Write a dataset in the text format with tokens ``f<index>``."""
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(ds.n):
            idx, val = ds.row(i)
            head = _fmt(ds.labels[i])
            if ds.importance[i] != 1.0:
                head += f" {_fmt(ds.importance[i])}"
            toks = " ".join(f"f{j}" if v == 1.0 else f"f{j}:{_fmt(v)}" for j, v in zip(idx.tolist(), val.tolist()))
            fh.write(f"{head} | {toks}\n")


def write_indexed(ds: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in ds:
            fh.write(format_indexed(ex) + "\n")


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()
