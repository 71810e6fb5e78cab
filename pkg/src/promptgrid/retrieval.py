"""Exact cosine top-k over an in-memory embedding store."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np


class RetrievalError(ValueError):
    pass


class ZeroVectorError(RetrievalError):
    pass


class DimensionMismatch(RetrievalError):
    pass


class InsufficientEntries(RetrievalError):
    pass


def cosine(u: Sequence[float], v: Sequence[float]) -> float:
    if len(u) != len(v):
        raise DimensionMismatch(f"dims differ: {len(u)} vs {len(v)}")
    nu = math.sqrt(math.fsum(x * x for x in u))
    nv = math.sqrt(math.fsum(x * x for x in v))
    if nu == 0.0 or nv == 0.0:
        raise ZeroVectorError("cosine is undefined for a zero vector")
    dot = math.fsum(x * y for x, y in zip(u, v))
    return max(-1.0, min(1.0, dot / (nu * nv)))


def _as_ints(vec: np.ndarray) -> list[int]:
    # floats are dyadic rationals: lift to integers over a shared power-of-two denominator
    ratios = [float(x).as_integer_ratio() for x in vec]
    denom = max(d for _, d in ratios)
    return [n * (denom // d) for n, d in ratios]


def _exact_key(u: np.ndarray, v: np.ndarray) -> Fraction:
    # sign(dot) * dot^2 / (|u|^2 |v|^2): monotone in cosine, exact over float inputs
    iu, iv = _as_ints(u), _as_ints(v)
    dot = sum(a * b for a, b in zip(iu, iv))
    sq = Fraction(dot * dot, sum(a * a for a in iu) * sum(b * b for b in iv))
    return sq if dot >= 0 else -sq


# candidates within this band of the k-th float score are re-ranked exactly
_NEAR_TIE = 1e-9


@dataclass(frozen=True, eq=False)
class EmbeddingStore:
    dim: int
    ids: tuple[str, ...]
    matrix: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        if self.dim <= 0:
            raise RetrievalError("dim must be positive")
        if self.matrix.shape != (len(self.ids), self.dim):
            raise DimensionMismatch(
                f"matrix shape {self.matrix.shape} != ({len(self.ids)}, {self.dim})"
            )
        if len(set(self.ids)) != len(self.ids):
            raise RetrievalError("duplicate ids in embedding store")
        self.matrix.setflags(write=False)

    @classmethod
    def from_vectors(cls, vectors: Mapping[str, Sequence[float]]) -> "EmbeddingStore":
        ids = tuple(vectors)
        if not ids:
            raise RetrievalError("empty embedding store")
        dim = len(vectors[ids[0]])
        for i in ids:
            if len(vectors[i]) != dim:
                raise DimensionMismatch(f"vector {i!r} has dim {len(vectors[i])}, expected {dim}")
        matrix = np.array([vectors[i] for i in ids], dtype=np.float64).reshape(len(ids), dim)
        return cls(dim, ids, matrix)

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, example_id: object) -> bool:
        return example_id in self._index

    @property
    def _index(self) -> dict[str, int]:
        cached = self.__dict__.get("_index_cache")
        if cached is None:
            cached = {i: n for n, i in enumerate(self.ids)}
            object.__setattr__(self, "_index_cache", cached)
        return cached

    def vector(self, example_id: str) -> np.ndarray:
        return self.matrix[self._index[example_id]]

    def subset(self, ids: Iterable[str]) -> "EmbeddingStore":
        ids = tuple(ids)
        rows = [self._index[i] for i in ids]
        return EmbeddingStore(self.dim, ids, self.matrix[rows].copy())

    def top_k(
        self, query: Sequence[float], k: int, exclude_id: str | None = None
    ) -> list[tuple[str, float]]:
        """The ``k`` most cosine-similar ids, best first, ties by ascending id."""
        q = np.asarray(query, dtype=np.float64)
        if q.shape != (self.dim,):
            raise DimensionMismatch(f"query dim {q.shape} != ({self.dim},)")
        qn = math.sqrt(float((q * q).sum()))
        if qn == 0.0:
            raise ZeroVectorError("query vector is zero")

        keep = np.ones(len(self.ids), dtype=bool)
        if exclude_id is not None and exclude_id in self._index:
            keep[self._index[exclude_id]] = False
        available = int(keep.sum())
        if k > available:
            raise InsufficientEntries(f"k={k} exceeds {available} eligible entries")
        if k <= 0:
            return []

        norms = np.sqrt((self.matrix * self.matrix).sum(axis=1))
        if np.any(norms[keep] == 0.0):
            raise ZeroVectorError("store holds a zero vector")
        scores = np.full(len(self.ids), -np.inf)
        scores[keep] = (self.matrix[keep] * q).sum(axis=1) / (norms[keep] * qn)
        np.clip(scores, -1.0, 1.0, out=scores)

        kth = np.partition(scores, len(scores) - k)[len(scores) - k]
        cand = np.flatnonzero(keep & (scores >= kth - _NEAR_TIE))
        cand = sorted(cand, key=lambda r: (-scores[r], self.ids[r]))
        ranked: list[int] = []
        group = [cand[0]]
        for r in cand[1:]:
            if scores[group[-1]] - scores[r] <= _NEAR_TIE:
                group.append(r)
            else:
                ranked += self._exact_order(group, q)
                group = [r]
        ranked += self._exact_order(group, q)
        return [(self.ids[r], float(scores[r])) for r in ranked[:k]]

    def _exact_order(self, rows: list[int], q: np.ndarray) -> list[int]:
        # float scores this close may be misordered or falsely tied; settle them exactly
        if len(rows) == 1:
            return rows
        return sorted(rows, key=lambda r: (-_exact_key(self.matrix[r], q), self.ids[r]))

def top_k(
    store: EmbeddingStore, query: Sequence[float], k: int, exclude_id: str | None = None
) -> list[tuple[str, float]]:
    return store.top_k(query, k, exclude_id)


def load_embeddings(path: str | Path) -> EmbeddingStore:
    """Read ``{"id", "vector"}`` JSON Lines; the first record fixes the dimension."""
    vectors: dict[str, list[float]] = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            row = json.loads(line)
            vec = [float(x) for x in row["vector"]]
            if dim is None:
                dim = len(vec)
            elif len(vec) != dim:
                raise DimensionMismatch(f"{path}:{lineno}: dim {len(vec)} != {dim}")
            if row["id"] in vectors:
                raise RetrievalError(f"{path}:{lineno}: duplicate id {row['id']!r}")
            vectors[row["id"]] = vec
    return EmbeddingStore.from_vectors(vectors)


def save_embeddings(path: str | Path, store: EmbeddingStore) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, row in zip(store.ids, store.matrix):
            fh.write(json.dumps({"id": i, "vector": row.tolist()}) + "\n")
