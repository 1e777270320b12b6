"""Image embeddings: binary storage, cosine similarity and image mining."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import DimensionMismatch, EmptyInput, FormatError, ZeroVector

EMB_MAGIC = b"EMB1"
GRD_MAGIC = b"GRD1"


@dataclass(frozen=True)
class ImageEmbedding:
    image_id: str
    vector: np.ndarray


@dataclass(frozen=True)
class EmbeddingGrid:
    image_id: str
    grid: np.ndarray  # (H, W, d_pix)

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=np.float64)
        if g.ndim != 3 or g.shape[0] < 1 or g.shape[1] < 1:
            raise FormatError(f"{self.image_id}: grid must be (H, W, d) with H, W >= 1")
        object.__setattr__(self, "grid", g)


@dataclass(frozen=True)
class ImageRanking:
    class_label: str
    entries: tuple[tuple[str, float], ...]

    @property
    def image_ids(self) -> list[str]:
        return [e[0] for e in self.entries]


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"vector shapes differ: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ZeroVector("cosine similarity of a zero vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _unit_matrix(m: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ZeroVector(f"{what} contains a zero vector")
    return m / norms


def rank_by_max_similarity(
    supports: np.ndarray, pool_ids: Sequence[str], pool: np.ndarray
) -> list[tuple[str, float]]:
    """Score each pool row by its best cosine to any support row, sorted."""
    if supports.shape[1] != pool.shape[1]:
        raise DimensionMismatch(f"support dim {supports.shape[1]} vs pool dim {pool.shape[1]}")
    sims = np.clip(_unit_matrix(pool, "pool") @ _unit_matrix(supports, "support").T, -1.0, 1.0)
    best = sims.max(axis=1)
    entries = [(pid, float(s)) for pid, s in zip(pool_ids, best)]
    entries.sort(key=lambda e: (-e[1], e[0]))
    return entries


def mine_images(
    support_images: Mapping[str, Sequence[ImageEmbedding]],
    pool: Sequence[ImageEmbedding],
    n: int,
) -> list[ImageRanking]:
    """Per class, rank pool images by max cosine similarity over its supports.

    Rankings are truncated to ``n`` and returned in sorted class-label order.
    Ties are broken by ``image_id`` so the result does not depend on pool order.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not pool:
        raise EmptyInput("image pool is empty")
    support_ids = {e.image_id for embs in support_images.values() for e in embs}
    overlap = support_ids.intersection(e.image_id for e in pool)
    if overlap:
        raise ValueError(f"pool overlaps support images: {sorted(overlap)[:5]}")
    pool_ids = [e.image_id for e in pool]
    pool_mat = np.stack([np.asarray(e.vector, dtype=np.float64) for e in pool])
    out = []
    for label in sorted(support_images):
        embs = support_images[label]
        if not embs:
            raise EmptyInput(f"class {label!r} has no support images")
        sup = np.stack([np.asarray(e.vector, dtype=np.float64) for e in embs])
        entries = rank_by_max_similarity(sup, pool_ids, pool_mat)[:n]
        out.append(ImageRanking(label, tuple(entries)))
    return out


# ---------------------------------------------------------------------------
# binary formats
# ---------------------------------------------------------------------------


def write_embeddings(path, ids: Sequence[str], matrix: np.ndarray) -> None:
    """Write an ``EMB1`` matrix plus a ``.ids`` sidecar next to it."""
    mat = np.ascontiguousarray(matrix, dtype="<f4")
    if mat.ndim != 2 or mat.shape[0] != len(ids):
        raise FormatError("matrix rows must match ids")
    with open(path, "wb") as fh:
        fh.write(EMB_MAGIC)
        fh.write(struct.pack("<II", mat.shape[0], mat.shape[1]))
        fh.write(mat.tobytes())
    _write_ids(path, ids)


def read_embeddings(path) -> tuple[list[str], np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != EMB_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    count, dim = struct.unpack_from("<II", data, 4)
    body = data[12:]
    if len(body) != count * dim * 4:
        raise FormatError(f"{path}: expected {count}x{dim} float32 values")
    mat = np.frombuffer(body, dtype="<f4").reshape(count, dim).astype(np.float64)
    ids = _read_ids(path)
    if len(ids) != count:
        raise FormatError(f"{path}: sidecar has {len(ids)} ids for {count} rows")
    return ids, mat


def encode_grid(grid: np.ndarray) -> bytes:
    g = np.ascontiguousarray(grid, dtype="<f4")
    if g.ndim != 3:
        raise FormatError("grid must be (H, W, d)")
    h, w, d = g.shape
    return GRD_MAGIC + struct.pack("<III", h, w, d) + g.tobytes()


def decode_grid(data: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one ``GRD1`` record; returns the grid and the next offset."""
    if data[offset:offset + 4] != GRD_MAGIC:
        raise FormatError(f"bad grid magic at byte {offset}")
    h, w, d = struct.unpack_from("<III", data, offset + 4)
    start = offset + 16
    end = start + h * w * d * 4
    if end > len(data):
        raise FormatError("truncated grid record")
    g = np.frombuffer(data[start:end], dtype="<f4").reshape(h, w, d).astype(np.float64)
    return g, end


def write_grids(path, ids: Sequence[str], grids: Sequence[np.ndarray]) -> None:
    """Concatenate ``GRD1`` records into one file with a ``.ids`` sidecar."""
    if len(ids) != len(grids):
        raise FormatError("ids and grids differ in length")
    with open(path, "wb") as fh:
        for g in grids:
            fh.write(encode_grid(g))
    _write_ids(path, ids)


def read_grids(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    ids = _read_ids(path)
    grids = {}
    off = 0
    for gid in ids:
        grids[gid], off = decode_grid(data, off)
    if off != len(data):
        raise FormatError(f"{path}: {len(data) - off} trailing bytes")
    return grids


def _ids_path(path):
    return str(path) + ".ids"


def _write_ids(path, ids):
    with open(_ids_path(path), "w", encoding="utf-8") as fh:
        for i in ids:
            if "\n" in i:
                raise FormatError(f"id contains a newline: {i!r}")
            fh.write(i + "\n")


def _read_ids(path) -> list[str]:
    with open(_ids_path(path), encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh if line.rstrip("\n")]
