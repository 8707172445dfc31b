import time
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from threadpoolctl import threadpool_limits

from config import DEFAULT_THREADS, NORM_TOLERANCE, QUERY_TILE, REFERENCE_TILE, logger
from errors import AlignmentError, DegenerateRowError, PreconditionError, ShapeError, UnknownImageError
from storage import (
    atomic_write,
    expect_eof,
    read_floats,
    read_header,
    read_string,
    write_floats,
    write_header,
    write_string,
)

EMBEDDING_MAGIC = b"WDEM"


@dataclass(frozen=True, eq=False)
class EmbeddingMatrix:
    """N x D float32 embeddings with one image id per row."""
    data: np.ndarray
    row_ids: Tuple[str, ...]
    normalized: bool = False

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32, order="C", copy=True)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise ShapeError(f"Embeddings must be a non-empty 2-D matrix, got shape {data.shape}")
        row_ids = tuple(str(r) for r in self.row_ids)
        if len(row_ids) != data.shape[0]:
            raise AlignmentError(f"{len(row_ids)} row ids for {data.shape[0]} rows")
        if not np.isfinite(data).all():
            bad = int(np.flatnonzero(~np.isfinite(data).all(axis=1))[0])
            raise PreconditionError(f"NaN/Inf entries in row {bad} ('{row_ids[bad]}')")
        if self.normalized:
            norms = np.linalg.norm(data.astype(np.float64), axis=1)
            off = np.flatnonzero(np.abs(norms - 1.0) > NORM_TOLERANCE)
            if off.size:
                raise PreconditionError(f"Row {int(off[0])} has norm {norms[off[0]]:.6f}, not unit")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "row_ids", row_ids)

    @property
    def n_rows(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def take(self, rows: Sequence[int]) -> "EmbeddingMatrix":
        rows = list(rows)
        return EmbeddingMatrix(self.data[rows], tuple(self.row_ids[i] for i in rows), self.normalized)

    def select(self, image_ids: Sequence[str]) -> "EmbeddingMatrix":
        """Rows for the given image ids, in the order given."""
        position = {r: i for i, r in enumerate(self.row_ids)}
        missing = [i for i in image_ids if i not in position]
        if missing:
            raise UnknownImageError(missing)
        return self.take([position[i] for i in image_ids])


@dataclass(frozen=True, eq=False)
class TopKResult:
    """Per query row: k reference indices and cosine scores, best first."""
    indices: np.ndarray
    scores: np.ndarray
    query_ids: Tuple[str, ...]
    reference_ids: Tuple[str, ...]

    @property
    def k(self) -> int:
        return self.indices.shape[1]

    def row(self, i: int) -> List[Tuple[int, float]]:
        return [(int(j), float(s)) for j, s in zip(self.indices[i], self.scores[i])]


def normalize(m: EmbeddingMatrix) -> EmbeddingMatrix:
    norms = np.linalg.norm(m.data.astype(np.float64), axis=1)
    bad = np.flatnonzero((norms == 0) | ~np.isfinite(norms))
    if bad.size:
        row = int(bad[0])
        raise DegenerateRowError(row, m.row_ids[row])
    data = (m.data.astype(np.float64) / norms[:, None]).astype(np.float32)
    return EmbeddingMatrix(data, m.row_ids, normalized=True)


def _tile_topk(scores: np.ndarray, k: int) -> Tuple[np.ndarray, np.ndarray]:
    """Best k columns per row, score descending then column ascending."""
    n_rows, n_cols = scores.shape
    if k >= n_cols:
        order = np.argsort(-scores, axis=1, kind="stable")
        return np.take_along_axis(scores, order, axis=1), order

    kth = np.partition(scores, n_cols - k, axis=1)[:, n_cols - k]
    mask = scores >= kth[:, None]
    counts = mask.sum(axis=1)
    cols = np.empty((n_rows, k), dtype=np.int64)

    exact = counts == k
    if exact.any():
        _, c = np.nonzero(mask[exact])
        cols[exact] = c.reshape(-1, k)
    # Ties at the k-th score: keep the lowest columns
    for row in np.flatnonzero(~exact):
        candidates = np.flatnonzero(mask[row])
        order = np.argsort(-scores[row, candidates], kind="stable")
        cols[row] = candidates[order[:k]]

    vals = np.take_along_axis(scores, cols, axis=1)
    order = np.argsort(-vals, axis=1, kind="stable")
    return np.take_along_axis(vals, order, axis=1), np.take_along_axis(cols, order, axis=1)


def _search_tile(query64: np.ndarray, reference64: np.ndarray, k: int, reference_tile: int):
    n_rows = query64.shape[0]
    best_scores = np.empty((n_rows, 0), dtype=np.float32)
    best_idx = np.empty((n_rows, 0), dtype=np.int64)
    for start in range(0, reference64.shape[0], reference_tile):
        block = reference64[start:start + reference_tile]
        # float64 accumulation then float32 rounding keeps ranks independent of tiling
        sims = (query64 @ block.T).astype(np.float32)
        cand_scores, cand_idx = _tile_topk(sims, min(k, block.shape[0]))
        # Earlier blocks hold lower indices, so a stable sort keeps the index tie rule
        merged_scores = np.hstack([best_scores, cand_scores])
        merged_idx = np.hstack([best_idx, cand_idx + start])
        order = np.argsort(-merged_scores, axis=1, kind="stable")[:, :k]
        best_scores = np.take_along_axis(merged_scores, order, axis=1)
        best_idx = np.take_along_axis(merged_idx, order, axis=1)
    return best_idx, best_scores


def topk(query: EmbeddingMatrix, reference: EmbeddingMatrix, k: int,
         n_jobs: Optional[int] = None, query_tile: int = QUERY_TILE,
         reference_tile: int = REFERENCE_TILE) -> TopKResult:
    """Exact top-k cosine similarity search of every query row against the reference rows."""
    if query.dim != reference.dim:
        raise ShapeError(f"Dimension mismatch: query D={query.dim}, reference D={reference.dim}")
    if not (query.normalized and reference.normalized):
        raise PreconditionError("topk expects normalized query and reference embeddings")
    if not 1 <= k <= reference.n_rows:
        raise PreconditionError(f"k must be in [1, {reference.n_rows}], got {k}")
    n_jobs = n_jobs or DEFAULT_THREADS
    if n_jobs < 1 or query_tile < 1 or reference_tile < 1:
        raise PreconditionError("Thread count and tile sizes must be >= 1")

    started = time.perf_counter()
    reference64 = reference.data.astype(np.float64)
    bounds = [(s, min(s + query_tile, query.n_rows)) for s in range(0, query.n_rows, query_tile)]

    with threadpool_limits(limits=1, user_api="blas"):
        parts = Parallel(n_jobs=min(n_jobs, len(bounds)), backend="threading")(
            delayed(_search_tile)(query.data[a:b].astype(np.float64), reference64, k, reference_tile)
            for a, b in bounds
        )

    indices = np.vstack([p[0] for p in parts])
    scores = np.vstack([p[1] for p in parts])
    elapsed = time.perf_counter() - started
    logger.info(f"[KNN] top-{k}: {query.n_rows} queries x {reference.n_rows} references x {query.dim}d "
                f"on {n_jobs} thread(s) in {elapsed:.3f}s "
                f"({query.n_rows / max(elapsed, 1e-9):.0f} queries/s)")
    return TopKResult(indices, scores, query.row_ids, reference.row_ids)


def write_embeddings(path, matrix: EmbeddingMatrix) -> None:
    """WDEM file: header, N*D float32 row-major, then the N row ids."""
    with atomic_write(path, "wb") as fh:
        write_header(fh, EMBEDDING_MAGIC, matrix.dim, matrix.n_rows)
        write_floats(fh, matrix.data)
        for row_id in matrix.row_ids:
            write_string(fh, row_id)
    logger.info(f"[Storage] Wrote {matrix.n_rows}x{matrix.dim} embeddings to '{path}'")


def read_embeddings(path) -> EmbeddingMatrix:
    with open(path, "rb") as fh:
        dim, count = read_header(fh, EMBEDDING_MAGIC)
        data = read_floats(fh, count * dim, "embedding data").reshape(count, dim)
        row_ids = tuple(read_string(fh, "row_id") for _ in range(count))
        expect_eof(fh, f"{count} row ids in '{path}'")

    norms = np.linalg.norm(data.astype(np.float64), axis=1)
    normalized = bool(np.all(np.abs(norms - 1.0) <= NORM_TOLERANCE))
    logger.info(f"[Storage] Read {count}x{dim} embeddings from '{path}' (normalized={normalized})")
    return EmbeddingMatrix(data, row_ids, normalized=normalized)
