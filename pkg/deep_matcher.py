import csv
from collections import Counter
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

from sklearn.metrics import accuracy_score

from catalog import Catalog
from config import logger
from errors import AlignmentError, EmptyInputError, FormatError, ShapeError
from knn_core import EmbeddingMatrix, normalize, topk
from storage import atomic_write

PREDICTION_COLUMNS = ("query_id", "predicted_identity", "best_reference_id", "score")


@dataclass(frozen=True)
class MatchPrediction:
    query_id: str
    predicted_identity: Optional[str]
    best_reference_id: Optional[str]
    score: float

    @property
    def is_match(self) -> bool:
        return self.predicted_identity is not None


@dataclass(frozen=True, eq=False)
class IdentityDatabase:
    """Normalized reference embeddings with one identity label per row."""
    embeddings: EmbeddingMatrix
    identities: Tuple[str, ...]

    def __len__(self) -> int:
        return self.embeddings.n_rows


def build(reference: EmbeddingMatrix, labels: Sequence[str]) -> IdentityDatabase:
    labels = tuple(labels)
    if len(labels) != reference.n_rows:
        raise AlignmentError(f"{len(labels)} labels for {reference.n_rows} reference rows")
    empty = [i for i, label in enumerate(labels) if not label]
    if empty:
        raise AlignmentError(f"Empty identity label on reference row {empty[0]}")
    embeddings = reference if reference.normalized else normalize(reference)
    logger.info(f"[Match] Identity database: {len(labels)} images, {len(set(labels))} identities")
    return IdentityDatabase(embeddings, labels)


def database_from_catalog(reference: EmbeddingMatrix, catalog: Catalog) -> IdentityDatabase:
    return build(reference, catalog.labels_for(reference.row_ids))


def match(db: IdentityDatabase, query: EmbeddingMatrix, k_vote: int = 1,
          n_jobs: Optional[int] = None) -> List[MatchPrediction]:
    """Predict an identity for every query row by cosine similarity.

    k_vote=1 is plain 1-NN. With k_vote > 1 the majority label among the top k wins;
    a tie goes to the label ranked highest.
    """
    if query.dim != db.embeddings.dim:
        raise ShapeError(f"Dimension mismatch: query D={query.dim}, database D={db.embeddings.dim}")
    k = min(max(1, k_vote), len(db))
    query = query if query.normalized else normalize(query)
    result = topk(query, db.embeddings, k, n_jobs=n_jobs)

    predictions = []
    for row, query_id in enumerate(result.query_ids):
        neighbors = result.row(row)
        if k == 1:
            best_idx, best_score = neighbors[0]
        else:
            votes = Counter(db.identities[j] for j, _ in neighbors)
            top = max(votes.values())
            # neighbors are best-first, so the first hit is the highest ranked winner
            best_idx, best_score = next((j, s) for j, s in neighbors if votes[db.identities[j]] == top)
        predictions.append(MatchPrediction(
            query_id=query_id,
            predicted_identity=db.identities[best_idx],
            best_reference_id=db.embeddings.row_ids[best_idx],
            score=best_score,
        ))
    logger.info(f"[Match] Matched {len(predictions)} queries against {len(db)} references (k_vote={k})")
    return predictions


def evaluate(predictions: Sequence[MatchPrediction], ground_truth: Sequence[str]) -> float:
    """Fraction of predictions whose identity equals the true identity."""
    if not predictions:
        raise EmptyInputError("No predictions to evaluate")
    if len(predictions) != len(ground_truth):
        raise AlignmentError(f"{len(predictions)} predictions for {len(ground_truth)} ground-truth labels")
    # no-match predictions never equal a real label
    predicted = ["" if p.predicted_identity is None else p.predicted_identity for p in predictions]
    return float(accuracy_score(list(ground_truth), predicted))


def write_predictions(predictions: Sequence[MatchPrediction], path, delimiter: str = ",") -> None:
    with atomic_write(path, "w") as fh:
        writer = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        writer.writerow(PREDICTION_COLUMNS)
        for p in predictions:
            writer.writerow([p.query_id, p.predicted_identity or "", p.best_reference_id or "",
                             f"{p.score:.9g}"])
    logger.info(f"[Match] Wrote {len(predictions)} predictions to '{path}'")


def read_predictions(path, delimiter: str = ",") -> List[MatchPrediction]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh, delimiter=delimiter)
        if tuple(reader.fieldnames or ()) != PREDICTION_COLUMNS:
            raise FormatError(f"Unexpected prediction header {reader.fieldnames}")
        return [MatchPrediction(row["query_id"], row["predicted_identity"] or None,
                                row["best_reference_id"] or None, float(row["score"]))
                for row in reader]
