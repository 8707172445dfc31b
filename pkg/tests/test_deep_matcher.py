import numpy as np
import pytest

from conftest import unit_rows
from deep_matcher import MatchPrediction, build, evaluate, match, read_predictions, write_predictions
from errors import AlignmentError, EmptyInputError, ShapeError
from knn_core import EmbeddingMatrix
from simgen import SimSpec, gen_embeddings


def embeddings(rows, prefix="r", normalized=False):
    rows = np.asarray(rows, dtype=np.float32)
    return EmbeddingMatrix(rows, tuple(f"{prefix}{i}" for i in range(len(rows))), normalized)


def test_build_sizes_and_alignment():
    reference = embeddings([[1.0, 0.0], [0.0, 2.0], [3.0, 4.0]])
    db = build(reference, ["a", "b", "c"])
    assert len(db) == 3
    norms = np.linalg.norm(db.embeddings.data.astype(np.float64), axis=1)
    np.testing.assert_allclose(norms, 1.0, atol=1e-5)
    with pytest.raises(AlignmentError):
        build(reference, ["a", "b"])
    with pytest.raises(AlignmentError):
        build(reference, ["a", "", "c"])


def test_exact_query_predicts_its_label():
    reference = embeddings([[1.0, 2.0, 0.0], [0.0, 1.0, 5.0], [4.0, 0.0, 1.0]])
    db = build(reference, ["turtle-3", "turtle-7", "turtle-9"])
    [prediction] = match(db, embeddings([[0.0, 1.0, 5.0]], prefix="q"), n_jobs=1)
    assert prediction.predicted_identity == "turtle-7"
    assert prediction.best_reference_id == "r1"
    assert prediction.score == pytest.approx(1.0, abs=1e-6)


def test_equal_scores_pick_lower_index():
    db = build(embeddings([[1.0, 0.0], [0.0, 1.0]]), ["A", "B"])
    [prediction] = match(db, embeddings([[1.0, 1.0]], prefix="q"), n_jobs=1)
    assert prediction.predicted_identity == "A"


def test_dimension_mismatch():
    db = build(embeddings([[1.0, 0.0]]), ["A"])
    with pytest.raises(ShapeError):
        match(db, embeddings([[1.0, 0.0, 0.0]], prefix="q"))


def test_synthetic_clusters_match_perfectly():
    catalog, matrix = gen_embeddings(SimSpec(20, 7, 32, concentration=1000.0, seed=3), n_jobs=1)
    ids = matrix.row_ids
    reference_ids = [i for i in ids if int(i.rsplit("-", 1)[1]) < 5]
    query_ids = [i for i in ids if int(i.rsplit("-", 1)[1]) >= 5]
    db = build(matrix.select(reference_ids), catalog.labels_for(reference_ids))
    predictions = match(db, matrix.select(query_ids), n_jobs=2)
    assert len(predictions) == 40
    assert evaluate(predictions, catalog.labels_for(query_ids)) == 1.0


def test_positive_scaling_does_not_change_predictions(rng):
    reference = unit_rows(rng, 30, 6)
    db = build(embeddings(reference), [f"id{i % 5}" for i in range(30)])
    query = unit_rows(rng, 12, 6)
    scales = rng.uniform(0.1, 50.0, size=(12, 1))
    plain = match(db, embeddings(query, prefix="q"), n_jobs=1)
    scaled = match(db, embeddings(query * scales, prefix="q"), n_jobs=1)
    assert [p.best_reference_id for p in plain] == [p.best_reference_id for p in scaled]


def test_k_vote_majority():
    reference = embeddings([[1.0, 0.0], [0.9, 0.436], [0.8, 0.6]])
    db = build(reference, ["A", "B", "B"])
    query = embeddings([[1.0, 0.0]], prefix="q")
    [nearest] = match(db, query, k_vote=1, n_jobs=1)
    [voted] = match(db, query, k_vote=3, n_jobs=1)
    assert nearest.predicted_identity == "A"
    assert voted.predicted_identity == "B"
    assert voted.best_reference_id == "r1"


def test_evaluate():
    predictions = [MatchPrediction("q0", "A", "r0", 0.9), MatchPrediction("q1", "B", "r1", 0.8),
                   MatchPrediction("q2", "A", "r0", 0.7)]
    assert evaluate(predictions, ["A", "B", "B"]) == pytest.approx(2 / 3, abs=1e-9)
    assert evaluate(predictions, ["A", "B", "A"]) == 1.0
    assert evaluate(predictions, ["C", "C", "C"]) == 0.0
    with pytest.raises(EmptyInputError):
        evaluate([], [])
    with pytest.raises(AlignmentError):
        evaluate(predictions, ["A"])


def test_no_match_counts_as_wrong():
    predictions = [MatchPrediction("q0", None, None, 0.0), MatchPrediction("q1", "B", "r1", 3.0)]
    assert evaluate(predictions, ["A", "B"]) == 0.5


def test_predictions_file(tmp_path):
    predictions = [MatchPrediction("q0", "A", "r0", 0.123456789012), MatchPrediction("q1", None, None, 0.0)]
    path = tmp_path / "pred.csv"
    write_predictions(predictions, path)
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "query_id,predicted_identity,best_reference_id,score"
    assert lines[1] == "q0,A,r0,0.123456789"
    loaded = read_predictions(path)
    assert loaded[1] == predictions[1]
    assert loaded[0].score == pytest.approx(0.123456789)


def test_appending_a_weaker_reference_keeps_predictions(rng):
    reference = unit_rows(rng, 30, 8)
    labels = [f"id{i % 6}" for i in range(30)]
    queries = embeddings(unit_rows(rng, 40, 8), prefix="q")
    before = match(build(embeddings(reference), labels), queries, n_jobs=1)

    extra = unit_rows(rng, 1, 8)
    grown = build(embeddings(np.vstack([reference, extra])), labels + ["newcomer"])
    after = match(grown, queries, n_jobs=1)

    extra_scores = queries.data.astype(np.float64) @ extra[0].astype(np.float64)
    kept = 0
    for old, new, extra_score in zip(before, after, extra_scores):
        if old.score > extra_score + 1e-4:
            assert (new.predicted_identity, new.best_reference_id) == (old.predicted_identity, old.best_reference_id)
            kept += 1
        elif extra_score > old.score + 1e-4:
            assert new.predicted_identity == "newcomer"
    assert kept > 0
