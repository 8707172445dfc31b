import math

import numpy as np
import pytest

from deep_matcher import build, evaluate, match
from errors import AlignmentError, PreconditionError, TrainingDivergedError
from knn_core import EmbeddingMatrix, normalize
from metric_losses import ArcFaceConfig, TripletConfig
from simgen import SimSpec, gen_embeddings
from splitting import SplitMode, split
from trainer import TrainerConfig, cosine_lr, save_projection, train_head, write_trace


def closed_split_data(seed, n_identities=10, images=30, dim=32, concentration=100.0):
    spec = SimSpec(n_identities, images, dim, concentration=concentration, seed=seed)
    catalog, features = gen_embeddings(spec, n_jobs=1)
    manifest = split(catalog, SplitMode.closed(), 0.8, seed=seed)
    train_ids, test_ids = sorted(manifest.train_ids), sorted(manifest.test_ids)
    return (features.select(train_ids), catalog.labels_for(train_ids),
            features.select(test_ids), catalog.labels_for(test_ids))


def test_cosine_schedule():
    assert cosine_lr(0.01, 0, 100) == pytest.approx(0.01)
    assert cosine_lr(0.01, 50, 100) == pytest.approx(0.005)
    assert cosine_lr(0.01, 100, 100) == pytest.approx(0.0)


@pytest.mark.parametrize("seed", range(10))
def test_arcface_head_identifies_queries(seed):
    reference, reference_labels, query, query_labels = closed_split_data(seed)
    head = train_head(reference, reference_labels, ArcFaceConfig(margin=0.5, scale=64.0),
                      TrainerConfig(lr=0.001, epochs=50, seed=seed))
    assert len(head.trace) == 50
    assert head.trace[-1].loss < head.trace[0].loss
    db = build(head.project(reference), reference_labels)
    accuracy = evaluate(match(db, head.project(query), n_jobs=1), query_labels)
    assert accuracy >= 0.95


def nuisance_dominated_data(seed, n_identities=4, images=60, nuisance_dim=8, nuisance_scale=1.5):
    """Identity lives in one-hot means; wide class-independent noise swamps raw cosine similarity."""
    rng = np.random.default_rng(seed)
    rows, labels = [], []
    for k in range(n_identities):
        signal = np.zeros((images, n_identities))
        signal[:, k] = 1.0
        signal += 0.05 * rng.standard_normal(signal.shape)
        nuisance = nuisance_scale * rng.standard_normal((images, nuisance_dim))
        rows.append(np.hstack([signal, nuisance]))
        labels += [f"id{k}"] * images
    data = np.vstack(rows)
    is_query = np.arange(len(labels)) % 5 == 0

    def part(mask):
        ids = [f"img{i}" for i in np.flatnonzero(mask)]
        return normalize(EmbeddingMatrix(data[mask], ids)), [lab for lab, m in zip(labels, mask) if m]

    return part(~is_query) + part(is_query)


@pytest.mark.parametrize("seed", [0, 1])
def test_trained_head_recovers_identity_from_nuisance(seed):
    reference, reference_labels, query, query_labels = nuisance_dominated_data(seed)
    raw = evaluate(match(build(reference, reference_labels), query, n_jobs=1), query_labels)
    head = train_head(reference, reference_labels, ArcFaceConfig(margin=0.5, scale=64.0),
                      TrainerConfig(lr=0.001, epochs=100, batch_size=32, seed=seed))
    assert head.trace[-1].loss < head.trace[0].loss
    db = build(head.project(reference), reference_labels)
    trained = evaluate(match(db, head.project(query), n_jobs=1), query_labels)
    assert raw < 0.6
    assert trained >= raw + 0.3


def test_trace_follows_schedule():
    reference, labels, _, _ = closed_split_data(0, n_identities=4, images=10, dim=8)
    head = train_head(reference, labels, ArcFaceConfig(), TrainerConfig(lr=0.01, epochs=10))
    assert [r.epoch for r in head.trace] == list(range(10))
    for r in head.trace:
        assert r.lr == pytest.approx(cosine_lr(0.01, r.epoch, 10))
        assert math.isfinite(r.loss)
    assert head.class_weights.shape == (4, 8)


def test_triplet_head_trains():
    reference, labels, _, _ = closed_split_data(1, n_identities=5, images=12, dim=16, concentration=1.0)
    head = train_head(reference, labels, TripletConfig(margin=0.2, mining="all"),
                      TrainerConfig(lr=0.01, epochs=20, batch_size=32, embedding_dim=8, seed=1))
    assert head.projection.shape == (16, 8)
    assert head.class_weights is None
    assert head.trace[0].n_active > 0
    assert head.project(reference).dim == 8


def test_training_is_deterministic():
    reference, labels, _, _ = closed_split_data(2, n_identities=4, images=10, dim=8)
    config = TrainerConfig(lr=0.01, epochs=5, seed=3)
    first = train_head(reference, labels, ArcFaceConfig(), config)
    second = train_head(reference, labels, ArcFaceConfig(), config)
    np.testing.assert_array_equal(first.projection, second.projection)
    assert first.trace == second.trace


def test_huge_learning_rate_diverges():
    reference, labels, _, _ = closed_split_data(4, n_identities=4, images=10, dim=8)
    with pytest.raises(TrainingDivergedError) as exc:
        train_head(reference, labels, ArcFaceConfig(), TrainerConfig(lr=1e6, epochs=200))
    assert 0 <= exc.value.epoch < 200
    # the epoch that diverged is traced only when its completed loss triggered the check
    assert len(exc.value.trace) in (exc.value.epoch, exc.value.epoch + 1)


def test_preconditions():
    reference, labels, _, _ = closed_split_data(5, n_identities=3, images=5, dim=4)
    with pytest.raises(AlignmentError):
        train_head(reference, labels[:-1], ArcFaceConfig())
    with pytest.raises(PreconditionError):
        train_head(reference, ["same"] * len(labels), ArcFaceConfig())
    with pytest.raises(PreconditionError):
        train_head(reference, labels, ArcFaceConfig(), TrainerConfig(lr=0.0))


def test_trace_and_projection_files(tmp_path):
    reference, labels, _, _ = closed_split_data(6, n_identities=3, images=6, dim=4)
    head = train_head(reference, labels, ArcFaceConfig(), TrainerConfig(epochs=3))
    write_trace(head.trace, tmp_path / "trace.csv")
    lines = (tmp_path / "trace.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "epoch,lr,loss,n_active"
    assert len(lines) == 4
    save_projection(head, tmp_path / "head.npy")
    np.testing.assert_array_equal(np.load(tmp_path / "head.npy"), head.projection)
