import numpy as np
import pytest

import local_matcher
from errors import CalibrationError, ShapeError
from local_matcher import (
    CorrespondenceTally,
    DescriptorSet,
    RatioTestConfig,
    calibrate_threshold,
    identify,
    pair_correspondences,
    predict_identity,
    read_descriptors,
    write_descriptors,
)
from simgen import SimSpec, gen_descriptors


def brute_force_counts(query, references, threshold):
    counts = {}
    for ref in references:
        if len(query) == 0 or len(ref) < 2:
            counts[ref.image_id] = 0
            continue
        accepted = 0
        for q in query.descriptors.astype(np.float64):
            dists = sorted(np.sqrt(((ref.descriptors.astype(np.float64) - q) ** 2).sum(axis=1)))
            accepted += dists[0] < threshold * dists[1]
        counts[ref.image_id] = accepted
    return counts


def random_sets(rng, n, dim, max_k=12, prefix="img"):
    return [DescriptorSet(f"{prefix}{i}", rng.standard_normal((int(rng.integers(0, max_k)), dim)))
            for i in range(n)]


def test_matches_brute_force_oracle(rng):
    for _ in range(200):
        dim = int(rng.integers(2, 10))
        query = random_sets(rng, 1, dim, prefix="q")[0]
        references = random_sets(rng, int(rng.integers(1, 6)), dim)
        threshold = float(rng.uniform(0.3, 1.0))
        tally = pair_correspondences(query, references, RatioTestConfig(threshold=threshold))
        assert tally.counts == brute_force_counts(query, references, threshold)
        assert tally.n_query_descriptors == len(query)


def test_counts_are_monotone_in_threshold(rng):
    query = DescriptorSet("q", rng.standard_normal((30, 8)))
    references = random_sets(rng, 4, 8, max_k=25)
    previous = None
    for threshold in (0.3, 0.5, 0.7, 0.9, 1.0):
        counts = pair_correspondences(query, references, RatioTestConfig(threshold=threshold)).counts
        if previous is not None:
            assert all(counts[r] >= previous[r] for r in counts)
        previous = counts


def test_small_reference_sets_score_zero(rng):
    query = DescriptorSet("q", rng.standard_normal((5, 4)))
    references = [DescriptorSet("one", rng.standard_normal((1, 4))), DescriptorSet("none", np.zeros((0, 4)))]
    assert pair_correspondences(query, references).counts == {"one": 0, "none": 0}
    empty = DescriptorSet("empty", np.zeros((0, 4)))
    assert pair_correspondences(empty, [DescriptorSet("r", rng.standard_normal((3, 4)))]).counts == {"r": 0}


def test_dimension_mismatch(rng):
    with pytest.raises(ShapeError):
        pair_correspondences(DescriptorSet("q", rng.standard_normal((3, 4))),
                             [DescriptorSet("r", rng.standard_normal((3, 5)))])


def test_zero_noise_same_identity_accepts_everything():
    spec = SimSpec(2, 2, 16, concentration=float("inf"), seed=4)
    sets = {s.image_id: s for s in gen_descriptors(spec, 10, n_jobs=1)}
    first, second = sets[spec.image_id(0, 0)], sets[spec.image_id(0, 1)]
    tally = pair_correspondences(first, [second], RatioTestConfig(threshold=0.5))
    assert tally.counts[second.image_id] == 10


def test_disjoint_prototypes_identify_perfectly():
    spec = SimSpec(5, 4, 16, concentration=100.0, seed=1)
    sets = gen_descriptors(spec, 20, n_jobs=2)
    identities = {spec.image_id(i, j): spec.identity_label(i) for i in range(5) for j in range(4)}
    references = [s for s in sets if not s.image_id.endswith("-0003")]
    queries = [s for s in sets if s.image_id.endswith("-0003")]
    predictions = identify(queries, references, identities, RatioTestConfig(threshold=0.8), n_jobs=2)
    assert [p.predicted_identity for p in predictions] == [identities[q.image_id] for q in queries]


def test_predict_identity_rules():
    refs = {"r1": "A", "r2": "B", "r3": "B"}
    none = predict_identity(CorrespondenceTally("q", 5, {"r1": 0, "r2": 0, "r3": 0}), refs)
    assert none.predicted_identity is None and not none.is_match

    tie = predict_identity(CorrespondenceTally("q", 5, {"r3": 4, "r1": 4, "r2": 1}), refs)
    assert tie.best_reference_id == "r1" and tie.predicted_identity == "A"

    summed = predict_identity(CorrespondenceTally("q", 5, {"r1": 4, "r2": 3, "r3": 2}), refs, "identity")
    assert summed.predicted_identity == "B"
    assert summed.best_reference_id == "r2"
    assert summed.score == 5.0


def test_calibration_picks_best_threshold(monkeypatch):
    accuracies = [0.5, 0.6, 0.7, 0.75, 0.9, 0.85, 0.8, 0.8, 0.7, 0.6]

    def fake_grid(references, identities, grid, aggregation, n_jobs):
        assert list(grid) == [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95]
        return accuracies

    monkeypatch.setattr(local_matcher, "_grid_accuracies", fake_grid)
    refs = [DescriptorSet("a", np.ones((2, 3))), DescriptorSet("b", np.zeros((2, 3)))]
    result = calibrate_threshold(refs, {"a": "X", "b": "Y"})
    assert result.threshold == 0.7
    assert result.accuracy[0.7] == 0.9


def test_calibration_ties_go_to_smallest(monkeypatch):
    monkeypatch.setattr(local_matcher, "_grid_accuracies", lambda *args: [0.8, 0.9, 0.9])
    refs = [DescriptorSet("a", np.ones((2, 3))), DescriptorSet("b", np.zeros((2, 3)))]
    result = calibrate_threshold(refs, {"a": "X", "b": "Y"}, RatioTestConfig(candidate_grid=(0.6, 0.7, 0.8)))
    assert result.threshold == 0.7


def test_calibration_needs_two_identities():
    refs = [DescriptorSet("a", np.ones((2, 3))), DescriptorSet("b", np.zeros((2, 3)))]
    with pytest.raises(CalibrationError):
        calibrate_threshold(refs, {"a": "X", "b": "X"})


def test_calibration_on_synthetic_references():
    spec = SimSpec(4, 3, 12, concentration=50.0, seed=9)
    sets = gen_descriptors(spec, 15, n_jobs=1)
    identities = {spec.image_id(i, j): spec.identity_label(i) for i in range(4) for j in range(3)}
    result = calibrate_threshold(sets, identities, n_jobs=2)
    assert result.threshold in result.accuracy
    assert result.accuracy[result.threshold] == max(result.accuracy.values())
    assert result.accuracy[result.threshold] == 1.0


def test_descriptor_file_round_trip(rng, tmp_path):
    sets = [DescriptorSet("a", rng.standard_normal((4, 6))), DescriptorSet("empty", np.zeros((0, 6)))]
    path = tmp_path / "d.wdds"
    write_descriptors(path, sets)
    loaded = read_descriptors(path)
    assert [s.image_id for s in loaded] == ["a", "empty"]
    np.testing.assert_array_equal(loaded[0].descriptors, sets[0].descriptors)
    assert len(loaded[1]) == 0


def test_counts_ignore_descriptor_order(rng):
    cfg = RatioTestConfig(threshold=0.8)
    for _ in range(50):
        query = DescriptorSet("q", rng.standard_normal((int(rng.integers(1, 15)), 6)))
        references = random_sets(rng, 5, 6)
        tally = pair_correspondences(query, references, cfg)
        shuffled_query = DescriptorSet("q", query.descriptors[rng.permutation(len(query))])
        shuffled_refs = [DescriptorSet(r.image_id, r.descriptors[rng.permutation(len(r))]) for r in references]
        assert pair_correspondences(shuffled_query, shuffled_refs, cfg).counts == tally.counts
