"""Local-descriptor identification: ratio-test correspondences, threshold calibration,
and identity prediction by correspondence count.
"""
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from scipy.spatial.distance import cdist

from config import DEFAULT_RATIO_GRID, DEFAULT_RATIO_THRESHOLD, DEFAULT_THREADS, logger
from deep_matcher import MatchPrediction
from errors import (
    AlignmentError,
    CalibrationError,
    FormatError,
    PreconditionError,
    ShapeError,
    UnknownImageError,
)
from storage import (
    atomic_write,
    expect_eof,
    read_floats,
    read_header,
    read_string,
    read_u32,
    write_floats,
    write_header,
    write_string,
    write_u32,
)

DESCRIPTOR_MAGIC = b"WDDS"
AGGREGATIONS = ("image", "identity")


@dataclass(frozen=True, eq=False)
class DescriptorSet:
    """K x D local descriptors of one image (K may be 0)."""
    image_id: str
    descriptors: np.ndarray

    def __post_init__(self):
        data = np.array(self.descriptors, dtype=np.float32, order="C", copy=True)
        if data.ndim != 2:
            raise ShapeError(f"Descriptors of '{self.image_id}' must be K x D, got shape {data.shape}")
        if not np.isfinite(data).all():
            raise PreconditionError(f"NaN/Inf descriptors in '{self.image_id}'")
        data.flags.writeable = False
        object.__setattr__(self, "descriptors", data)

    def __len__(self) -> int:
        return self.descriptors.shape[0]

    @property
    def dim(self) -> int:
        return self.descriptors.shape[1]


@dataclass(frozen=True)
class RatioTestConfig:
    threshold: float = DEFAULT_RATIO_THRESHOLD
    candidate_grid: Tuple[float, ...] = DEFAULT_RATIO_GRID
    aggregation: str = "image"

    def __post_init__(self):
        object.__setattr__(self, "candidate_grid", tuple(float(t) for t in self.candidate_grid))
        if not 0.0 < self.threshold <= 1.0:
            raise PreconditionError(f"Ratio threshold must be in (0, 1], got {self.threshold}")
        grid = self.candidate_grid
        if any(not 0.0 < t <= 1.0 for t in grid):
            raise PreconditionError(f"Grid thresholds must lie in (0, 1]: {grid}")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise PreconditionError(f"Grid thresholds must be strictly increasing: {grid}")
        if self.aggregation not in AGGREGATIONS:
            raise PreconditionError(f"aggregation must be one of {AGGREGATIONS}, got '{self.aggregation}'")


@dataclass(frozen=True)
class CorrespondenceTally:
    query_id: str
    n_query_descriptors: int
    counts: Dict[str, int] = field(default_factory=dict)


@dataclass(frozen=True)
class CalibrationResult:
    threshold: float
    accuracy: Dict[float, float]


def _nearest_two(query: np.ndarray, reference: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Distances to the nearest and second-nearest reference descriptor, per query descriptor."""
    dists = cdist(query, reference, metric="euclidean")
    two = np.partition(dists, 1, axis=1)[:, :2]
    return two[:, 0], two[:, 1]


def _check_references(query: DescriptorSet, references: Sequence[DescriptorSet]) -> None:
    for r in references:
        if r.dim != query.dim:
            raise ShapeError(f"Descriptor dimension mismatch: '{query.image_id}' D={query.dim}, "
                             f"'{r.image_id}' D={r.dim}")
    dupes = [i for i, n in Counter(r.image_id for r in references).items() if n > 1]
    if dupes:
        raise AlignmentError(f"Duplicate reference image ids: {sorted(dupes)[:5]}")


def pair_correspondences(query: DescriptorSet, references: Sequence[DescriptorSet],
                         cfg: Optional[RatioTestConfig] = None) -> CorrespondenceTally:
    """Count ratio-test matches of the query's descriptors inside each reference image.

    A match is accepted when d1 < threshold * d2, both distances taken within the same
    reference image. Reference images with fewer than two descriptors score 0.
    """
    cfg = cfg or RatioTestConfig()
    _check_references(query, references)
    counts: Dict[str, int] = {}
    for r in references:
        if len(query) == 0 or len(r) < 2:
            counts[r.image_id] = 0
            continue
        d1, d2 = _nearest_two(query.descriptors, r.descriptors)
        counts[r.image_id] = int(np.count_nonzero(d1 < cfg.threshold * d2))
    return CorrespondenceTally(query.image_id, len(query), counts)


def tally_all(queries: Sequence[DescriptorSet], references: Sequence[DescriptorSet],
              cfg: Optional[RatioTestConfig] = None, n_jobs: Optional[int] = None) -> List[CorrespondenceTally]:
    cfg = cfg or RatioTestConfig()
    tallies = Parallel(n_jobs=n_jobs or DEFAULT_THREADS, backend="threading")(
        delayed(pair_correspondences)(q, references, cfg) for q in queries
    )
    logger.info(f"[Local] Tallied {len(queries)} queries against {len(references)} references "
                f"(threshold={cfg.threshold})")
    return list(tallies)


def predict_identity(tally: CorrespondenceTally, reference_identities: Mapping[str, str],
                     aggregation: str = "image") -> MatchPrediction:
    """Pick the identity with the most correspondences.

    "image": the single reference image with the highest count decides (ties: smallest image id).
    "identity": counts are summed per identity (ties: smallest identity).
    Zero correspondences everywhere gives a no-match prediction.
    """
    if not tally.counts:
        raise PreconditionError(f"Empty tally for query '{tally.query_id}'")
    unknown = [r for r in tally.counts if r not in reference_identities]
    if unknown:
        raise UnknownImageError(unknown)
    if aggregation not in AGGREGATIONS:
        raise PreconditionError(f"aggregation must be one of {AGGREGATIONS}, got '{aggregation}'")

    best_count = max(tally.counts.values())
    if best_count == 0:
        return MatchPrediction(tally.query_id, None, None, 0.0)

    if aggregation == "image":
        best_ref = min(r for r, c in tally.counts.items() if c == best_count)
        return MatchPrediction(tally.query_id, reference_identities[best_ref], best_ref, float(best_count))

    per_identity: Dict[str, int] = defaultdict(int)
    for ref, count in tally.counts.items():
        per_identity[reference_identities[ref]] += count
    best_total = max(per_identity.values())
    identity = min(i for i, total in per_identity.items() if total == best_total)
    members = {r: c for r, c in tally.counts.items() if reference_identities[r] == identity}
    top = max(members.values())
    best_ref = min(r for r, c in members.items() if c == top)
    return MatchPrediction(tally.query_id, identity, best_ref, float(best_total))


def identify(queries: Sequence[DescriptorSet], references: Sequence[DescriptorSet],
             reference_identities: Mapping[str, str], cfg: Optional[RatioTestConfig] = None,
             n_jobs: Optional[int] = None) -> List[MatchPrediction]:
    cfg = cfg or RatioTestConfig()
    tallies = tally_all(queries, references, cfg, n_jobs=n_jobs)
    return [predict_identity(t, reference_identities, cfg.aggregation) for t in tallies]


def _pair_distances(i: int, references: Sequence[DescriptorSet]):
    query = references[i]
    pairs = []
    for j, r in enumerate(references):
        if j == i or len(query) == 0 or len(r) < 2:
            pairs.append((r.image_id, None, None))
        else:
            pairs.append((r.image_id,) + _nearest_two(query.descriptors, r.descriptors))
    return pairs


def _grid_accuracies(references: Sequence[DescriptorSet], identities: Mapping[str, str],
                     grid: Sequence[float], aggregation: str, n_jobs: Optional[int]) -> List[float]:
    """Leave-one-out identification accuracy of the reference set for every grid threshold."""
    distances = Parallel(n_jobs=n_jobs or DEFAULT_THREADS, backend="threading")(
        delayed(_pair_distances)(i, references) for i in range(len(references))
    )
    accuracies = []
    for threshold in grid:
        correct = 0
        for i, pairs in enumerate(distances):
            counts = {ref_id: (0 if d1 is None else int(np.count_nonzero(d1 < threshold * d2)))
                      for ref_id, d1, d2 in pairs if ref_id != references[i].image_id}
            if not counts:
                continue
            tally = CorrespondenceTally(references[i].image_id, len(references[i]), counts)
            prediction = predict_identity(tally, identities, aggregation)
            correct += prediction.predicted_identity == identities[references[i].image_id]
        accuracies.append(correct / len(references))
    return accuracies


def calibrate_threshold(references: Sequence[DescriptorSet], identities: Mapping[str, str],
                        cfg: Optional[RatioTestConfig] = None, n_jobs: Optional[int] = None) -> CalibrationResult:
    """Choose the grid threshold with the best leave-one-out accuracy on the reference set.

    Ties go to the smallest threshold.
    """
    cfg = cfg or RatioTestConfig()
    if not cfg.candidate_grid:
        raise CalibrationError("Empty threshold grid")
    missing = [r.image_id for r in references if r.image_id not in identities]
    if missing:
        raise UnknownImageError(missing)
    n_identities = len({identities[r.image_id] for r in references})
    if n_identities < 2:
        raise CalibrationError(f"Calibration needs at least 2 identities, found {n_identities}")
    if references:
        _check_references(references[0], references)

    accuracies = _grid_accuracies(references, identities, cfg.candidate_grid, cfg.aggregation, n_jobs)
    best_threshold, best_accuracy = cfg.candidate_grid[0], accuracies[0]
    for threshold, accuracy in zip(cfg.candidate_grid, accuracies):
        logger.debug(f"[Local] threshold={threshold:.2f} LOO accuracy={accuracy:.4f}")
        if accuracy > best_accuracy:
            best_threshold, best_accuracy = threshold, accuracy
    logger.info(f"[Local] Calibrated ratio threshold {best_threshold:.2f} "
                f"(LOO accuracy {best_accuracy:.4f} over {len(references)} images)")
    return CalibrationResult(best_threshold, dict(zip(cfg.candidate_grid, accuracies)))


def write_descriptors(path, sets: Sequence[DescriptorSet]) -> None:
    """WDDS file: header, then per image its id, K and K*D float32 values."""
    dims = {s.dim for s in sets}
    if len(dims) > 1:
        raise FormatError(f"Descriptor sets disagree on dimension: {sorted(dims)}")
    dim = dims.pop() if dims else 0
    with atomic_write(path, "wb") as fh:
        write_header(fh, DESCRIPTOR_MAGIC, dim, len(sets))
        for s in sets:
            write_string(fh, s.image_id)
            write_u32(fh, len(s))
            write_floats(fh, s.descriptors)
    logger.info(f"[Storage] Wrote {len(sets)} descriptor sets (D={dim}) to '{path}'")


def read_descriptors(path) -> List[DescriptorSet]:
    sets: List[DescriptorSet] = []
    with open(path, "rb") as fh:
        dim, count = read_header(fh, DESCRIPTOR_MAGIC)
        for _ in range(count):
            image_id = read_string(fh, "image_id")
            k = read_u32(fh, "descriptor count")
            values = read_floats(fh, k * dim, f"descriptors of '{image_id}'")
            sets.append(DescriptorSet(image_id, values.reshape(k, dim)))
        expect_eof(fh, f"{count} descriptor sets in '{path}'")
    logger.info(f"[Storage] Read {len(sets)} descriptor sets (D={dim}) from '{path}'")
    return sets
