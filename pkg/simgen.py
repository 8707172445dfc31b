"""Synthetic identity-clustered embeddings and descriptor sets for desk-scale runs."""
import datetime
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from joblib import Parallel, delayed
from scipy.stats import ortho_group

from catalog import Catalog, ImageRecord, emit
from config import DEFAULT_THREADS, logger
from errors import PreconditionError
from knn_core import EmbeddingMatrix, normalize, write_embeddings
from local_matcher import DescriptorSet, write_descriptors

# descriptor streams are spawned from a different entropy pool than embedding streams
_DESCRIPTOR_STREAM = 1


@dataclass(frozen=True)
class SimSpec:
    n_identities: int
    images_per_identity: int
    dim: int
    concentration: float = 100.0
    seed: int = 0
    days_per_identity: Optional[int] = None
    orthogonal_means: bool = False
    name: str = "sim"
    start_date: datetime.date = datetime.date(2020, 1, 1)

    def __post_init__(self):
        if min(self.n_identities, self.images_per_identity, self.dim) < 1:
            raise PreconditionError("n_identities, images_per_identity and dim must be >= 1")
        if math.isnan(self.concentration) or self.concentration <= 0:
            raise PreconditionError(f"concentration must be positive, got {self.concentration}")
        if self.days_per_identity is not None and self.days_per_identity < 1:
            raise PreconditionError("days_per_identity must be >= 1")
        if self.orthogonal_means and (self.n_identities > self.dim or self.dim < 2):
            raise PreconditionError(f"Orthogonal means need 2 <= n_identities <= dim, "
                                    f"got {self.n_identities} identities in {self.dim}d")
        if self.seed < 0:
            raise PreconditionError(f"seed must be non-negative, got {self.seed}")

    @property
    def noise_scale(self) -> float:
        """Per-coordinate Gaussian sigma; infinite concentration means no noise."""
        return 0.0 if math.isinf(self.concentration) else 1.0 / math.sqrt(self.concentration * self.dim)

    def identity_label(self, i: int) -> str:
        return f"id{i:04d}"

    def image_id(self, i: int, j: int) -> str:
        return f"{self.name}-{i:04d}-{j:04d}"


def _streams(spec: SimSpec, stream: int) -> List[np.random.Generator]:
    root = np.random.SeedSequence([spec.seed, stream])
    return [np.random.Generator(np.random.PCG64(s)) for s in root.spawn(spec.n_identities)]


def _means(spec: SimSpec, streams: List[np.random.Generator]) -> np.ndarray:
    if spec.orthogonal_means:
        basis = ortho_group.rvs(spec.dim, random_state=np.random.Generator(np.random.PCG64(spec.seed)))
        return np.asarray(basis, dtype=np.float64).reshape(spec.dim, spec.dim)[:spec.n_identities]
    means = np.stack([rng.standard_normal(spec.dim) for rng in streams])
    return means / np.linalg.norm(means, axis=1, keepdims=True)


def _identity_samples(mean: np.ndarray, n: int, sigma: float, rng: np.random.Generator) -> np.ndarray:
    noise = rng.standard_normal((n, mean.shape[0]))
    samples = mean[None, :] + sigma * noise
    return samples / np.linalg.norm(samples, axis=1, keepdims=True)


def build_catalog(spec: SimSpec) -> Catalog:
    records = []
    for i in range(spec.n_identities):
        for j in range(spec.images_per_identity):
            timestamp = None
            if spec.days_per_identity:
                timestamp = spec.start_date + datetime.timedelta(days=j % spec.days_per_identity)
            records.append(ImageRecord(
                image_id=spec.image_id(i, j),
                identity=spec.identity_label(i),
                dataset=spec.name,
                timestamp=timestamp,
                payload_ref=str(i * spec.images_per_identity + j),
            ))
    return Catalog(spec.name, tuple(records))


def gen_embeddings(spec: SimSpec, n_jobs: Optional[int] = None) -> Tuple[Catalog, EmbeddingMatrix]:
    """Unit embeddings scattered around one random unit mean per identity."""
    streams = _streams(spec, 0)
    means = _means(spec, streams)
    # each identity draws from its own stream, so thread count never changes the output
    blocks = Parallel(n_jobs=n_jobs or DEFAULT_THREADS, backend="threading")(
        delayed(_identity_samples)(means[i], spec.images_per_identity, spec.noise_scale, streams[i])
        for i in range(spec.n_identities)
    )
    catalog = build_catalog(spec)
    matrix = normalize(EmbeddingMatrix(np.vstack(blocks), tuple(catalog.image_ids)))
    logger.info(f"[SimGen] {spec.n_identities} identities x {spec.images_per_identity} images, "
                f"D={spec.dim}, concentration={spec.concentration}, seed={spec.seed}")
    return catalog, matrix


def _identity_descriptors(spec: SimSpec, i: int, k: int, rng: np.random.Generator) -> List[DescriptorSet]:
    bank = rng.standard_normal((k, spec.dim))
    sigma = 0.0 if math.isinf(spec.concentration) else 1.0 / math.sqrt(spec.concentration)
    sets = []
    for j in range(spec.images_per_identity):
        copy = bank[rng.permutation(k)] + sigma * rng.standard_normal((k, spec.dim))
        sets.append(DescriptorSet(spec.image_id(i, j), copy))
    return sets


def gen_descriptors(spec: SimSpec, descriptors_per_image: int,
                    n_jobs: Optional[int] = None) -> List[DescriptorSet]:
    """Per identity a bank of Gaussian prototypes; every image holds a shuffled noisy copy."""
    if descriptors_per_image < 0:
        raise PreconditionError(f"descriptors_per_image must be >= 0, got {descriptors_per_image}")
    streams = _streams(spec, _DESCRIPTOR_STREAM)
    per_identity = Parallel(n_jobs=n_jobs or DEFAULT_THREADS, backend="threading")(
        delayed(_identity_descriptors)(spec, i, descriptors_per_image, streams[i])
        for i in range(spec.n_identities)
    )
    sets = [s for group in per_identity for s in group]
    logger.info(f"[SimGen] {len(sets)} descriptor sets of {descriptors_per_image} x {spec.dim}")
    return sets


def write_dataset(out_dir, spec: SimSpec, descriptors_per_image: Optional[int] = None,
                  n_jobs: Optional[int] = None) -> Path:
    """catalog.csv + embeddings.wdem (+ descriptors.wdds) under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    catalog, matrix = gen_embeddings(spec, n_jobs=n_jobs)
    emit(catalog, out / "catalog.csv")
    write_embeddings(out / "embeddings.wdem", matrix)
    if descriptors_per_image:
        write_descriptors(out / "descriptors.wdds", gen_descriptors(spec, descriptors_per_image, n_jobs=n_jobs))
    return out
