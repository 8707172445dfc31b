import csv
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from config import (
    DIVERGENCE_FACTOR,
    TRAIN_BATCH_SIZE,
    TRAIN_EPOCHS,
    TRAIN_MOMENTUM,
    TRAIN_WEIGHT_DECAY,
    logger,
)
from errors import AlignmentError, DegenerateRowError, PreconditionError, TrainingDivergedError
from knn_core import EmbeddingMatrix, normalize
from metric_losses import ArcFaceConfig, Batch, TripletConfig, arcface_loss, triplet_loss
from storage import atomic_write

LossConfig = Union[ArcFaceConfig, TripletConfig]


@dataclass(frozen=True)
class TrainerConfig:
    lr: float = 0.001
    momentum: float = TRAIN_MOMENTUM
    epochs: int = TRAIN_EPOCHS
    batch_size: int = TRAIN_BATCH_SIZE
    weight_decay: float = TRAIN_WEIGHT_DECAY
    embedding_dim: Optional[int] = None
    seed: int = 0
    divergence_factor: float = DIVERGENCE_FACTOR


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    n_active: int


@dataclass(frozen=True, eq=False)
class TrainedHead:
    projection: np.ndarray
    classes: Tuple[str, ...]
    trace: List[EpochRecord] = field(default_factory=list)
    class_weights: Optional[np.ndarray] = None

    def project(self, features: EmbeddingMatrix) -> EmbeddingMatrix:
        """Apply the learned projection and L2-normalize the result."""
        if features.dim != self.projection.shape[0]:
            raise AlignmentError(f"Features have D={features.dim}, projection expects {self.projection.shape[0]}")
        projected = features.data.astype(np.float64) @ self.projection
        return normalize(EmbeddingMatrix(projected, features.row_ids))


def cosine_lr(base_lr: float, epoch: int, epochs: int) -> float:
    return base_lr * (1.0 + math.cos(math.pi * epoch / epochs)) / 2.0


def _batch_loss(loss_config: LossConfig, embeddings: np.ndarray, labels: np.ndarray,
                class_weights: Optional[np.ndarray]):
    """Loss, gradient w.r.t. embeddings, gradient w.r.t. class weights, active count."""
    batch = Batch(embeddings, labels)
    if isinstance(loss_config, ArcFaceConfig):
        result = arcface_loss(batch, class_weights, loss_config)
        return result.loss, result.grad_embeddings, result.grad_weights, len(batch)
    result = triplet_loss(batch, loss_config)
    return result.loss, result.grad_embeddings, None, result.n_active


def train_head(features: EmbeddingMatrix, labels: Sequence[str], loss_config: LossConfig,
               config: Optional[TrainerConfig] = None) -> TrainedHead:
    """Train a linear projection over precomputed features with SGD + cosine annealing.

    Raises TrainingDivergedError (carrying the epoch and the trace so far) on a non-finite
    loss or parameter, a degenerate embedding, or an epoch loss above
    ``divergence_factor`` times the first epoch's loss.
    """
    config = config or TrainerConfig()
    labels = list(labels)
    if len(labels) != features.n_rows:
        raise AlignmentError(f"{len(labels)} labels for {features.n_rows} feature rows")
    classes = tuple(sorted(set(labels)))
    if len(classes) < 2:
        raise PreconditionError(f"Training needs at least 2 identities, found {len(classes)}")
    if not config.lr > 0:
        raise PreconditionError(f"Learning rate must be positive, got {config.lr}")
    if config.epochs < 1 or config.batch_size < 1:
        raise PreconditionError("epochs and batch_size must be >= 1")

    rng = np.random.Generator(np.random.PCG64(config.seed))
    x = features.data.astype(np.float64)
    class_index = {c: i for i, c in enumerate(classes)}
    y = np.array([class_index[label] for label in labels], dtype=np.int64)
    n, d = x.shape
    e = config.embedding_dim or d

    projection = torch.nn.Parameter(torch.from_numpy(rng.standard_normal((d, e)) / math.sqrt(d)))
    params = [projection]
    class_weights = None
    if isinstance(loss_config, ArcFaceConfig):
        class_weights = torch.nn.Parameter(torch.from_numpy(rng.standard_normal((len(classes), e)) * 0.01))
        params.append(class_weights)

    optimizer = torch.optim.SGD(params, lr=config.lr, momentum=config.momentum,
                                weight_decay=config.weight_decay)
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer, lr_lambda=lambda t: cosine_lr(1.0, t, config.epochs))

    logger.info(f"[Train] {type(loss_config).__name__} head {d}->{e} on {n} samples, "
                f"{len(classes)} identities, lr={config.lr}, epochs={config.epochs}")
    trace: List[EpochRecord] = []
    for epoch in range(config.epochs):
        lr_now = optimizer.param_groups[0]["lr"]
        order = rng.permutation(n)
        loss_sum, n_active = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            xb = x[idx]
            weights_np = class_weights.detach().numpy() if class_weights is not None else None
            try:
                loss, grad_z, grad_w, active = _batch_loss(
                    loss_config, xb @ projection.detach().numpy(), y[idx], weights_np)
            except DegenerateRowError as e:
                raise TrainingDivergedError(epoch, f"degenerate embedding ({e})", trace) from None
            if not math.isfinite(loss):
                raise TrainingDivergedError(epoch, f"non-finite loss {loss}", trace)

            projection.grad = torch.from_numpy(np.ascontiguousarray(xb.T @ grad_z))
            if class_weights is not None:
                class_weights.grad = torch.from_numpy(np.ascontiguousarray(grad_w))
            optimizer.step()
            if not all(torch.isfinite(p).all() for p in params):
                raise TrainingDivergedError(epoch, "non-finite parameters", trace)
            loss_sum += loss * len(idx)
            n_active += active

        record = EpochRecord(epoch, lr_now, loss_sum / n, n_active)
        trace.append(record)
        logger.debug(f"[Train] epoch={epoch} lr={lr_now:.6g} loss={record.loss:.6f} active={n_active}")
        first = trace[0].loss
        if epoch > 0 and first > 0 and record.loss > config.divergence_factor * first:
            raise TrainingDivergedError(epoch, f"loss {record.loss:.4g} exceeds "
                                               f"{config.divergence_factor}x initial {first:.4g}", trace)
        scheduler.step()

    logger.info(f"[Train] Finished: loss {trace[0].loss:.4f} -> {trace[-1].loss:.4f}")
    return TrainedHead(
        projection=projection.detach().numpy().copy(),
        classes=classes,
        trace=trace,
        class_weights=class_weights.detach().numpy().copy() if class_weights is not None else None,
    )


def write_trace(trace: Sequence[EpochRecord], path, delimiter: str = ",") -> None:
    with atomic_write(path, "w") as fh:
        writer = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        writer.writerow(["epoch", "lr", "loss", "n_active"])
        for r in trace:
            writer.writerow([r.epoch, f"{r.lr:.9g}", f"{r.loss:.9g}", r.n_active])
    logger.info(f"[Train] Wrote {len(trace)}-epoch trace to '{path}'")


def save_projection(head: TrainedHead, path) -> None:
    with atomic_write(path, "wb") as fh:
        np.save(fh, head.projection)
