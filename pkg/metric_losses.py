"""ArcFace and Triplet losses with analytic gradients (float64 numerics).

Both losses work on L2-normalized embeddings; gradients are returned with respect to the
raw (unnormalized) inputs.
"""
import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple

import numpy as np
from scipy.special import logsumexp

from errors import DegenerateRowError, LabelError, PreconditionError, ShapeError


class Mining(str, Enum):
    ALL = "all"
    SEMI = "semi"
    HARD = "hard"


@dataclass(frozen=True)
class ArcFaceConfig:
    margin: float = 0.5
    scale: float = 64.0
    n_classes: Optional[int] = None

    def __post_init__(self):
        if not 0.0 <= self.margin < math.pi:
            raise PreconditionError(f"ArcFace margin must be in [0, pi), got {self.margin}")
        if not (math.isfinite(self.scale) and self.scale > 0):
            raise PreconditionError(f"ArcFace scale must be finite and positive, got {self.scale}")


@dataclass(frozen=True)
class TripletConfig:
    margin: float = 0.2
    mining: Mining = Mining.ALL
    # semi-hard band d(a,p) < d(a,n) < d(a,p) + margin instead of d(a,n) > d(a,p)
    semi_band: bool = False

    def __post_init__(self):
        object.__setattr__(self, "mining", Mining(self.mining))
        if not (math.isfinite(self.margin) and self.margin > 0):
            raise PreconditionError(f"Triplet margin must be finite and positive, got {self.margin}")


@dataclass(frozen=True, eq=False)
class Batch:
    embeddings: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        emb = np.asarray(self.embeddings, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if emb.ndim != 2 or emb.shape[0] < 1:
            raise ShapeError(f"Batch embeddings must be B x D, got shape {emb.shape}")
        if labels.shape != (emb.shape[0],):
            raise ShapeError(f"{labels.shape} labels for {emb.shape[0]} embeddings")
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.embeddings.shape[0]


@dataclass(frozen=True, eq=False)
class ArcFaceResult:
    loss: float
    grad_embeddings: np.ndarray
    grad_weights: np.ndarray


@dataclass(frozen=True, eq=False)
class TripletResult:
    loss: float
    grad_embeddings: np.ndarray
    n_selected: int
    n_active: int


def l2_normalize(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(x, axis=1)
    bad = np.flatnonzero(~np.isfinite(norms) | (norms == 0))
    if bad.size:
        raise DegenerateRowError(int(bad[0]))
    return x / norms[:, None], norms


def _normalize_backward(grad: np.ndarray, unit: np.ndarray, norms: np.ndarray) -> np.ndarray:
    """Gradient through u = x / ||x||."""
    return (grad - unit * np.sum(unit * grad, axis=1, keepdims=True)) / norms[:, None]


def arcface_loss(batch: Batch, class_weights: np.ndarray, cfg: ArcFaceConfig) -> ArcFaceResult:
    """Additive angular margin softmax loss, averaged over the batch.

    Target logit s*cos(theta_y + m) with theta_y clamped to [0, pi - m]; other logits s*cos(theta_j).
    """
    weights = np.asarray(class_weights, dtype=np.float64)
    if weights.ndim != 2 or weights.shape[1] != batch.embeddings.shape[1]:
        raise ShapeError(f"Class weights {weights.shape} do not match embeddings {batch.embeddings.shape}")
    n_classes = weights.shape[0]
    if cfg.n_classes is not None and cfg.n_classes != n_classes:
        raise ShapeError(f"Config expects {cfg.n_classes} classes, weights have {n_classes}")
    labels = batch.labels
    if labels.min() < 0 or labels.max() >= n_classes:
        raise LabelError(f"Labels must be in [0, {n_classes}), got range [{labels.min()}, {labels.max()}]")

    u, u_norms = l2_normalize(batch.embeddings)
    v, v_norms = l2_normalize(weights)
    b = len(batch)
    s, m = cfg.scale, cfg.margin
    rows = np.arange(b)

    cos = np.clip(u @ v.T, -1.0, 1.0)
    logits = s * cos
    cos_y = cos[rows, labels]
    dlogit_dcos_y = np.full(b, s)
    if m > 0:
        theta = np.arccos(cos_y)
        clamped = theta > math.pi - m
        theta = np.minimum(theta, math.pi - m)
        logits[rows, labels] = s * np.cos(theta + m)
        # d/dc s*cos(arccos(c) + m) = s*sin(theta + m) / sin(theta)
        dlogit_dcos_y = np.where(clamped, 0.0, s * np.sin(theta + m) / np.maximum(np.sin(theta), 1e-12))

    lse = logsumexp(logits, axis=1)
    loss = float(np.mean(lse - logits[rows, labels]))

    probs = np.exp(logits - lse[:, None])
    dlogits = probs / b
    dlogits[rows, labels] -= 1.0 / b
    dcos = dlogits * s
    dcos[rows, labels] = dlogits[rows, labels] * dlogit_dcos_y

    grad_u = dcos @ v
    grad_v = dcos.T @ u
    return ArcFaceResult(
        loss=loss,
        grad_embeddings=_normalize_backward(grad_u, u, u_norms),
        grad_weights=_normalize_backward(grad_v, v, v_norms),
    )


def pairwise_distances(unit: np.ndarray) -> np.ndarray:
    diff = unit[:, None, :] - unit[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=2))


def triplet_mask(labels: np.ndarray, dists: np.ndarray, cfg: TripletConfig) -> np.ndarray:
    """Boolean [a, p, n] mask of the triplets selected by the mining rule."""
    same = labels[:, None] == labels[None, :]
    positive = same & ~np.eye(len(labels), dtype=bool)
    valid = positive[:, :, None] & ~same[:, None, :]
    d_ap = dists[:, :, None]
    d_an = dists[:, None, :]
    if cfg.mining is Mining.HARD:
        return valid & (d_an < d_ap)
    if cfg.mining is Mining.SEMI:
        if cfg.semi_band:
            return valid & (d_an > d_ap) & (d_an < d_ap + cfg.margin)
        return valid & (d_an > d_ap)
    return valid


def select_triplets(batch: Batch, cfg: TripletConfig) -> np.ndarray:
    """(a, p, n) index triples selected by the mining rule, in lexicographic order."""
    unit, _ = l2_normalize(batch.embeddings)
    return np.argwhere(triplet_mask(batch.labels, pairwise_distances(unit), cfg))


def triplet_loss(batch: Batch, cfg: TripletConfig) -> TripletResult:
    """Mean of max(0, d(a,p) - d(a,n) + m) over the mined triplets of the batch.

    A batch without any selected triplet gives loss 0 and a zero gradient.
    """
    unit, norms = l2_normalize(batch.embeddings)
    dists = pairwise_distances(unit)
    mask = triplet_mask(batch.labels, dists, cfg)
    n_selected = int(mask.sum())
    if n_selected == 0:
        return TripletResult(0.0, np.zeros_like(batch.embeddings), 0, 0)

    hinge = dists[:, :, None] - dists[:, None, :] + cfg.margin
    active = mask & (hinge > 0)
    loss = float(np.sum(np.where(active, hinge, 0.0)) / n_selected)

    # dL/dd for ordered pairs: +1 per active (a, p), -1 per active (a, n)
    coeff = (active.sum(axis=2) - active.sum(axis=1)) / n_selected
    with np.errstate(divide="ignore", invalid="ignore"):
        k = np.where(dists > 0, coeff / dists, 0.0)
    sym = k + k.T
    grad_unit = sym.sum(axis=1)[:, None] * unit - sym @ unit
    return TripletResult(
        loss=loss,
        grad_embeddings=_normalize_backward(grad_unit, unit, norms),
        n_selected=n_selected,
        n_active=int(active.sum()),
    )
