from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigurationError, ReidError, ShapeError


@dataclass(frozen=True)
class TripletConfig:
    margin: float = 0.3
    distance: str = "euclidean"

    def __post_init__(self):
        if self.margin < 0:
            raise ConfigurationError(f"margin must be >= 0, got {self.margin}")
        if self.distance != "euclidean":
            raise ConfigurationError("only euclidean distance is supported")


def euclidean_distances(x: torch.Tensor) -> torch.Tensor:
    """Pairwise distances from explicit differences.

    Zero distances are returned as exact zeros with zero gradient instead of
    going through sqrt(0), whose derivative is infinite.
    """
    diff = x.unsqueeze(1) - x.unsqueeze(0)
    sq = (diff * diff).sum(-1)
    positive = sq > 0
    safe = torch.where(positive, sq, torch.ones_like(sq))
    return torch.where(positive, safe.sqrt(), torch.zeros_like(sq))


def batch_hard_triplet(features: torch.Tensor, labels: torch.Tensor,
                       config: TripletConfig = TripletConfig()) -> torch.Tensor:
    """Batch-hard triplet loss, averaged over anchors.

    For each anchor: ``relu(margin + max_pos d - min_neg d)`` with the anchor
    itself excluded from its positives.
    """
    if features.dim() != 2 or features.shape[0] != labels.shape[0]:
        raise ShapeError(f"features {tuple(features.shape)} vs labels {tuple(labels.shape)}")
    dist = euclidean_distances(features)
    same = labels.unsqueeze(0) == labels.unsqueeze(1)
    eye = torch.eye(len(labels), dtype=torch.bool, device=labels.device)
    pos_mask = same & ~eye
    neg_mask = ~same
    if not pos_mask.any(1).all():
        lonely = labels[~pos_mask.any(1)].unique().tolist()
        raise ReidError(f"identities with a single instance in batch (no positives): {lonely}")
    if not neg_mask.any(1).all():
        raise ReidError("batch holds a single identity; anchors have no negatives")
    hardest_pos = torch.where(pos_mask, dist, torch.full_like(dist, -float("inf"))).max(1).values
    hardest_neg = torch.where(neg_mask, dist, torch.full_like(dist, float("inf"))).min(1).values
    return F.relu(config.margin + hardest_pos - hardest_neg).mean()


def smoothing_targets(labels: torch.Tensor, num_classes: int, smoothing: float,
                      dtype=torch.float32) -> torch.Tensor:
    """``1 - eps`` on the true class and ``eps / (C - 1)`` on every other class."""
    off = smoothing / (num_classes - 1) if num_classes > 1 else 0.0
    targets = torch.full((labels.shape[0], num_classes), off, dtype=dtype, device=labels.device)
    targets.scatter_(1, labels.unsqueeze(1), 1.0 - smoothing if num_classes > 1 else 1.0)
    return targets


def smoothed_cross_entropy(logits: torch.Tensor, labels: torch.Tensor, smoothing: float = 0.1,
                           num_classes: int = None) -> torch.Tensor:
    num_classes = logits.shape[1] if num_classes is None else num_classes
    if not 0.0 <= smoothing < 1.0:
        raise ConfigurationError(f"smoothing must be in [0, 1), got {smoothing}")
    if logits.shape[1] != num_classes:
        raise ShapeError(f"logits have {logits.shape[1]} classes, expected {num_classes}")
    if labels.numel() and (labels.max() >= num_classes or labels.min() < 0):
        raise IndexError(f"label out of range for {num_classes} classes: "
                         f"{labels.min().item()}..{labels.max().item()}")
    targets = smoothing_targets(labels, num_classes, smoothing, dtype=logits.dtype)
    return -(targets * F.log_softmax(logits, dim=1)).sum(1).mean()


@dataclass
class LossBreakdown:
    triplet: torch.Tensor
    classification: torch.Tensor
    reconstruction: torch.Tensor
    total: torch.Tensor
    eta: float

    def as_dict(self):
        def f(v):
            return v.item() if isinstance(v, torch.Tensor) else float(v)
        return {"triplet": f(self.triplet), "cls": f(self.classification),
                "recon": f(self.reconstruction), "total": f(self.total)}


def total_loss(triplet, classification, reconstruction, eta: float = 100.0) -> LossBreakdown:
    total = triplet + classification + eta * reconstruction
    return LossBreakdown(triplet, classification, reconstruction, total, eta)
