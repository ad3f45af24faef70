"""Feature extractor with a BN-neck.

The backbone output after global average pooling is the *pre-neck* feature
(used by the triplet loss). A 1-D batch-norm turns it into the *post-neck*
feature, which feeds a linear classifier (with bias) and is the feature used
for retrieval.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List

import torch
import torch.nn as nn

from .errors import ConfigurationError, ShapeError

VARIANTS = ("small_cnn", "resnet50_like")


@dataclass
class BackboneConfig:
    variant: str = "small_cnn"
    in_channels: int = 3
    feature_dim: int = 128
    num_classes: int = 100
    widths: tuple = (32, 64, 128)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown backbone variant {self.variant!r}")
        if self.in_channels not in (3, 6):
            raise ConfigurationError(f"in_channels must be 3 or 6, got {self.in_channels}")
        if self.feature_dim <= 0 or self.num_classes <= 0:
            raise ConfigurationError("feature_dim and num_classes must be positive")
        if self.variant == "resnet50_like" and self.feature_dim != 2048:
            raise ConfigurationError("resnet50_like produces 2048-d features")


@dataclass
class EmbeddingRecord:
    pre_neck: torch.Tensor
    post_neck: torch.Tensor
    logits: torch.Tensor


@dataclass
class EmbeddingBatch:
    """Batched records; index it to get one :class:`EmbeddingRecord`."""
    pre_neck: torch.Tensor
    post_neck: torch.Tensor
    logits: torch.Tensor

    def __len__(self):
        return self.pre_neck.shape[0]

    def __getitem__(self, i) -> EmbeddingRecord:
        return EmbeddingRecord(self.pre_neck[i], self.post_neck[i], self.logits[i])

    def records(self) -> List[EmbeddingRecord]:
        return [self[i] for i in range(len(self))]


def _stage(c_in, c_out):
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, stride=2, padding=1, bias=False),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
        nn.Conv2d(c_out, c_out, 3, padding=1, bias=False),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
    )


def _small_cnn(cfg: BackboneConfig) -> nn.Module:
    widths = list(cfg.widths) + [cfg.feature_dim]
    layers, c_in = [], cfg.in_channels
    for w in widths:
        layers.append(_stage(c_in, w))
        c_in = w
    return nn.Sequential(*layers)


def _resnet50(cfg: BackboneConfig) -> nn.Module:
    from torchvision.models import resnet50

    net = resnet50(weights=None)
    if cfg.in_channels != 3:
        net.conv1 = nn.Conv2d(cfg.in_channels, 64, 7, stride=2, padding=3, bias=False)
    # last-stride 1, as in the usual re-id setup
    net.layer4[0].conv2.stride = (1, 1)
    net.layer4[0].downsample[0].stride = (1, 1)
    return nn.Sequential(*list(net.children())[:-2])


class Embedder(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        self.backbone = _small_cnn(config) if config.variant == "small_cnn" else _resnet50(config)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.neck = nn.BatchNorm1d(config.feature_dim)
        self.classifier = nn.Linear(config.feature_dim, config.num_classes, bias=True)
        self._init_weights()

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            elif isinstance(m, (nn.BatchNorm2d, nn.BatchNorm1d)):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
        nn.init.normal_(self.classifier.weight, std=0.001)
        nn.init.zeros_(self.classifier.bias)

    def forward(self, x: torch.Tensor) -> EmbeddingBatch:
        if x.dim() != 4 or x.shape[1] != self.config.in_channels:
            raise ShapeError(
                f"embedder expects (N, {self.config.in_channels}, H, W) input, got {tuple(x.shape)}")
        pre = self.pool(self.backbone(x)).flatten(1)
        post = self.neck(pre)
        return EmbeddingBatch(pre, post, self.classifier(post))


def extract(inputs: torch.Tensor, model: Embedder, training: bool = False) -> EmbeddingBatch:
    """Run the embedder in the requested mode (restoring the previous one)."""
    was_training = model.training
    model.train(training)
    try:
        if training:
            return model(inputs)
        with torch.no_grad():
            return model(inputs)
    finally:
        model.train(was_training)


def retrieval_feature(record) -> torch.Tensor:
    return record.post_neck
