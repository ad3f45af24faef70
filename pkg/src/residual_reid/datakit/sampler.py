from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigurationError, SamplingError


@dataclass(frozen=True)
class BatchSpec:
    identities_per_batch: int = 8
    instances_per_identity: int = 4

    def __post_init__(self):
        if self.identities_per_batch < 1 or self.instances_per_identity < 1:
            raise ConfigurationError(f"P and K must be >= 1, got {self}")

    @property
    def batch_size(self):
        return self.identities_per_batch * self.instances_per_identity


def sample_pk_indices(dataset, spec: BatchSpec, rng: np.random.Generator):
    """Dataset indices for one P x K batch, grouped identity by identity.

    Identities are drawn without replacement; instances without replacement
    when an identity has at least K train images, with replacement otherwise.
    """
    ids = sorted(dataset.train_by_identity)
    if len(ids) < spec.identities_per_batch:
        raise SamplingError(
            f"need {spec.identities_per_batch} train identities per batch, "
            f"dataset has {len(ids)}")
    chosen = rng.choice(len(ids), size=spec.identities_per_batch, replace=False)
    out = []
    k = spec.instances_per_identity
    for c in chosen:
        pool = dataset.train_by_identity[ids[c]]
        picks = rng.choice(len(pool), size=k, replace=len(pool) < k)
        out.extend(pool[p] for p in picks)
    return out


def sample_pk_batch(dataset, spec: BatchSpec, rng: np.random.Generator):
    """List of ``(image, identity_id)`` pairs for one P x K batch."""
    return [(dataset.image(i), dataset.manifest.entries[i].identity_id)
            for i in sample_pk_indices(dataset, spec, rng)]
