from .augment import ReaConfig, apply_rea
from .dataset import (IdentityDataset, Manifest, ManifestEntry, denormalize, load_dataset,
                      normalize, preprocess)
from .sampler import BatchSpec, sample_pk_batch, sample_pk_indices
from .synthetic import SyntheticSpec, generate_synthetic_dataset

__all__ = [
    "BatchSpec", "IdentityDataset", "Manifest", "ManifestEntry", "ReaConfig", "SyntheticSpec",
    "apply_rea", "denormalize", "generate_synthetic_dataset", "load_dataset", "normalize",
    "preprocess", "sample_pk_batch", "sample_pk_indices",
]
