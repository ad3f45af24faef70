"""Manifest files and the identity-labelled image collection built from them.

A manifest is a CSV with header ``image_path,identity_id,camera_id,split``;
image paths are relative to the manifest's directory and an empty
``camera_id`` means "unknown camera". Images are decoded lazily and cached.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch
from PIL import Image

from ..errors import DatasetError

SPLITS = ("train", "query", "gallery")
HEADER = ["image_path", "identity_id", "camera_id", "split"]
DEFAULT_IMAGE_SIZE = 256


@dataclass(frozen=True)
class ManifestEntry:
    image_path: str
    identity_id: int
    camera_id: Optional[int]
    split: str


class Manifest:
    def __init__(self, entries, root=None):
        self.entries: List[ManifestEntry] = list(entries)
        self.root = Path(root) if root is not None else None

    def __len__(self):
        return len(self.entries)

    def __eq__(self, other):
        return isinstance(other, Manifest) and self.entries == other.entries

    def split(self, name) -> List[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    @property
    def identities(self):
        return sorted({e.identity_id for e in self.entries})

    def validate(self):
        for e in self.entries:
            if e.split not in SPLITS:
                raise DatasetError(f"unknown split {e.split!r} for {e.image_path}")
            if e.identity_id < 0:
                raise DatasetError(f"negative identity id for {e.image_path}")
            if e.camera_id is not None and e.camera_id < 0:
                raise DatasetError(f"negative camera id for {e.image_path}")
        gallery_ids = {e.identity_id for e in self.split("gallery")}
        missing = sorted({e.identity_id for e in self.split("query")} - gallery_ids)
        if missing:
            raise DatasetError(f"query identities absent from gallery: {missing[:10]}")
        train_ids = sorted({e.identity_id for e in self.split("train")})
        if train_ids != list(range(len(train_ids))):
            raise DatasetError(
                f"train identity ids must be dense 0..C-1; got {len(train_ids)} ids "
                f"ranging {train_ids[0]}..{train_ids[-1]}" if train_ids else "no train ids")

    def save(self, path):
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(HEADER)
            for e in self.entries:
                writer.writerow([e.image_path, e.identity_id,
                                 "" if e.camera_id is None else e.camera_id, e.split])

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        if not path.is_file():
            raise DatasetError(f"manifest not found: {path}")
        entries = []
        with path.open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != HEADER:
                raise DatasetError(f"{path}: expected header {','.join(HEADER)}, got {header}")
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                try:
                    img, pid, cam, split = row
                    entries.append(ManifestEntry(img, int(pid), int(cam) if cam != "" else None,
                                                 split))
                except ValueError as exc:
                    raise DatasetError(f"{path}:{lineno}: malformed record {row}") from exc
        return cls(entries, root=path.parent)


def normalize(raw: np.ndarray) -> torch.Tensor:
    """uint8 HxWx3 -> float32 3xHxW tensor in [-1, 1]."""
    arr = np.asarray(raw, dtype=np.float32) / 255.0
    return torch.from_numpy(((arr - 0.5) / 0.5).transpose(2, 0, 1).copy())


def denormalize(image: torch.Tensor) -> np.ndarray:
    """Inverse of :func:`normalize`, returning HxWx3 uint8."""
    arr = image.detach().cpu().numpy().transpose(1, 2, 0) * 0.5 + 0.5
    return np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)


def preprocess(img: Image.Image, image_size: int) -> torch.Tensor:
    img = img.convert("RGB")
    if img.size != (image_size, image_size):
        img = img.resize((image_size, image_size), Image.BILINEAR)
    return normalize(np.asarray(img))


class IdentityDataset:
    """Read-only view over a manifest with per-split index lists.

    ``dataset[i]`` returns ``(image, identity_id, camera_id)`` where image is
    the preprocessed ``(3, S, S)`` tensor.
    """

    def __init__(self, manifest: Manifest, image_size: int = DEFAULT_IMAGE_SIZE, cache=True):
        manifest.validate()
        self.manifest = manifest
        self.root = manifest.root or Path(".")
        self.image_size = int(image_size)
        self._cache: Dict[int, torch.Tensor] = {} if cache else None
        self.splits = {s: [i for i, e in enumerate(manifest.entries) if e.split == s]
                       for s in SPLITS}
        self.train_by_identity: Dict[int, List[int]] = {}
        for i in self.splits["train"]:
            self.train_by_identity.setdefault(manifest.entries[i].identity_id, []).append(i)

    def __len__(self):
        return len(self.manifest)

    @property
    def num_classes(self):
        return len(self.train_by_identity)

    def path(self, index) -> Path:
        return self.root / self.manifest.entries[index].image_path

    def image(self, index) -> torch.Tensor:
        if self._cache is not None and index in self._cache:
            return self._cache[index]
        path = self.path(index)
        try:
            with Image.open(path) as img:
                tensor = preprocess(img, self.image_size)
        except (OSError, ValueError) as exc:
            raise DatasetError(f"cannot load image {path}: {exc}") from exc
        if self._cache is not None:
            self._cache[index] = tensor
        return tensor

    def mask(self, index) -> np.ndarray:
        path = Path(str(self.path(index)) + ".mask.png")
        try:
            with Image.open(path) as img:
                img = img.convert("L")
                if img.size != (self.image_size, self.image_size):
                    img = img.resize((self.image_size, self.image_size), Image.NEAREST)
                return np.asarray(img) > 127
        except OSError as exc:
            raise DatasetError(f"cannot load mask {path}: {exc}") from exc

    def __getitem__(self, index):
        e = self.manifest.entries[index]
        return self.image(index), e.identity_id, e.camera_id

    def stack(self, indices) -> torch.Tensor:
        return torch.stack([self.image(i) for i in indices])

    def labels(self, indices) -> np.ndarray:
        return np.array([self.manifest.entries[i].identity_id for i in indices], dtype=np.int64)

    def cameras(self, indices) -> np.ndarray:
        return np.array([-1 if self.manifest.entries[i].camera_id is None
                         else self.manifest.entries[i].camera_id for i in indices], dtype=np.int64)

    def has_cameras(self) -> bool:
        return all(e.camera_id is not None for e in self.manifest.entries
                   if e.split in ("query", "gallery"))

    def channel_mean(self, split="train") -> torch.Tensor:
        idx = self.splits[split]
        return torch.stack([self.image(i).mean(dim=(1, 2)) for i in idx]).mean(dim=0)


def load_dataset(manifest_path, image_size: int = DEFAULT_IMAGE_SIZE, cache=True) -> IdentityDataset:
    manifest = Manifest.load(manifest_path)
    dataset = IdentityDataset(manifest, image_size=image_size, cache=cache)
    for i in range(len(dataset)):
        if not dataset.path(i).is_file():
            raise DatasetError(f"image listed in manifest is missing: {dataset.path(i)}")
    return dataset
