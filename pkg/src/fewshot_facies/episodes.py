"""1-way K-shot episodes, on-the-fly mask binarization and support selection."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np


class InvalidLabelError(ValueError):
    pass


class SamplingError(ValueError):
    pass


@dataclass
class Episode:
    support_images: np.ndarray  # (K, H, W)
    support_masks: np.ndarray  # (K, H, W), values in 1..C
    query_image: np.ndarray  # (H, W)
    query_mask: Optional[np.ndarray]
    class_count: int
    dataset_id: str = ""

    @property
    def shots(self) -> int:
        return len(self.support_images)


@dataclass
class BinaryEpisode:
    support_images: np.ndarray
    support_binary_masks: np.ndarray
    query_image: np.ndarray
    query_binary_mask: Optional[np.ndarray]
    class_id: int


@dataclass
class SourceDataset:
    """A pool of labelled images (patches or slices) from one volume."""

    dataset_id: str
    images: np.ndarray  # (N, H, W)
    masks: np.ndarray  # (N, H, W)
    class_count: int
    slice_ids: List[tuple] = field(default_factory=list)

    def __len__(self):
        return len(self.images)


def source_from_volume(volume, split, partition: str, patch_size: int, stride: int,
                       dataset_id: str = "", axes: Sequence[str] = ("inline", "crossline")) -> SourceDataset:
    """Patch pool from one split partition of a labelled volume, over both slice axes."""
    from .volume import apply_split, slice_patches

    slices = [s for s in apply_split(volume, split)[partition] if s.axis in axes]
    images, masks, ids = [], [], []
    for s in slices:
        for p in slice_patches(s.image, s.mask, patch_size, stride, source=(s.axis, s.index)):
            images.append(p.pixels)
            masks.append(p.mask)
            ids.append(p.source)
    if not images:
        raise SamplingError(f"partition {partition!r} of {dataset_id!r} is empty")
    return SourceDataset(dataset_id, np.stack(images).astype(np.float32), np.stack(masks), volume.class_count, ids)


def binarize_mask(mask: np.ndarray, class_count: int) -> np.ndarray:
    """One-hot a label mask with values in ``1..C`` into ``C`` binary masks.

    Works for any input shape; the class axis is prepended, so a ``(K, H, W)``
    stack becomes ``(C, K, H, W)``.
    """
    mask = np.asarray(mask)
    if mask.size and (mask.min() < 1 or mask.max() > class_count):
        raise InvalidLabelError(f"mask values must lie in 1..{class_count}, found {mask.min()}..{mask.max()}")
    classes = np.arange(1, class_count + 1).reshape((class_count,) + (1,) * mask.ndim)
    return (mask[None] == classes).astype(np.uint8)


def episode_to_binary(episode: Episode) -> List[BinaryEpisode]:
    support = binarize_mask(episode.support_masks, episode.class_count)
    query = None if episode.query_mask is None else binarize_mask(episode.query_mask, episode.class_count)
    return [
        BinaryEpisode(
            episode.support_images,
            support[j],
            episode.query_image,
            None if query is None else query[j],
            j + 1,
        )
        for j in range(episode.class_count)
    ]


def sample_training_episode(rng: np.random.Generator, source_datasets: Sequence[SourceDataset],
                            shots: int) -> Episode:
    """Pick a source uniformly, then K supports and one query without replacement."""
    if not source_datasets:
        raise SamplingError("no source datasets")
    ds = source_datasets[int(rng.integers(len(source_datasets)))]
    if len(ds) < shots + 1:
        raise SamplingError(f"dataset {ds.dataset_id!r} has {len(ds)} samples, need >= {shots + 1}")
    idx = rng.choice(len(ds), size=shots + 1, replace=False)
    sup, q = idx[:shots], idx[shots]
    return Episode(ds.images[sup], ds.masks[sup], ds.images[q], ds.masks[q], ds.class_count, ds.dataset_id)


class EpisodeSampler:
    """Stateful episode stream; one per worker, seeded from ``root_seed`` and ``worker_id``."""

    def __init__(self, source_datasets: Sequence[SourceDataset], shots: int, seed: int = 0, worker_id: int = 0):
        for ds in source_datasets:
            if len(ds) < shots + 1:
                raise SamplingError(f"dataset {ds.dataset_id!r} has {len(ds)} samples, need >= {shots + 1}")
        self.sources = list(source_datasets)
        self.shots = shots
        self.rng = np.random.default_rng([seed, worker_id])

    def __iter__(self):
        return self

    def __next__(self) -> Episode:
        return sample_training_episode(self.rng, self.sources, self.shots)

    def batch(self, size: int) -> List[Episode]:
        return [next(self) for _ in range(size)]


def spanning_indices(start: int, stop: int, shots: int) -> List[int]:
    """K indices evenly spread over the inclusive range ``[start, stop]``.

    Positions are truncated towards ``start``: for ``[0, 686]`` and K=5 this
    gives 0, 171, 343, 514, 686.
    """
    if shots < 1:
        raise ValueError("shots must be >= 1")
    available = stop - start + 1
    if shots > available:
        raise ValueError(f"K={shots} exceeds {available} available slices")
    if shots == 1:
        return [start]
    step = (stop - start) / (shots - 1)
    return sorted({start + math.floor(i * step + 1e-9) for i in range(shots)})


def nearest_index(candidates: Sequence[int], query_index: int) -> int:
    """Candidate closest to ``query_index``; ties go to the lower index."""
    if not candidates:
        raise ValueError("no candidate slices")
    return min(candidates, key=lambda c: (abs(c - query_index), c))


def build_support_set(train_indices: Sequence[int], shots: int, mode: str = "spanning",
                      query_index: Optional[int] = None) -> List[int]:
    """Choose support slice indices from the (sorted) training slices of one axis.

    ``spanning`` returns K indices covering the training extent; ``nearest``
    returns the single spanning support closest to ``query_index``.
    """
    train_indices = sorted(train_indices)
    if shots > len(train_indices):
        raise ValueError(f"K={shots} exceeds {len(train_indices)} training slices")
    span = spanning_indices(train_indices[0], train_indices[-1], shots)
    available = set(train_indices)
    # snap to real training slices when the training extent has holes
    span = sorted({nearest_index(train_indices, s) if s not in available else s for s in span})
    if mode == "spanning":
        return span
    if mode == "nearest":
        if query_index is None:
            raise ValueError("nearest mode requires query_index")
        return [nearest_index(span, query_index)]
    raise ValueError(f"unknown support mode {mode!r}")


def dump_episode(episode: Episode, directory, slice_ids: Optional[Sequence] = None, mode: str = "") -> Path:
    """Write an episode as a volume-format payload plus a manifest, for debugging."""
    from .volume import SeismicVolume, save_volume

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    images = np.concatenate([episode.support_images, episode.query_image[None]])
    masks = None
    if episode.query_mask is not None:
        masks = np.concatenate([episode.support_masks, episode.query_mask[None]]).astype(np.uint8)
    save_volume(SeismicVolume(images.astype(np.float32), masks, episode.class_count), directory / "episode")
    manifest = {
        "dataset_id": episode.dataset_id,
        "K": episode.shots,
        "C": episode.class_count,
        "mode": mode,
        "slice_indices": [list(s) if isinstance(s, tuple) else s for s in (slice_ids or [])],
        "layout": "supports then query along axis 0",
    }
    path = directory / "episode_manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path
