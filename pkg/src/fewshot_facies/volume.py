"""Seismic volume ingestion, normalization, splitting and patching.

Volumes are indexed ``(inline, crossline, depth)``.  A 2D slice taken along
``inline`` or ``crossline`` is returned depth-major, i.e. rows are depth and
columns run along the other horizontal axis, which is the usual way seismic
sections are displayed.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

AXES = ("inline", "crossline", "depth")
SLICE_AXES = ("inline", "crossline")


class InvalidInputError(ValueError):
    pass


class InvalidSplitError(ValueError):
    pass


class VolumeFormatError(ValueError):
    """Raised when an on-disk volume does not match its sidecar."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class SeismicVolume:
    intensities: np.ndarray
    labels: Optional[np.ndarray] = None
    class_count: int = 1
    axis_names: Tuple[str, str, str] = AXES

    def __post_init__(self):
        if self.intensities.ndim != 3:
            raise InvalidInputError(f"intensities must be 3D, got shape {self.intensities.shape}")
        if self.class_count < 1:
            raise InvalidInputError("class_count must be positive")
        if self.labels is not None:
            if self.labels.shape != self.intensities.shape:
                raise InvalidInputError(
                    f"labels shape {self.labels.shape} != intensities shape {self.intensities.shape}"
                )
            if self.labels.size and (self.labels.min() < 1 or self.labels.max() > self.class_count):
                raise InvalidInputError(f"labels must lie in 1..{self.class_count}")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.intensities.shape)

    def with_intensities(self, values: np.ndarray) -> "SeismicVolume":
        return SeismicVolume(values, self.labels, self.class_count, self.axis_names)

    def n_slices(self, axis: str) -> int:
        return self.shape[_axis_index(axis)]

    def slice_image(self, axis: str, index: int) -> np.ndarray:
        return _take_slice(self.intensities, axis, index)

    def slice_mask(self, axis: str, index: int) -> np.ndarray:
        if self.labels is None:
            raise InvalidInputError("volume has no labels")
        return _take_slice(self.labels, axis, index)


@dataclass(frozen=True)
class Patch:
    pixels: np.ndarray
    mask: Optional[np.ndarray]
    source: Tuple[str, int, int, int]  # (axis, slice_index, row_offset, col_offset)


@dataclass(frozen=True)
class Slice:
    axis: str
    index: int
    image: np.ndarray
    mask: Optional[np.ndarray]


@dataclass
class SplitSpec:
    """Half-open ``(start, stop)`` slice intervals per partition and axis."""

    train_ranges: Dict[str, List[Tuple[int, int]]] = field(default_factory=dict)
    val_ranges: Dict[str, List[Tuple[int, int]]] = field(default_factory=dict)
    test_ranges: Dict[str, List[Tuple[int, int]]] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "SplitSpec":
        def conv(part):
            return {ax: [tuple(int(v) for v in r) for r in rs] for ax, rs in (part or {}).items()}

        return cls(conv(d.get("train")), conv(d.get("val")), conv(d.get("test")))

    def to_dict(self) -> dict:
        def conv(part):
            return {ax: [list(r) for r in rs] for ax, rs in part.items()}

        return {"train": conv(self.train_ranges), "val": conv(self.val_ranges), "test": conv(self.test_ranges)}

    def partitions(self) -> Dict[str, Dict[str, List[Tuple[int, int]]]]:
        return {"train": self.train_ranges, "val": self.val_ranges, "test": self.test_ranges}

    def validate(self, shape: Sequence[int]) -> None:
        per_axis: Dict[str, List[Tuple[int, int]]] = {}
        for part in self.partitions().values():
            for axis, ranges in part.items():
                if axis not in SLICE_AXES:
                    raise InvalidSplitError(f"unknown split axis {axis!r}")
                extent = shape[_axis_index(axis)]
                for start, stop in ranges:
                    if not 0 <= start < stop <= extent:
                        raise InvalidSplitError(
                            f"range [{start}, {stop}) on {axis} outside extent [0, {extent})"
                        )
                    per_axis.setdefault(axis, []).append((start, stop))
        for axis, ranges in per_axis.items():
            ranges = sorted(ranges)
            for (a0, a1), (b0, b1) in zip(ranges, ranges[1:]):
                if b0 < a1:
                    raise InvalidSplitError(f"overlapping ranges on {axis}: [{a0},{a1}) and [{b0},{b1})")


def _axis_index(axis: str) -> int:
    try:
        return AXES.index(axis)
    except ValueError:
        raise InvalidInputError(f"unknown axis {axis!r}") from None


def _take_slice(arr: np.ndarray, axis: str, index: int) -> np.ndarray:
    if axis == "inline":
        return arr[index, :, :].T
    if axis == "crossline":
        return arr[:, index, :].T
    raise InvalidInputError(f"slices are taken along inline or crossline, not {axis!r}")


def _require_nonempty(volume: SeismicVolume) -> None:
    if volume.intensities.size == 0:
        raise InvalidInputError("empty volume")


def percentile_clip(volume: SeismicVolume, lower_pct: float = 5.0, upper_pct: float = 95.0) -> SeismicVolume:
    """Clip amplitudes to the ``[lower_pct, upper_pct]`` percentile window of the whole volume."""
    _require_nonempty(volume)
    if not 0.0 <= lower_pct < upper_pct <= 100.0:
        raise InvalidInputError(f"need 0 <= lower_pct < upper_pct <= 100, got {lower_pct}, {upper_pct}")
    lo, hi = np.percentile(volume.intensities, [lower_pct, upper_pct])
    clipped = np.clip(volume.intensities, lo, hi).astype(volume.intensities.dtype, copy=False)
    return volume.with_intensities(clipped)


def rescale_to_byte_range(volume: SeismicVolume) -> SeismicVolume:
    _require_nonempty(volume)
    x = volume.intensities.astype(np.float64)
    lo, hi = x.min(), x.max()
    if hi == lo:
        out = np.zeros_like(x)
    else:
        out = (x - lo) * (255.0 / (hi - lo))
    return volume.with_intensities(out.astype(np.float32))


def normalize(volume: SeismicVolume, clip: Optional[Tuple[float, float]] = (5.0, 95.0),
              depth_crop: Optional[Tuple[int, int]] = None) -> SeismicVolume:
    """Crop depth, percentile-clip and rescale to [0, 255]; the standard preprocessing chain."""
    if depth_crop is not None:
        d0, d1 = depth_crop
        if not 0 <= d0 < d1 <= volume.shape[2]:
            raise InvalidInputError(f"depth crop [{d0}, {d1}) outside depth {volume.shape[2]}")
        labels = None if volume.labels is None else volume.labels[:, :, d0:d1]
        volume = SeismicVolume(volume.intensities[:, :, d0:d1], labels, volume.class_count, volume.axis_names)
    if clip is not None:
        volume = percentile_clip(volume, *clip)
    return rescale_to_byte_range(volume)


def patch_offsets(length: int, patch_size: int, stride: int) -> List[int]:
    offsets = list(range(0, length - patch_size + 1, stride))
    if offsets[-1] != length - patch_size:
        offsets.append(length - patch_size)
    return offsets


def extract_patches(volume: SeismicVolume, axis: str, patch_size: int = 256, stride: int = 256,
                    indices: Optional[Sequence[int]] = None) -> List[Patch]:
    """Tile every slice along ``axis`` with square patches.

    The last row/column of patches is anchored flush to the slice edge, so
    every pixel is covered at least once and nothing is padded.
    """
    if stride < 1:
        raise InvalidInputError("stride must be >= 1")
    if indices is None:
        indices = range(volume.n_slices(axis))
    patches = []
    for idx in indices:
        image = volume.slice_image(axis, idx)
        mask = volume.slice_mask(axis, idx) if volume.labels is not None else None
        patches.extend(slice_patches(image, mask, patch_size, stride, source=(axis, idx)))
    return patches


def slice_patches(image: np.ndarray, mask: Optional[np.ndarray], patch_size: int, stride: int,
                  source: Tuple[str, int] = ("", -1)) -> List[Patch]:
    h, w = image.shape
    if patch_size > h or patch_size > w:
        raise InvalidInputError(f"patch size {patch_size} exceeds slice {h}x{w}")
    out = []
    for r in patch_offsets(h, patch_size, stride):
        for c in patch_offsets(w, patch_size, stride):
            px = np.ascontiguousarray(image[r:r + patch_size, c:c + patch_size])
            mk = None if mask is None else np.ascontiguousarray(mask[r:r + patch_size, c:c + patch_size])
            out.append(Patch(px, mk, (source[0], source[1], r, c)))
    return out


def iter_slices(volume: SeismicVolume, axis: str, indices: Optional[Sequence[int]] = None) -> Iterator[Slice]:
    if indices is None:
        indices = range(volume.n_slices(axis))
    for idx in indices:
        mask = volume.slice_mask(axis, idx) if volume.labels is not None else None
        yield Slice(axis, idx, volume.slice_image(axis, idx), mask)


def apply_split(volume: SeismicVolume, spec: SplitSpec) -> Dict[str, List[Slice]]:
    """Assign whole slices to train/val/test; slices outside every range are dropped."""
    spec.validate(volume.shape)
    out: Dict[str, List[Slice]] = {}
    for name, part in spec.partitions().items():
        slices = []
        for axis in SLICE_AXES:
            for start, stop in part.get(axis, []):
                slices.extend(iter_slices(volume, axis, range(start, stop)))
        out[name] = slices
    return out


def synthesize_layered_volume(seed: int, shape: Tuple[int, int, int] = (64, 64, 64), class_count: int = 4,
                              undulation: float = 4.0, noise_sd: float = 8.0) -> SeismicVolume:
    """Build a synthetic layer-cake volume with undulating interfaces.

    Labels are ``class_count`` depth-ordered bands.  All interfaces share one
    smooth displacement field (sum of two oblique sinusoids with random
    phase/wavelength), scaled to amplitude ``undulation`` voxels, so bands
    never cross.  Band mean amplitudes are equally spaced in [40, 215] and
    assigned to bands by a seeded permutation.
    """
    ni, nx, nd = shape
    if class_count < 2:
        raise InvalidInputError("class_count must be >= 2")
    if class_count > nd:
        raise InvalidInputError(f"class_count {class_count} exceeds depth {nd}")
    rng = np.random.default_rng(seed)

    ii, xx = np.meshgrid(np.arange(ni), np.arange(nx), indexing="ij")
    field_ = np.zeros((ni, nx))
    for _ in range(2):
        wl_i = rng.uniform(0.4, 1.0) * ni
        wl_x = rng.uniform(0.4, 1.0) * nx
        phase = rng.uniform(0, 2 * np.pi)
        field_ += np.sin(2 * np.pi * (ii / wl_i + xx / wl_x) + phase)
    field_ *= undulation / 2.0

    base = nd * np.arange(1, class_count) / class_count
    depth = np.arange(nd)
    interfaces = base[None, None, :] + field_[:, :, None]
    labels = 1 + (depth[None, None, :, None] >= interfaces[:, :, None, :]).sum(-1)

    means = np.linspace(40.0, 215.0, class_count)[rng.permutation(class_count)]
    intensities = means[labels - 1] + noise_sd * rng.standard_normal(shape)
    return SeismicVolume(intensities.astype(np.float32), labels.astype(np.uint8), class_count)


def _paths(path) -> Tuple[Path, Path, Path]:
    p = Path(path)
    if p.suffix == ".json":
        p = p.with_suffix("")
    return p.with_suffix(".json"), p.with_suffix(".f32"), p.with_suffix(".labels.u8")


def save_volume(volume: SeismicVolume, path) -> Path:
    sidecar, payload, labels = _paths(path)
    sidecar.parent.mkdir(parents=True, exist_ok=True)
    volume.intensities.astype("<f4").tofile(payload)
    if volume.labels is not None:
        volume.labels.astype("u1").tofile(labels)
    meta = {
        "shape": list(volume.shape),
        "class_count": int(volume.class_count),
        "axes": list(volume.axis_names),
        "dtype": "f32",
        "label_dtype": "u8",
    }
    sidecar.write_text(json.dumps(meta, indent=2))
    return sidecar


def load_volume(path) -> SeismicVolume:
    sidecar, payload, labels_path = _paths(path)
    if not sidecar.exists():
        raise VolumeFormatError("sidecar", f"missing {sidecar}")
    try:
        meta = json.loads(sidecar.read_text())
    except json.JSONDecodeError as e:
        raise VolumeFormatError("sidecar", str(e)) from None
    for key in ("shape", "class_count", "axes", "dtype"):
        if key not in meta:
            raise VolumeFormatError(key, "missing from sidecar")
    shape = tuple(int(s) for s in meta["shape"])
    if len(shape) != 3:
        raise VolumeFormatError("shape", f"expected 3 dims, got {shape}")
    if meta["dtype"] != "f32":
        raise VolumeFormatError("dtype", f"unsupported {meta['dtype']!r}")
    if list(meta["axes"]) != list(AXES):
        raise VolumeFormatError("axes", f"expected {list(AXES)}, got {meta['axes']}")
    class_count = int(meta["class_count"])
    if not payload.exists():
        raise VolumeFormatError("payload", f"missing {payload}")
    data = np.fromfile(payload, dtype="<f4")
    if data.size != int(np.prod(shape)):
        raise VolumeFormatError("shape", f"sidecar shape {list(shape)} needs {int(np.prod(shape))} values, "
                                         f"payload has {data.size}")
    labels = None
    if labels_path.exists():
        if meta.get("label_dtype", "u8") != "u8":
            raise VolumeFormatError("label_dtype", f"unsupported {meta['label_dtype']!r}")
        labels = np.fromfile(labels_path, dtype="u1")
        if labels.size != data.size:
            raise VolumeFormatError("labels", f"label payload has {labels.size} values, expected {data.size}")
        labels = labels.reshape(shape)
        if labels.size and (labels.min() < 1 or labels.max() > class_count):
            raise VolumeFormatError("labels", f"values outside 1..{class_count} "
                                              f"(found {labels.min()}..{labels.max()})")
    return SeismicVolume(data.reshape(shape).astype(np.float32), labels, class_count, tuple(meta["axes"]))
