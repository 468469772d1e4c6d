"""Volumetric data types and grid operations (center crop / pad-back).

A volume is a 3-D grid with voxel spacing and a world-space origin, both in
millimeters.  ``ScalarVolume`` carries real intensities as float64;
``LabelVolume`` carries small integer codes: 0 is background, 1-13 are the
thalamic nuclei, and 100 marks unlabeled voxels inside the thalamic region.
Volumes are treated as immutable after construction and are safe to share
across threads.

In-memory arrays have shape ``(nx, ny, nz)``.  On disk (see :mod:`catnus.io`)
the voxel stream is written x-fastest / z-slowest.  Spacing and origin are
kept at single-precision granularity so that file round trips through the
32-bit header fields are exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

BACKGROUND = 0
SENTINEL_UNLABELED = 100
NUCLEUS_CODES = tuple(range(1, 14))
VALID_LABEL_CODES = frozenset(range(14)) | {SENTINEL_UNLABELED}


def _f32_triple(values, name):
    vals = tuple(float(np.float32(v)) for v in values)
    if len(vals) != 3:
        raise ValueError(f"{name} must have 3 components, got {len(vals)}")
    return vals


@dataclass(frozen=True)
class ScalarVolume:
    """A 3-D grid of real intensities.

    Attributes
    ----------
    data : np.ndarray
        float64 array of shape ``(nx, ny, nz)``; all values finite.
    spacing : tuple of 3 floats
        Voxel edge lengths in millimeters, all > 0.
    origin : tuple of 3 floats
        World position of voxel (0, 0, 0) in millimeters.
    """

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3:
            raise ValueError(f"scalar volume must be 3-D, got shape {arr.shape}")
        if arr.size == 0:
            raise ValueError("scalar volume must contain at least one voxel")
        if not np.all(np.isfinite(arr)):
            raise ValueError("scalar volume contains non-finite values")
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", _f32_triple(self.spacing, "spacing"))
        object.__setattr__(self, "origin", _f32_triple(self.origin, "origin"))
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")

    @property
    def dims(self):
        return self.data.shape

    def with_data(self, data) -> "ScalarVolume":
        """Same grid, new voxel values."""
        return replace(self, data=data)


@dataclass(frozen=True)
class LabelVolume:
    """A 3-D grid of label codes in {0..13} | {100}.

    Code 0 is background, 1-13 are nuclei (or group codes after unification),
    100 is the unlabeled-within-thalamus sentinel.
    """

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ValueError(f"label volume must be 3-D, got shape {arr.shape}")
        if arr.size == 0:
            raise ValueError("label volume must contain at least one voxel")
        if not np.issubdtype(arr.dtype, np.integer):
            if not np.all(arr == np.round(arr)):
                raise ValueError("label volume has non-integer values")
        arr64 = arr.astype(np.int64, copy=False)
        bad = ~np.isin(arr64, list(VALID_LABEL_CODES))
        if bad.any():
            first = int(np.argmax(bad.ravel(order="F")))
            value = int(arr64.ravel(order="F")[first])
            raise ValueError(
                f"out-of-range label {value} at flat voxel index {first}"
            )
        object.__setattr__(self, "data", arr64.astype(np.uint8))
        object.__setattr__(self, "spacing", _f32_triple(self.spacing, "spacing"))
        object.__setattr__(self, "origin", _f32_triple(self.origin, "origin"))
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")

    @property
    def dims(self):
        return self.data.shape

    def with_data(self, data) -> "LabelVolume":
        return replace(self, data=data)


@dataclass(frozen=True)
class LabelSchema:
    """The 13-nucleus code table: (code, abbreviation, full name).

    Background is fixed at code 0 and the unlabeled sentinel at 100; neither
    appears in ``entries``.
    """

    entries: tuple = field(default=())

    def __post_init__(self):
        entries = tuple((int(c), str(a), str(n)) for c, a, n in self.entries)
        codes = [c for c, _, _ in entries]
        if codes != list(range(1, len(codes) + 1)):
            raise ValueError("nucleus codes must be unique and contiguous from 1")
        abbrevs = [a for _, a, _ in entries]
        if len(set(abbrevs)) != len(abbrevs):
            raise ValueError("nucleus abbreviations must be unique")
        object.__setattr__(self, "entries", entries)

    @classmethod
    def default(cls) -> "LabelSchema":
        """The shipped 13-nucleus table.

        The pulvinar inferior abbreviation is written "PuI" throughout; some
        listings spell the same structure "Pul".
        """
        return cls(
            entries=(
                (1, "AN", "anterior nucleus"),
                (2, "CL", "central lateral nucleus"),
                (3, "CM", "centromedian nucleus"),
                (4, "LD", "lateral dorsal nucleus"),
                (5, "LP", "lateral posterior nucleus"),
                (6, "MD", "mediodorsal nucleus"),
                (7, "PuA", "anterior pulvinar nucleus"),
                (8, "PuI", "inferior pulvinar nucleus"),
                (9, "VA", "ventral anterior nucleus"),
                (10, "VLA", "ventral lateral anterior nucleus"),
                (11, "VLP", "ventral lateral posterior nucleus"),
                (12, "VPL", "ventral posterior lateral nucleus"),
                (13, "VPM", "ventral posterior medial nucleus"),
            )
        )

    @property
    def codes(self):
        return tuple(c for c, _, _ in self.entries)

    def abbreviation(self, code: int) -> str:
        for c, a, _ in self.entries:
            if c == code:
                return a
        raise KeyError(f"no nucleus with code {code}")

    def full_name(self, code: int) -> str:
        for c, _, n in self.entries:
            if c == code:
                return n
        raise KeyError(f"no nucleus with code {code}")


def _crop_start(dims, target_dims):
    # odd remainders drop the extra voxel on the high-index side
    return tuple((d - t) // 2 for d, t in zip(dims, target_dims))


def crop_center(volume, target_dims):
    """Extract the centered ``target_dims`` block of a volume.

    When ``dims - target`` is odd along an axis the extra voxel is dropped on
    the high-index side.  The origin shifts so retained voxels keep their
    world coordinates.
    """
    target_dims = tuple(int(t) for t in target_dims)
    dims = volume.dims
    if len(target_dims) != 3 or any(t < 1 for t in target_dims):
        raise ValueError(f"invalid target dims {target_dims}")
    if any(t > d for d, t in zip(dims, target_dims)):
        raise ValueError(f"crop target {target_dims} exceeds volume dims {dims}")
    start = _crop_start(dims, target_dims)
    sl = tuple(slice(s, s + t) for s, t in zip(start, target_dims))
    new_origin = tuple(
        o + s * sp for o, s, sp in zip(volume.origin, start, volume.spacing)
    )
    return replace(volume, data=volume.data[sl].copy(), origin=new_origin)


def pad_to(volume, target_dims, fill=0):
    """Pad a volume out to ``target_dims``, inverse of :func:`crop_center`.

    Padding mirrors the crop tie-break: the extra voxel of an odd difference
    goes on the high-index side, so ``pad_to(crop_center(v, t), v.dims)``
    restores every retained voxel's value and grid coordinate.
    """
    target_dims = tuple(int(t) for t in target_dims)
    dims = volume.dims
    if any(t < d for d, t in zip(dims, target_dims)):
        raise ValueError(f"pad target {target_dims} smaller than volume dims {dims}")
    pad_low = _crop_start(target_dims, dims)
    pad = tuple((lo, t - d - lo) for lo, t, d in zip(pad_low, target_dims, dims))
    if isinstance(volume, LabelVolume):
        fill = int(fill)
        if fill not in VALID_LABEL_CODES:
            raise ValueError(f"label fill value {fill} is not a valid code")
    data = np.pad(volume.data, pad, mode="constant", constant_values=fill)
    new_origin = tuple(
        o - lo * sp for o, lo, sp in zip(volume.origin, pad_low, volume.spacing)
    )
    return replace(volume, data=data, origin=new_origin)
