"""Volumetric data model and geometric primitives.

Arrays are indexed ``[x, y, z]``; the flat on-disk order is x-fastest
(Fortran order), which is what :mod:`aneuseg.nifti` reads and writes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

Triple = tuple[int, int, int]


def _triple(values: Iterable, cast=float) -> tuple:
    out = tuple(cast(v) for v in values)
    if len(out) != 3:
        raise ValueError(f"expected a triple, got {out!r}")
    return out


@dataclass(eq=False)
class Volume3D:
    """Scalar 3D image with voxel spacing (mm) and origin (mm)."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {self.data.shape}")
        if min(self.data.shape) < 1:
            raise ValueError(f"volume dims must be positive, got {self.data.shape}")
        self.spacing = _triple(self.spacing)
        self.origin = _triple(self.origin)
        if min(self.spacing) <= 0:
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        self._check_values()

    def _check_values(self) -> None:
        if self.data.dtype.kind == "f" and not np.isfinite(self.data).all():
            raise ValueError("volume contains non-finite values")

    @property
    def dims(self) -> Triple:
        return tuple(int(n) for n in self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def like(self, data: np.ndarray, cls: type | None = None) -> "Volume3D":
        """New volume with the same geometry and different data."""
        cls = cls or type(self)
        return cls(np.asarray(data), self.spacing, self.origin)

    def same_geometry(self, other: "Volume3D") -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing)
            and np.allclose(self.origin, other.origin)
        )

    def bounds(self) -> "Region":
        return Region((0, 0, 0), self.dims)


class LabelVolume(Volume3D):
    """Integer label map; 0 is background."""

    def __post_init__(self) -> None:
        data = np.asarray(self.data)
        if data.dtype.kind == "b":
            data = data.astype(np.uint8)
        elif data.dtype.kind == "f":
            if not np.all(np.isfinite(data)) or np.any(data != np.round(data)):
                raise ValueError("label volume has fractional values")
            data = data.astype(np.int64)
        self.data = data
        super().__post_init__()

    def _check_values(self) -> None:
        if self.data.dtype.kind not in "iu":
            raise ValueError(f"label volume needs an integer dtype, got {self.data.dtype}")
        if self.data.size and self.data.min() < 0:
            raise ValueError("label volume has negative values")


def require_same_geometry(*volumes: Volume3D) -> None:
    first = volumes[0]
    for other in volumes[1:]:
        if not first.same_geometry(other):
            raise ValueError(
                f"geometry mismatch: dims {first.dims} vs {other.dims}, "
                f"spacing {first.spacing} vs {other.spacing}"
            )


@dataclass(frozen=True)
class Region:
    """Axis-aligned voxel box; ``start`` may be negative (padded crops)."""

    start: Triple
    size: Triple

    def __post_init__(self) -> None:
        object.__setattr__(self, "start", _triple(self.start, int))
        object.__setattr__(self, "size", _triple(self.size, int))
        if min(self.size) <= 0:
            raise ValueError(f"region size must be positive, got {self.size}")

    @classmethod
    def centered(cls, center: Sequence[int], size: int | Sequence[int]) -> "Region":
        """Box of ``size`` whose voxel ``size // 2`` sits on ``center``."""
        size = (size,) * 3 if np.isscalar(size) else tuple(size)
        start = tuple(int(c) - s // 2 for c, s in zip(center, size))
        return cls(start, size)

    @property
    def stop(self) -> Triple:
        return tuple(a + s for a, s in zip(self.start, self.size))

    @property
    def center(self) -> Triple:
        return tuple(a + s // 2 for a, s in zip(self.start, self.size))

    @property
    def volume(self) -> int:
        return int(np.prod(self.size))

    def intersect(self, other: "Region") -> "Region | None":
        lo = np.maximum(self.start, other.start)
        hi = np.minimum(self.stop, other.stop)
        if np.any(hi <= lo):
            return None
        return Region(tuple(lo), tuple(hi - lo))

    def contains(self, point: Sequence[int]) -> bool:
        return all(a <= p < b for p, a, b in zip(point, self.start, self.stop))

    def to_dict(self) -> dict:
        return {"start": list(self.start), "size": list(self.size)}


def _overlap_slices(region: Region, dims: Triple):
    """Slices into the source array and into a region-shaped array."""
    inter = region.intersect(Region((0, 0, 0), dims))
    if inter is None:
        return None
    src = tuple(slice(a, b) for a, b in zip(inter.start, inter.stop))
    dst = tuple(
        slice(a - r, b - r) for a, b, r in zip(inter.start, inter.stop, region.start)
    )
    return src, dst


def crop_array(data: np.ndarray, r: Region, pad_value: float = 0) -> np.ndarray:
    out = np.full(r.size, pad_value, dtype=data.dtype)
    slices = _overlap_slices(r, data.shape)
    if slices is not None:
        src, dst = slices
        out[dst] = data[src]
    return out


def crop(v: Volume3D, r: Region, pad_value: float = 0) -> Volume3D:
    """Extract ``r`` from ``v``; voxels outside ``v`` take ``pad_value``.

    The result's origin is moved to the region start so world positions are
    preserved; the region itself is the placement record used by :func:`paste`.
    """
    out = crop_array(v.data, r, pad_value)
    origin = tuple(o + a * s for o, a, s in zip(v.origin, r.start, v.spacing))
    return type(v)(out, v.spacing, origin)


def paste(dst: Volume3D, src: Volume3D, r: Region) -> Volume3D:
    """Copy of ``dst`` with the part of ``src`` that lands inside it written at ``r``."""
    if src.dims != r.size:
        raise ValueError(f"source dims {src.dims} do not match region size {r.size}")
    out = dst.data.copy()
    slices = _overlap_slices(r, dst.dims)
    if slices is not None:
        inside, local = slices
        out[inside] = src.data[local]
    return dst.like(out)


def resample(v: Volume3D, factor: Sequence[float], mode: str = "nearest") -> Volume3D:
    """Rescale the grid by ``factor`` per axis; output dims are ``round(dims * factor)``.

    Voxel centres are mapped with the align-centres convention, so an integer
    upsampling factor in nearest mode is pure block replication.
    """
    factor = _triple(factor)
    if min(factor) <= 0:
        raise ValueError(f"resample factor must be positive, got {factor}")
    if mode not in ("nearest", "linear"):
        raise ValueError(f"unknown resample mode {mode!r}")
    new_dims = tuple(int(round(n * f)) for n, f in zip(v.dims, factor))
    if min(new_dims) < 1:
        raise ValueError(f"resampling {v.dims} by {factor} yields empty dims {new_dims}")
    if new_dims == v.dims:
        return v.like(v.data.copy())

    axes = []
    for n_in, n_out in zip(v.dims, new_dims):
        scale = n_in / n_out
        axes.append((np.arange(n_out) + 0.5) * scale - 0.5)
    if mode == "nearest":
        idx = [
            np.clip(np.floor(a + 0.5).astype(int), 0, n - 1) for a, n in zip(axes, v.dims)
        ]
        out = v.data[np.ix_(*idx)]
    else:
        grid = np.meshgrid(*axes, indexing="ij")
        out = ndimage.map_coordinates(
            v.data.astype(np.float64), grid, order=1, mode="nearest"
        ).astype(v.data.dtype if v.data.dtype.kind == "f" else np.float32)
    spacing = tuple(s * n_in / n_out for s, n_in, n_out in zip(v.spacing, v.dims, new_dims))
    cls = type(v) if mode == "nearest" else Volume3D
    return cls(out, spacing, v.origin)


@dataclass
class Component:
    indices: np.ndarray  # (n, 3) voxel coordinates
    centroid: tuple[float, float, float]
    voxel_count: int
    bbox: Region


@dataclass
class ComponentSet:
    components: list[Component] = field(default_factory=list)
    labels: np.ndarray | None = None  # component id per voxel, 0 = none

    def __len__(self) -> int:
        return len(self.components)

    def __iter__(self):
        return iter(self.components)

    def __getitem__(self, i: int) -> Component:
        return self.components[i]


def connectivity_structure(connectivity: int) -> np.ndarray:
    if connectivity == 6:
        return ndimage.generate_binary_structure(3, 1)
    if connectivity == 26:
        return ndimage.generate_binary_structure(3, 3)
    raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")


def connected_components(m: Volume3D | np.ndarray, connectivity: int = 26) -> ComponentSet:
    """Label the nonzero voxels of ``m`` into maximal connected components."""
    data = m.data if isinstance(m, Volume3D) else np.asarray(m)
    labels, n = ndimage.label(data != 0, structure=connectivity_structure(connectivity))
    comps = []
    if n:
        coords = np.argwhere(labels)
        ids = labels[tuple(coords.T)]
        order = np.argsort(ids, kind="stable")
        coords, ids = coords[order], ids[order]
        splits = np.searchsorted(ids, np.arange(2, n + 1))
        for idx in np.split(coords, splits):
            lo = idx.min(axis=0)
            hi = idx.max(axis=0)
            comps.append(
                Component(
                    indices=idx,
                    centroid=tuple(float(c) for c in idx.mean(axis=0)),
                    voxel_count=len(idx),
                    bbox=Region(tuple(lo), tuple(hi - lo + 1)),
                )
            )
    return ComponentSet(comps, labels)
