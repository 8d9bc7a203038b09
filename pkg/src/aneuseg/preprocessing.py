"""Vessel extraction, normalization, contour channel, label preparation, VOI
sampling, augmentation and subject-level splitting."""

from __future__ import annotations

import json
import math
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage, special

from .volume import (
    LabelVolume,
    Region,
    Volume3D,
    connected_components,
    connectivity_structure,
    crop,
    require_same_geometry,
)

DEFAULT_RECIPES = (
    "identity",
    "flip_x",
    "flip_y",
    "flip_z",
    "gaussian",
    "equalize",
    "gaussian+flip_x",
    "equalize+flip_x",
)
GEOMETRIC_OPS = {"identity", "flip_x", "flip_y", "flip_z"}
INTENSITY_OPS = {"gaussian", "equalize"}


class DegenerateVolumeWarning(UserWarning):
    """Input has no usable contrast (constant intensities or zero variance)."""


@dataclass
class PreprocessConfig:
    vessel_threshold_quantile: float = 0.99
    min_vessel_component: int = 50
    smooth_dilate_radius: int = 1
    adaptive_dilate_clamp: tuple[int, int] = (1, 4)
    voi_size: int = 64
    augmentation_recipes: tuple[str, ...] = DEFAULT_RECIPES
    gaussian_sigma: float = 0.5
    equalize_bins: int = 256
    split_ratio: float = 0.8
    rng_seed: int = 0

    def __post_init__(self) -> None:
        self.adaptive_dilate_clamp = tuple(int(v) for v in self.adaptive_dilate_clamp)
        self.augmentation_recipes = tuple(self.augmentation_recipes)
        if not 0 < self.vessel_threshold_quantile < 1:
            raise ValueError("vessel_threshold_quantile must lie in (0, 1)")
        if self.smooth_dilate_radius < 1:
            raise ValueError("smooth_dilate_radius must be a positive integer")
        lo, hi = self.adaptive_dilate_clamp
        if not 1 <= lo <= hi:
            raise ValueError("adaptive_dilate_clamp must be (min, max) with 1 <= min <= max")
        if self.voi_size < 8:
            raise ValueError("voi_size must be at least 8")
        if len(self.augmentation_recipes) != 8:
            raise ValueError("exactly 8 augmentation recipes are required")
        for recipe in self.augmentation_recipes:
            _parse_recipe(recipe)
        if not 0 < self.split_ratio < 1:
            raise ValueError("split_ratio must lie in (0, 1)")


@dataclass
class VoiCrop:
    image_channel: Volume3D
    contour_channel: Volume3D
    label: LabelVolume
    placement: Region
    subject_id: str = ""
    recipe: str = "identity"

    def stacked(self) -> np.ndarray:
        """The dual-channel network input, shape (2, s, s, s), float32."""
        return np.stack([self.image_channel.data, self.contour_channel.data]).astype(np.float32)

    def manifest_entry(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "center_xyz": list(self.placement.center),
            "size": list(self.placement.size),
            "label_count": int(np.count_nonzero(self.label.data)),
        }


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def ball_structure(radius: int) -> np.ndarray:
    r = int(radius)
    grid = np.mgrid[-r : r + 1, -r : r + 1, -r : r + 1]
    return (grid**2).sum(axis=0) <= r * r


def extract_vessels(v: Volume3D, cfg: PreprocessConfig) -> LabelVolume:
    """Bright-vessel mask by quantile thresholding plus a component-size filter.

    The threshold is the ``vessel_threshold_quantile`` of the nonzero
    intensities; voxels at or above it are kept, then 26-connected
    components smaller than ``min_vessel_component`` are dropped.
    """
    data = v.data
    empty = LabelVolume(np.zeros(v.dims, np.uint8), v.spacing, v.origin)
    if data.min() == data.max():
        warnings.warn("constant volume: no vessels extracted", DegenerateVolumeWarning)
        return empty
    threshold = np.quantile(data[data != 0], cfg.vessel_threshold_quantile)
    bright = data >= threshold
    if not bright.any():
        warnings.warn("no voxel above the vessel threshold", DegenerateVolumeWarning)
        return empty
    labels, n = ndimage.label(bright, structure=connectivity_structure(26))
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    keep = sizes >= cfg.min_vessel_component
    keep[0] = False
    return LabelVolume(keep[labels].astype(np.uint8), v.spacing, v.origin)


def zscore_normalize(v: Volume3D, mask: Volume3D | np.ndarray | None = None) -> Volume3D:
    """(v - mean) / std with statistics over ``mask`` (or every voxel).

    A zero standard deviation yields an all-zero volume and a
    :class:`DegenerateVolumeWarning`.
    """
    data = v.data.astype(np.float64)
    if mask is not None:
        m = np.asarray(mask.data if isinstance(mask, Volume3D) else mask) != 0
        support = data[m]
    else:
        support = data
    if support.size == 0:
        raise ValueError("normalization mask is empty")
    mu = support.mean()
    sigma = support.std()
    if sigma == 0 or not np.isfinite(sigma):
        warnings.warn("zero variance: normalized volume set to zeros", DegenerateVolumeWarning)
        return Volume3D(np.zeros(v.dims), v.spacing, v.origin)
    return Volume3D((data - mu) / sigma, v.spacing, v.origin)


def extract_contour(mask: Volume3D, cfg: PreprocessConfig) -> Volume3D:
    """Sobel gradient magnitude of the slightly dilated vessel mask."""
    m = np.asarray(mask.data) != 0
    out = np.zeros(mask.dims, dtype=np.float32)
    if m.any():
        dilated = ndimage.binary_dilation(m, structure=ball_structure(cfg.smooth_dilate_radius))
        f = dilated.astype(np.float32)
        grad = sum(ndimage.sobel(f, axis=a) ** 2 for a in range(3))
        out = np.sqrt(grad).astype(np.float32)
    return Volume3D(out, mask.spacing, mask.origin)


def vessel_image(normalized: Volume3D, vessels: Volume3D) -> Volume3D:
    """Normalized intensities restricted to the vessel mask (0 elsewhere)."""
    data = np.where(np.asarray(vessels.data) != 0, normalized.data, 0.0).astype(np.float32)
    return Volume3D(data, normalized.spacing, normalized.origin)


def remap_ruptured(l: LabelVolume) -> LabelVolume:
    """Map ruptured aneurysms (2) to background; 1 stays 1."""
    values = np.unique(l.data)
    if not set(values.tolist()) <= {0, 1, 2}:
        raise ValueError(f"unexpected label values {sorted(set(values.tolist()) - {0, 1, 2})}")
    return l.like((l.data == 1).astype(np.uint8), LabelVolume)


def dilation_radius(extent: int, clamp: tuple[int, int]) -> int:
    lo, hi = clamp
    return min(max(round_half_up(extent / 10), lo), hi)


def adaptive_dilate_labels(l: LabelVolume, cfg: PreprocessConfig) -> LabelVolume:
    """Dilate each aneurysm by a box element whose radius grows with its size.

    radius = clamp(round(D / 10), *adaptive_dilate_clamp), D being the largest
    bounding-box extent of the component in voxels.
    """
    data = np.asarray(l.data)
    if not set(np.unique(data).tolist()) <= {0, 1}:
        raise ValueError("adaptive dilation expects a binary label map")
    out = data.astype(bool).copy()
    for comp in connected_components(data, 26):
        r = dilation_radius(max(comp.bbox.size), cfg.adaptive_dilate_clamp)
        window = Region(tuple(a - r for a in comp.bbox.start), tuple(s + 2 * r for s in comp.bbox.size))
        window = window.intersect(l.bounds())
        local = np.zeros(window.size, dtype=bool)
        local[tuple((comp.indices - np.asarray(window.start)).T)] = True
        grown = ndimage.binary_dilation(local, structure=np.ones((2 * r + 1,) * 3, bool))
        sl = tuple(slice(a, b) for a, b in zip(window.start, window.stop))
        out[sl] |= grown
    return l.like(out.astype(np.uint8), LabelVolume)


def crop_voi_samples(
    img: Volume3D,
    contour: Volume3D,
    l: LabelVolume,
    cfg: PreprocessConfig,
    vessels: Volume3D | None = None,
    subject_id: str = "",
) -> list[VoiCrop]:
    """One VOI per aneurysm centred on its centroid; normal cases get one VOI
    at a seeded-random vessel voxel (or the volume centre without vessels)."""
    require_same_geometry(img, contour, l)
    comps = connected_components(l.data, 26)
    if len(comps):
        centers = [tuple(round_half_up(c) for c in comp.centroid) for comp in comps]
    else:
        rng = np.random.default_rng([cfg.rng_seed, zlib.crc32(subject_id.encode())])
        candidates = np.argwhere(vessels.data) if vessels is not None else np.empty((0, 3))
        if len(candidates):
            centers = [tuple(int(c) for c in candidates[rng.integers(len(candidates))])]
        else:
            centers = [tuple(n // 2 for n in img.dims)]
    return [crop_at(img, contour, l, c, cfg.voi_size, subject_id) for c in centers]


def crop_at(img, contour, l, center, size, subject_id="") -> VoiCrop:
    r = Region.centered(center, size)
    label = crop(l, r, 0)
    return VoiCrop(
        image_channel=crop(img, r, 0),
        contour_channel=crop(contour, r, 0),
        label=LabelVolume(label.data, label.spacing, label.origin),
        placement=r,
        subject_id=subject_id,
    )


def discrete_gaussian_kernel(sigma: float) -> np.ndarray:
    """Lindeberg's discrete Gaussian T(n; t) = exp(-t) I_n(t), t = sigma^2."""
    t = sigma * sigma
    radius = max(1, int(math.ceil(4 * sigma)))
    while special.ive(radius, t) > 1e-12:
        radius += 1
    n = np.arange(-radius, radius + 1)
    kernel = special.ive(np.abs(n), t)
    return kernel / kernel.sum()


def discrete_gaussian(data: np.ndarray, sigma: float) -> np.ndarray:
    kernel = discrete_gaussian_kernel(sigma)
    out = data.astype(np.float64)
    for axis in range(data.ndim):
        out = ndimage.convolve1d(out, kernel, axis=axis, mode="nearest")
    return out.astype(data.dtype if data.dtype.kind == "f" else np.float32)


def equalize_histogram(data: np.ndarray, bins: int = 256) -> np.ndarray:
    """Histogram equalization over the data's own range, mapped back onto it."""
    lo, hi = float(data.min()), float(data.max())
    if hi == lo:
        return data.copy()
    hist, edges = np.histogram(data, bins=bins, range=(lo, hi))
    cdf = np.cumsum(hist).astype(np.float64)
    cdf /= cdf[-1]
    centers = (edges[:-1] + edges[1:]) / 2
    mapped = np.interp(data.ravel(), centers, cdf).reshape(data.shape)
    return (lo + mapped * (hi - lo)).astype(data.dtype if data.dtype.kind == "f" else np.float32)


def _parse_recipe(recipe: str) -> list[str]:
    ops = recipe.split("+")
    for op in ops:
        if op not in GEOMETRIC_OPS | INTENSITY_OPS:
            raise ValueError(f"unknown augmentation op {op!r} in recipe {recipe!r}")
    return ops


def apply_recipe(s: VoiCrop, recipe: str, cfg: PreprocessConfig) -> VoiCrop:
    """Apply ``"a+b"`` as a after b (right to left)."""
    image = s.image_channel.data
    contour = s.contour_channel.data
    label = s.label.data
    for op in reversed(_parse_recipe(recipe)):
        if op.startswith("flip_"):
            axis = "xyz".index(op[-1])
            image, contour, label = (np.flip(a, axis) for a in (image, contour, label))
        elif op == "gaussian":
            image = discrete_gaussian(image, cfg.gaussian_sigma)
        elif op == "equalize":
            image = equalize_histogram(image, cfg.equalize_bins)
    return VoiCrop(
        image_channel=s.image_channel.like(np.ascontiguousarray(image)),
        contour_channel=s.contour_channel.like(np.ascontiguousarray(contour)),
        label=s.label.like(np.ascontiguousarray(label)),
        placement=s.placement,
        subject_id=s.subject_id,
        recipe=recipe,
    )


def augment_x8(s: VoiCrop, cfg: PreprocessConfig) -> list[VoiCrop]:
    return [apply_recipe(s, recipe, cfg) for recipe in cfg.augmentation_recipes]


def split_train_val(samples: Sequence[VoiCrop], cfg: PreprocessConfig) -> tuple[list, list]:
    """Subject-level split at ``split_ratio``; deterministic under ``rng_seed``."""
    subjects = sorted({s.subject_id for s in samples})
    if len(subjects) < 2:
        raise ValueError("splitting needs at least two subjects")
    n_val = round_half_up(len(subjects) * (1 - cfg.split_ratio))
    n_val = min(max(n_val, 1), len(subjects) - 1)
    order = np.random.default_rng(cfg.rng_seed).permutation(len(subjects))
    val_ids = {subjects[i] for i in order[:n_val]}
    train = [s for s in samples if s.subject_id not in val_ids]
    val = [s for s in samples if s.subject_id in val_ids]
    return train, val


def write_manifest(samples: Sequence[VoiCrop], path: str | Path) -> None:
    entries = [s.manifest_entry() for s in samples]
    Path(path).write_text(json.dumps(entries, indent=2) + "\n")


@dataclass
class PreparedSubject:
    """Everything the two networks need from one subject."""

    subject_id: str
    vessel_image: Volume3D
    vessels: LabelVolume
    contour: Volume3D
    label: LabelVolume | None = None  # after ruptured remap
    coarse_target: LabelVolume | None = None  # adaptively dilated
    vois: list[VoiCrop] = field(default_factory=list)


def prepare_subject(
    image: Volume3D,
    cfg: PreprocessConfig,
    label: LabelVolume | None = None,
    vessels: Volume3D | None = None,
    subject_id: str = "",
) -> PreparedSubject:
    """Run the full chain on one subject; ``vessels`` bypasses extraction."""
    if vessels is None:
        vessels = extract_vessels(image, cfg)
    else:
        require_same_geometry(image, vessels)
        vessels = LabelVolume((np.asarray(vessels.data) != 0).astype(np.uint8), image.spacing, image.origin)
    normalized = zscore_normalize(image)
    vimg = vessel_image(normalized, vessels)
    contour = extract_contour(vessels, cfg)
    prepared = PreparedSubject(subject_id, vimg, vessels, contour)
    if label is not None:
        require_same_geometry(image, label)
        prepared.label = remap_ruptured(label)
        prepared.coarse_target = adaptive_dilate_labels(prepared.label, cfg)
        prepared.vois = crop_voi_samples(vimg, contour, prepared.label, cfg, vessels, subject_id)
    return prepared
