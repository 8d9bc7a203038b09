"""Synthetic TOF-MRA-like phantoms: bright curved tubes with saccular bulges."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import LabelVolume, Volume3D, connected_components


class PhantomError(RuntimeError):
    pass


@dataclass
class PhantomSpec:
    volume_dims: tuple[int, int, int] = (128, 128, 128)
    n_vessels: int = 4
    vessel_radius: tuple[float, float] = (2.0, 3.5)
    n_aneurysms: int = 2
    aneurysm_radius: tuple[float, float] = (3.5, 6.0)
    noise_sigma: float = 10.0
    background: float = 100.0
    vessel_intensity: float = 400.0
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    rng_seed: int = 0
    max_retries: int = 200

    def __post_init__(self) -> None:
        self.volume_dims = tuple(int(n) for n in self.volume_dims)
        self.vessel_radius = tuple(float(r) for r in self.vessel_radius)
        self.aneurysm_radius = tuple(float(r) for r in self.aneurysm_radius)
        self.spacing = tuple(float(s) for s in self.spacing)
        if min(self.vessel_radius) <= 0 or min(self.aneurysm_radius) <= 0:
            raise ValueError("radii must be positive")
        if self.n_aneurysms > 0 and self.n_vessels < 1:
            raise ValueError("aneurysms need at least one vessel to attach to")
        if min(self.volume_dims) < 16:
            raise ValueError("phantom volume must be at least 16 voxels per axis")


def _bezier(p0, p1, p2, n):
    t = np.linspace(0.0, 1.0, n)[:, None]
    return (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t**2 * p2


def _paint_tube(mask: np.ndarray, path: np.ndarray, radius: float) -> None:
    dims = np.array(mask.shape)
    r = int(np.ceil(radius)) + 1
    offsets = np.mgrid[-r : r + 1, -r : r + 1, -r : r + 1].reshape(3, -1).T
    for p in path:
        base = np.round(p).astype(int)
        pts = base + offsets
        inside = np.all((pts >= 0) & (pts < dims), axis=1)
        pts = pts[inside]
        near = ((pts - p) ** 2).sum(axis=1) <= radius**2
        pts = pts[near]
        mask[pts[:, 0], pts[:, 1], pts[:, 2]] = True


def _random_path(rng, dims):
    dims = np.asarray(dims, dtype=float)
    axis = rng.integers(3)
    margin = 0.15 * dims
    p0 = rng.uniform(margin, dims - margin)
    p2 = rng.uniform(margin, dims - margin)
    p0[axis], p2[axis] = 0.0, dims[axis] - 1
    p1 = rng.uniform(0.25 * dims, 0.75 * dims)
    length = np.linalg.norm(p2 - p0) + np.linalg.norm(p1 - p0)
    return _bezier(p0, p1, p2, int(2 * length) + 2)


def _ellipsoid(shape, center, axes, radii):
    grid = np.indices(shape).reshape(3, -1).T - center
    local = grid @ axes.T  # coordinates in the ellipsoid frame
    inside = ((local / radii) ** 2).sum(axis=1) <= 1.0
    return inside.reshape(shape)


def generate_phantom(spec: PhantomSpec) -> tuple[Volume3D, LabelVolume]:
    """Noisy volume with ``n_vessels`` tubes and ``n_aneurysms`` labelled bulges.

    Each bulge is an ellipsoid whose centre sits just outside a tube wall, so
    it intersects the tube; its label is the ellipsoid minus all tube voxels.
    Placement is retried until every bulge is a single component that keeps a
    gap of at least 3 voxels to the others and 4 voxels to the volume border.
    """
    rng = np.random.default_rng(spec.rng_seed)
    dims = spec.volume_dims
    vessels = np.zeros(dims, dtype=bool)
    paths, radii = [], []
    for _ in range(spec.n_vessels):
        path = _random_path(rng, dims)
        radius = rng.uniform(*spec.vessel_radius)
        _paint_tube(vessels, path, radius)
        paths.append(path)
        radii.append(radius)

    label = np.zeros(dims, dtype=bool)
    placed = 0
    for _ in range(spec.max_retries):
        if placed == spec.n_aneurysms:
            break
        k = rng.integers(len(paths))
        path, vr = paths[k], radii[k]
        i = rng.integers(int(0.2 * len(path)), int(0.8 * len(path)))
        tangent = path[min(i + 1, len(path) - 1)] - path[max(i - 1, 0)]
        tangent /= np.linalg.norm(tangent)
        u = rng.normal(size=3)
        u -= u.dot(tangent) * tangent
        u /= np.linalg.norm(u)
        w = np.cross(tangent, u)
        a = rng.uniform(*spec.aneurysm_radius)
        semi = a * rng.uniform(0.8, 1.2, size=3)
        center = path[i] + u * (vr + 0.5 * semi[0])
        lo = np.floor(center - semi.max() - 1).astype(int)
        hi = np.ceil(center + semi.max() + 2).astype(int)
        if np.any(lo < 4) or np.any(hi > np.array(dims) - 4):
            continue
        window = tuple(slice(l, h) for l, h in zip(lo, hi))
        blob = _ellipsoid(tuple(hi - lo), center - lo, np.stack([u, tangent, w]), semi)
        bulge = blob & ~vessels[window]
        if bulge.sum() < 20 or len(connected_components(bulge)) != 1:
            continue
        grown = np.zeros(dims, dtype=bool)
        grown[window] = bulge
        if (ndimage.binary_dilation(grown, iterations=3) & label).any():
            continue
        label |= grown
        placed += 1
    if placed < spec.n_aneurysms:
        raise PhantomError(f"placed {placed} of {spec.n_aneurysms} aneurysms after {spec.max_retries} tries")

    lumen = (vessels | label).astype(np.float32)
    lumen = ndimage.gaussian_filter(lumen, 0.6)
    grid = np.indices(dims, dtype=np.float32) / np.array(dims, dtype=np.float32)[:, None, None, None]
    phase = rng.uniform(0, 2 * np.pi, size=3)
    shading = 1.0 + 0.1 * np.sin(2 * np.pi * grid[0] + phase[0]) * np.cos(2 * np.pi * grid[1] + phase[1])
    image = spec.background * shading + (spec.vessel_intensity - spec.background) * lumen
    image += rng.normal(0.0, spec.noise_sigma, size=dims).astype(np.float32)
    image = np.clip(image, 0.0, None).astype(np.float32)
    return (
        Volume3D(image, spec.spacing),
        LabelVolume(label.astype(np.uint8), spec.spacing),
    )
