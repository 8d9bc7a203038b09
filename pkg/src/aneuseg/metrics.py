"""Detection and overlap metrics, lesion matching, and normalized-rank aggregation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage

from .volume import Volume3D, connected_components, require_same_geometry

UNDEFINED = float("nan")


def is_undefined(value) -> bool:
    return value is None or (isinstance(value, float) and math.isnan(value))


def format_value(value, digits: int = 2) -> str:
    """Two-decimal rendering; undefined HD prints as ``Nan``."""
    return "Nan" if is_undefined(value) else f"{value:.{digits}f}"


@dataclass
class LesionCounts:
    TP: int = 0
    FP: int = 0
    FN: int = 0
    n_subjects: int = 1

    def __post_init__(self) -> None:
        if min(self.TP, self.FP, self.FN) < 0:
            raise ValueError("lesion counts must be non-negative")

    def __add__(self, other: "LesionCounts") -> "LesionCounts":
        return LesionCounts(
            self.TP + other.TP,
            self.FP + other.FP,
            self.FN + other.FN,
            self.n_subjects + other.n_subjects,
        )


@dataclass
class MetricsReport:
    dsc: float
    hd: float
    vs: float
    units: str = "voxel"

    def as_row(self) -> dict:
        return {"dsc": self.dsc, "hd": self.hd, "vs": self.vs}


def _masks(gt, pred) -> tuple[np.ndarray, np.ndarray, tuple]:
    spacing = (1.0, 1.0, 1.0)
    if isinstance(gt, Volume3D) and isinstance(pred, Volume3D):
        if gt.dims != pred.dims:
            require_same_geometry(gt, pred)
        spacing = gt.spacing
    g = np.asarray(gt.data if isinstance(gt, Volume3D) else gt) != 0
    p = np.asarray(pred.data if isinstance(pred, Volume3D) else pred) != 0
    if g.shape != p.shape:
        raise ValueError(f"geometry mismatch: {g.shape} vs {p.shape}")
    return g, p, spacing


def match_lesions(gt, pred, connectivity: int = 26, rule: str = "overlap") -> LesionCounts:
    """Count lesion-level TP / FP / FN for one case.

    ``rule="overlap"``: a predicted component may be assigned to the GT component
    it overlaps most (ties to the lower GT index); each predicted component is
    assigned at most once. ``rule="center"``: assignment requires the predicted
    component's rounded centroid to fall inside that GT component.
    Predicted components touching no GT voxel are false positives.
    """
    g, p, _ = _masks(gt, pred)
    gcc = connected_components(g, connectivity)
    pcc = connected_components(p, connectivity)
    n_gt, n_pred = len(gcc), len(pcc)
    # overlap[i, j] = voxels shared by GT component i+1 and predicted component j+1
    both = g & p
    overlap = np.zeros((n_gt + 1, n_pred + 1), dtype=np.int64)
    if both.any():
        np.add.at(overlap, (gcc.labels[both], pcc.labels[both]), 1)
    overlap = overlap[1:, 1:]

    matched = np.zeros(n_gt, dtype=bool)
    fp = 0
    for j in range(n_pred):
        col = overlap[:, j]
        if not col.any():
            fp += 1
            continue
        if rule == "overlap":
            matched[int(np.argmax(col))] = True
        elif rule == "center":
            c = tuple(int(round(x)) for x in pcc[j].centroid)
            hit = gcc.labels[c]
            if hit:
                matched[hit - 1] = True
        else:
            raise ValueError(f"unknown matching rule {rule!r}")
    tp = int(matched.sum())
    return LesionCounts(TP=tp, FP=fp, FN=n_gt - tp, n_subjects=1)


def sensitivity(c: LesionCounts) -> float:
    total = c.TP + c.FN
    return c.TP / total if total else UNDEFINED


def fp_per_case(c: LesionCounts) -> float:
    if c.n_subjects <= 0:
        raise ValueError("fp_per_case needs at least one subject")
    return c.FP / c.n_subjects


def ppv(c: LesionCounts) -> float:
    total = c.TP + c.FP
    return c.TP / total if total else UNDEFINED


def dsc(gt, pred) -> float:
    g, p, _ = _masks(gt, pred)
    total = int(g.sum()) + int(p.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((g & p).sum()) / total


def volumetric_similarity(gt, pred) -> float:
    g, p, _ = _masks(gt, pred)
    a, b = int(g.sum()), int(p.sum())
    if a + b == 0:
        return 1.0
    return 1.0 - abs(a - b) / (a + b)


def _directed(a: np.ndarray, b: np.ndarray, sampling) -> float:
    # exact Euclidean distance from every voxel to the nearest voxel of b
    dist = ndimage.distance_transform_edt(~b, sampling=sampling)
    return float(dist[a].max())


def hausdorff(gt, pred, units: str = "voxel", spacing: Sequence[float] | None = None) -> float:
    """Symmetric Hausdorff distance over all mask voxels; NaN if either mask is empty.

    In ``"mm"`` units distances are scaled by ``spacing`` (taken from the
    volumes when not given).
    """
    g, p, vol_spacing = _masks(gt, pred)
    if units == "voxel":
        sampling = (1.0, 1.0, 1.0)
    elif units == "mm":
        sampling = tuple(spacing) if spacing is not None else vol_spacing
    else:
        raise ValueError(f"units must be 'voxel' or 'mm', got {units!r}")
    if not g.any() or not p.any():
        return UNDEFINED
    return max(_directed(g, p, sampling), _directed(p, g, sampling))


def evaluate_case(gt, pred, units: str = "voxel") -> MetricsReport:
    return MetricsReport(
        dsc=dsc(gt, pred),
        hd=hausdorff(gt, pred, units),
        vs=volumetric_similarity(gt, pred),
        units=units,
    )


def summarize(values: Sequence[float]) -> dict:
    """Mean and population sd over the defined values."""
    arr = np.array([v for v in values if not is_undefined(v)], dtype=np.float64)
    if arr.size == 0:
        return {"mean": None, "sd": None, "n": 0, "n_undefined": len(values)}
    return {
        "mean": float(arr.mean()),
        "sd": float(arr.std()),
        "n": int(arr.size),
        "n_undefined": len(values) - int(arr.size),
    }


HIGHER_BETTER = "higher"
LOWER_BETTER = "lower"


@dataclass
class RankTable:
    models: list[str]
    metrics: list[str]
    values: np.ndarray  # (n_models, n_metrics), NaN = undefined
    orientation: dict[str, str]
    normalized: np.ndarray = field(repr=False)
    scores: np.ndarray = field(default=None)

    def best(self) -> str:
        return self.models[int(np.argmin(self.scores))]

    def as_rows(self) -> list[dict]:
        rows = []
        for i, m in enumerate(self.models):
            row = {"model": m}
            row.update({k: self.values[i, j] for j, k in enumerate(self.metrics)})
            row["rank"] = float(self.scores[i])
            rows.append(row)
        return rows


def rank_models(
    values: Mapping[str, Mapping[str, float]],
    orientation: Mapping[str, str],
) -> RankTable:
    """Average min-max normalized rank over metrics; lowest final score is best.

    Per metric, ``(value - best) / (worst - best)`` maps the best model to 0 and
    the worst to 1 (all 0 when they coincide). An undefined value scores 1, as
    bad as the worst defined one. The final score is the mean over metrics.

    Args:
        values: ``{model: {metric: value}}``, insertion order kept.
        orientation: ``{metric: "higher" | "lower"}`` meaning which is better.
    """
    models = list(values)
    if len(models) < 2:
        raise ValueError("ranking needs at least two models")
    metrics = list(orientation)
    table = np.array(
        [[float(values[m].get(k, UNDEFINED)) for k in metrics] for m in models],
        dtype=np.float64,
    )
    norm = np.zeros_like(table)
    for j, k in enumerate(metrics):
        col = table[:, j]
        defined = ~np.isnan(col)
        if not defined.any():
            raise ValueError(f"metric {k!r} has no defined values")
        if orientation[k] == HIGHER_BETTER:
            best, worst = col[defined].max(), col[defined].min()
        elif orientation[k] == LOWER_BETTER:
            best, worst = col[defined].min(), col[defined].max()
        else:
            raise ValueError(f"orientation of {k!r} must be 'higher' or 'lower'")
        if worst == best:
            norm[defined, j] = 0.0
        else:
            norm[defined, j] = (col[defined] - best) / (worst - best)
        norm[~defined, j] = 1.0
    return RankTable(models, metrics, table, dict(orientation), norm, norm.mean(axis=1))
