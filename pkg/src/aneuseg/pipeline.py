"""Coarse-to-fine inference, stage training helpers and subject-level cross-validation."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import coarse as coarse_mod
from . import fine as fine_mod
from .coarse import CandidateRegion, CoarseConfig, CoarseModel, CoarseSubject
from .fine import FineConfig, FineModel
from .losses import LossParams
from .metrics import (
    HIGHER_BETTER,
    LOWER_BETTER,
    LesionCounts,
    RankTable,
    evaluate_case,
    fp_per_case,
    match_lesions,
    ppv,
    rank_models,
    sensitivity,
    summarize,
)
from .preprocessing import (
    PreparedSubject,
    PreprocessConfig,
    VoiCrop,
    augment_x8,
    crop_at,
    prepare_subject,
)
from .volume import LabelVolume, Region, Volume3D, connected_components

log = logging.getLogger(__name__)

MERGE_RULES = ("or", "max")
COARSE_ORIENTATION = {"Sensitivity": HIGHER_BETTER, "FP": LOWER_BETTER, "PPV": HIGHER_BETTER}
FINE_ORIENTATION = {"DSC": HIGHER_BETTER, "HD": LOWER_BETTER, "VS": HIGHER_BETTER}


@dataclass
class PipelineConfig:
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    coarse: CoarseConfig = field(default_factory=CoarseConfig)
    fine: FineConfig = field(default_factory=FineConfig)
    loss: LossParams = field(default_factory=LossParams)
    folds: int = 5
    output_dir: str = "runs"
    rng_seed: int = 0
    merge: str = "or"
    augment: bool = True

    def __post_init__(self) -> None:
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if self.merge not in MERGE_RULES:
            raise ValueError(f"merge must be one of {MERGE_RULES}, got {self.merge!r}")


@dataclass
class Subject:
    subject_id: str
    image: Volume3D
    label: LabelVolume | None = None


def prepare_cohort(subjects: Sequence[Subject], cfg: PipelineConfig) -> list[PreparedSubject]:
    return [prepare_subject(s.image, cfg.preprocess, s.label, subject_id=s.subject_id) for s in subjects]


def coarse_cohort(prepared: Sequence[PreparedSubject]) -> list[CoarseSubject]:
    """Coarse training views: vessel image in, dilated labels out, vessel mask as sampling ROI."""
    out = []
    for p in prepared:
        if p.coarse_target is None:
            raise ValueError(f"subject {p.subject_id!r} has no label")
        out.append(CoarseSubject(p.vessel_image, p.coarse_target, p.vessels))
    return out


def fine_samples(prepared: Sequence[PreparedSubject], cfg: PipelineConfig, augment: bool | None = None) -> list[VoiCrop]:
    """Ground-truth-centred VOIs, optionally expanded eightfold by augmentation."""
    augment = cfg.augment if augment is None else augment
    out = []
    for p in prepared:
        for voi in p.vois:
            out.extend(augment_x8(voi, cfg.preprocess) if augment else [voi])
    return out


def train_stage_models(
    prepared: Sequence[PreparedSubject],
    cfg: PipelineConfig,
    val: Sequence[PreparedSubject] | None = None,
) -> tuple[CoarseModel, FineModel]:
    """Train both networks; the fine stage validates on ``val`` (training VOIs if absent)."""
    coarse = coarse_mod.train_coarse(coarse_mod.build_coarse(cfg.coarse), coarse_cohort(prepared))
    train_vois = fine_samples(prepared, cfg)
    val_vois = fine_samples(val, cfg, augment=False) if val else fine_samples(prepared, cfg, augment=False)
    fine = fine_mod.train_fine(fine_mod.build_fine(cfg.fine), train_vois, val_vois, cfg.loss)
    return coarse, fine


@dataclass
class PipelineResult:
    mask: LabelVolume
    coarse_mask: LabelVolume
    candidates: list[CandidateRegion]
    prepared: PreparedSubject


def _check_models(coarse: CoarseModel, fine: FineModel, cfg: PipelineConfig) -> None:
    if fine.config.in_channels != 2:
        raise ValueError("the fine network must take the two-channel (vessel, contour) input")
    step = 2 ** (fine.config.depth - 1)
    if cfg.preprocess.voi_size % step:
        raise ValueError(f"VOI size {cfg.preprocess.voi_size} is not divisible by {step}")
    if coarse.config.classes != 2:
        raise ValueError("the coarse network must be binary")


def merge_predictions(dims, placements: Sequence[Region], probs: Sequence[np.ndarray], rule: str = "or") -> np.ndarray:
    """Paste per-VOI class probabilities back into a ``dims`` volume.

    ``"or"``: a voxel is foreground if any covering VOI's argmax says so.
    ``"max"``: per class, take the maximum probability over covering VOIs,
    then the argmax. Ties go to background; uncovered voxels are background.
    """
    if rule not in MERGE_RULES:
        raise ValueError(f"merge must be one of {MERGE_RULES}, got {rule!r}")
    bounds = Region((0, 0, 0), tuple(dims))
    hit = np.zeros(dims, bool)
    best = np.zeros((2, *dims), np.float32) if rule == "max" else None
    for region, p in zip(placements, probs):
        inside = region.intersect(bounds)
        if inside is None:
            continue
        dst = tuple(slice(a, b) for a, b in zip(inside.start, inside.stop))
        src = tuple(slice(a - r, b - r) for a, b, r in zip(inside.start, inside.stop, region.start))
        if rule == "or":
            hit[dst] |= fine_mod.decide(p)[src].astype(bool)
        else:
            best[(slice(None), *dst)] = np.maximum(best[(slice(None), *dst)], p[(slice(None), *src)])
    if rule == "max":
        hit = best[1] > best[0]
    return hit.astype(np.uint8)


def run_pipeline_detailed(
    image: Volume3D,
    coarse: CoarseModel,
    fine: FineModel,
    cfg: PipelineConfig,
    vessels: Volume3D | None = None,
) -> PipelineResult:
    _check_models(coarse, fine, cfg)
    prepared = prepare_subject(image, cfg.preprocess, vessels=vessels)
    probs = coarse_mod.predict_probabilities(coarse, prepared.vessel_image)
    coarse_mask = LabelVolume((probs > 0.5).astype(np.uint8), image.spacing, image.origin)
    candidates = coarse_mod.extract_candidates(coarse_mask, coarse.config.min_candidate_size, probs)
    empty = LabelVolume(np.zeros(image.dims, np.uint8), image.spacing, image.origin)
    placements, probs_list = [], []
    for cand in candidates:
        voi = crop_at(prepared.vessel_image, prepared.contour, empty, cand.center, cfg.preprocess.voi_size)
        placements.append(voi.placement)
        probs_list.append(fine_mod.predict_probabilities(fine, voi))
    merged = merge_predictions(image.dims, placements, probs_list, cfg.merge)
    mask = LabelVolume(merged, image.spacing, image.origin)
    return PipelineResult(mask, coarse_mask, candidates, prepared)


def run_pipeline(
    image: Volume3D,
    coarse: CoarseModel,
    fine: FineModel,
    cfg: PipelineConfig,
    vessels: Volume3D | None = None,
) -> LabelVolume:
    """Vessels, normalization, coarse mask, candidates, 64^3 fine VOIs, paste back.

    Overlapping VOI predictions combine by voxelwise OR (or by maximum
    foreground probability with ``cfg.merge == "max"``).
    """
    return run_pipeline_detailed(image, coarse, fine, cfg, vessels).mask


def fold_partition(n_subjects: int, folds: int, seed: int) -> list[np.ndarray]:
    """Shuffled, disjoint and exhaustive subject index sets of near-equal size."""
    if n_subjects < folds:
        raise ValueError(f"{folds}-fold cross-validation needs at least {folds} subjects, got {n_subjects}")
    order = np.random.default_rng(seed).permutation(n_subjects)
    return [np.sort(part) for part in np.array_split(order, folds)]


@dataclass
class FoldReport:
    fold: int
    train_ids: list[str]
    val_ids: list[str]
    metrics: dict[str, float]
    model: CoarseModel | FineModel = field(repr=False, default=None)


@dataclass
class CrossvalResult:
    stage: str
    folds: list[FoldReport]
    table: RankTable
    best_fold: int
    weights_path: Path | None = None


def filter_small_components(mask: np.ndarray, min_size: int) -> np.ndarray:
    comps = connected_components(mask, 26)
    keep = [i + 1 for i, c in enumerate(comps) if c.voxel_count >= min_size]
    return np.isin(comps.labels, keep).astype(np.uint8) if keep else np.zeros(mask.shape, np.uint8)


def coarse_fold_metrics(model: CoarseModel, val: Sequence[PreparedSubject]) -> dict[str, float]:
    counts = LesionCounts(n_subjects=0)
    for p in val:
        mask = coarse_mod.predict_coarse(model, p.vessel_image).data
        counts = counts + match_lesions(p.label, filter_small_components(mask, model.config.min_candidate_size))
    return {
        "Sensitivity": 100 * sensitivity(counts),
        "FP": fp_per_case(counts),
        "PPV": 100 * ppv(counts),
    }


def fine_fold_metrics(model: FineModel, val_vois: Sequence[VoiCrop]) -> dict[str, float]:
    reports = [evaluate_case(v.label, fine_mod.predict_fine(model, v)) for v in val_vois]
    return {
        "DSC": summarize([r.dsc for r in reports])["mean"],
        "HD": summarize([r.hd for r in reports])["mean"],
        "VS": summarize([r.vs for r in reports])["mean"],
    }


def crossval(subjects: Sequence[Subject] | Sequence[PreparedSubject], cfg: PipelineConfig, stage: str) -> CrossvalResult:
    """Subject-level k-fold training and validation of one stage, ranked across folds.

    The coarse stage is scored on lesion detection (sensitivity %,
    false positives per case, PPV %), the fine stage by mean DSC, HD and VS
    over validation VOIs. The fold with the lowest rank score is exported to
    ``<output_dir>/<stage>_best.anwt``.
    """
    if stage not in ("coarse", "fine"):
        raise ValueError(f"stage must be 'coarse' or 'fine', got {stage!r}")
    prepared = [s if isinstance(s, PreparedSubject) else None for s in subjects]
    if any(p is None for p in prepared):
        prepared = prepare_cohort(subjects, cfg)
    if any(p.label is None for p in prepared):
        raise ValueError("cross-validation needs a label for every subject")
    parts = fold_partition(len(prepared), cfg.folds, cfg.rng_seed)
    reports = []
    for k, val_idx in enumerate(parts):
        val = [prepared[i] for i in val_idx]
        train = [p for i, p in enumerate(prepared) if i not in set(val_idx.tolist())]
        log.info("%s fold %d: %d train / %d val subjects", stage, k, len(train), len(val))
        if stage == "coarse":
            model = coarse_mod.train_coarse(coarse_mod.build_coarse(cfg.coarse), coarse_cohort(train))
            metrics = coarse_fold_metrics(model, val)
        else:
            val_vois = fine_samples(val, cfg, augment=False)
            model = fine_mod.train_fine(
                fine_mod.build_fine(cfg.fine), fine_samples(train, cfg), val_vois, cfg.loss
            )
            metrics = fine_fold_metrics(model, val_vois)
        reports.append(
            FoldReport(k, [p.subject_id for p in train], [p.subject_id for p in val], metrics, model)
        )
    orientation = dict(COARSE_ORIENTATION if stage == "coarse" else FINE_ORIENTATION)
    for k in list(orientation):
        # e.g. PPV when no fold detected anything; it cannot separate folds
        if all(np.isnan(r.metrics[k]) for r in reports):
            log.warning("%s is undefined in every fold; left out of the ranking", k)
            del orientation[k]
    if not orientation:
        raise ValueError("no metric is defined in any fold")
    table = rank_models({f"fold{r.fold + 1}": r.metrics for r in reports}, orientation)
    best = int(np.argmin(table.scores))
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    weights = out_dir / f"{stage}_best.anwt"
    reports[best].model.save(weights)
    write_rank_csv(table, out_dir / f"{stage}_folds.csv")
    (out_dir / f"{stage}_folds.json").write_text(
        json.dumps(
            [{"fold": r.fold, "train": r.train_ids, "val": r.val_ids, "metrics": r.metrics} for r in reports],
            indent=2,
        )
        + "\n"
    )
    return CrossvalResult(stage, reports, table, best, weights)


def write_rank_csv(table: RankTable, path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["model", *table.metrics, "rank"])
        for row in table.as_rows():
            writer.writerow([row["model"], *(_fmt(row[m]) for m in table.metrics), f"{row['rank']:.4f}"])


def _fmt(value: float) -> str:
    return "nan" if value != value else repr(float(value))
