"""Command-line interface: ``aneuseg <subcommand> [--config FILE] [--seed N] ...``.

Directory conventions (all volumes are NIfTI-1, gzipped):

* ``phantom`` writes ``<id>_image.nii.gz`` / ``<id>_label.nii.gz`` pairs.
* ``preprocess`` reads such pairs (labels optional) and writes per-subject
  ``<id>_vessel``, ``<id>_vessels``, ``<id>_contour``, ``<id>_target``
  volumes, VOI triples under ``vois/`` and ``manifest.json``.
* ``train-coarse`` / ``train-fine`` / ``crossval`` read a preprocess directory.
* ``evaluate`` pairs ``<id>_label.nii.gz`` in ``--gt`` with
  ``<id><suffix>.nii.gz`` in ``--pred``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import coarse as coarse_mod
from . import fine as fine_mod
from .config import ConfigError, RunConfig, load_config, schema_json
from .losses import figure4_grid
from .metrics import (
    HIGHER_BETTER,
    LOWER_BETTER,
    LesionCounts,
    evaluate_case,
    fp_per_case,
    match_lesions,
    ppv,
    rank_models,
    sensitivity,
    summarize,
)
from .nifti import load_volume, save_volume
from .phantom import generate_phantom
from .pipeline import crossval, fine_samples, run_pipeline_detailed, write_rank_csv, Subject
from .preprocessing import VoiCrop, augment_x8, prepare_subject, split_train_val
from .volume import LabelVolume, Region, Volume3D

log = logging.getLogger("aneuseg")

KNOWN_ORIENTATION = {
    "dsc": HIGHER_BETTER,
    "vs": HIGHER_BETTER,
    "sensitivity": HIGHER_BETTER,
    "sens": HIGHER_BETTER,
    "ppv": HIGHER_BETTER,
    "hd": LOWER_BETTER,
    "fp": LOWER_BETTER,
    "fps": LOWER_BETTER,
}


class CliError(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # one-line diagnostic, exit 2
        self.exit(2, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- helpers


def _subject_pairs(data: Path) -> list[tuple[str, Path, Path | None]]:
    images = sorted(data.glob("*_image.nii*"))
    if not images:
        raise CliError(f"no *_image.nii[.gz] files in {data}")
    out = []
    for img in images:
        sid = img.name.split("_image.nii")[0]
        labels = sorted(data.glob(f"{sid}_label.nii*"))
        out.append((sid, img, labels[0] if labels else None))
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _voi_prefix(voi: VoiCrop, index: int) -> str:
    return f"{voi.subject_id}_voi{index}_{voi.recipe.replace('+', '-')}"


def _save_voi(voi: VoiCrop, directory: Path, prefix: str) -> None:
    save_volume(voi.image_channel, directory / f"{prefix}_image.nii.gz")
    save_volume(voi.contour_channel, directory / f"{prefix}_contour.nii.gz")
    save_volume(voi.label, directory / f"{prefix}_label.nii.gz")


def _load_voi(directory: Path, entry: dict) -> VoiCrop:
    prefix = entry["prefix"]
    image = load_volume(directory / f"{prefix}_image.nii.gz", "image")
    return VoiCrop(
        image_channel=image,
        contour_channel=load_volume(directory / f"{prefix}_contour.nii.gz", "image"),
        label=load_volume(directory / f"{prefix}_label.nii.gz", "label"),
        placement=Region(entry["start"], entry["size"]),
        subject_id=entry["subject_id"],
        recipe=entry["recipe"],
    )


def _read_manifest(data: Path) -> dict:
    path = data / "manifest.json"
    if not path.exists():
        raise CliError(f"{data} has no manifest.json; run `aneuseg preprocess` first")
    return json.loads(path.read_text())


# ---------------------------------------------------------------- commands


def cmd_phantom(args, cfg: RunConfig) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base = cfg.phantom
    cases = []
    for i in range(args.n):
        spec = type(base)(**{**asdict(base), "rng_seed": base.rng_seed + i})
        img, lab = generate_phantom(spec)
        sid = f"phantom{i:03d}"
        save_volume(img, out / f"{sid}_image.nii.gz")
        save_volume(lab, out / f"{sid}_label.nii.gz")
        cases.append({"subject_id": sid, "rng_seed": spec.rng_seed})
    spec_doc = {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(base).items()}
    _write_json(out / "phantoms.json", {"spec": spec_doc, "cases": cases})
    print(f"wrote {args.n} phantoms to {out}")


def cmd_preprocess(args, cfg: RunConfig) -> None:
    pcfg = cfg.pipeline.preprocess
    data, out = Path(args.data), Path(args.out)
    (out / "vois").mkdir(parents=True, exist_ok=True)
    subjects, vois = [], []
    for sid, img_path, lab_path in _subject_pairs(data):
        image = load_volume(img_path, "image")
        label = load_volume(lab_path, "label") if lab_path else None
        prep = prepare_subject(image, pcfg, label, subject_id=sid)
        save_volume(prep.vessel_image, out / f"{sid}_vessel.nii.gz")
        save_volume(prep.vessels, out / f"{sid}_vessels.nii.gz")
        save_volume(prep.contour, out / f"{sid}_contour.nii.gz")
        if prep.label is not None:
            save_volume(prep.label, out / f"{sid}_label.nii.gz")
            save_volume(prep.coarse_target, out / f"{sid}_target.nii.gz")
        subjects.append({"subject_id": sid, "labelled": prep.label is not None, "vois": len(prep.vois)})
        vois.extend(prep.vois)
    entries = []
    if vois:
        if len({v.subject_id for v in vois}) >= 2:
            train, val = split_train_val(vois, pcfg)
        else:
            train, val = vois, []
        for split, group, augment in (("train", train, args.augment), ("val", val, False)):
            for k, voi in enumerate(group):
                for a in augment_x8(voi, pcfg) if augment else [voi]:
                    prefix = _voi_prefix(a, k)
                    _save_voi(a, out / "vois", prefix)
                    entries.append({
                        "prefix": prefix,
                        "split": split,
                        "recipe": a.recipe,
                        "start": list(a.placement.start),
                        **a.manifest_entry(),
                    })
    _write_json(out / "manifest.json", {"subjects": subjects, "vois": entries})
    print(f"preprocessed {len(subjects)} subjects, {len(entries)} VOIs into {out}")


def _coarse_subjects(data: Path) -> list[coarse_mod.CoarseSubject]:
    manifest = _read_manifest(data)
    cohort = []
    for s in manifest["subjects"]:
        if not s["labelled"]:
            continue
        sid = s["subject_id"]
        cohort.append(coarse_mod.CoarseSubject(
            load_volume(data / f"{sid}_vessel.nii.gz", "image"),
            load_volume(data / f"{sid}_target.nii.gz", "label"),
            load_volume(data / f"{sid}_vessels.nii.gz", "label"),
        ))
    if not cohort:
        raise CliError(f"{data} holds no labelled subjects")
    return cohort


def cmd_train_coarse(args, cfg: RunConfig) -> None:
    ccfg = cfg.pipeline.coarse
    if args.iterations is not None:
        ccfg = type(ccfg)(**{**asdict(ccfg), "iterations": args.iterations})
    model = coarse_mod.train_coarse(coarse_mod.build_coarse(ccfg), _coarse_subjects(Path(args.data)))
    model.save(args.out)
    if args.log:
        model.write_log(args.log)
    print(f"coarse model written to {args.out}")


def cmd_train_fine(args, cfg: RunConfig) -> None:
    fcfg = cfg.pipeline.fine
    if args.epochs is not None:
        fcfg = type(fcfg)(**{**asdict(fcfg), "epochs": args.epochs})
    data = Path(args.data)
    entries = _read_manifest(data)["vois"]
    train = [_load_voi(data / "vois", e) for e in entries if e["split"] == "train"]
    val = [_load_voi(data / "vois", e) for e in entries if e["split"] == "val"]
    if not train:
        raise CliError(f"{data} holds no training VOIs")
    if not val:
        log.warning("no validation VOIs; validating on the training VOIs")
        val = [v for v in train if v.recipe == "identity"] or train
    model = fine_mod.train_fine(fine_mod.build_fine(fcfg), train, val, cfg.pipeline.loss)
    model.save(args.out)
    if args.log:
        model.write_log(args.log)
    if args.summary:
        Path(args.summary).write_text(model.summary(cfg.pipeline.preprocess.voi_size) + "\n")
    print(f"fine model written to {args.out}")


def write_overlay(image: Volume3D, mask: LabelVolume, path: str | Path) -> None:
    """Maximum-intensity projection along z with the mask projection in red."""
    from PIL import Image

    mip = image.data.max(axis=2).astype(np.float64)
    lo, hi = mip.min(), mip.max()
    gray = np.zeros_like(mip) if hi == lo else (mip - lo) / (hi - lo)
    rgb = np.repeat((gray * 255).astype(np.uint8)[..., None], 3, axis=2)
    hit = mask.data.any(axis=2)
    rgb[hit] = [255, 0, 0]
    # array is indexed [x, y]; images are rows of y
    Image.fromarray(np.ascontiguousarray(rgb.transpose(1, 0, 2))).save(path, format="PNG")


def cmd_predict(args, cfg: RunConfig) -> None:
    image = load_volume(args.image, "image")
    coarse = coarse_mod.CoarseModel.load(args.coarse)
    fine = fine_mod.FineModel.load(args.fine)
    pcfg = cfg.pipeline
    if args.merge:
        pcfg.merge = args.merge
    result = run_pipeline_detailed(image, coarse, fine, pcfg)
    save_volume(result.mask, args.out)
    if args.candidates:
        _write_json(Path(args.candidates), [c.to_json() for c in result.candidates])
    if args.overlay:
        write_overlay(image, result.mask, args.overlay)
    print(f"{len(result.candidates)} candidates, {int(result.mask.data.sum())} voxels -> {args.out}")


def cmd_evaluate(args, cfg: RunConfig) -> None:
    gt_dir, pred_dir = Path(args.gt), Path(args.pred)
    gts = sorted(gt_dir.glob("*_label.nii*"))
    if not gts:
        raise CliError(f"no *_label.nii[.gz] files in {gt_dir}")
    rows, counts = [], LesionCounts(n_subjects=0)
    for gt_path in gts:
        sid = gt_path.name.split("_label.nii")[0]
        preds = sorted(pred_dir.glob(f"{sid}{args.suffix}.nii*"))
        if not preds:
            raise CliError(f"no prediction {sid}{args.suffix}.nii[.gz] in {pred_dir}")
        gt = load_volume(gt_path, "label")
        pred = load_volume(preds[0], "label")
        rep = evaluate_case(gt, pred, args.units)
        c = match_lesions(gt, pred)
        counts = counts + c
        rows.append({"subject_id": sid, **rep.as_row(), "TP": c.TP, "FP": c.FP, "FN": c.FN})
    with open(args.out_csv, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]))
        writer.writeheader()
        for r in rows:
            writer.writerow({k: ("nan" if isinstance(v, float) and v != v else v) for k, v in r.items()})
    summary = {m: summarize([r[m] for r in rows]) for m in ("dsc", "hd", "vs")}
    summary["lesions"] = {
        "TP": counts.TP, "FP": counts.FP, "FN": counts.FN, "n_subjects": counts.n_subjects,
        "sensitivity": _json_float(sensitivity(counts)),
        "fp_per_case": fp_per_case(counts),
        "ppv": _json_float(ppv(counts)),
    }
    summary["units"] = args.units
    if args.out_json:
        _write_json(Path(args.out_json), summary)
    for m in ("dsc", "hd", "vs"):
        s = summary[m]
        text = "Nan" if s["mean"] is None else f"{s['mean']:.2f} ± {s['sd']:.2f}"
        print(f"{m.upper()}: {text}")


def _json_float(v: float):
    return None if v != v else v


def _read_rank_csv(path: Path) -> tuple[dict, list[str]]:
    with open(path, newline="") as f:
        rows = [r for r in csv.reader(f) if r and any(c.strip() for c in r)]
    if len(rows) < 2:
        raise CliError(f"{path}: need a header and at least one data row")
    header = [c.strip() for c in rows[0]]
    body = [[c.strip() for c in r] for r in rows[1:]]

    def num(v: str) -> float:
        try:
            return float(v)
        except ValueError:
            if v.lower() in ("nan", ""):
                return float("nan")
            raise CliError(f"{path}: not a number: {v!r}") from None

    if header[0].lower() == "metric":
        # one row per metric, one column per model (transposed layout)
        models = header[1:]
        values = {m: {} for m in models}
        for r in body:
            for m, v in zip(models, r[1:]):
                values[m][r[0]] = num(v)
        return values, [r[0] for r in body]
    metrics = [h for h in header[1:] if h.lower() != "rank"]
    values = {r[0]: {k: num(v) for k, v in zip(header[1:], r[1:]) if k in metrics} for r in body}
    return values, metrics


def cmd_rank(args, cfg: RunConfig) -> None:
    values, metrics = _read_rank_csv(Path(args.csv))
    orientation = {}
    overrides = dict(o.split("=", 1) for o in args.orient or [])
    for m in metrics:
        o = overrides.get(m, KNOWN_ORIENTATION.get(m.lower()))
        if o not in (HIGHER_BETTER, LOWER_BETTER):
            raise CliError(f"orientation of metric {m!r} unknown; pass --orient {m}=higher|lower")
        orientation[m] = o
    table = rank_models(values, orientation)
    if args.out:
        write_rank_csv(table, args.out)
    print([round(float(s), 4) for s in table.scores])


def cmd_figure4(args, cfg: RunConfig) -> None:
    ys = args.ys if args.ys else None
    grid = figure4_grid(args.nx, ys)
    with open(args.out, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["x", "y", "G"])
        for x, y, g in grid:
            writer.writerow([repr(float(x)), repr(float(y)), repr(float(g))])
    print(f"{len(grid)} grid points written to {args.out}")


def cmd_crossval(args, cfg: RunConfig) -> None:
    data = Path(args.data)
    pcfg = cfg.pipeline
    if args.out_dir:
        pcfg.output_dir = args.out_dir
    subjects = []
    for sid, img_path, lab_path in _subject_pairs(data):
        if lab_path is None:
            raise CliError(f"{sid} has no label; cross-validation needs labels")
        subjects.append(Subject(sid, load_volume(img_path, "image"), load_volume(lab_path, "label")))
    result = crossval(subjects, pcfg, args.stage)
    print(f"best fold: fold{result.best_fold + 1}; ranks {[round(float(s), 4) for s in result.table.scores]}")
    print(f"weights exported to {result.weights_path}")


def cmd_schema(args, cfg: RunConfig) -> None:
    sys.stdout.write(schema_json())


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="override every rng_seed in the configuration")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="aneuseg", description="Coarse-to-fine aneurysm segmentation on 3D angiography.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("phantom", parents=[common], help="generate synthetic phantoms")
    s.add_argument("--n", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("preprocess", parents=[common], help="vessels, contour, targets and VOIs")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--augment", action=argparse.BooleanOptionalAction, default=True)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train-coarse", parents=[common], help="train the dual-pathway detector")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--log")
    s.add_argument("--iterations", type=int)
    s.set_defaults(func=cmd_train_coarse)

    s = sub.add_parser("train-fine", parents=[common], help="train the VOI segmentation network")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--log")
    s.add_argument("--summary")
    s.add_argument("--epochs", type=int)
    s.set_defaults(func=cmd_train_fine)

    s = sub.add_parser("predict", parents=[common], help="run the cascade on one image")
    s.add_argument("--image", required=True)
    s.add_argument("--coarse", required=True)
    s.add_argument("--fine", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--overlay")
    s.add_argument("--candidates")
    s.add_argument("--merge", choices=["or", "max"])
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("evaluate", parents=[common], help="per-case metrics CSV and summary JSON")
    s.add_argument("--gt", required=True)
    s.add_argument("--pred", required=True)
    s.add_argument("--suffix", default="_pred")
    s.add_argument("--units", choices=["voxel", "mm"], default="voxel")
    s.add_argument("--out-csv", required=True)
    s.add_argument("--out-json")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("rank", parents=[common], help="normalized rank scores from a metrics CSV")
    s.add_argument("--csv", required=True)
    s.add_argument("--out")
    s.add_argument("--orient", action="append", metavar="METRIC=higher|lower")
    s.set_defaults(func=cmd_rank)

    s = sub.add_parser("figure4", parents=[common], help="G(x, y) = -(1 - x)^y grid as CSV")
    s.add_argument("--out", required=True)
    s.add_argument("--nx", type=int, default=101)
    s.add_argument("--ys", type=float, nargs="+")
    s.set_defaults(func=cmd_figure4)

    s = sub.add_parser("crossval", parents=[common], help="k-fold training and fold ranking of one stage")
    s.add_argument("--data", required=True)
    s.add_argument("--stage", choices=["coarse", "fine"], required=True)
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_crossval)

    s = sub.add_parser("schema", parents=[common], help="print the configuration JSON schema")
    s.set_defaults(func=cmd_schema)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(message)s",
    )
    try:
        cfg = load_config(args.config).with_seed(args.seed)
        args.func(args, cfg)
    except (CliError, ConfigError, ValueError, OSError, RuntimeError) as exc:
        message = " ".join(str(exc).split())
        print(f"aneuseg {args.command}: error: {message}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
