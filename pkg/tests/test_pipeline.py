import numpy as np
import pytest
import torch

from aneuseg.coarse import CoarseConfig, CoarseModel, build_coarse
from aneuseg.fine import FineConfig, FineModel, build_fine
from aneuseg.phantom import PhantomSpec, generate_phantom
from aneuseg.pipeline import (
    PipelineConfig,
    Subject,
    crossval,
    fold_partition,
    merge_predictions,
    run_pipeline,
    run_pipeline_detailed,
)
from aneuseg.preprocessing import PreprocessConfig
from aneuseg.volume import Region


def tiny_cfg(tmp_path=None, **kw):
    return PipelineConfig(
        preprocess=PreprocessConfig(voi_size=16),
        coarse=CoarseConfig(channels_per_layer=(4,) * 8, iterations=2, batch_size=2, min_candidate_size=1),
        fine=FineConfig(base_filters=8, epochs=1, dropout_p=0.0),
        augment=False,
        output_dir=str(tmp_path or "runs"),
        **kw,
    )


def biased_models(cfg: PipelineConfig, coarse_fg: bool, fine_fg: bool) -> tuple[CoarseModel, FineModel]:
    """Untrained networks whose output heads are pinned to one class."""
    coarse = build_coarse(cfg.coarse)
    fine = build_fine(cfg.fine)
    with torch.no_grad():
        coarse.net.head.weight.zero_()
        coarse.net.head.bias.copy_(torch.tensor([-20.0, 20.0] if coarse_fg else [20.0, -20.0]))
        for head in fine.net.heads:
            head.weight.zero_()
            head.bias.copy_(torch.tensor([-20.0, 20.0] if fine_fg else [20.0, -20.0]))
    return coarse, fine


@pytest.fixture(scope="module")
def phantom():
    return generate_phantom(PhantomSpec(volume_dims=(40, 40, 40), n_vessels=2, aneurysm_radius=(3.0, 4.0), rng_seed=3))


def test_zero_candidates_gives_empty_mask(phantom):
    img, _ = phantom
    cfg = tiny_cfg()
    coarse, fine = biased_models(cfg, coarse_fg=False, fine_fg=True)
    res = run_pipeline_detailed(img, coarse, fine, cfg)
    assert res.candidates == []
    assert res.mask.dims == img.dims and not res.mask.data.any()
    assert res.mask.spacing == img.spacing and res.mask.origin == img.origin


def test_candidate_voi_pasted_at_its_placement(phantom):
    img, _ = phantom
    before = img.data.copy()
    cfg = tiny_cfg()
    coarse, fine = biased_models(cfg, coarse_fg=True, fine_fg=True)
    res = run_pipeline_detailed(img, coarse, fine, cfg)
    # the whole volume is one coarse component, so one 16^3 VOI at its centre
    assert len(res.candidates) == 1
    assert res.candidates[0].center == (20, 20, 20)
    expected = np.zeros(img.dims, np.uint8)
    expected[12:28, 12:28, 12:28] = 1
    assert np.array_equal(res.mask.data, expected)
    assert set(np.unique(res.mask.data)) <= {0, 1}
    assert np.array_equal(img.data, before)


def test_run_pipeline_returns_mask(phantom):
    img, _ = phantom
    cfg = tiny_cfg()
    coarse, fine = biased_models(cfg, coarse_fg=True, fine_fg=False)
    out = run_pipeline(img, coarse, fine, cfg)
    assert out.dims == img.dims and not out.data.any()


def test_model_mismatch_rejected(phantom):
    img, _ = phantom
    cfg = tiny_cfg()
    cfg.preprocess.voi_size = 20  # not divisible by 2^(depth-1)
    coarse, fine = biased_models(tiny_cfg(), True, True)
    with pytest.raises(ValueError):
        run_pipeline(img, coarse, fine, cfg)


def _probs(fg):
    fg = np.asarray(fg, np.float32)
    return np.stack([1 - fg, fg])


def test_merge_rules():
    dims = (6, 1, 1)
    a = Region((0, 0, 0), (4, 1, 1))
    b = Region((2, 0, 0), (4, 1, 1))
    pa = _probs(np.array([0.9, 0.2, 0.6, 0.6]).reshape(4, 1, 1))
    pb = _probs(np.array([0.1, 0.3, 0.7, 0.1]).reshape(4, 1, 1))
    # overlap voxels 2 and 3: a says (0.6, 0.6), b says (0.1, 0.3)
    or_mask = merge_predictions(dims, [a, b], [pa, pb], "or")
    max_mask = merge_predictions(dims, [a, b], [pa, pb], "max")
    assert or_mask.ravel().tolist() == [1, 0, 1, 1, 1, 0]
    # max: voxel 2 -> fg max 0.6 vs bg max 0.9; voxel 3 -> 0.6 vs 0.7
    assert max_mask.ravel().tolist() == [1, 0, 0, 0, 1, 0]


def test_merge_clips_voi_overhanging_the_border():
    p = _probs(np.ones((4, 4, 4)))
    out = merge_predictions((5, 5, 5), [Region((-2, 3, 3), (4, 4, 4))], [p], "or")
    assert out.sum() == 2 * 2 * 2
    assert out[:2, 3:, 3:].all()


def test_merge_tie_is_background():
    p = _probs(np.full((2, 2, 2), 0.5))
    for rule in ("or", "max"):
        assert not merge_predictions((2, 2, 2), [Region((0, 0, 0), (2, 2, 2))], [p], rule).any()


def test_fold_partition_laws():
    parts = fold_partition(10, 5, seed=1)
    assert len(parts) == 5 and all(len(p) == 2 for p in parts)
    assert sorted(np.concatenate(parts).tolist()) == list(range(10))
    assert [p.tolist() for p in parts] == [p.tolist() for p in fold_partition(10, 5, seed=1)]
    with pytest.raises(ValueError):
        fold_partition(4, 5, seed=0)


def test_pipeline_config_validation():
    with pytest.raises(ValueError):
        PipelineConfig(folds=1)
    with pytest.raises(ValueError):
        PipelineConfig(merge="and")


@pytest.fixture(scope="module")
def cohort():
    out = []
    for i in range(4):
        img, lab = generate_phantom(PhantomSpec(volume_dims=(40, 40, 40), n_vessels=2, n_aneurysms=1,
                                                aneurysm_radius=(3.0, 4.0), rng_seed=20 + i))
        out.append(Subject(f"s{i}", img, lab))
    return out


@pytest.mark.parametrize("stage", ["coarse", "fine"])
def test_crossval_contract(cohort, tmp_path, stage):
    cfg = tiny_cfg(tmp_path, folds=2)
    res = crossval(cohort, cfg, stage)
    assert len(res.folds) == 2 and len(res.table.models) == 2
    assert np.all((res.table.scores >= 0) & (res.table.scores <= 1))
    val_ids = sorted(i for f in res.folds for i in f.val_ids)
    assert val_ids == ["s0", "s1", "s2", "s3"]
    for f in res.folds:
        assert not set(f.train_ids) & set(f.val_ids)
    loader = CoarseModel if stage == "coarse" else FineModel
    loader.load(res.weights_path)
    assert (tmp_path / f"{stage}_folds.csv").read_text().startswith("model,")
    expected = {"coarse": ["Sensitivity", "FP", "PPV"], "fine": ["DSC", "HD", "VS"]}[stage]
    assert all(list(f.metrics) == expected for f in res.folds)
    # metrics undefined in every fold (PPV without detections) are dropped from ranking
    assert set(res.table.metrics) <= set(expected) and res.table.metrics


def test_crossval_needs_enough_subjects(cohort, tmp_path):
    with pytest.raises(ValueError):
        crossval(cohort[:2], tiny_cfg(tmp_path, folds=3), "coarse")
    with pytest.raises(ValueError):
        crossval(cohort, tiny_cfg(tmp_path), "both")
