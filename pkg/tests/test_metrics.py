import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from aneuseg.metrics import (
    LesionCounts,
    dsc,
    format_value,
    fp_per_case,
    hausdorff,
    match_lesions,
    ppv,
    rank_models,
    sensitivity,
    volumetric_similarity,
)
from aneuseg.volume import Volume3D, connected_components

from conftest import ball


def brute_hausdorff(a, b, spacing=(1, 1, 1)):
    pa = np.argwhere(a) * np.asarray(spacing)
    pb = np.argwhere(b) * np.asarray(spacing)
    d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1))
    return max(d.min(axis=1).max(), d.min(axis=0).max())


def test_counts_metrics():
    assert sensitivity(LesionCounts(TP=2, FN=0)) == 1.0
    assert sensitivity(LesionCounts(TP=0, FN=3)) == 0.0
    assert math.isnan(sensitivity(LesionCounts()))
    assert fp_per_case(LesionCounts(FP=0, n_subjects=4)) == 0
    assert fp_per_case(LesionCounts(FP=99, n_subjects=100)) == pytest.approx(0.99)
    assert fp_per_case(LesionCounts(FP=3, n_subjects=2)) == 1.5
    with pytest.raises(ValueError):
        fp_per_case(LesionCounts(n_subjects=0))
    assert ppv(LesionCounts(TP=1, FP=0)) == 1.0
    assert ppv(LesionCounts(TP=53, FP=47)) == 0.53
    assert f"{100 * ppv(LesionCounts(TP=53, FP=47)):.1f}" == "53.0"
    assert ppv(LesionCounts(TP=0, FP=5)) == 0.0
    assert math.isnan(ppv(LesionCounts(FN=2)))


def test_dsc_vs_examples():
    a = np.zeros((10, 10, 10), bool)
    a[:1] = True  # 100 voxels
    assert dsc(a, a) == 1.0
    assert dsc(a, np.roll(a, 5, axis=0)) == 0.0
    b = np.zeros_like(a)
    b[0, :5] = True  # 50 voxels inside a
    assert dsc(a, b) == pytest.approx(2 * 50 / 150)
    assert volumetric_similarity(a, b) == pytest.approx(1 - 50 / 150)
    assert volumetric_similarity(a, np.roll(a, 5, axis=0)) == 1.0
    empty = np.zeros_like(a)
    assert volumetric_similarity(a, empty) == 0.0
    assert dsc(empty, empty) == 1.0 and volumetric_similarity(empty, empty) == 1.0


def test_hausdorff_examples():
    a = np.zeros((5, 5, 5), bool)
    b = np.zeros_like(a)
    a[0, 0, 0] = True
    b[3, 0, 0] = True
    assert hausdorff(a, b) == 3.0
    assert hausdorff(a, a) == 0.0
    assert math.isnan(hausdorff(a, np.zeros_like(a)))
    assert format_value(hausdorff(a, np.zeros_like(a))) == "Nan"
    assert format_value(dsc(a, np.zeros_like(a))) == "0.00"


def test_hausdorff_mm_units():
    a = np.zeros((5, 5, 5), bool)
    b = np.zeros_like(a)
    a[0, 0, 0] = True
    b[3, 2, 0] = True
    va, vb = Volume3D(a.astype(np.uint8), (0.5, 2.0, 1.0)), Volume3D(b.astype(np.uint8), (0.5, 2.0, 1.0))
    assert hausdorff(va, vb, units="mm") == pytest.approx(math.hypot(1.5, 4.0))
    assert hausdorff(va, vb, units="voxel") == pytest.approx(math.hypot(3, 2))


mask_pair = st.integers(2, 8).flatmap(
    lambda n: st.tuples(
        arrays(np.bool_, (n, n, n), elements=st.booleans()),
        arrays(np.bool_, (n, n, n), elements=st.booleans()),
    )
)


@given(mask_pair)
def test_metrics_against_oracles(pair):
    a, b = pair
    na, nb, both = int(a.sum()), int(b.sum()), int((a & b).sum())
    want_dsc = 1.0 if na + nb == 0 else 2 * both / (na + nb)
    assert dsc(a, b) == want_dsc == dsc(b, a)
    want_vs = 1.0 if na + nb == 0 else 1 - abs(na - nb) / (na + nb)
    assert volumetric_similarity(a, b) == want_vs
    if na and nb:
        assert hausdorff(a, b) == pytest.approx(brute_hausdorff(a, b), abs=1e-12)
        assert hausdorff(a, b) == hausdorff(b, a)
    else:
        assert math.isnan(hausdorff(a, b))


def test_match_identical_two_lesions():
    gt = ball((20, 20, 20), (5, 5, 5), 2) | ball((20, 20, 20), (14, 14, 14), 2)
    c = match_lesions(gt, gt)
    assert (c.TP, c.FP, c.FN) == (2, 0, 0)


def test_match_empty_prediction():
    gt = ball((12, 12, 12), (6, 6, 6), 2)
    c = match_lesions(gt, np.zeros_like(gt))
    assert (c.TP, c.FP, c.FN) == (0, 0, 1)


def test_match_straddling_blob_single_assignment():
    gt = np.zeros((20, 10, 10), bool)
    gt[2:6, 3:7, 3:7] = True  # 64 voxels
    gt[9:13, 3:7, 3:7] = True  # 64 voxels
    pred = np.zeros_like(gt)
    pred[4:12, 4:6, 4:6] = True  # 2 planes into the first, 3 into the second
    # brute-force overlap table
    gcc = connected_components(gt)
    overlaps = [int((pred & (gcc.labels == i + 1)).sum()) for i in range(len(gcc))]
    assert overlaps == [8, 12]
    c = match_lesions(gt, pred)
    assert (c.TP, c.FP, c.FN) == (1, 0, 1)


def test_match_false_positive_and_center_rule():
    gt = ball((20, 20, 20), (5, 5, 5), 2)
    pred = ball((20, 20, 20), (14, 14, 14), 2) | ball((20, 20, 20), (6, 5, 5), 2)
    c = match_lesions(gt, pred)
    assert (c.TP, c.FP, c.FN) == (1, 1, 0)
    c = match_lesions(gt, pred, rule="center")
    assert (c.TP, c.FP, c.FN) == (1, 1, 0)
    shifted = ball((20, 20, 20), (8, 5, 5), 2)  # touches gt but centroid outside
    c = match_lesions(gt, shifted, rule="center")
    assert (c.TP, c.FP, c.FN) == (0, 0, 1)


@given(arrays(np.bool_, (6, 6, 6), elements=st.booleans()), arrays(np.bool_, (6, 6, 6), elements=st.booleans()))
def test_lesion_count_totals(gt, pred):
    c = match_lesions(gt, pred)
    assert c.TP + c.FN == len(connected_components(gt))
    assert c.FP <= len(connected_components(pred))


def test_geometry_mismatch():
    with pytest.raises(ValueError):
        dsc(np.zeros((3, 3, 3)), np.zeros((3, 3, 4)))
    with pytest.raises(ValueError):
        match_lesions(np.zeros((3, 3, 3)), np.zeros((4, 3, 3)))


ORIENT = {"dsc": "higher", "hd": "lower", "vs": "higher"}


def table(cols, names=None):
    n = len(next(iter(cols.values())))
    names = names or [f"m{i}" for i in range(n)]
    return {m: {k: v[i] for k, v in cols.items()} for i, m in enumerate(names)}


def test_rank_table3():
    t = table({"dsc": [0.73, 0.76, 0.79, 0.81], "hd": [36.27, 32.76, 35.99, 17.93], "vs": [0.42, 0.67, 0.44, 0.84]},
              ["Baseline", "DCI + Baseline", "WDL + Baseline", "Proposed"])
    r = rank_models(t, ORIENT)
    np.testing.assert_allclose(r.scores, [1.0, 0.6128, 0.7290, 0.0], atol=1e-4)
    assert r.best() == "Proposed"


def test_rank_degenerate_column_scores_zero():
    r = rank_models(table({"dsc": [0.5, 0.5, 0.5]}), {"dsc": "higher"})
    assert np.all(r.scores == 0)


def test_rank_errors():
    with pytest.raises(ValueError):
        rank_models(table({"dsc": [0.5]}), {"dsc": "higher"})
    with pytest.raises(ValueError):
        rank_models(table({"hd": [float("nan"), float("nan")]}), {"hd": "lower"})


def test_rank_undefined_value_scores_worst():
    r = rank_models(table({"hd": [10.0, float("nan"), 20.0]}), {"hd": "lower"})
    np.testing.assert_allclose(r.scores, [0.0, 1.0, 1.0])


@given(
    st.lists(st.integers(-1000, 1000).map(lambda v: v / 10), min_size=3, max_size=3, unique=True),
    st.lists(st.integers(0, 500).map(lambda v: v / 10), min_size=3, max_size=3),
    st.floats(0.01, 100),
    st.floats(-100, 100),
)
def test_rank_invariant_under_increasing_affine_rescale(a, b, scale, shift):
    orient = {"a": "higher", "b": "lower"}
    base = rank_models(table({"a": a, "b": b}), orient)
    moved = rank_models(table({"a": [scale * v + shift for v in a], "b": b}), orient)
    np.testing.assert_allclose(base.scores, moved.scores, atol=1e-9)
    assert np.all((base.scores >= 0) & (base.scores <= 1))


def test_rank_permutation_of_models_permutes_scores():
    cols = {"dsc": [0.81, 0.79, 0.81, 0.82, 0.80], "hd": [17.93, 25.42, 22.61, 19.64, 21.44]}
    names = list("abcde")
    orient = {"dsc": "higher", "hd": "lower"}
    ref = dict(zip(names, rank_models(table(cols, names), orient).scores))
    for perm in itertools.islice(itertools.permutations(range(5)), 10):
        pcols = {k: [v[i] for i in perm] for k, v in cols.items()}
        pnames = [names[i] for i in perm]
        got = dict(zip(pnames, rank_models(table(pcols, pnames), orient).scores))
        assert got == pytest.approx(ref)
