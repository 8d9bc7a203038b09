import gzip

import nibabel as nib
import numpy as np
import pytest

from aneuseg.nifti import NiftiError, load_volume, save_volume
from aneuseg.volume import LabelVolume, Volume3D


def test_zeros_round_trip(tmp_path):
    p = tmp_path / "z.nii"
    save_volume(Volume3D(np.zeros((8, 8, 8), dtype=np.float32)), p)
    v = load_volume(p)
    assert v.size == 512 and not v.data.any()


@pytest.mark.parametrize("suffix", [".nii", ".nii.gz"])
def test_random_round_trip_bitwise(tmp_path, rng, suffix):
    v = Volume3D(rng.normal(size=(5, 7, 3)).astype(np.float32), (0.5, 0.5, 0.8), (1.0, -2.0, 3.5))
    p = tmp_path / f"r{suffix}"
    save_volume(v, p)
    back = load_volume(p)
    assert back.data.dtype == np.float32
    assert back.data.tobytes() == v.data.tobytes()
    assert back.spacing == (0.5, 0.5, 0.8)
    assert back.origin == (1.0, -2.0, 3.5)


def test_label_round_trip(tmp_path, rng):
    lab = LabelVolume(rng.integers(0, 3, size=(6, 6, 6)).astype(np.uint8))
    p = tmp_path / "l.nii.gz"
    save_volume(lab, p)
    back = load_volume(p)
    assert isinstance(back, LabelVolume)
    assert back.data.dtype.kind == "u"
    for k in range(3):
        assert (back.data == k).sum() == (lab.data == k).sum()


def test_header_against_nibabel(tmp_path, rng):
    data = rng.normal(size=(2, 3, 4)).astype(np.float32)
    p = tmp_path / "h.nii"
    save_volume(Volume3D(data, (0.7, 0.8, 0.9), (10.0, 20.0, 30.0)), p)
    img = nib.load(str(p))
    assert img.shape == (2, 3, 4)
    np.testing.assert_allclose(img.header.get_zooms(), (0.7, 0.8, 0.9), rtol=1e-6)
    np.testing.assert_array_equal(np.asarray(img.dataobj), data)
    np.testing.assert_allclose(img.affine[:3, 3], (10, 20, 30))
    assert load_volume(p).size == 24


@pytest.mark.parametrize("dtype", [np.int8, np.int16, np.uint8, np.float32])
def test_reads_files_written_by_nibabel(tmp_path, rng, dtype):
    data = rng.integers(0, 100, size=(4, 5, 6)).astype(dtype)
    affine = np.diag([0.5, 0.6, 0.7, 1.0])
    affine[:3, 3] = (1, 2, 3)
    p = tmp_path / "n.nii.gz"
    nib.save(nib.Nifti1Image(data, affine), str(p))
    v = load_volume(p, kind="image")
    np.testing.assert_array_equal(v.data, data)
    np.testing.assert_allclose(v.spacing, (0.5, 0.6, 0.7), rtol=1e-6)
    np.testing.assert_allclose(v.origin, (1, 2, 3))


def test_scaled_data_applies_slope(tmp_path):
    data = np.arange(24, dtype=np.int16).reshape(2, 3, 4)
    img = nib.Nifti1Image(data, np.eye(4))
    img.header.set_slope_inter(2.0, 1.0)
    p = tmp_path / "s.nii"
    nib.save(img, str(p))
    np.testing.assert_allclose(load_volume(p).data, data * 2.0 + 1.0)


def test_gzip_output_is_deterministic(tmp_path, rng):
    v = Volume3D(rng.normal(size=(4, 4, 4)).astype(np.float32))
    save_volume(v, tmp_path / "a.nii.gz")
    save_volume(v, tmp_path / "b.nii.gz")
    assert (tmp_path / "a.nii.gz").read_bytes() == (tmp_path / "b.nii.gz").read_bytes()


def test_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_volume(tmp_path / "missing.nii")
    bad = tmp_path / "bad.nii"
    bad.write_bytes(b"\x00" * 400)
    with pytest.raises(NiftiError):
        load_volume(bad)
    four_d = tmp_path / "4d.nii"
    nib.save(nib.Nifti1Image(np.zeros((2, 2, 2, 3), np.float32), np.eye(4)), str(four_d))
    with pytest.raises(NiftiError):
        load_volume(four_d)
    gz = tmp_path / "trunc.nii.gz"
    gz.write_bytes(gzip.compress(b"\x5c\x01\x00\x00" + b"\x00" * 100))
    with pytest.raises(NiftiError):
        load_volume(gz)
    with pytest.raises(OSError):
        save_volume(Volume3D(np.zeros((2, 2, 2))), tmp_path / "no" / "dir" / "x.nii")
