import os
import shutil

import cv2
import numpy as np
import pytest

from evomap.dataset import (DEPTH_SCALE, DatasetFormatError, decode_depth,
                            encode_depth, frame_from_gt, generate,
                            load_dataset)
from evomap.scenes import static_room
from evomap.simulator import render_frame


@pytest.fixture(scope="module")
def short_dataset(tmp_path_factory):
    script = static_room()
    script.trajectory = script.trajectory[:3]
    path = str(tmp_path_factory.mktemp("ds"))
    ds = generate(script, path)
    return script, path, ds


def test_round_trip_quantization(short_dataset):
    script, _, ds = short_dataset
    assert len(ds) == 3
    for i, frame in enumerate(ds.frames):
        gt = render_frame(script, i)
        # color stored as 8-bit, depth as uint16 at 0.25 mm
        assert np.abs(frame.color - gt.color).max() <= 0.5 / 255 + 1e-6
        valid = gt.depth > 0
        assert np.abs(frame.depth - gt.depth)[valid].max() \
            <= 0.5 / DEPTH_SCALE + 1e-6
        np.testing.assert_array_equal(frame.depth <= 0, gt.depth <= 0)
        np.testing.assert_array_equal(frame.provenance, gt.provenance)
        assert len(frame.masks) == len(gt.masks)
        for m, oid in zip(frame.masks, sorted(gt.masks)):
            np.testing.assert_array_equal(m, gt.masks[oid])


def test_pose_round_trip(short_dataset):
    script, _, ds = short_dataset
    for i, frame in enumerate(ds.frames):
        np.testing.assert_allclose(frame.pose, script.trajectory[i],
                                   atol=1e-6)


def test_script_and_sequences_survive(short_dataset):
    script, _, ds = short_dataset
    assert ds.sequence_starts == [0]
    assert ds.script is not None
    a = render_frame(ds.script, 1)
    b = render_frame(script, 1)
    np.testing.assert_array_equal(a.depth, b.depth)


def test_encode_decode_depth_bounds():
    rng = np.random.default_rng(4)
    for _ in range(5):
        d = rng.uniform(0.0, 8.0, size=(40, 50))
        d[rng.random(d.shape) < 0.1] = 0.0
        back = decode_depth(encode_depth(d))
        valid = d > 0
        # decode returns float32, which adds its own rounding on top of
        # the 0.25 mm quantization step
        assert np.abs(back - d)[valid].max() <= 0.5 / DEPTH_SCALE + 1e-6
        assert np.all(back[~valid] == 0)
    # negatives are invalid, huge depths saturate instead of wrapping
    assert encode_depth(np.array([[-1.0]]))[0, 0] == 0
    assert encode_depth(np.array([[1e6]]))[0, 0] == np.iinfo(np.uint16).max


def test_frame_from_gt_adapter():
    gt = render_frame(static_room(), 2)
    f = frame_from_gt(gt)
    assert f.id == 2
    assert f.timestamp == pytest.approx(2 / 30.0)
    assert f.camera is gt.camera
    assert len(f.masks) == len(gt.masks)
    np.testing.assert_array_equal(f.masks[0], gt.masks[sorted(gt.masks)[0]])
    f9 = frame_from_gt(gt, frame_id=9)
    assert f9.id == 9


def copy_dataset(src, tmp_path, name):
    dst = str(tmp_path / name)
    shutil.copytree(src, dst)
    return dst


def test_missing_directory_raises(tmp_path):
    with pytest.raises(DatasetFormatError):
        load_dataset(str(tmp_path / "nope"))


def test_bad_intrinsics_field_count(short_dataset, tmp_path):
    _, src, _ = short_dataset
    dst = copy_dataset(src, tmp_path, "bad_intr")
    with open(os.path.join(dst, "intrinsics.txt"), "w") as f:
        f.write("100 100 59.5 44.5 120 90 0.01\n")
    with pytest.raises(DatasetFormatError, match="8 fields"):
        load_dataset(dst)


def test_bad_pose_line(short_dataset, tmp_path):
    _, src, _ = short_dataset
    dst = copy_dataset(src, tmp_path, "bad_pose")
    with open(os.path.join(dst, "poses.txt")) as f:
        lines = f.readlines()
    lines[1] = "0.033 1 2 3\n"
    with open(os.path.join(dst, "poses.txt"), "w") as f:
        f.writelines(lines)
    with pytest.raises(DatasetFormatError, match="pose line"):
        load_dataset(dst)


def test_depth_must_be_16bit(short_dataset, tmp_path):
    _, src, _ = short_dataset
    dst = copy_dataset(src, tmp_path, "bad_depth")
    path = os.path.join(dst, "depth", "000001.png")
    cv2.imwrite(path, np.zeros((90, 120), dtype=np.uint8))
    with pytest.raises(DatasetFormatError, match="16-bit"):
        load_dataset(dst)


def test_mask_shape_checked(short_dataset, tmp_path):
    _, src, _ = short_dataset
    dst = copy_dataset(src, tmp_path, "bad_mask")
    path = os.path.join(dst, "masks", "000000", "000.png")
    cv2.imwrite(path, np.full((10, 10), 255, dtype=np.uint8))
    with pytest.raises(DatasetFormatError, match="mask"):
        load_dataset(dst)


def test_sequences_must_start_at_zero(short_dataset, tmp_path):
    _, src, _ = short_dataset
    dst = copy_dataset(src, tmp_path, "bad_seq")
    with open(os.path.join(dst, "sequences.txt"), "w") as f:
        f.write("2\n")
    with pytest.raises(DatasetFormatError, match="start with 0"):
        load_dataset(dst)


def test_missing_masks_warns_but_loads(short_dataset, tmp_path):
    _, src, _ = short_dataset
    dst = copy_dataset(src, tmp_path, "no_masks")
    shutil.rmtree(os.path.join(dst, "masks"))
    with pytest.warns(UserWarning, match="masks"):
        ds = load_dataset(dst)
    assert all(f.masks == [] for f in ds.frames)


def test_no_provenance_loads_silently(short_dataset, tmp_path):
    _, src, _ = short_dataset
    dst = copy_dataset(src, tmp_path, "no_prov")
    shutil.rmtree(os.path.join(dst, "provenance"))
    ds = load_dataset(dst)
    assert all(f.provenance is None for f in ds.frames)
