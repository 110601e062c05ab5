import os

import numpy as np
import pytest

from evomap.geometry import Camera
from evomap.gmap import GaussianMap
from evomap.raster import render
from evomap.serialize import MAGIC, MapFormatError, load_map, save_map


def random_map(seed=0, n=40, labelled=False):
    rng = np.random.default_rng(seed)
    gmap = GaussianMap()
    means = np.column_stack([rng.uniform(-1, 1, n), rng.uniform(-1, 1, n),
                             rng.uniform(1.5, 4.0, n)])
    labels = rng.integers(0, 4, n) if labelled else None
    gmap.insert(means, rng.uniform(0, 1, (n, 3)),
                log_scales=rng.uniform(-3.5, -1.5, (n, 3)),
                quats=rng.normal(size=(n, 4)),
                opacity_logits=rng.uniform(-1, 3, n), labels=labels)
    return gmap


def test_round_trip_is_bit_exact(tmp_path):
    gmap = random_map(1)
    # tombstone a few and compact, so row order differs from insert order
    gmap.tombstone(gmap.live_ids()[::7])
    gmap.compact()
    path = str(tmp_path / "m.evomap")
    save_map(gmap, path)
    back = load_map(path)
    assert len(back) == len(gmap)
    rows_a = gmap.live_rows()
    rows_b = back.live_rows()
    for attr in ("means", "quats", "log_scales", "opacity_logits", "colors"):
        np.testing.assert_array_equal(getattr(gmap, attr)[rows_a],
                                      getattr(back, attr)[rows_b])

    cam = Camera(fx=50.0, fy=50.0, cx=15.5, cy=15.5, width=32, height=32)
    out_a = render(gmap, cam)
    out_b = render(back, cam)
    np.testing.assert_array_equal(out_a.color, out_b.color)
    np.testing.assert_array_equal(out_a.depth, out_b.depth)

    # saving the reloaded map reproduces the file byte for byte
    path2 = str(tmp_path / "m2.evomap")
    save_map(back, path2)
    assert open(path, "rb").read() == open(path2, "rb").read()


def test_labels_sidecar(tmp_path):
    path = str(tmp_path / "m.evomap")
    labelled = random_map(2, labelled=True)
    save_map(labelled, path)
    assert os.path.exists(path + ".labels.npy")
    back = load_map(path)
    np.testing.assert_array_equal(back.labels[back.live_rows()],
                                  labelled.labels[labelled.live_rows()])

    # an all-zero-label map removes a stale sidecar instead of keeping it
    plain = random_map(3, labelled=False)
    save_map(plain, path)
    assert not os.path.exists(path + ".labels.npy")
    assert load_map(path).labels[0] == 0


def test_empty_map_round_trips(tmp_path):
    path = str(tmp_path / "empty.evomap")
    save_map(GaussianMap(), path)
    back = load_map(path)
    assert len(back) == 0
    cam = Camera(fx=50.0, fy=50.0, cx=15.5, cy=15.5, width=32, height=32)
    out = render(back, cam, background=(0.1, 0.2, 0.3))
    assert np.allclose(out.color, [0.1, 0.2, 0.3])


def test_bad_magic_rejected(tmp_path):
    path = str(tmp_path / "bad.evomap")
    with open(path, "wb") as f:
        f.write(b"NOTAMAP\x00" + b"\x00" * 16)
    with pytest.raises(MapFormatError, match="magic"):
        load_map(path)


def test_bad_version_rejected(tmp_path):
    path = str(tmp_path / "bad.evomap")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(np.uint32(99).tobytes())
        f.write(np.uint64(0).tobytes())
    with pytest.raises(MapFormatError, match="version"):
        load_map(path)


def test_truncated_payload_rejected(tmp_path):
    src = str(tmp_path / "ok.evomap")
    save_map(random_map(4, n=10), src)
    data = open(src, "rb").read()
    path = str(tmp_path / "cut.evomap")
    with open(path, "wb") as f:
        f.write(data[:-8])
    with pytest.raises(MapFormatError, match="payload"):
        load_map(path)


def test_labels_shape_mismatch_rejected(tmp_path):
    path = str(tmp_path / "m.evomap")
    save_map(random_map(5, n=10, labelled=True), path)
    np.save(path + ".labels.npy", np.zeros(3, dtype=np.int64))
    with pytest.raises(MapFormatError, match="labels"):
        load_map(path)
