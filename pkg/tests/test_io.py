import threading
import time

import numpy as np
import pytest

from densetact.errors import FormatError
from densetact.io import exclusive_lock, load_depth_map, read_image, save_depth_map, write_pgm, write_png
from densetact.sensor import DepthMap


def test_png_round_trip(tmp_path):
    rgb = np.random.default_rng(0).integers(0, 256, (5, 7, 3), dtype=np.uint8)
    write_png(tmp_path / "a.png", rgb)
    assert np.array_equal(read_image(tmp_path / "a.png"), rgb)


def test_png_bytes_depend_only_on_pixels(tmp_path):
    g = np.arange(64, dtype=np.uint8).reshape(8, 8)
    write_png(tmp_path / "a.png", g)
    time.sleep(0.01)
    write_png(tmp_path / "b.png", g)
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()


def test_depth_map_png_and_pgm(tmp_path, model):
    valid = np.ones((6, 6), bool)
    valid[0] = False
    dm = DepthMap(np.arange(36, dtype=np.uint8).reshape(6, 6), valid, model.max_depression)
    for name in ("d.png", "d.pgm"):
        save_depth_map(dm, tmp_path / name, model)
        back = load_depth_map(tmp_path / name, valid, model)
        assert np.array_equal(back.codes, dm.codes)
    assert (tmp_path / "d.png.json").exists()


def test_unreadable_image(tmp_path):
    (tmp_path / "x.png").write_bytes(b"nope")
    with pytest.raises(FormatError):
        read_image(tmp_path / "x.png")


def test_lock_reentrant_and_exclusive(tmp_path):
    order = []
    with exclusive_lock(tmp_path):
        with exclusive_lock(tmp_path):      # nested use in one thread must not deadlock
            order.append("outer")

        def other():
            with exclusive_lock(tmp_path):
                order.append("other")

        t = threading.Thread(target=other)
        t.start()
        time.sleep(0.2)
        order.append("release")
    t.join(5)
    assert order == ["outer", "release", "other"]
