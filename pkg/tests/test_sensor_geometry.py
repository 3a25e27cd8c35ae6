import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from densetact.calibration import (CorrespondenceTable, build_correspondence_table, calibrate, detect_sawtooth_edges,
                                   load_calibration, pixel_to_spherical, render_sawtooth_image, save_calibration,
                                   spherical_to_pixel)
from densetact.errors import CalibrationError, DepthRangeError, FormatError, GpInconsistencyError
from densetact.gp import GpHyper, fit_gp
from densetact.sensor import DepthMap, SensorModel, decode_depth, encode_depth

BIG = SensorModel(image_width=400, image_height=400, center_u=199.5, center_v=199.5, crop_size=400)
WIDE = SensorModel(image_width=570, image_height=570, center_u=284.5, center_v=284.5, crop_size=570)


def linear_samples(slope, r_max, n=10):
    r = np.linspace(0.0, r_max, n)
    return np.stack([r, slope * r], axis=1)


@pytest.fixture(scope="module")
def fixture_gp():
    # y = 0.1 r sampled up to r = 250 (theta = 90 deg at R0 = 25)
    return fit_gp(linear_samples(0.1, 250.0))


# -- saw-tooth detection --------------------------------------------------------

def test_sawtooth_known_radii():
    truth = [40.0, 80.0, 118.0, 152.0]
    edges = detect_sawtooth_edges(render_sawtooth_image(BIG, truth), BIG, 5.0)
    assert len(edges) == 4
    for (r, t), r0, k in zip(edges, truth, range(1, 5)):
        assert abs(r - r0) < 0.1
        assert t == pytest.approx(math.radians(5.0 * k), abs=1e-12)


def test_uniform_image_is_calibration_error():
    with pytest.raises(CalibrationError):
        detect_sawtooth_edges(np.full((400, 400), 0.5), BIG, 5.0)


@pytest.mark.parametrize("seed", range(5))
def test_jittered_edges_within_one_pixel(seed):
    rng = np.random.default_rng(seed)
    truth = np.array([40.0, 80.0, 118.0, 152.0]) + rng.normal(0.0, 1.0, 4)
    edges = detect_sawtooth_edges(render_sawtooth_image(BIG, truth), BIG, 5.0)
    np.testing.assert_allclose([r for r, _ in edges], truth, atol=1.0)


# -- GP ---------------------------------------------------------------------------

def test_gp_linear_fixture_at_55():
    gp = fit_gp(linear_samples(0.1, 100.0))
    assert abs(gp.predict(np.array([55.0]))[0] - 5.5) < 1e-3


def test_gp_duplicate_pair():
    gp = fit_gp([(100.0, 12.0), (100.0, 12.0)])
    assert abs(gp.predict(np.array([100.0]))[0] - 12.0) <= 3 * gp.hyper.noise_std


def test_gp_conflicting_duplicates():
    with pytest.raises(GpInconsistencyError):
        fit_gp([(0.0, 0.0), (100.0, 12.0), (100.0, 14.0)])


def test_gp_two_samples_between_targets():
    gp = fit_gp([(10.0, 1.0), (50.0, 4.0)], hyper=GpHyper(1.0, 5.0, 1e-8))
    mid = gp.predict(np.linspace(11.0, 49.0, 39))
    assert np.all(mid >= 1.0 - 1e-9) and np.all(mid <= 4.0 + 1e-9)


@given(slope=st.floats(0.02, 0.2), n=st.integers(4, 14), r_max=st.floats(30.0, 300.0))
def test_gp_interpolates_training_points(slope, n, r_max):
    s = linear_samples(slope, r_max, n)
    s[:, 1] += 0.3 * np.sin(s[:, 0] / r_max * 3.0)
    gp = fit_gp(s)
    assert np.all(np.abs(gp.predict(s[:, 0]) - s[:, 1]) <= 3 * gp.hyper.noise_std + 1e-9)


def test_gp_monotone_fixture():
    gp = fit_gp(linear_samples(0.1, 250.0))
    y = gp.predict(np.linspace(0.0, 250.0, 5001))
    assert np.min(np.diff(y)) >= -1e-6


# -- pixel <-> sphere -----------------------------------------------------------

def test_psi_axes(fixture_gp):
    uc, vc = WIDE.crop_center
    assert pixel_to_spherical(WIDE, fixture_gp, uc + 10, vc)[1] == 0.0
    assert pixel_to_spherical(WIDE, fixture_gp, uc, vc + 10)[1] == pytest.approx(math.pi / 2, abs=1e-15)


def test_fixture_theta_at_125(fixture_gp):
    uc, vc = WIDE.crop_center
    theta, _, valid = pixel_to_spherical(WIDE, fixture_gp, uc + 125.0, vc)
    assert valid and theta == pytest.approx(math.pi / 6, abs=1e-5)


def test_center_pixel_invalid(fixture_gp):
    assert not pixel_to_spherical(WIDE, fixture_gp, *WIDE.crop_center)[2]


@given(u=st.floats(0, 569), v=st.floats(0, 569))
def test_psi_quadrants(fixture_gp, u, v):
    uc, vc = WIDE.crop_center
    _, psi, valid = pixel_to_spherical(WIDE, fixture_gp, u, v)
    if valid and u != uc and v != vc:
        assert np.sign(math.sin(psi)) == np.sign(v - vc)
        assert np.sign(math.cos(psi)) == np.sign(u - uc)


# -- correspondence table -------------------------------------------------------

def test_table_census_570():
    gp = fit_gp(linear_samples(25.0 / 285.0, 285.0))
    table = build_correspondence_table(WIDE, gp)
    area = math.pi * 285.0 ** 2
    assert abs(table.valid_count - area) / area < 0.02


def test_table_census_64(model):
    gp = fit_gp(linear_samples(25.0 / 32.0, 32.0))
    table = build_correspondence_table(model, gp)
    area = math.pi * 32.0 ** 2
    assert abs(table.valid_count - area) / area < 0.02


def test_table_round_trip_desk(cal, model):
    t = cal.table
    vv, uu = np.nonzero(t.valid)
    u2, v2 = spherical_to_pixel(model, cal.gp, t.theta[t.valid], t.psi[t.valid])
    err = np.hypot(u2 - uu, v2 - vv)
    assert np.mean(err <= 0.5) >= 0.995


def test_table_bytes_round_trip(cal):
    t2 = CorrespondenceTable.from_bytes(cal.table.to_bytes())
    assert np.array_equal(t2.theta, cal.table.theta) and np.array_equal(t2.valid, cal.table.valid)


def test_table_bad_magic(cal):
    with pytest.raises(FormatError):
        CorrespondenceTable.from_bytes(b"XXXX" + cal.table.to_bytes()[4:])


def test_calibration_file_round_trip(cal, tmp_path):
    doc = save_calibration(cal, tmp_path / "c.json")
    back = load_calibration(tmp_path / "c.json")
    assert back.document()["content_hash"] == doc["content_hash"]
    assert np.array_equal(back.table.psi, cal.table.psi)


def test_calibration_deterministic(cal, model):
    again = calibrate(model, np.stack([cal.gp.r, cal.gp.y], axis=1), hyper=cal.gp.hyper, tooth_interval_deg=10.0)
    assert again.document()["content_hash"] == cal.document()["content_hash"]


# -- depth encoding --------------------------------------------------------------

def test_encode_examples(model):
    assert encode_depth(0.0, model) == 0 and decode_depth(0, model) == 0.0
    assert encode_depth(9.4, model) == 255 and decode_depth(255, model) == pytest.approx(9.4, abs=1e-12)
    assert encode_depth(4.7, model) == 128
    assert decode_depth(128, model) == pytest.approx(128 * 9.4 / 255, abs=1e-12)  # 4.71843
    assert abs(decode_depth(128, model) - 4.7) <= 9.4 / 510 + 1e-12


def test_encode_out_of_range(model):
    with pytest.raises(DepthRangeError):
        encode_depth(9.5, model)
    with pytest.raises(DepthRangeError):
        encode_depth(-0.01, model)


@given(d=st.floats(0.0, 9.4))
def test_quantization_bound(model, d):
    assert abs(decode_depth(encode_depth(d, model), model) - d) <= 9.4 / 510 + 1e-12


def test_depth_map_masks_invalid(model):
    codes = np.full((4, 4), 7, np.uint8)
    valid = np.eye(4, dtype=bool)
    dm = DepthMap(codes, valid, model.max_depression)
    assert np.all(dm.codes[~valid] == 0) and np.all(dm.codes[valid] == 7)
