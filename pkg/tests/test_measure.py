import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nlos_locate.measure import (
    SPEED_OF_LIGHT,
    AngleMeasurement,
    DegenerateDensityError,
    GroundTruth,
    MeasurementSet,
    NoiseConfig,
    PtMeasurement,
    RptMeasurement,
    TruePath,
    angles_to_direction,
    aoa_log_density,
    direction_to_angles,
    perturb,
    sample_pt_lengths,
    sample_rpt_deltas,
    true_observables,
    wrap_angle,
)
from nlos_locate.scene import BaseStation, Scene, Surface, box_faces


def room_with_box(box_lo, box_hi, bs=((0.0, 0.0, 0.0),)):
    faces = box_faces([-1, -1, -1], [10, 10, 3], inward=True)
    faces += box_faces(box_lo, box_hi, inward=False)
    stations = tuple(BaseStation(i, np.array(p, float)) for i, p in enumerate(bs))
    return Scene(tuple(Surface(f) for f in faces), stations)


def truth_with_lengths(lengths):
    paths = {i: TruePath(i, np.zeros((2, 3)), L, 0.3 * i, 0.1) for i, L in lengths.items()}
    return GroundTruth(np.zeros(3), paths, {})


# --- ground truth ----------------------------------------------------------

def test_line_of_sight_3_4_5():
    scene = room_with_box([8, 8, 0], [9, 9, 1])
    gt = true_observables(scene, [3.0, 4.0, 0.0])
    p = gt.paths[0]
    assert p.bounce_count == 0
    assert p.length == pytest.approx(5.0, abs=1e-12)
    assert p.azimuth == pytest.approx(math.atan2(4, 3), abs=1e-12)
    assert p.elevation == pytest.approx(0.0, abs=1e-12)


def test_ue_behind_box_is_reached_by_reflection():
    scene = room_with_box([2, -0.5, -0.5], [3, 0.5, 2.5])
    ue = np.array([5.0, 0.0, 0.0])
    p = true_observables(scene, ue).paths[0]
    assert p.bounce_count >= 1
    assert p.length > 5.0
    assert not np.isclose(p.azimuth, 0.0) or not np.isclose(p.elevation, 0.0)


def test_enclosed_ue_reports_no_path():
    scene = room_with_box([4, 4, 0], [6, 6, 2])
    gt = true_observables(scene, [5.0, 5.0, 1.0])
    assert gt.paths == {}
    assert gt.failures == {0: "no path found"}


def test_pt_time_length_consistency():
    m = PtMeasurement.from_length(0, 12.345, 0.5)
    assert m.time * SPEED_OF_LIGHT == pytest.approx(12.345, rel=1e-15)
    assert m.equivalent_length / SPEED_OF_LIGHT == pytest.approx(m.time, rel=1e-15)


# --- perturbation ----------------------------------------------------------

def test_zero_noise_is_identity():
    gt = truth_with_lengths({0: 5.0, 1: 7.5, 2: 9.0})
    ms = perturb(gt, NoiseConfig(0.0, 0.0, 0.0), np.random.default_rng(1), pt=True, rpt=True)
    for i, p in gt.paths.items():
        assert ms.aoa[i].azimuth == p.azimuth and ms.aoa[i].elevation == p.elevation
        assert ms.pt[i].equivalent_length == pytest.approx(p.length, rel=1e-15)
    assert ms.rpt_for(0, 2).delta_length == pytest.approx(-4.0, abs=1e-12)


def test_angle_noise_has_requested_spread():
    gt = truth_with_lengths({0: 5.0})
    sigma = math.radians(1.0)
    rng = np.random.default_rng(2)
    d_az = [perturb(gt, NoiseConfig(sigma, 0, 0), rng).aoa[0].azimuth - 0.0 for _ in range(10_000)]
    std = np.std(d_az)
    assert 0.97 * sigma <= std <= 1.03 * sigma


def test_rpt_antisymmetry_under_swap():
    gt = truth_with_lengths({0: 5.0, 1: 8.0})
    ms = perturb(gt, NoiseConfig(0.0, 0.0, 0.3), np.random.default_rng(4), rpt=True)
    a, b = ms.rpt_for(0, 1), ms.rpt_for(1, 0)
    assert a.delta_length == -b.delta_length
    assert b.bs_pair == (1, 0)


def test_pt_length_is_clamped_at_zero():
    gt = truth_with_lengths({0: 0.01})
    rng = np.random.default_rng(5)
    for _ in range(200):
        assert perturb(gt, NoiseConfig(0, 2.0, 0), rng, pt=True).pt[0].time >= 0.0


def test_seed_determinism():
    gt = truth_with_lengths({0: 5.0, 1: 8.0, 2: 3.0})
    cfg = NoiseConfig(0.01, 0.5, 0.5)
    a = perturb(gt, cfg, np.random.default_rng(9), pt=True, rpt=True)
    b = perturb(gt, cfg, np.random.default_rng(9), pt=True, rpt=True)
    assert a == b


def test_duplicate_measurements_rejected():
    ms = MeasurementSet()
    ms.add(RptMeasurement((0, 1), 1.0, 0.5))
    with pytest.raises(ValueError):
        ms.add(RptMeasurement((1, 0), -1.0, 0.5))
    ms.add(AngleMeasurement(0, 0.0, 0.0, 0.01))
    with pytest.raises(ValueError):
        ms.add(AngleMeasurement(0, 0.1, 0.0, 0.01))


# --- error densities -------------------------------------------------------

def test_aoa_density_mode_and_one_sigma_offset():
    s = math.radians(1.0)
    m = AngleMeasurement(0, 0.5, 0.2, s)
    peak = aoa_log_density(m, (0.5, 0.2))
    assert peak == pytest.approx(-math.log(2 * math.pi * s * s), rel=1e-12)
    assert aoa_log_density(m, (0.5 + s, 0.2)) - peak == pytest.approx(-0.5, abs=1e-12)


def test_aoa_density_wraps_azimuth():
    s = math.radians(1.0)
    m = AngleMeasurement(0, math.pi - 0.001, 0.0, s)
    near = aoa_log_density(m, (-math.pi + 0.001, 0.0))
    assert near == pytest.approx(aoa_log_density(m, (math.pi - 0.003, 0.0)), abs=1e-9)


def test_aoa_density_maximized_at_measurement():
    s = 0.02
    m = AngleMeasurement(0, 1.0, -0.3, s)
    az, el = np.meshgrid(np.linspace(1 - 3 * s, 1 + 3 * s, 61), np.linspace(-0.3 - 3 * s, -0.3 + 3 * s, 61))
    vals = aoa_log_density(m, (az, el))
    i = np.unravel_index(np.argmax(vals), vals.shape)
    assert az[i] == pytest.approx(1.0) and el[i] == pytest.approx(-0.3)


def test_zero_sigma_density_is_an_error():
    with pytest.raises(DegenerateDensityError):
        aoa_log_density(AngleMeasurement(0, 0, 0, 0.0), (0, 0))


def test_pt_sampling():
    rng = np.random.default_rng(0)
    assert np.all(sample_pt_lengths(PtMeasurement.from_length(0, 4.0, 0.0), 10, rng) == pytest.approx(4.0))
    x = sample_pt_lengths(PtMeasurement.from_length(0, 4.0, 0.5), 10_000, rng)
    assert abs(x.mean() - 4.0) < 4 * 0.5 / 100
    assert np.all(sample_pt_lengths(PtMeasurement.from_length(0, 0.1, 2.0), 1000, rng) >= 0)


def test_rpt_sampling():
    rng = np.random.default_rng(0)
    assert np.all(sample_rpt_deltas(RptMeasurement((0, 1), -2.0, 0.0), 5, rng) == -2.0)
    x = sample_rpt_deltas(RptMeasurement((0, 1), -2.0, 1.0), 10_000, rng)
    assert np.mean(x < 0) > 0.95
    y = sample_rpt_deltas(RptMeasurement((0, 1), -2.0, 1.0).swapped(), 10_000, rng)
    assert abs(x.mean() + y.mean()) < 0.1


# --- angle conventions -----------------------------------------------------

@given(st.floats(-50, 50))
def test_wrap_angle_range(a):
    w = wrap_angle(a)
    assert -math.pi < w <= math.pi
    assert math.isclose(math.cos(w), math.cos(a), abs_tol=1e-9)


@given(st.floats(-math.pi + 1e-6, math.pi), st.floats(-1.5, 1.5))
def test_angle_direction_round_trip(az, el):
    d = angles_to_direction(az, el)
    assert abs(np.linalg.norm(d) - 1) < 1e-12
    az2, el2 = direction_to_angles(d)
    assert abs(wrap_angle(az2 - az)) < 1e-9 and abs(el2 - el) < 1e-9
