import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nlos_locate.scene import (
    BaseStation,
    Ray,
    Scene,
    SceneError,
    Surface,
    TracedPath,
    box_faces,
    discretize,
    generate_scene,
    intersect,
    load_scene,
    reflect,
    trace,
    trace_many,
)


def scene_json(scene):
    return json.dumps(scene.to_dict())


def unit(v):
    v = np.asarray(v, float)
    return v / np.linalg.norm(v)


# --- loading ---------------------------------------------------------------

def test_load_empty_room_has_12_facets_and_4_bs(empty_room):
    scene = load_scene(scene_json(empty_room))
    assert len(scene.surfaces) == 12
    assert len(scene.base_stations) == 4
    lo, hi = scene.bbox
    np.testing.assert_allclose(hi - lo, [8, 18, 2.5])
    corners = sorted(tuple(bs.position) for bs in scene.base_stations)
    assert corners == [(0, 0, 2.5), (0, 18, 2.5), (8, 0, 2.5), (8, 18, 2.5)]


def test_load_without_base_stations_fails(empty_room):
    d = empty_room.to_dict()
    d["base_stations"] = []
    with pytest.raises(SceneError, match="no base stations"):
        load_scene(json.dumps(d))


def test_degenerate_surface_is_named(empty_room):
    d = empty_room.to_dict()
    d["surfaces"].insert(3, {"vertices": [[0, 0, 0], [1, 0, 0], [2, 0, 0]]})
    with pytest.raises(SceneError, match=r"surface 3: degenerate"):
        load_scene(json.dumps(d))


@pytest.mark.parametrize("verts, msg", [
    ([[0, 0, 0], [1, 0, 0], [1, 1, 0.1], [0, 1, 0]], "non-planar"),
    ([[0, 0, 0], [2, 0, 0], [1, 0.2, 0], [2, 2, 0], [0, 2, 0]], "non-convex"),
])
def test_invalid_polygons(empty_room, verts, msg):
    d = empty_room.to_dict()
    d["surfaces"].append({"vertices": verts})
    with pytest.raises(SceneError, match=msg):
        load_scene(json.dumps(d))


def test_bs_outside_bounds_is_named(empty_room):
    d = empty_room.to_dict()
    d["base_stations"][2]["position"] = [4, 9, 3.5]
    with pytest.raises(SceneError, match="base station 2"):
        load_scene(json.dumps(d))


def test_malformed_json():
    with pytest.raises(SceneError, match="malformed"):
        load_scene("{not json")


def test_surface_normal_is_unit_and_follows_ccw_order():
    s = Surface(np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], float))
    np.testing.assert_allclose(s.normal, [0, 0, 1], atol=1e-12)
    assert abs(np.linalg.norm(s.normal) - 1) < 1e-12


def test_generated_clutter_stays_clear_of_walls_and_bs():
    scene = generate_scene(clutter=6)
    assert len(scene.surfaces) == 12 + 36
    for s in scene.surfaces[12:]:
        v = s.vertices
        assert v[:, 0].min() >= 0.5 - 1e-12 and v[:, 0].max() <= 7.5 + 1e-12
        assert v[:, 1].min() >= 0.5 - 1e-12 and v[:, 1].max() <= 17.5 + 1e-12
        assert v[:, 2].max() < 2.5


# --- intersection ----------------------------------------------------------

def test_vertical_ray_hits_ceiling(empty_room):
    hit = intersect(Ray([1, 1, 1], [0, 0, 1]), empty_room)
    assert hit is not None
    assert hit.distance == pytest.approx(1.5, abs=1e-12)
    np.testing.assert_allclose(hit.point, [1, 1, 2.5], atol=1e-12)


def _brute_force_hit(origin, d, scene):
    """Per-facet plane solve with a barycentric point-in-polygon test (fan triangulation)."""
    best = math.inf
    for s in scene.surfaces:
        v = s.vertices
        n = np.cross(v[1] - v[0], v[2] - v[0])
        den = n @ d
        if abs(den) < 1e-14:
            continue
        t = n @ (v[0] - origin) / den
        if t <= 1e-6:
            continue
        p = origin + t * d
        for k in range(1, len(v) - 1):
            a, b, c = v[0], v[k], v[k + 1]
            m = np.column_stack([b - a, c - a])
            uv, *_ = np.linalg.lstsq(m, p - a, rcond=None)
            if uv.min() >= -1e-9 and uv.sum() <= 1 + 1e-9:
                best = min(best, t)
                break
    return best


def test_centre_to_corner_matches_exhaustive_solve(cluttered_room):
    centre = np.array([4.0, 9.0, 1.25])
    rng = np.random.default_rng(0)
    targets = [np.array([0, 0, 0.0]), np.array([8, 18, 2.5]), np.array([0, 18, 0.0])]
    targets += list(rng.uniform([0, 0, 0], [8, 18, 2.5], size=(20, 3)))
    for tgt in targets:
        d = unit(tgt - centre)
        hit = intersect(Ray(centre, d), cluttered_room)
        assert hit.distance == pytest.approx(_brute_force_hit(centre, d, cluttered_room), abs=1e-9)


def test_empty_room_corner_distance(empty_room):
    centre = np.array([4.0, 9.0, 1.25])
    corner = np.array([8.0, 18.0, 2.5])
    hit = intersect(Ray(centre, corner - centre), empty_room)
    assert hit.distance == pytest.approx(np.linalg.norm(corner - centre), abs=1e-9)


def test_ray_leaving_through_wall_escapes(empty_room):
    assert intersect(Ray([0, 5, 1], [-1, 0, 0]), empty_room) is None


# --- reflection ------------------------------------------------------------

def test_reflect_normal_incidence():
    np.testing.assert_allclose(reflect([0, 0, -1], [0, 0, 1]), [0, 0, 1])


def test_reflect_45_degrees():
    out = reflect(unit([1, 0, -1]), [0, 0, 1])
    np.testing.assert_allclose(out, unit([1, 0, 1]), atol=1e-15)


@pytest.mark.property_suite
def test_reflect_random_pairs():
    rng = np.random.default_rng(7)
    d = rng.normal(size=(10_000, 3))
    n = rng.normal(size=(10_000, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    r = reflect(d, n)
    np.testing.assert_allclose(np.sum(r * n, axis=1), -np.sum(d * n, axis=1), atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(r, axis=1), 1.0, atol=1e-12)
    tangential_in = d - np.sum(d * n, axis=1, keepdims=True) * n
    tangential_out = r - np.sum(r * n, axis=1, keepdims=True) * n
    np.testing.assert_allclose(tangential_in, tangential_out, atol=1e-12)


unit_vectors = st.tuples(*[st.floats(-1, 1)] * 3).filter(lambda v: 0.1 < np.linalg.norm(v)).map(unit)


@pytest.mark.property_suite
@given(unit_vectors, unit_vectors)
def test_reflection_is_an_involution(d, n):
    assert np.max(np.abs(reflect(reflect(d, n), n) - d)) < 1e-12


# --- tracing ---------------------------------------------------------------

def corridor_scene(closed=True):
    """8 m wide corridor along y, 30 m long; optionally closed at both ends."""
    faces = box_faces([0, 0, 0], [8, 30, 3], inward=True)
    if not closed:
        faces = [f for f in faces if not np.allclose(f[:, 1], f[0, 1])]
    return Scene(tuple(Surface(f) for f in faces), (BaseStation(0, np.array([4.0, 1.0, 1.5])),))


def test_no_bounce_path_ends_on_first_wall():
    p = trace(Ray([4, 1, 1.5], [0, 1, 0]), corridor_scene(), max_bounces=0)
    assert p.bounce_count == 0
    assert len(p.vertices) == 2
    np.testing.assert_allclose(p.vertices[-1], [4, 30, 1.5], atol=1e-12)
    assert p.length == pytest.approx(29.0)


def test_ping_pong_between_parallel_walls_is_capped():
    p = trace(Ray([4, 15, 1.5], [1, 0, 0]), corridor_scene(), max_bounces=10, max_length=40.0)
    # walls at 4, 12, 20, 28, 36 m, then the 40 m cap
    np.testing.assert_allclose(p.cum_lengths, [0, 4, 12, 20, 28, 36, 40], atol=1e-9)
    assert p.bounce_count == 5
    assert p.termination == "cap"
    assert p.length <= 40.0


def test_escape_through_open_end():
    scene = corridor_scene(closed=False)
    p = trace(Ray([4, 1, 1.5], [0, 1, 0]), scene, max_bounces=5, max_length=100)
    assert p.termination == "escape"
    assert p.bounce_count < 5
    assert np.isfinite(p.length)


def _random_paths(scene, n=300, seed=3, max_bounces=6, max_length=60.0):
    rng = np.random.default_rng(seed)
    origins = rng.uniform([0.5, 0.5, 0.2], [7.5, 17.5, 2.3], size=(n, 3))
    dirs = rng.normal(size=(n, 3))
    b = trace_many(scene, origins, dirs, max_bounces, max_length)
    return [b.path(r) for r in range(n)]


@pytest.mark.property_suite
def test_specular_law_and_bounce_points_on_surfaces(cluttered_room):
    normals = cluttered_room._normals
    checked = 0
    for p in _random_paths(cluttered_room):
        for k, f in enumerate(p.bounce_surfaces, start=1):
            d_in = unit(p.vertices[k] - p.vertices[k - 1])
            d_out = unit(p.vertices[k + 1] - p.vertices[k])
            n = normals[f]
            assert abs(d_in @ n + d_out @ n) < 1e-9
            np.testing.assert_allclose(d_in - (d_in @ n) * n, d_out - (d_out @ n) * n, atol=1e-9)
            assert abs(n @ p.vertices[k] - cluttered_room.surfaces[f].offset) < 1e-6
            checked += 1
    assert checked > 300


@pytest.mark.property_suite
def test_length_additivity(cluttered_room):
    for p in _random_paths(cluttered_room):
        seg = np.linalg.norm(np.diff(p.vertices, axis=0), axis=1)
        np.testing.assert_allclose(p.cum_lengths[1:], np.cumsum(seg), atol=1e-9)
        assert np.all(np.diff(p.cum_lengths) > 0)
        assert p.length <= 60.0 + 1e-9


# --- discretization --------------------------------------------------------

def straight_path(length=1.0):
    return TracedPath(np.array([[0, 0, 0], [length, 0, 0]], float), np.array([0, length]), (), "cap")


def test_discretize_straight_path():
    pts = discretize(straight_path(1.0), 0.25)
    assert [p.length for p in pts] == [0, 0.25, 0.5, 0.75, 1.0]
    np.testing.assert_allclose([p.position[0] for p in pts], [0, 0.25, 0.5, 0.75, 1.0], atol=1e-12)


def _walk(vertices, s):
    """Independent segment walk: consume segment lengths until s is reached."""
    for a, b in zip(vertices[:-1], vertices[1:]):
        seg = np.linalg.norm(b - a)
        if s <= seg + 1e-12:
            return a + (b - a) * (s / seg)
        s -= seg
    return vertices[-1]


def test_discretize_across_a_bounce():
    verts = np.array([[0, 0, 0], [0.6, 0, 0], [0.6, 0.9, 0]], float)
    path = TracedPath(verts, np.array([0, 0.6, 1.5]), (0,), "cap")
    pts = discretize(path, 0.5)
    p1 = [p for p in pts if abs(p.length - 1.0) < 1e-12][0]
    np.testing.assert_allclose(p1.position, _walk(verts, 1.0), atol=1e-12)
    np.testing.assert_allclose(p1.position, [0.6, 0.4, 0.0], atol=1e-12)


def test_step_longer_than_path_gives_origin_only():
    pts = discretize(straight_path(1.0), 5.0)
    assert len(pts) == 1 and pts[0].length == 0


@pytest.mark.property_suite
def test_discretization_consistency_and_containment(cluttered_room):
    lo, hi = cluttered_room.bbox
    for p in _random_paths(cluttered_room, n=60):
        pts = discretize(p, 0.1)
        k = np.arange(len(pts))
        np.testing.assert_allclose([q.length for q in pts], k * 0.1, atol=1e-9)
        for q in pts:
            assert np.linalg.norm(_walk(p.vertices, q.length) - q.position) < 1e-6
            assert np.linalg.norm(p.point_at(q.length) - q.position) < 1e-6
            assert np.all(q.position >= lo - 1e-6) and np.all(q.position <= hi + 1e-6)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 3.0), st.floats(0.5, 20.0))
def test_discretize_count_matches_length(step, length):
    pts = discretize(straight_path(length), step)
    assert len(pts) == math.floor(length / step + 1e-9) + 1
    assert pts[-1].length <= length + 1e-9
