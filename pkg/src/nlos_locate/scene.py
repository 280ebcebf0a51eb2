"""Digital-twin geometry: planar facets, specular ray tracing and ray discretization.

All tracing goes through one vectorized kernel (:func:`trace_many`); the
single-ray helpers are thin wrappers so both routes behave identically.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

EPS_SELF = 1e-6  # m, self-hit exclusion after a bounce
PLANAR_TOL = 1e-9
EDGE_TOL = 1e-9


class SceneError(ValueError):
    """Raised for malformed or invalid scene descriptions."""


@dataclass(frozen=True)
class Surface:
    vertices: np.ndarray  # (M, 3), counter-clockwise seen from the normal side
    normal: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "normal", _validate_polygon(v))

    @property
    def offset(self) -> float:
        return float(self.normal @ self.vertices[0])


@dataclass(frozen=True)
class BaseStation:
    id: int
    position: np.ndarray
    boresight: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float))


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    bs_id: int = -1

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=float)
        n = np.linalg.norm(d)
        if n == 0:
            raise ValueError("ray direction must be non-zero")
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float))
        object.__setattr__(self, "direction", d / n)


@dataclass(frozen=True)
class Hit:
    surface_id: int
    point: np.ndarray
    distance: float


@dataclass(frozen=True)
class TracedPath:
    """Polyline of a traced ray.

    ``vertices[0]`` is the origin, interior vertices are bounce points and the
    last one is the terminal point. ``cum_lengths[k]`` is the path length from
    the origin to ``vertices[k]``.
    """

    vertices: np.ndarray
    cum_lengths: np.ndarray
    bounce_surfaces: tuple[int, ...]
    termination: str  # "bounces" | "cap" | "escape"

    @property
    def bounce_count(self) -> int:
        return len(self.bounce_surfaces)

    @property
    def length(self) -> float:
        return float(self.cum_lengths[-1])

    def point_at(self, s: float) -> np.ndarray:
        """Position at cumulative length ``s`` along the path."""
        k = int(np.searchsorted(self.cum_lengths, s, side="right")) - 1
        k = min(max(k, 0), len(self.vertices) - 2)
        seg = self.vertices[k + 1] - self.vertices[k]
        seg_len = self.cum_lengths[k + 1] - self.cum_lengths[k]
        return self.vertices[k] + (s - self.cum_lengths[k]) * seg / seg_len


@dataclass(frozen=True)
class PathPoint:
    position: np.ndarray
    length: float
    bs_id: int
    ray_index: int


def _validate_polygon(v: np.ndarray) -> np.ndarray:
    if v.ndim != 2 or v.shape[1] != 3 or v.shape[0] < 3:
        raise SceneError("surface needs at least 3 vertices of 3 coordinates")
    # Newell normal handles any vertex order along the boundary
    nxt = np.roll(v, -1, axis=0)
    newell = np.array([
        np.sum((v[:, 1] - nxt[:, 1]) * (v[:, 2] + nxt[:, 2])),
        np.sum((v[:, 2] - nxt[:, 2]) * (v[:, 0] + nxt[:, 0])),
        np.sum((v[:, 0] - nxt[:, 0]) * (v[:, 1] + nxt[:, 1])),
    ])
    area2 = np.linalg.norm(newell)
    if area2 < 1e-12:
        raise SceneError("degenerate (zero-area) surface")
    n = newell / area2
    d = v @ n
    if np.max(np.abs(d - d.mean())) > PLANAR_TOL:
        raise SceneError("non-planar surface")
    edges = nxt - v
    turns = np.cross(edges, np.roll(edges, -1, axis=0)) @ n
    if np.any(turns < -1e-12):
        raise SceneError("non-convex surface")
    return n


@dataclass(frozen=True, eq=False)
class Scene:
    surfaces: tuple[Surface, ...]
    base_stations: tuple[BaseStation, ...]

    def __post_init__(self):
        if not self.surfaces:
            raise SceneError("no surfaces")
        if not self.base_stations:
            raise SceneError("no base stations")
        ids = [bs.id for bs in self.base_stations]
        if len(set(ids)) != len(ids):
            raise SceneError("duplicate base station id")
        pts = np.concatenate([s.vertices for s in self.surfaces])
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        object.__setattr__(self, "bbox", (lo, hi))
        for k, bs in enumerate(self.base_stations):
            if np.any(bs.position < lo - PLANAR_TOL) or np.any(bs.position > hi + PLANAR_TOL):
                raise SceneError(f"base station {k} (id {bs.id}) outside scene bounds")
        self._pack()

    def _pack(self):
        m = max(len(s.vertices) for s in self.surfaces)
        f = len(self.surfaces)
        verts = np.empty((f, m, 3))
        edge_normals = np.zeros((f, m, 3))
        for i, s in enumerate(self.surfaces):
            v = s.vertices
            k = len(v)
            verts[i, :k] = v
            verts[i, k:] = v[-1]
            edges = np.roll(v, -1, axis=0) - v
            en = np.cross(s.normal, edges)
            en /= np.linalg.norm(en, axis=1, keepdims=True)
            edge_normals[i, :k] = en
        object.__setattr__(self, "_normals", np.array([s.normal for s in self.surfaces]))
        object.__setattr__(self, "_offsets", np.array([s.offset for s in self.surfaces]))
        object.__setattr__(self, "_verts", verts)
        object.__setattr__(self, "_edge_normals", edge_normals)

    def station(self, bs_id: int) -> BaseStation:
        for bs in self.base_stations:
            if bs.id == bs_id:
                return bs
        raise KeyError(f"unknown base station id {bs_id}")

    @property
    def bs_ids(self) -> list[int]:
        return [bs.id for bs in self.base_stations]

    def to_dict(self) -> dict:
        return {
            "units": "meters",
            "surfaces": [{"vertices": s.vertices.tolist()} for s in self.surfaces],
            "base_stations": [
                {"id": bs.id, "position": bs.position.tolist()} for bs in self.base_stations
            ],
        }


def load_scene(source: str | dict) -> Scene:
    """Build a validated :class:`Scene` from scene-file JSON text (or its parsed dict)."""
    if isinstance(source, str):
        try:
            data = json.loads(source)
        except json.JSONDecodeError as exc:
            raise SceneError(f"malformed scene file: {exc}") from exc
    else:
        data = source
    if not isinstance(data, dict):
        raise SceneError("malformed scene file: top level must be an object")
    if data.get("units", "meters") != "meters":
        raise SceneError("only units='meters' supported")
    surfaces = []
    for k, entry in enumerate(data.get("surfaces", [])):
        try:
            surfaces.append(Surface(np.asarray(entry["vertices"], dtype=float)))
        except (KeyError, TypeError, ValueError) as exc:
            raise SceneError(f"surface {k}: {exc}") from exc
    stations = []
    for k, entry in enumerate(data.get("base_stations", [])):
        try:
            pos = np.asarray(entry["position"], dtype=float)
            if pos.shape != (3,):
                raise ValueError("position must have 3 coordinates")
            stations.append(BaseStation(int(entry["id"]), pos))
        except (KeyError, TypeError, ValueError) as exc:
            raise SceneError(f"base station {k}: {exc}") from exc
    if not stations:
        raise SceneError("no base stations")
    return Scene(tuple(surfaces), tuple(stations))


def read_scene(path) -> Scene:
    with open(path) as fh:
        return load_scene(fh.read())


def write_scene(scene: Scene, path) -> None:
    with open(path, "w") as fh:
        json.dump(scene.to_dict(), fh, indent=1)


# --- scene generator -------------------------------------------------------

def _rect(corner, u, v) -> np.ndarray:
    corner, u, v = (np.asarray(a, dtype=float) for a in (corner, u, v))
    return np.array([corner, corner + u, corner + u + v, corner + v])


def box_faces(lo, hi, inward: bool = False, split: bool = False) -> list[np.ndarray]:
    """Six rectangles of an axis-aligned box, normals outward (or inward).

    With ``split`` each face is halved along its longer side.
    """
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    ext = hi - lo
    ex, ey, ez = np.diag(ext)
    faces = [
        _rect(lo, ey, ex),                    # z = lo, normal -z
        _rect(lo + ez, ex, ey),               # z = hi, normal +z
        _rect(lo, ex, ez),                    # y = lo, normal -y
        _rect(lo + ey, ez, ex),               # y = hi, normal +y
        _rect(lo, ez, ey),                    # x = lo, normal -x
        _rect(lo + ex, ey, ez),               # x = hi, normal +x
    ]
    if split:
        halves = []
        for f in faces:
            a, b = f[1] - f[0], f[3] - f[0]
            if np.linalg.norm(a) >= np.linalg.norm(b):
                halves += [_rect(f[0], a / 2, b), _rect(f[0] + a / 2, a / 2, b)]
            else:
                halves += [_rect(f[0], a, b / 2), _rect(f[0] + b / 2, a, b / 2)]
        faces = halves
    if inward:
        faces = [f[::-1].copy() for f in faces]
    return faces


def generate_scene(
    width: float = 8.0,
    length: float = 18.0,
    height: float = 2.5,
    clutter: int = 0,
    seed: int = 0,
    clutter_height: tuple[float, float] = (0.8, 2.0),
    clutter_size: tuple[float, float] = (0.8, 2.0),
    wall_clearance: float = 0.5,
) -> Scene:
    """Canonical room (12 facets) with one BS per top corner and optional clutter boxes.

    Clutter boxes stand on the floor, keep ``wall_clearance`` from every wall
    and 0.5 m from each other; the layout is a pure function of ``seed``.
    """
    if min(width, length, height) <= 0:
        raise SceneError("room dimensions must be positive")
    room_hi = np.array([width, length, height])
    faces = box_faces(np.zeros(3), room_hi, inward=True, split=True)
    rng = np.random.default_rng(seed)
    boxes: list[tuple[np.ndarray, np.ndarray]] = []
    attempts = 0
    while len(boxes) < clutter:
        attempts += 1
        if attempts > 10_000:
            raise SceneError(f"cannot place {clutter} clutter boxes in the room")
        size = rng.uniform(*clutter_size, size=2)
        h = rng.uniform(*clutter_height)
        if np.any(size > room_hi[:2] - 2 * wall_clearance) or h >= height:
            continue
        x = rng.uniform(wall_clearance, width - wall_clearance - size[0])
        y = rng.uniform(wall_clearance, length - wall_clearance - size[1])
        lo = np.array([x, y, 0.0])
        hi = np.array([x + size[0], y + size[1], h])
        if any(np.all(lo[:2] < b_hi[:2] + 0.5) and np.all(hi[:2] > b_lo[:2] - 0.5)
               for b_lo, b_hi in boxes):
            continue
        boxes.append((lo, hi))
    for lo, hi in boxes:
        faces += box_faces(lo, hi)
    corners = [(0, 0), (width, 0), (0, length), (width, length)]
    stations = tuple(
        BaseStation(i, np.array([cx, cy, height])) for i, (cx, cy) in enumerate(corners)
    )
    return Scene(tuple(Surface(f) for f in faces), stations)


# --- ray primitives --------------------------------------------------------

def reflect(direction, normal) -> np.ndarray:
    """Specular reflection d - 2 (d.n) n; works row-wise on (N, 3) arrays."""
    d = np.asarray(direction, dtype=float)
    n = np.asarray(normal, dtype=float)
    return d - 2.0 * np.sum(d * n, axis=-1, keepdims=True) * n


def nearest_hits(scene: Scene, origins: np.ndarray, dirs: np.ndarray,
                 min_t: float = EPS_SELF) -> tuple[np.ndarray, np.ndarray]:
    """Nearest facet hit for each ray (brute force over all facets).

    Returns ``(t, facet)`` with ``t = inf`` and ``facet = -1`` for escaping rays.
    Facets are two-sided. Ties go to the lowest facet index.
    """
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    n = scene._normals
    denom = dirs @ n.T
    num = scene._offsets[None, :] - origins @ n.T
    with np.errstate(divide="ignore", invalid="ignore"):
        t = num / denom
    ok = (np.abs(denom) > 1e-14) & (t > min_t)
    p = origins[:, None, :] + np.where(ok, t, 0.0)[..., None] * dirs[:, None, :]
    rel = p[:, :, None, :] - scene._verts[None]
    inside = np.all(np.einsum("nfmk,fmk->nfm", rel, scene._edge_normals) >= -EDGE_TOL, axis=2)
    t = np.where(ok & inside, t, np.inf)
    facet = np.argmin(t, axis=1)
    tmin = t[np.arange(len(t)), facet]
    facet = np.where(np.isfinite(tmin), facet, -1)
    return tmin, facet


def intersect(ray: Ray, scene: Scene, min_t: float = EPS_SELF) -> Hit | None:
    t, f = nearest_hits(scene, ray.origin[None], ray.direction[None], min_t)
    if f[0] < 0:
        return None
    return Hit(int(f[0]), ray.origin + t[0] * ray.direction, float(t[0]))


def _bbox_exit(scene: Scene, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    lo, hi = scene.bbox
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - origins) / dirs
        t2 = (hi - origins) / dirs
    tfar = np.where(dirs == 0, np.inf, np.maximum(t1, t2))
    return np.min(tfar, axis=1)


@dataclass
class PathBundle:
    """Polylines of many rays in padded form.

    ``vertices[r, :nvert[r]]`` and ``cum[r, :nvert[r]]`` describe ray ``r``.
    """

    vertices: np.ndarray
    cum: np.ndarray
    nvert: np.ndarray
    bounce_facets: np.ndarray  # (R, max_bounces), -1 padded
    termination: np.ndarray  # object array of str

    def __len__(self) -> int:
        return len(self.nvert)

    @property
    def lengths(self) -> np.ndarray:
        return self.cum[np.arange(len(self.nvert)), self.nvert - 1]

    def path(self, r: int) -> TracedPath:
        k = self.nvert[r]
        bf = tuple(int(f) for f in self.bounce_facets[r] if f >= 0)
        return TracedPath(self.vertices[r, :k].copy(), self.cum[r, :k].copy(), bf,
                          str(self.termination[r]))


def trace_many(scene: Scene, origins, dirs, max_bounces: int = 5,
               max_length: float = 100.0) -> PathBundle:
    """Trace rays with specular bounces until the bounce cap, length cap or escape."""
    if max_bounces < 0 or max_length <= 0:
        raise ValueError("need max_bounces >= 0 and max_length > 0")
    origins = np.array(np.atleast_2d(origins), dtype=float)
    dirs = np.array(np.atleast_2d(dirs), dtype=float)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    r = len(origins)
    nv_max = max_bounces + 2
    verts = np.zeros((r, nv_max, 3))
    cum = np.full((r, nv_max), np.inf)
    verts[:, 0] = origins
    cum[:, 0] = 0.0
    nvert = np.ones(r, dtype=int)
    bounce_facets = np.full((r, max(max_bounces, 1)), -1, dtype=int)
    term = np.full(r, "bounces", dtype=object)
    active = np.arange(r)
    pos, d = origins.copy(), dirs.copy()
    travelled = np.zeros(r)
    for bounce in range(max_bounces + 1):
        if active.size == 0:
            break
        t, f = nearest_hits(scene, pos[active], d[active])
        remaining = max_length - travelled[active]
        escaped = f < 0
        if np.any(escaped):
            t_exit = _bbox_exit(scene, pos[active[escaped]], d[active[escaped]])
            t_exit = np.where(t_exit > EPS_SELF, t_exit, np.inf)
            t[escaped] = t_exit
        capped = t > remaining
        seg = np.minimum(t, remaining)
        end = pos[active] + seg[:, None] * d[active]
        k = nvert[active]
        verts[active, k] = end
        travelled[active] += seg
        cum[active, k] = travelled[active]
        nvert[active] += 1
        term[active[capped]] = "cap"
        term[active[escaped & ~capped]] = "escape"
        term[active[~capped & ~escaped & (travelled[active] >= max_length)]] = "cap"
        go_on = ~capped & ~escaped & (bounce < max_bounces) & (travelled[active] < max_length)
        hit_rows = active[go_on]
        if bounce < max_bounces:
            bounce_facets[hit_rows, bounce] = f[go_on]
        d[hit_rows] = reflect(d[hit_rows], scene._normals[f[go_on]])
        pos[hit_rows] = end[go_on]
        active = hit_rows
    return PathBundle(verts, cum, nvert, bounce_facets, term)


def trace(ray: Ray, scene: Scene, max_bounces: int = 5, max_length: float = 100.0) -> TracedPath:
    return trace_many(scene, ray.origin[None], ray.direction[None], max_bounces, max_length).path(0)


def discretize_bundle(bundle: PathBundle, step: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sample every path at lengths 0, step, 2 step, ...

    Returns ``(positions, lengths, ray_index)`` flattened over all rays.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    total = bundle.lengths
    counts = np.floor(total / step + 1e-9).astype(int) + 1
    ray_index = np.repeat(np.arange(len(total)), counts)
    starts = np.cumsum(counts) - counts
    k = np.arange(counts.sum()) - np.repeat(starts, counts)
    s = k * step
    s = np.minimum(s, total[ray_index])
    cum = bundle.cum[ray_index]
    seg = np.sum(cum[:, 1:] <= s[:, None], axis=1)
    seg = np.minimum(seg, bundle.nvert[ray_index] - 2)
    seg = np.maximum(seg, 0)
    rows = ray_index
    a = bundle.vertices[rows, seg]
    b = bundle.vertices[rows, seg + 1]
    c0 = bundle.cum[rows, seg]
    c1 = bundle.cum[rows, seg + 1]
    span = c1 - c0
    frac = np.divide(s - c0, span, out=np.zeros_like(s), where=span > 0)
    pos = a + frac[:, None] * (b - a)
    return pos, k * step, ray_index


def discretize(path: TracedPath, step: float = 0.1, bs_id: int = -1,
               ray_index: int = 0) -> list[PathPoint]:
    bundle = PathBundle(path.vertices[None], path.cum_lengths[None],
                        np.array([len(path.vertices)]),
                        np.array([list(path.bounce_surfaces) or [-1]]),
                        np.array([path.termination], dtype=object))
    pos, lengths, _ = discretize_bundle(bundle, step)
    return [PathPoint(p, float(l), bs_id, ray_index) for p, l in zip(pos, lengths)]


def segment_blocked(scene: Scene, a: np.ndarray, b: np.ndarray, eps: float = EPS_SELF) -> np.ndarray:
    """True where the open segment a->b crosses a facet (endpoints excluded by ``eps``)."""
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    d = b - a
    dist = np.linalg.norm(d, axis=1)
    safe = np.where(dist > 0, dist, 1.0)
    t, f = nearest_hits(scene, a, d / safe[:, None], eps)
    return (f >= 0) & (t < dist - eps)


def crossing_count(scene: Scene, points: np.ndarray, direction=(0.2361, 0.3719, 0.8977)) -> np.ndarray:
    """Number of facets crossed by a ray from each point along a fixed skew direction."""
    points = np.atleast_2d(points)
    d = np.asarray(direction, float)
    d = d / np.linalg.norm(d)
    n = scene._normals
    denom = n @ d
    num = scene._offsets[None, :] - points @ n.T
    with np.errstate(divide="ignore", invalid="ignore"):
        t = num / denom[None, :]
    ok = (np.abs(denom)[None, :] > 1e-14) & (t > 0)
    p = points[:, None, :] + np.where(ok, t, 0.0)[..., None] * d
    rel = p[:, :, None, :] - scene._verts[None]
    inside = np.all(np.einsum("nfmk,fmk->nfm", rel, scene._edge_normals) >= -EDGE_TOL, axis=2)
    return np.sum(ok & inside, axis=1)


def distance_to_surfaces(scene: Scene, points: np.ndarray) -> np.ndarray:
    """Euclidean distance from each point to the nearest facet (convex polygons)."""
    points = np.atleast_2d(points)
    n = scene._normals
    h = points @ n.T - scene._offsets[None, :]
    proj = points[:, None, :] - h[..., None] * n[None]
    rel = proj[:, :, None, :] - scene._verts[None]
    edge_d = np.einsum("nfmk,fmk->nfm", rel, scene._edge_normals)
    inside = np.all(edge_d >= 0, axis=2)
    best = np.where(inside, np.abs(h), np.inf)
    # outside the polygon: distance to the closest edge segment
    v0 = scene._verts
    v1 = np.roll(scene._verts, -1, axis=1)
    e = v1 - v0
    ee = np.maximum(np.sum(e * e, axis=2), 1e-30)
    rp = points[:, None, None, :] - v0[None]
    u = np.clip(np.sum(rp * e[None], axis=3) / ee[None], 0.0, 1.0)
    closest = v0[None] + u[..., None] * e[None]
    dist_edges = np.linalg.norm(points[:, None, None, :] - closest, axis=3).min(axis=2)
    return np.minimum(best, dist_edges).min(axis=1)
