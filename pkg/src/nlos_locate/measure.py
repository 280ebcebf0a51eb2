"""Measurements: ground-truth observables, Gaussian error models, PT/RPT length mappings."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .scene import Scene, segment_blocked

SPEED_OF_LIGHT = 299_792_458.0  # m/s
EDGE_CLEARANCE = 1e-6  # m, min distance of a truth bounce point from its facet boundary


class NoPathError(RuntimeError):
    pass


class DegenerateDensityError(ValueError):
    """Zero-width error model: the density is a point mass."""


def wrap_angle(a):
    """Reduce angles to (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=float) + np.pi, 2 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return float(w) if np.ndim(w) == 0 else w


def angles_to_direction(azimuth, elevation) -> np.ndarray:
    az = np.asarray(azimuth, dtype=float)
    el = np.asarray(elevation, dtype=float)
    ce = np.cos(el)
    return np.stack([ce * np.cos(az), ce * np.sin(az), np.sin(el)], axis=-1)


def direction_to_angles(d) -> tuple:
    d = np.asarray(d, dtype=float)
    d = d / np.linalg.norm(d, axis=-1, keepdims=True)
    az = np.arctan2(d[..., 1], d[..., 0])
    el = np.arcsin(np.clip(d[..., 2], -1.0, 1.0))
    return wrap_angle(az), el


@dataclass(frozen=True)
class AngleMeasurement:
    bs_id: int
    azimuth: float
    elevation: float
    sigma_eta: float

    @property
    def direction(self) -> np.ndarray:
        return angles_to_direction(self.azimuth, self.elevation)


@dataclass(frozen=True)
class PtMeasurement:
    bs_id: int
    time: float  # s
    sigma_nu: float  # m, on the equivalent length

    @property
    def equivalent_length(self) -> float:
        return self.time * SPEED_OF_LIGHT

    @classmethod
    def from_length(cls, bs_id: int, length: float, sigma_nu: float) -> "PtMeasurement":
        return cls(bs_id, length / SPEED_OF_LIGHT, sigma_nu)


@dataclass(frozen=True)
class RptMeasurement:
    bs_pair: tuple[int, int]
    delta_length: float  # m, length_i - length_j
    sigma_nu: float

    def swapped(self) -> "RptMeasurement":
        i, j = self.bs_pair
        return RptMeasurement((j, i), -self.delta_length, self.sigma_nu)


@dataclass
class MeasurementSet:
    aoa: dict[int, AngleMeasurement] = field(default_factory=dict)
    pt: dict[int, PtMeasurement] = field(default_factory=dict)
    rpt: dict[tuple[int, int], RptMeasurement] = field(default_factory=dict)

    def add(self, m) -> None:
        if isinstance(m, AngleMeasurement):
            store, key = self.aoa, m.bs_id
        elif isinstance(m, PtMeasurement):
            store, key = self.pt, m.bs_id
        elif isinstance(m, RptMeasurement):
            store, key = self.rpt, tuple(m.bs_pair)
            if key[::-1] in store:
                raise ValueError(f"duplicate RPT measurement for pair {key}")
        else:
            raise TypeError(type(m))
        if key in store:
            raise ValueError(f"duplicate measurement for {key}")
        store[key] = m

    def rpt_for(self, i: int, j: int) -> RptMeasurement | None:
        if (i, j) in self.rpt:
            return self.rpt[(i, j)]
        if (j, i) in self.rpt:
            return self.rpt[(j, i)].swapped()
        return None

    @property
    def bs_ids(self) -> list[int]:
        return sorted(self.aoa)


@dataclass(frozen=True)
class TruePath:
    bs_id: int
    vertices: np.ndarray  # BS, bounce points..., UE
    length: float
    azimuth: float
    elevation: float

    @property
    def bounce_count(self) -> int:
        return len(self.vertices) - 2


@dataclass
class GroundTruth:
    ue_position: np.ndarray
    paths: dict[int, TruePath]
    failures: dict[int, str] = field(default_factory=dict)


@dataclass(frozen=True)
class NoiseConfig:
    sigma_eta: float = 0.0  # rad
    sigma_nu_pt: float = 0.0  # m
    sigma_nu_rpt: float = 0.0  # m


def _mirror(points: np.ndarray, normals: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    h = np.sum(points * normals, axis=-1) - offsets
    return points - 2.0 * h[..., None] * normals


def _image_paths(scene: Scene, src: np.ndarray, dst: np.ndarray, order: int) -> list[np.ndarray]:
    """Valid specular paths src -> dst with exactly ``order`` bounces (image method)."""
    nf = len(scene.surfaces)
    normals, offsets = scene._normals, scene._offsets
    seqs = np.array(list(itertools.product(range(nf), repeat=order)), dtype=int).reshape(-1, order)
    if order > 1:
        seqs = seqs[np.all(seqs[:, 1:] != seqs[:, :-1], axis=1)]
    # images of the source through the facet sequence
    images = [np.broadcast_to(src, (len(seqs), 3))]
    for m in range(order):
        f = seqs[:, m]
        images.append(_mirror(images[-1], normals[f], offsets[f]))
    target = np.broadcast_to(dst, (len(seqs), 3)).copy()
    pts = [None] * order
    ok = np.ones(len(seqs), dtype=bool)
    for m in range(order - 1, -1, -1):
        f = seqs[:, m]
        n, off = normals[f], offsets[f]
        img = images[m + 1]
        d = img - target
        denom = np.sum(d * n, axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (off - np.sum(target * n, axis=1)) / denom
        ok &= np.abs(denom) > 1e-12
        ok &= (s > 1e-9) & (s < 1 - 1e-9)
        p = target + np.where(ok, s, 0.0)[:, None] * d
        rel = p[:, None, :] - scene._verts[f]
        # strictly interior: a bounce on an edge or corner is a grazing, not a reflection
        en = scene._edge_normals[f]
        dots = np.einsum("smk,smk->sm", rel, en)
        dots = np.where(np.any(en != 0, axis=2), dots, np.inf)
        ok &= np.all(dots > EDGE_CLEARANCE, axis=1)
        pts[m] = p
        target = p
    idx = np.flatnonzero(ok)
    if idx.size == 0:
        return []
    chain = np.stack([np.broadcast_to(src, (idx.size, 3))] + [p[idx] for p in pts]
                     + [np.broadcast_to(dst, (idx.size, 3))], axis=1)
    blocked = np.zeros(idx.size, dtype=bool)
    for leg in range(order + 1):
        blocked |= segment_blocked(scene, chain[:, leg], chain[:, leg + 1])
    return [chain[k] for k in np.flatnonzero(~blocked)]


def true_observables(scene: Scene, ue, max_bounces: int = 2) -> GroundTruth:
    """Shortest specular path BS -> UE for every base station.

    Paths are searched exactly with the image method over all facet
    sequences of up to ``max_bounces`` reflections; the AoA is the direction
    of the first leg seen from the BS.
    """
    ue = np.asarray(ue, dtype=float)
    paths, failures = {}, {}
    for bs in scene.base_stations:
        best = None
        for order in range(0, max_bounces + 1):
            if order == 0:
                cands = [] if segment_blocked(scene, bs.position, ue)[0] else [np.stack([bs.position, ue])]
            else:
                cands = _image_paths(scene, bs.position, ue, order)
            for c in cands:
                length = float(np.sum(np.linalg.norm(np.diff(c, axis=0), axis=1)))
                if best is None or length < best[0] - 1e-12:
                    best = (length, c)
            if order == 0 and best is not None:
                break  # LoS is the shortest possible path
        if best is None:
            failures[bs.id] = "no path found"
            continue
        length, chain = best
        az, el = direction_to_angles(chain[1] - chain[0])
        paths[bs.id] = TruePath(bs.id, chain, length, float(az), float(el))
    return GroundTruth(ue, paths, failures)


def perturb_angle(azimuth: float, elevation: float, d_az: float, d_el: float) -> tuple[float, float]:
    """Add angle errors and map back to azimuth in (-pi, pi], elevation in [-pi/2, pi/2]."""
    az, el = direction_to_angles(angles_to_direction(azimuth + d_az, elevation + d_el))
    return float(az), float(el)


def perturb(truth: GroundTruth, sigmas: NoiseConfig, rngs, pt: bool = False, rpt: bool = False,
            rpt_pairs: list[tuple[int, int]] | None = None) -> MeasurementSet:
    """Noisy measurements around the ground truth.

    ``rngs`` is either one Generator or a mapping with keys ``"aoa"``,
    ``"pt"`` and ``"rpt"`` so each category draws from its own stream.
    RPT pairs default to all unordered pairs of reachable base stations.
    """
    if isinstance(rngs, np.random.Generator):
        rngs = {"aoa": rngs, "pt": rngs, "rpt": rngs}
    if min(sigmas.sigma_eta, sigmas.sigma_nu_pt, sigmas.sigma_nu_rpt) < 0:
        raise ValueError("noise standard deviations must be non-negative")
    ids = sorted(truth.paths)
    out = MeasurementSet()
    noise = rngs["aoa"].normal(0.0, 1.0, size=(len(ids), 2)) * sigmas.sigma_eta
    for k, i in enumerate(ids):
        p = truth.paths[i]
        if sigmas.sigma_eta == 0:
            az, el = p.azimuth, p.elevation
        else:
            az, el = perturb_angle(p.azimuth, p.elevation, noise[k, 0], noise[k, 1])
        out.add(AngleMeasurement(i, az, el, sigmas.sigma_eta))
    if pt:
        noise = rngs["pt"].normal(0.0, 1.0, size=len(ids)) * sigmas.sigma_nu_pt
        for k, i in enumerate(ids):
            length = max(truth.paths[i].length + noise[k], 0.0)
            out.add(PtMeasurement.from_length(i, length, sigmas.sigma_nu_pt))
    if rpt:
        pairs = rpt_pairs if rpt_pairs is not None else list(itertools.combinations(ids, 2))
        pairs = [(i, j) for i, j in pairs if i in truth.paths and j in truth.paths]
        noise = rngs["rpt"].normal(0.0, 1.0, size=len(pairs)) * sigmas.sigma_nu_rpt
        for k, (i, j) in enumerate(pairs):
            delta = truth.paths[i].length - truth.paths[j].length + noise[k]
            out.add(RptMeasurement((i, j), delta, sigmas.sigma_nu_rpt))
    return out


def aoa_log_density(measured: AngleMeasurement, candidate) -> float:
    """Log of the isotropic two-angle Gaussian error density at ``(azimuth, elevation)``."""
    s = measured.sigma_eta
    if s <= 0:
        raise DegenerateDensityError("sigma_eta = 0: AoA error model is a point mass")
    az, el = candidate
    d_az = wrap_angle(np.asarray(az) - measured.azimuth)
    d_el = np.asarray(el) - measured.elevation
    val = -math.log(2 * math.pi * s * s) - 0.5 * (d_az ** 2 + d_el ** 2) / (s * s)
    return float(val) if np.ndim(val) == 0 else val


def sample_pt_lengths(pt: PtMeasurement, count: int, rng: np.random.Generator) -> np.ndarray:
    if count < 1:
        raise ValueError("count must be >= 1")
    return np.maximum(rng.normal(pt.equivalent_length, pt.sigma_nu, size=count), 0.0)


def sample_rpt_deltas(rpt: RptMeasurement, count: int, rng: np.random.Generator) -> np.ndarray:
    if count < 1:
        raise ValueError("count must be >= 1")
    return rng.normal(rpt.delta_length, rpt.sigma_nu, size=count)
